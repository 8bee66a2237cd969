"""Command-line entry point: ``hncrfs <subcommand> ...``.

Each stage reads and writes plain files so stages can run separately;
``run`` chains them in one process. Errors go to stderr tagged with the
failing stage and the exit code is nonzero.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import HncRfsError, StageError
from .io import read_csv_rows, read_labels, read_nifti, read_provenance, write_clinical_csv, write_nifti
from .runner import (
    LABELS_FILE,
    PipelineConfig,
    _StagingDir,
    evaluate_scores,
    extract_features,
    fit_models,
    load_config,
    postprocess_masks,
    provenance,
    read_feature_dir,
    read_risk_csv,
    run_pipeline,
    write_dice_table,
    write_feature_dir,
    write_json,
    write_km_csv,
    write_risk_csv,
)
from .survstat import SurvivalRecord, km_estimate, logrank_test
from .synth import GENERATOR_NAME

EXIT_OK, EXIT_FAILURE = 0, 1  # argparse exits with 2 on usage errors


def _config(args) -> PipelineConfig:
    """Config file (if any) with command-line overrides applied on top."""
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    changes = {}
    if getattr(args, "d_max", None) is not None:
        changes["d_max"] = args.d_max
    cv = {}
    if getattr(args, "seed", None) is not None:
        cv["seed"] = args.seed
    if getattr(args, "repeats", None) is not None:
        cv["repeats"] = args.repeats
    if cv:
        d = cfg.to_dict()
        d["cv"].update(cv)
        cfg = PipelineConfig.from_dict(d)
    return cfg.replace(**changes) if changes else cfg


# --- subcommands -------------------------------------------------------------

def cmd_simulate(args) -> None:
    from .synth import generate_imaging_cohort, generate_multimodal_cohort

    out = Path(args.output)
    seed = 0 if args.seed is None else args.seed
    prov = {"seed": seed, "version": __version__, "generator": GENERATOR_NAME}
    with _StagingDir(out) as tmp:
        if args.volumes:
            patients = generate_imaging_cohort(n=args.n, seed=seed, censoring_rate=args.censoring)
            for p in patients:
                write_nifti(p.mask, tmp / f"{p.patient_id}_mask.nii")
                write_nifti(p.reference, tmp / f"{p.patient_id}_ref.nii")
                write_nifti(p.ct, tmp / f"{p.patient_id}_ct.nii")
                write_nifti(p.pet, tmp / f"{p.patient_id}_pet.nii")
            write_clinical_csv(tmp / "clinical.csv", [p.clinical for p in patients], prov)
        else:
            tables, records, has_gtvp = generate_multimodal_cohort(
                n=args.n, n_planted=args.n_planted, n_noise=args.n_noise, beta=args.beta,
                censoring_rate=args.censoring, seed=seed, null=args.null)
            ids = tables["clinical"].patient_ids
            write_feature_dir(tmp, tables, dict(zip(ids, records)), has_gtvp, prov)


def cmd_postprocess(args) -> None:
    src = Path(args.input)
    d_max = 150.0 if args.d_max is None else args.d_max
    masks, refs = {}, {}
    ref_dir = Path(args.reference) if args.reference else None
    for f in sorted(src.glob("*_mask.nii")):
        pid = f.name[: -len("_mask.nii")]
        try:
            masks[pid] = read_nifti(f, "label")
            if ref_dir is not None and (ref_dir / f"{pid}_ref.nii").exists():
                refs[pid] = read_nifti(ref_dir / f"{pid}_ref.nii", "label")
        except (HncRfsError, OSError) as exc:
            raise StageError("read-volumes", str(exc), pid) from exc
    if not masks:
        raise StageError("postprocess", f"no *_mask.nii files in {src}")
    filtered, reports, dice = postprocess_masks(masks, d_max, refs or None)
    prov = {"d_max": d_max, "version": __version__}
    with _StagingDir(args.output) as tmp:
        for pid, vol in filtered.items():
            write_nifti(vol, tmp / f"{pid}_mask.nii")
        write_json(tmp / "removal_report.json", {p: r.as_dict() for p, r in reports.items()}, prov)
        if dice is not None:
            write_dice_table(tmp / "dice_table.csv", dice, prov)


def cmd_features(args) -> None:
    cfg = _config(args).replace(volumes_dir=args.volumes, clinical_csv=args.clinical)
    prov = provenance(cfg)
    tables, records, has_gtvp, extras = extract_features(cfg)
    with _StagingDir(args.output) as tmp:
        write_feature_dir(tmp, tables, records, has_gtvp, prov)
        write_json(tmp / "removal_report.json",
                   {p: r.as_dict() for p, r in extras["removal_reports"].items()}, prov)
        if extras.get("dice") is not None:
            write_dice_table(tmp / "dice_table.csv", extras["dice"], prov)


def cmd_fit(args) -> None:
    cfg = _config(args)
    prov = provenance(cfg)
    try:
        tables, records, has_gtvp = read_feature_dir(args.features, cfg.modalities)
    except StageError:
        raise
    except (HncRfsError, OSError) as exc:
        raise StageError("fit", str(exc)) from exc
    fit = fit_models(tables, records, has_gtvp, cfg)
    with _StagingDir(args.output) as tmp:
        write_risk_csv(tmp / "risk_scores.csv", fit.risk, fit.groups, prov)
        write_json(tmp / "selection_report.json",
                   {m: r.as_dict() for m, r in fit.modality_results.items()}, prov)


def cmd_evaluate(args) -> None:
    try:
        scores, fused, _ = read_risk_csv(args.risk)
        records, _ = read_labels(args.labels)
        mode = read_provenance(args.risk).get("fusion", "zscore")
    except (HncRfsError, OSError) as exc:
        raise StageError("evaluate", str(exc)) from exc
    threshold = 0.0 if args.threshold is None else args.threshold
    try:
        ev = evaluate_scores(scores, fused, records, threshold, mode)
    except HncRfsError as exc:
        raise StageError("evaluate", str(exc)) from exc
    prov = {"version": __version__, "fusion": mode}
    with _StagingDir(args.output) as tmp:
        write_json(tmp / "evaluation.json",
                   {"c_index": ev["c_index"], "stratification": ev["stratification"],
                    "n_patients": len(fused)}, prov)
        write_km_csv(tmp / "km_curves.csv", ev["curves"], prov)


def _read_group(path):
    """Survival rows from a CSV with ``time`` and ``event`` columns."""
    header, rows, lines = read_csv_rows(path)
    try:
        ti, ei = header.index("time"), header.index("event")
    except ValueError:
        raise StageError("km", f"{path}: needs 'time' and 'event' columns") from None
    out = []
    for row, line in zip(rows, lines):
        try:
            out.append(SurvivalRecord(float(row[ti]), bool(int(float(row[ei])))))
        except (ValueError, HncRfsError) as exc:
            raise StageError("km", f"{path} line {line}: {exc}") from exc
    return out


def cmd_km(args) -> None:
    a, b = _read_group(args.group_a), _read_group(args.group_b)
    try:
        curves = {"a": km_estimate(a), "b": km_estimate(b)}
        lr = logrank_test(a, b)
    except HncRfsError as exc:
        raise StageError("km", str(exc)) from exc
    prov = {"version": __version__}
    with _StagingDir(args.output) as tmp:
        write_km_csv(tmp / "km_curves.csv", {"groups": curves}, prov)
        write_json(tmp / "logrank.json", {
            "chi_square": lr.chi_square, "p_value": lr.p_value, "neg_log2_p": lr.neg_log2_p,
            "observed_a": lr.observed_a, "expected_a": lr.expected_a, "variance": lr.variance,
            "significant": lr.significant, "n_a": len(a), "n_b": len(b),
        }, prov)


def cmd_run(args) -> None:
    cfg = _config(args)
    if args.output:
        cfg = cfg.replace(output_dir=args.output)
    run_pipeline(cfg)


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--d-max", type=float, dest="d_max", help="node distance cut-off in mm")
    common.add_argument("--repeats", type=int, help="inner CV repeats")
    common.add_argument("--output", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hncrfs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hncrfs {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic cohort")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--censoring", type=float, default=0.25)
    p.add_argument("--n-noise", type=int, default=50, dest="n_noise")
    p.add_argument("--n-planted", type=int, default=3, dest="n_planted")
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--null", action="store_true", help="all coefficients zero")
    p.add_argument("--volumes", action="store_true", help="write phantom NIfTI volumes and clinical.csv")
    p.set_defaults(func=cmd_simulate, needs_output=True)

    p = sub.add_parser("postprocess", parents=[common], help="remove distant GTVn components")
    p.add_argument("--input", required=True, help="directory of <id>_mask.nii files")
    p.add_argument("--reference", help="directory of <id>_ref.nii ground-truth masks")
    p.set_defaults(func=cmd_postprocess, needs_output=True)

    p = sub.add_parser("features", parents=[common], help="extract clinical and radiomic features")
    p.add_argument("--volumes", required=True)
    p.add_argument("--clinical", required=True)
    p.set_defaults(func=cmd_features, needs_output=True)

    p = sub.add_parser("fit", parents=[common], help="select features and fit Cox models")
    p.add_argument("--features", required=True, help="directory written by 'features' or 'simulate'")
    p.set_defaults(func=cmd_fit, needs_output=True)

    p = sub.add_parser("evaluate", parents=[common], help="C-index, KM and log-rank")
    p.add_argument("--risk", required=True, help="risk_scores.csv")
    p.add_argument("--labels", required=True, help=f"{LABELS_FILE} with patient_id,time,event")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_evaluate, needs_output=True)

    p = sub.add_parser("km", parents=[common], help="KM curves and log-rank for two groups")
    p.add_argument("--group-a", required=True, dest="group_a")
    p.add_argument("--group-b", required=True, dest="group_b")
    p.set_defaults(func=cmd_km, needs_output=True)

    p = sub.add_parser("run", parents=[common], help="all stages from one config")
    p.set_defaults(func=cmd_run, needs_output=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.needs_output and not args.output:
        parser.error(f"{args.command}: --output is required")
    try:
        args.func(args)
    except StageError as exc:
        print(f"hncrfs: error in {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except HncRfsError as exc:
        print(f"hncrfs: error in {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"hncrfs: error in {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
