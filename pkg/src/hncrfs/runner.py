"""Config-driven orchestration of the full pipeline and its file outputs.

The stages can also be run one at a time (see :mod:`hncrfs.cli`); each
stage reads and writes the same files the monolithic run produces.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .coxph import FitOptions
from .errors import DegenerateTextureError, HncRfsError, NoTumorError, SchemaError, StageError
from .io import (
    read_clinical_csv,
    read_csv_rows,
    read_feature_table,
    read_labels,
    read_nifti,
    write_csv,
    write_feature_table,
    write_labels,
)
from .pipeline import (
    InnerCV,
    FeatureTable,
    RiskScores,
    derive_seed,
    encode_clinical,
    evaluate_groups,
    fit_modality_model,
    fuse_risk,
    make_cv_plan,
    stratify,
)
from .radiomics import ExtractionSettings, extract_all
from .errors import DegenerateMetricError
from .survstat import harrell_c, record_arrays
from .synth import GENERATOR_NAME
from .volume import (
    GTVN,
    GTVP,
    aggregated_dice,
    filter_distant_nodes,
    node_statistics,
    resample_nearest,
    resample_trilinear,
)

log = logging.getLogger(__name__)

__all__ = [
    "PipelineConfig",
    "load_config",
    "provenance",
    "postprocess_masks",
    "extract_features",
    "fit_models",
    "evaluate_scores",
    "run_pipeline",
    "FEATURE_FILES",
]

FEATURE_FILES = {"clinical": "clinical_features.csv", "CT": "ct_features.csv", "PET": "pet_features.csv"}
LABELS_FILE = "labels.csv"
RISK_FILE = "risk_scores.csv"


def _strict(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise SchemaError(f"unknown config key(s) in {where}: {unknown}")
    return cls(**data)


@dataclass(frozen=True)
class ExtractionConfig:
    bin_width: float = 25.0
    glcm_distance: int = 1
    symmetric_glcm: bool = True
    resample_spacing: tuple | None = None

    def settings(self) -> ExtractionSettings:
        return ExtractionSettings(bin_width=self.bin_width, glcm_distance=self.glcm_distance,
                                  symmetric_glcm=self.symmetric_glcm)


@dataclass(frozen=True)
class CVConfig:
    outer_k: int = 5
    inner_k: int = 5
    repeats: int = 100
    seed: int = 0
    stratify_outer: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    """All run settings. Paths may be ``None`` when a stage does not need them."""

    volumes_dir: str | None = None
    clinical_csv: str | None = None
    feature_dir: str | None = None
    output_dir: str | None = None
    d_max: float = 150.0
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    cv: CVConfig = field(default_factory=CVConfig)
    caps: dict = field(default_factory=lambda: {"clinical": 5, "radiomics": 10})
    modalities: tuple = ("clinical", "CT", "PET")
    fusion: str = "zscore"
    threshold: float = 0.0
    tie_method: str = "efron"
    correlation_threshold: float = 0.9
    selection_epsilon: float = 1e-4

    def __post_init__(self):
        if not self.d_max > 0:
            raise SchemaError("d_max must be > 0")
        if self.fusion not in ("zscore", "raw"):
            raise SchemaError("fusion must be 'zscore' or 'raw'")
        mods = tuple(self.modalities)
        if "clinical" not in mods or not set(mods) <= {"clinical", "CT", "PET"}:
            raise SchemaError("modalities must include 'clinical' and be drawn from clinical, CT, PET")
        object.__setattr__(self, "modalities", mods)
        if set(self.caps) - {"clinical", "radiomics"}:
            raise SchemaError("caps accepts only 'clinical' and 'radiomics'")
        caps = {"clinical": 5, "radiomics": 10, **self.caps}
        if any(int(v) < 1 for v in caps.values()):
            raise SchemaError("caps must be >= 1")
        object.__setattr__(self, "caps", caps)
        cv = self.cv
        if cv.outer_k < 2 or cv.inner_k < 2 or cv.repeats < 1:
            raise SchemaError("cv needs outer_k >= 2, inner_k >= 2, repeats >= 1")
        if not 0 < self.correlation_threshold <= 1:
            raise SchemaError("correlation_threshold must lie in (0, 1]")
        if self.selection_epsilon < 0:
            raise SchemaError("selection_epsilon must be >= 0")
        FitOptions(tie_method=self.tie_method)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        if "extraction" in data:
            ext = dict(data["extraction"])
            if ext.get("resample_spacing") is not None:
                ext["resample_spacing"] = tuple(float(s) for s in ext["resample_spacing"])
            data["extraction"] = _strict(ExtractionConfig, ext, "extraction")
        if "cv" in data:
            data["cv"] = _strict(CVConfig, data["cv"], "cv")
        if "modalities" in data:
            data["modalities"] = tuple(data["modalities"])
        return _strict(cls, data, "config")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["modalities"] = list(self.modalities)
        if d["extraction"]["resample_spacing"] is not None:
            d["extraction"]["resample_spacing"] = list(d["extraction"]["resample_spacing"])
        return d

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def cap(self, modality: str) -> int:
        return int(self.caps["clinical" if modality == "clinical" else "radiomics"])


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        return PipelineConfig.from_dict(json.load(fh))


def provenance(config: PipelineConfig) -> dict:
    """Hash of every setting that affects results (paths excluded)."""
    d = config.to_dict()
    for key in ("volumes_dir", "clinical_csv", "feature_dir", "output_dir"):
        d.pop(key)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return {
        "config_hash": hashlib.sha256(blob.encode()).hexdigest()[:16],
        "seed": config.cv.seed,
        "version": __version__,
        "generator": GENERATOR_NAME,
    }


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_json(path, payload: dict, prov: dict | None = None) -> None:
    body = dict(payload)
    if prov is not None:
        body = {"provenance": prov, **body}
    Path(path).write_text(json.dumps(_clean(body), indent=2, sort_keys=True) + "\n")


# --- stage 1: post-processing ------------------------------------------------

def _patient_files(volumes_dir, pid):
    base = Path(volumes_dir)
    return {
        "mask": base / f"{pid}_mask.nii",
        "ct": base / f"{pid}_ct.nii",
        "pet": base / f"{pid}_pet.nii",
        "ref": base / f"{pid}_ref.nii",
    }


def postprocess_masks(masks: dict, d_max: float, references: dict | None = None):
    """Filter every mask; returns ``(filtered, reports, dice_table or None)``."""
    filtered, reports = {}, {}
    for pid, mask in masks.items():
        try:
            filtered[pid], reports[pid] = filter_distant_nodes(mask, d_max)
        except HncRfsError as exc:
            raise StageError("postprocess", str(exc), pid) from exc
    table = None
    if references:
        common = [p for p in masks if p in references]
        before = [(masks[p], references[p]) for p in common]
        after = [(filtered[p], references[p]) for p in common]
        table = dice_table(before, after)
    return filtered, reports, table


def dice_table(before, after) -> dict:
    """Pooled GTVn / GTVp / mean Dice for original and post-processed masks."""
    rows = {}
    for name, pairs in (("original", before), ("postprocessed", after)):
        n = aggregated_dice(pairs, GTVN)
        p = aggregated_dice(pairs, GTVP)
        rows[name] = {"gtvn_dice": n, "gtvp_dice": p, "mean_dice": (n + p) / 2.0}
    return rows


def write_dice_table(path, table: dict, prov: dict) -> None:
    rows = [[name, v["gtvn_dice"], v["gtvp_dice"], v["mean_dice"]] for name, v in table.items()]
    write_csv(path, ["masks", "gtvn_dice", "gtvp_dice", "mean_dice"], rows, prov)


# --- stage 2: features -------------------------------------------------------

def extract_features(config: PipelineConfig):
    """Read volumes and clinical data, post-process, and build feature tables.

    Returns ``(tables, records, has_gtvp, extras)`` where ``extras`` holds
    removal reports, node statistics and the optional Dice table.
    """
    if config.clinical_csv is None:
        raise StageError("features", "clinical_csv is required")
    try:
        clinical = read_clinical_csv(config.clinical_csv)
    except HncRfsError as exc:
        raise StageError("ingest", str(exc)) from exc
    records = {r.patient_id: r.survival for r in clinical}
    use_imaging = config.volumes_dir is not None
    want_radiomics = [m for m in config.modalities if m != "clinical"]
    if want_radiomics and not use_imaging:
        raise StageError("features", "radiomics modalities need volumes_dir")

    node_stats, reports, has_gtvp = {}, {}, {}
    rows = {"CT": ([], []), "PET": ([], [])}
    masks, refs, filtered = {}, {}, {}
    settings = config.extraction.settings()
    names = None
    if use_imaging:
        for rec in clinical:
            pid = rec.patient_id
            files = _patient_files(config.volumes_dir, pid)
            try:
                mask = read_nifti(files["mask"], "label")
                if config.extraction.resample_spacing is not None:
                    mask = resample_nearest(mask, config.extraction.resample_spacing)
                masks[pid] = mask
                if files["ref"].exists():
                    ref = read_nifti(files["ref"], "label")
                    if config.extraction.resample_spacing is not None:
                        ref = resample_nearest(ref, config.extraction.resample_spacing)
                    refs[pid] = ref
            except (HncRfsError, OSError) as exc:
                raise StageError("read-volumes", str(exc), pid) from exc
        filtered, reports, dice = postprocess_masks(masks, config.d_max, refs or None)
        for rec in clinical:
            pid = rec.patient_id
            mask = filtered[pid]
            node_stats[pid] = node_statistics(mask)
            has_gtvp[pid] = node_stats[pid].has_gtvp
            if not want_radiomics or not has_gtvp[pid]:
                continue
            files = _patient_files(config.volumes_dir, pid)
            try:
                ct = read_nifti(files["ct"])
                pet = read_nifti(files["pet"])
                if config.extraction.resample_spacing is not None:
                    ct = resample_trilinear(ct, config.extraction.resample_spacing)
                    pet = resample_trilinear(pet, config.extraction.resample_spacing)
                ct_fv, pet_fv = extract_all(ct, pet, mask, settings)
            except (NoTumorError, DegenerateTextureError) as exc:
                # no usable texture either way: fall back to clinical-only risk
                log.warning("patient %s: %s; using clinical risk only", pid, exc)
                has_gtvp[pid] = False
                continue
            except (HncRfsError, OSError) as exc:
                raise StageError("radiomics", str(exc), pid) from exc
            names = ct_fv.names
            rows["CT"][0].append(pid)
            rows["CT"][1].append(ct_fv.values)
            rows["PET"][0].append(pid)
            rows["PET"][1].append(pet_fv.values)
    else:
        dice = None
        has_gtvp = {r.patient_id: True for r in clinical}

    try:
        tables = {"clinical": encode_clinical(clinical, node_stats if use_imaging else None)}
    except HncRfsError as exc:
        raise StageError("encode-clinical", str(exc)) from exc
    for m in want_radiomics:
        ids, vals = rows[m]
        if names is None:
            raise StageError("radiomics", "no patient has a GTVp; radiomics tables are empty")
        tables[m] = FeatureTable(ids, names, np.array(vals), m)
    extras = {"removal_reports": reports, "node_statistics": node_stats, "dice": dice}
    return tables, records, has_gtvp, extras


def write_feature_dir(out, tables, records, has_gtvp, prov) -> None:
    out = Path(out)
    for m, table in tables.items():
        write_feature_table(table, out / FEATURE_FILES[m], prov)
    write_labels(out / LABELS_FILE, records, has_gtvp, prov)


def read_feature_dir(path, modalities=("clinical", "CT", "PET")):
    path = Path(path)
    records, has_gtvp = read_labels(path / LABELS_FILE)
    tables = {}
    for m in modalities:
        f = path / FEATURE_FILES[m]
        if f.exists():
            tables[m] = read_feature_table(f, m)
        elif m == "clinical":
            raise StageError("fit", f"missing {f}")
    return tables, records, has_gtvp


# --- stage 3: models ---------------------------------------------------------

@dataclass
class FitResult:
    modality_results: dict
    risk: RiskScores
    groups: dict
    outer_folds: tuple


def fit_models(tables: dict, records: dict, has_gtvp: dict, config: PipelineConfig) -> FitResult:
    """Per-modality out-of-fold models, fusion and stratification."""
    clinical = tables["clinical"]
    ids = list(clinical.patient_ids)
    missing = [p for p in ids if p not in records]
    if missing:
        raise StageError("fit", f"no survival labels for {missing[:5]}")
    events = {p: records[p].event for p in ids} if config.cv.stratify_outer else None
    outer = make_cv_plan(ids, config.cv.outer_k, 1, config.cv.seed, events).assignments[0]
    options = FitOptions(tie_method=config.tie_method)

    results = {}
    for idx, m in enumerate(("clinical", "CT", "PET")):
        if m not in config.modalities or m not in tables:
            continue
        table = tables[m]
        inner = InnerCV(config.cv.inner_k, config.cv.repeats, derive_seed(config.cv.seed, idx + 1))
        try:
            results[m] = fit_modality_model(table, [records[p] for p in table.patient_ids], outer, inner,
                                            config.cap(m), options, config.correlation_threshold,
                                            config.selection_epsilon)
        except HncRfsError as exc:
            raise StageError(f"fit-{m}", str(exc)) from exc

    scores = {m: r.scores for m, r in results.items()}
    gtvp = {p: has_gtvp.get(p, True) for p in ids}
    for p in ids:
        if gtvp[p] and any(p not in s for s in scores.values()):
            # a patient without imaging scores falls back to clinical
            gtvp[p] = False
    risk = fuse_risk(scores, gtvp, config.fusion)
    return FitResult(results, risk, stratify(risk, config.threshold), outer)


def write_risk_csv(path, risk: RiskScores, groups: dict, prov: dict) -> None:
    mods = [m for m in ("clinical", "CT", "PET") if m in risk.modality_scores]
    rows = []
    for p in sorted(risk.patient_ids):
        row = [p]
        for m in mods:
            v = risk.modality_scores[m].get(p)
            row.append("" if v is None else float(v))
        row += [float(risk.fused[p]), int(risk.has_gtvp[p]), groups[p]]
        rows.append(row)
    prov = dict(prov)
    prov["fusion"] = risk.mode
    write_csv(path, ["patient_id", *mods, "fused", "has_gtvp", "group"], rows, prov)


def read_risk_csv(path):
    """Return ``(modality_scores, fused, has_gtvp)`` dicts keyed by patient id."""
    header, rows, _ = read_csv_rows(path)
    for c in ("patient_id", "fused"):
        if c not in header:
            raise SchemaError(f"{path}: missing column {c!r}")
    col = {n: i for i, n in enumerate(header)}
    mods = [m for m in ("clinical", "CT", "PET") if m in col]
    scores = {m: {} for m in mods}
    fused, has_gtvp = {}, {}
    for row in rows:
        pid = row[col["patient_id"]]
        for m in mods:
            if row[col[m]] != "":
                scores[m][pid] = float(row[col[m]])
        fused[pid] = float(row[col["fused"]])
        has_gtvp[pid] = bool(int(row[col["has_gtvp"]])) if "has_gtvp" in col else True
    return scores, fused, has_gtvp


# --- stage 4: evaluation -----------------------------------------------------

def _c_index_for(scores: dict, records: dict):
    ids = [p for p in scores if p in records]
    if len(ids) < 2:
        return None
    time, event = record_arrays([records[p] for p in ids])
    try:
        return harrell_c(time, event, [scores[p] for p in ids])
    except DegenerateMetricError:
        return None


def evaluate_scores(modality_scores: dict, fused: dict, records: dict, threshold: float = 0.0,
                    mode: str = "zscore") -> dict:
    """C-index per model and KM / log-rank for each model's high/low split.

    Single-modality scores are standardized (for ``mode='zscore'``) before
    thresholding, mirroring how they enter the fused score.
    """
    out = {"c_index": {}, "stratification": {}, "curves": {}}
    models = dict(modality_scores)
    models["fused"] = fused
    for name, scores in models.items():
        out["c_index"][name] = _c_index_for(scores, records)
        split = scores
        if name != "fused" and mode == "zscore":
            vals = np.array(list(scores.values()), dtype=float)
            std = vals.std()
            split = dict(zip(scores, ((vals - vals.mean()) / (std if std > 0 else 1.0)).tolist()))
        groups = stratify(split, threshold)
        ev = evaluate_groups(groups, records)
        lr = ev["logrank"]
        out["stratification"][name] = {
            "threshold": threshold,
            "n_high": ev["n_high"],
            "n_low": ev["n_low"],
            "degenerate": ev["degenerate"],
            "chi_square": None if lr is None else lr.chi_square,
            "p_value": None if lr is None else lr.p_value,
            "neg_log2_p": None if lr is None else lr.neg_log2_p,
            "significant": None if lr is None else lr.significant,
        }
        out["curves"][name] = ev["curves"]
    return out


def write_km_csv(path, curves_by_model: dict, prov: dict) -> None:
    rows = []
    for model, curves in curves_by_model.items():
        for group in sorted(curves):
            c = curves[group]
            for t, s, n, d, se in zip(c.event_times, c.survival, c.at_risk, c.events, c.std_err):
                rows.append([model, group, float(t), float(s), int(n), int(d), float(se)])
    write_csv(path, ["model", "group", "time", "survival", "at_risk", "events", "std_err"], rows, prov)


def _report_payload(evaluation: dict, fit: FitResult | None, records: dict, extras: dict | None) -> dict:
    payload = {
        "n_patients": len(records),
        "n_events": int(sum(r.event for r in records.values())),
        "c_index": evaluation["c_index"],
        "stratification": evaluation["stratification"],
    }
    if fit is not None:
        payload["selected_features"] = {
            m: [list(r.selected) for r in res.reports] for m, res in fit.modality_results.items()
        }
        payload["flagged_folds"] = {m: res.flagged_folds for m, res in fit.modality_results.items()}
    if extras:
        if extras.get("dice") is not None:
            payload["dice"] = extras["dice"]
        if extras.get("removal_reports"):
            payload["postprocessing"] = {
                "removed_nodes": sum(len(r.removed) for r in extras["removal_reports"].values()),
                "patients_without_gtvp": sorted(p for p, r in extras["removal_reports"].items() if r.no_reference),
            }
    return payload


# --- monolithic run ----------------------------------------------------------

class _StagingDir:
    """Write outputs to a scratch directory and move them in on success."""

    def __init__(self, output_dir):
        self.final = Path(output_dir)

    def __enter__(self):
        self.created = not self.final.exists()
        self.final.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.final))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            for f in sorted(self.tmp.iterdir()):
                target = self.final / f.name
                if target.exists():
                    if target.is_dir():
                        shutil.rmtree(target)
                    else:
                        target.unlink()
                shutil.move(str(f), str(target))
        shutil.rmtree(self.tmp, ignore_errors=True)
        if exc_type is not None and self.created and not any(self.final.iterdir()):
            self.final.rmdir()
        return False


def run_pipeline(config: PipelineConfig) -> dict:
    """Run every stage and write the report files into ``config.output_dir``.

    Outputs: ``report.json``, ``risk_scores.csv``, ``km_curves.csv``,
    ``selection_report.json`` and, when reference masks exist,
    ``dice_table.csv``. On failure nothing is left behind and a
    :class:`StageError` names the stage (and patient, if any).
    """
    if config.output_dir is None:
        raise StageError("config", "output_dir is required")
    prov = provenance(config)
    with _StagingDir(config.output_dir) as tmp:
        extras = None
        if config.feature_dir is not None:
            tables, records, has_gtvp = read_feature_dir(config.feature_dir, config.modalities)
        else:
            tables, records, has_gtvp, extras = extract_features(config)
        fit = fit_models(tables, records, has_gtvp, config)
        try:
            evaluation = evaluate_scores(fit.risk.modality_scores, fit.risk.fused, records,
                                         config.threshold, config.fusion)
        except HncRfsError as exc:
            raise StageError("evaluate", str(exc)) from exc
        report = _report_payload(evaluation, fit, records, extras)

        write_risk_csv(tmp / RISK_FILE, fit.risk, fit.groups, prov)
        write_km_csv(tmp / "km_curves.csv", evaluation["curves"], prov)
        write_json(tmp / "selection_report.json",
                   {m: r.as_dict() for m, r in fit.modality_results.items()}, prov)
        if extras and extras.get("dice") is not None:
            write_dice_table(tmp / "dice_table.csv", extras["dice"], prov)
        write_json(tmp / "report.json", report, prov)
    return {"provenance": prov, **_clean(report)}
