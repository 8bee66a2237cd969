"""The whole pipeline on a synthetic imaging cohort, stage by stage.

Writes phantom NIfTI volumes and a clinical CSV, then runs node filtering,
feature extraction, per-modality selection with Cox fitting, fusion and
risk stratification. Each step is a subcommand of the ``hncrfs`` CLI, and
the same calls are shown here through ``hncrfs.cli.main``.
Run: python demos/05_end_to_end.py [work_dir]
"""
import json
import sys
import tempfile
from pathlib import Path

from hncrfs.cli import main

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="hncrfs-demo-"))
cohort, pp, feats, fit, ev = (work / d for d in ("cohort", "postprocessed", "features", "fit", "evaluation"))


def step(*argv):
    print("$ hncrfs", " ".join(argv))
    if main(list(argv)) != 0:
        sys.exit("stage failed")


step("simulate", "--volumes", "--n", "60", "--seed", "0", "--output", str(cohort))

# Post-processing on its own, scored against the reference masks.
step("postprocess", "--input", str(cohort), "--reference", str(cohort), "--output", str(pp))
print((pp / "dice_table.csv").read_text().split("\n# ")[-1].split("\n", 1)[1])

step("features", "--volumes", str(cohort), "--clinical", str(cohort / "clinical.csv"), "--output", str(feats))
step("fit", "--features", str(feats), "--repeats", "3", "--output", str(fit))
step("evaluate", "--risk", str(fit / "risk_scores.csv"), "--labels", str(feats / "labels.csv"), "--output", str(ev))

result = json.loads((ev / "evaluation.json").read_text())
print("out-of-fold C-index:", {m: round(c, 3) for m, c in result["c_index"].items()})
strat = result["stratification"]["fused"]
print(f"fused risk > 0: {strat['n_high']} high vs {strat['n_low']} low, log-rank p = {strat['p_value']:.2e}")
selected = json.loads((fit / "selection_report.json").read_text())
for modality, rep in selected.items():
    if modality != "provenance":
        print(f"{modality} features chosen in outer fold 1: {rep['folds'][0]['selected']}")
print("outputs in", work)
