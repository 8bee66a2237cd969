"""Per-modality Cox model building with repeated cross-validation.

The procedure for one modality, run inside every outer training fold:

1. univariate screening: mean validation C-index of single-feature Cox
   models over a repeated k-fold plan; features below 0.5 are dropped;
2. correlation pruning in rank order (|r| > 0.9 against a retained
   higher-ranked feature);
3. greedy step-forward selection scored by mean validation C-index;
4. a final Cox fit on the whole training fold, scoring the held-out fold.

Out-of-fold scores from the modalities are standardized and averaged, and
the fused score splits patients into high- and low-risk groups at 0.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .coxph import CoxModel, FitOptions, RiskSetLayout, fit_cox_arrays, predict_risk
from .errors import (
    CoxOverflowError,
    DegenerateDesignError,
    DegenerateMetricError,
    DegenerateTestError,
    IngestionError,
    InvalidArgumentError,
    NoEventsError,
    SchemaError,
)
from .survstat import (
    SurvivalRecord,
    harrell_c,
    km_estimate,
    logrank_test,
    record_arrays,
)

log = logging.getLogger(__name__)

__all__ = [
    "MODALITIES",
    "DEFAULT_CAPS",
    "FeatureTable",
    "ClinicalRecord",
    "CVPlan",
    "SelectionReport",
    "ModalityResult",
    "RiskScores",
    "encode_clinical",
    "make_cv_plan",
    "univariate_screen",
    "correlation_prune",
    "forward_select",
    "fit_modality_model",
    "fuse_risk",
    "stratify",
    "evaluate_groups",
    "derive_seed",
    "InnerCV",
]

MODALITIES = ("clinical", "CT", "PET")
DEFAULT_CAPS = {"clinical": 5, "CT": 10, "PET": 10}
NEUTRAL_C = 0.5
SELECTION_EPSILON = 1e-4

_FIT_FAILURES = (NoEventsError, DegenerateDesignError, CoxOverflowError, DegenerateMetricError,
                 np.linalg.LinAlgError)


@dataclass(frozen=True)
class FeatureTable:
    """Patients x named features for one modality."""

    patient_ids: tuple
    feature_names: tuple
    values: np.ndarray
    modality: str = "clinical"

    def __post_init__(self):
        ids = tuple(str(i) for i in self.patient_ids)
        names = tuple(str(n) for n in self.feature_names)
        values = np.array(self.values, dtype=float).reshape(len(ids), len(names))
        if len(set(ids)) != len(ids):
            raise IngestionError("duplicate patient ids in feature table")
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names in feature table")
        if not np.all(np.isfinite(values)):
            raise SchemaError(f"{self.modality} feature table holds non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "patient_ids", ids)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.patient_ids)

    def column(self, name) -> np.ndarray:
        return self.values[:, self.feature_names.index(name)]

    def columns(self, names) -> np.ndarray:
        return self.values[:, [self.feature_names.index(n) for n in names]]

    def subset(self, patient_ids) -> "FeatureTable":
        pos = {pid: i for i, pid in enumerate(self.patient_ids)}
        rows = [pos[str(p)] for p in patient_ids]
        return FeatureTable([self.patient_ids[r] for r in rows], self.feature_names, self.values[rows], self.modality)

    def select(self, names) -> "FeatureTable":
        return FeatureTable(self.patient_ids, names, self.columns(names), self.modality)


# --- clinical encoding -------------------------------------------------------

CLINICAL_STATUS_FIELDS = ("tobacco", "alcohol", "performance_status", "hpv_status", "surgery", "chemotherapy")
CLINICAL_COLUMNS = ("gender", "age") + CLINICAL_STATUS_FIELDS
NODE_COLUMNS = ("gtvp_count", "gtvp_volume_ml", "gtvn_count", "gtvn_volume_ml")


@dataclass(frozen=True)
class ClinicalRecord:
    """One row of the clinical sheet; ``None`` marks a missing value."""

    patient_id: str
    gender: str | None = None
    age: float | None = None
    tobacco: float | None = None
    alcohol: float | None = None
    performance_status: float | None = None
    hpv_status: float | None = None
    surgery: float | None = None
    chemotherapy: float | None = None
    time: float | None = None
    event: bool | None = None

    @property
    def survival(self) -> SurvivalRecord:
        if self.time is None or self.event is None:
            raise SchemaError(f"patient {self.patient_id} has no RFS outcome")
        return SurvivalRecord(float(self.time), bool(self.event))


def encode_status(value) -> float:
    """Positive (1) -> 1, negative (0) -> -1, missing -> 0.

    Ordinal values above 1 (e.g. Zubrod 2-4) are kept as is.
    """
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return 0.0
    value = float(value)
    return -1.0 if value == 0 else value


def _encode_gender(value) -> float:
    if value is None:
        return 0.0
    v = str(value).strip().upper()
    if v in ("M", "MALE", "1"):
        return 1.0
    if v in ("F", "FEMALE", "0"):
        return -1.0
    raise IngestionError(f"unrecognised gender value {value!r}")


def encode_clinical(records: Sequence[ClinicalRecord], node_stats: Mapping | None = None) -> FeatureTable:
    """Encode clinical records into a numeric table.

    Status fields use the +1 / -1 / 0 coding of :func:`encode_status`; gender
    is M=+1, F=-1. A missing age is imputed with the cohort median. When
    ``node_stats`` (patient id -> NodeStatistics) is given, the GTVp and GTVn
    counts and volumes are appended; patients absent from it get zeros.
    """
    ids = [r.patient_id for r in records]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise IngestionError(f"duplicate patient ids: {dup}")
    ages = [r.age for r in records if r.age is not None]
    median_age = float(np.median(ages)) if ages else 0.0

    rows = []
    for r in records:
        row = [_encode_gender(r.gender), median_age if r.age is None else float(r.age)]
        row += [encode_status(getattr(r, f)) for f in CLINICAL_STATUS_FIELDS]
        if node_stats is not None:
            s = node_stats.get(r.patient_id)
            row += [0.0] * 4 if s is None else [s.gtvp_count, s.gtvp_volume_ml, s.gtvn_count, s.gtvn_volume_ml]
        rows.append(row)
    names = CLINICAL_COLUMNS + (NODE_COLUMNS if node_stats is not None else ())
    return FeatureTable(ids, names, np.array(rows, dtype=float).reshape(len(ids), len(names)), "clinical")


# --- cross-validation plans --------------------------------------------------

def derive_seed(seed: int, *keys: int) -> int:
    """Independent child seed for a (seed, key...) tuple."""
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *keys]).generate_state(1)[0])


@dataclass(frozen=True)
class CVPlan:
    """Repeated k-fold partitions of patient ids.

    ``assignments[r][f]`` is the tuple of ids in fold ``f`` of repeat ``r``.
    Plans are keyed on ids: ids are sorted before shuffling, so the plan does
    not depend on the order in which patients were supplied.
    """

    k: int
    repeats: int
    seed: int
    assignments: tuple
    stratified: bool = False

    @property
    def patient_ids(self):
        return tuple(sorted(i for fold in self.assignments[0] for i in fold))

    def fold_of(self, repeat: int) -> dict:
        return {pid: f for f, fold in enumerate(self.assignments[repeat]) for pid in fold}


def make_cv_plan(patient_ids, k: int = 5, repeats: int = 100, seed: int = 0, events=None) -> CVPlan:
    """Seeded repeated k-fold plan.

    With ``events`` (id -> bool), events and non-events are shuffled
    separately and dealt round-robin so every fold gets a similar share.
    """
    ids = sorted(str(i) for i in patient_ids)
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError("patient ids must be unique")
    n = len(ids)
    if k < 2 or n < k:
        raise InvalidArgumentError(f"need n >= k >= 2, got n={n}, k={k}")
    if repeats < 1:
        raise InvalidArgumentError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    arr = np.array(ids, dtype=object)
    if events is not None:
        ev_mask = np.array([bool(events[i]) for i in ids])
    assignments = []
    for _ in range(repeats):
        if events is None:
            order = arr[rng.permutation(n)]
        else:
            pos = arr[ev_mask][rng.permutation(int(ev_mask.sum()))]
            neg = arr[~ev_mask][rng.permutation(int((~ev_mask).sum()))]
            order = np.concatenate([pos, neg])
        folds = tuple(tuple(sorted(order[f::k])) for f in range(k))
        assignments.append(folds)
    return CVPlan(k=k, repeats=repeats, seed=seed, assignments=tuple(assignments),
                  stratified=events is not None)


class _PlanCache:
    """Row indices and risk-set layouts for every (repeat, fold) of a plan."""

    def __init__(self, plan: CVPlan, patient_ids, time, event):
        pos = {pid: i for i, pid in enumerate(patient_ids)}
        missing = set(plan.patient_ids) - set(pos)
        if missing:
            raise SchemaError(f"plan references ids absent from the table: {sorted(missing)[:5]}")
        self.cells = []
        in_plan = np.zeros(len(patient_ids), dtype=bool)
        in_plan[[pos[p] for p in plan.patient_ids]] = True
        for folds in plan.assignments:
            for fold in folds:
                val = np.array(sorted(pos[p] for p in fold), dtype=int)
                mask = in_plan.copy()
                mask[val] = False
                train = np.flatnonzero(mask)
                layout = RiskSetLayout(time[train], event[train]) if event[train].any() else None
                self.cells.append((train, val, layout))
        self.time = time
        self.event = event

    def mean_c(self, X, options, warm=None, keep_betas=False):
        """Mean validation C-index of a Cox fit on columns ``X``; failures count 0.5.

        ``warm`` holds one starting beta per cell. Returns
        ``(mean C, failure count, betas or None)``.
        """
        total = 0.0
        failures = 0
        betas = [] if keep_betas else None
        for c, (train, val, layout) in enumerate(self.cells):
            beta = None
            try:
                if layout is None:
                    raise NoEventsError("training fold has no events")
                init = None if warm is None else warm[c]
                model = fit_cox_arrays(X[train], None, self.event[train], options, layout=layout, init=init)
                beta = model.beta
                risk = predict_risk(model, X[val])
                total += harrell_c(self.time[val], self.event[val], risk)
            except _FIT_FAILURES:
                total += NEUTRAL_C
                failures += 1
            if keep_betas:
                betas.append(beta)
        return total / len(self.cells), failures, betas


# --- selection ---------------------------------------------------------------

@dataclass
class SelectionReport:
    modality: str = ""
    ranked_features: list = field(default_factory=list)  # (name, mean C), best first
    dropped_constant: list = field(default_factory=list)
    dropped_low_signal: list = field(default_factory=list)  # (name, mean C)
    dropped_correlated: list = field(default_factory=list)  # (removed, kept, r)
    candidates: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    trace: list = field(default_factory=list)  # (step, added feature, mean C)
    fit_failures: dict = field(default_factory=dict)
    max_features: int | None = None

    @property
    def retained(self):
        low = {n for n, _ in self.dropped_low_signal}
        return [n for n, _ in self.ranked_features if n not in low]

    def as_dict(self):
        return {
            "modality": self.modality,
            "ranked_features": [{"feature": n, "mean_c_index": c} for n, c in self.ranked_features],
            "dropped_constant": list(self.dropped_constant),
            "dropped_low_signal": [{"feature": n, "mean_c_index": c} for n, c in self.dropped_low_signal],
            "dropped_correlated": [{"removed": a, "kept": b, "r": r} for a, b, r in self.dropped_correlated],
            "candidates": list(self.candidates),
            "selected": list(self.selected),
            "trace": [{"step": s, "feature": f, "mean_c_index": c} for s, f, c in self.trace],
            "fit_failures": dict(sorted(self.fit_failures.items())),
            "max_features": self.max_features,
        }


def _aligned(table: FeatureTable, records):
    if len(records) != len(table):
        raise SchemaError(f"{len(records)} records for {len(table)} table rows")
    return record_arrays(records)


def univariate_screen(table: FeatureTable, records: Sequence[SurvivalRecord], plan: CVPlan,
                      options: FitOptions | None = None, threshold: float = 0.5) -> SelectionReport:
    """Rank features by mean validation C-index of single-feature Cox models.

    Ties in mean C-index are broken by feature name, so the ranking does not
    depend on column order. Zero-variance features are dropped up front.
    """
    options = options or FitOptions()
    time, event = _aligned(table, records)
    cache = _PlanCache(plan, table.patient_ids, time, event)
    report = SelectionReport(modality=table.modality)
    scored = []
    for j, name in enumerate(table.feature_names):
        col = table.values[:, j:j + 1]
        if np.ptp(col) == 0:
            report.dropped_constant.append(name)
            continue
        mean_c, failures, _ = cache.mean_c(col, options)
        if failures:
            report.fit_failures[name] = failures
        scored.append((name, mean_c))
    scored.sort(key=lambda item: (-item[1], item[0]))
    report.ranked_features = scored
    report.dropped_low_signal = [(n, c) for n, c in scored if c < threshold]
    return report


def correlation_prune(table: FeatureTable, ranked: Sequence[str], threshold: float = 0.9):
    """Drop features with |Pearson r| > ``threshold`` to a retained higher-ranked one.

    Returns ``(kept, dropped)`` where ``dropped`` lists ``(removed, kept, r)``.
    Zero-variance features are never pruned and never cause pruning.
    """
    unknown = [n for n in ranked if n not in table.feature_names]
    if unknown:
        raise SchemaError(f"unknown features: {unknown}")
    X = table.columns(list(ranked)) if ranked else np.zeros((len(table), 0))
    centered = X - X.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    kept_idx: list[int] = []
    dropped = []
    for j, name in enumerate(ranked):
        if norms[j] > 0 and kept_idx:
            others = [i for i in kept_idx if norms[i] > 0]
            if others:
                r = centered[:, others].T @ centered[:, j] / (norms[others] * norms[j])
                r = np.clip(r, -1.0, 1.0)
                hit = np.flatnonzero(np.abs(r) > threshold)
                if hit.size:
                    first = hit[0]
                    dropped.append((name, ranked[others[first]], float(r[first])))
                    continue
        kept_idx.append(j)
    return [ranked[i] for i in kept_idx], dropped


def forward_select(table: FeatureTable, records: Sequence[SurvivalRecord], plan: CVPlan, max_features: int,
                   candidates: Sequence[str] | None = None, options: FitOptions | None = None,
                   epsilon: float = SELECTION_EPSILON, report: SelectionReport | None = None) -> SelectionReport:
    """Greedy step-forward Cox selection scored by mean validation C-index.

    ``candidates`` are tried in the given (screening-rank) order, which also
    breaks ties. A feature is added only if it beats the incumbent mean
    C-index (0.5 for the empty model) by more than ``epsilon``.
    """
    if max_features < 0:
        raise InvalidArgumentError("max_features must be >= 0")
    options = options or FitOptions()
    report = report or SelectionReport(modality=table.modality)
    report.max_features = max_features
    candidates = list(table.feature_names if candidates is None else candidates)
    report.candidates = list(candidates)
    time, event = _aligned(table, records)
    if not candidates or max_features == 0:
        return report
    cache = _PlanCache(plan, table.patient_ids, time, event)
    X = table.columns(candidates)

    selected: list[int] = []
    incumbent = NEUTRAL_C
    incumbent_betas = [np.zeros(0)] * len(cache.cells)
    step = 0
    while len(selected) < max_features:
        best, best_c, best_betas = None, -np.inf, None
        # warm-start each cell from the incumbent fit, new coefficient at 0
        warm = [None if b is None else np.r_[b, 0.0] for b in incumbent_betas]
        for j in range(len(candidates)):
            if j in selected:
                continue
            mean_c, _, betas = cache.mean_c(X[:, selected + [j]], options, warm, keep_betas=True)
            if mean_c > best_c:
                best, best_c, best_betas = j, mean_c, betas
        if best is None or not best_c > incumbent + epsilon:
            break
        selected.append(best)
        incumbent = best_c
        incumbent_betas = best_betas
        step += 1
        report.trace.append((step, candidates[best], best_c))
    report.selected = [candidates[j] for j in selected]
    return report


# --- per-modality model ------------------------------------------------------

@dataclass
class ModalityResult:
    modality: str
    scores: dict  # patient id -> out-of-fold risk
    fold_models: list  # CoxModel or None per outer fold
    reports: list  # SelectionReport per outer fold
    fold_of: dict  # patient id -> outer fold index
    flagged_folds: list = field(default_factory=list)
    c_index: float = float("nan")

    def as_dict(self):
        return {
            "modality": self.modality,
            "c_index": self.c_index,
            "flagged_folds": list(self.flagged_folds),
            "folds": [
                {
                    "fold": f,
                    "selected": [] if m is None else list(m.feature_names),
                    "beta": [] if m is None else m.beta.tolist(),
                    "converged": None if m is None else m.converged,
                    "selection": r.as_dict(),
                }
                for f, (m, r) in enumerate(zip(self.fold_models, self.reports))
            ],
        }


@dataclass(frozen=True)
class InnerCV:
    k: int = 5
    repeats: int = 100
    seed: int = 0


def fit_modality_model(table: FeatureTable, records: Sequence[SurvivalRecord], outer_folds, inner: InnerCV,
                       max_features: int, options: FitOptions | None = None,
                       correlation_threshold: float = 0.9, epsilon: float = SELECTION_EPSILON) -> ModalityResult:
    """Outer-fold screening, pruning, selection and scoring for one modality.

    ``outer_folds`` is a sequence of patient-id collections partitioning the
    cohort; ids not present in ``table`` are ignored. The returned scores are
    out-of-fold: each patient is scored by the model of the fold that held
    it out.
    """
    options = options or FitOptions()
    _aligned(table, records)
    # canonical id order makes every floating-point sum independent of input row order
    order = sorted(range(len(table)), key=lambda i: table.patient_ids[i])
    table = table.subset([table.patient_ids[i] for i in order])
    records = [records[i] for i in order]
    time, event = record_arrays(records)
    pos = {pid: i for i, pid in enumerate(table.patient_ids)}
    folds = [[p for p in fold if p in pos] for fold in outer_folds]
    covered = [p for fold in folds for p in fold]
    if sorted(covered) != sorted(table.patient_ids):
        raise SchemaError("outer folds must partition the table's patients")

    result = ModalityResult(modality=table.modality, scores={}, fold_models=[], reports=[],
                            fold_of={p: f for f, fold in enumerate(folds) for p in fold})
    for f, fold in enumerate(folds):
        held = set(fold)
        train_ids = [p for p in table.patient_ids if p not in held]
        train_rows = np.array([pos[p] for p in train_ids], dtype=int)
        train_records = [SurvivalRecord(float(time[r]), bool(event[r])) for r in train_rows]
        report = SelectionReport(modality=table.modality, max_features=max_features)
        model = None
        if not event[train_rows].any() or len(train_ids) < inner.k:
            log.warning("%s outer fold %d: no events or too few patients; scoring 0", table.modality, f)
            result.flagged_folds.append(f)
        else:
            train = table.subset(train_ids)
            plan = make_cv_plan(train_ids, inner.k, inner.repeats, derive_seed(inner.seed, f))
            report = univariate_screen(train, train_records, plan, options)
            report.max_features = max_features
            kept, dropped = correlation_prune(train, report.retained, correlation_threshold)
            report.dropped_correlated = dropped
            forward_select(train, train_records, plan, max_features, kept, options, epsilon, report)
            if report.selected:
                try:
                    model = fit_cox_arrays(train.columns(report.selected), time[train_rows], event[train_rows],
                                           options, feature_names=report.selected)
                except _FIT_FAILURES as exc:
                    log.warning("%s outer fold %d: final fit failed (%s); scoring 0", table.modality, f, exc)
                    result.flagged_folds.append(f)
        for p in fold:
            if p in train_ids:
                raise AssertionError("held-out patient leaked into training")
        if model is None:
            fold_scores = np.zeros(len(fold))
        else:
            fold_scores = predict_risk(model, table.subset(fold).columns(model.feature_names))
        result.scores.update(zip(fold, fold_scores.tolist()))
        result.fold_models.append(model)
        result.reports.append(report)

    risk = np.array([result.scores[p] for p in table.patient_ids])
    try:
        result.c_index = harrell_c(time, event, risk)
    except DegenerateMetricError:
        result.c_index = float("nan")
    return result


# --- fusion and stratification ----------------------------------------------

@dataclass
class RiskScores:
    patient_ids: list
    modality_scores: dict  # modality -> {id: score}, raw out-of-fold values
    standardized: dict  # modality -> {id: score}
    fused: dict  # id -> fused score
    has_gtvp: dict  # id -> bool
    mode: str = "zscore"

    def column(self, modality):
        return [self.standardized.get(modality, {}).get(p) for p in self.patient_ids]


FUSION_MODES = ("zscore", "raw")


def _standardize(scores: Mapping[str, float]) -> dict:
    vals = np.array(list(scores.values()), dtype=float)
    if len(vals) == 0:
        return {}
    mean = vals.mean()
    std = vals.std()
    out = (vals - mean) / std if std > 0 else vals - mean
    return dict(zip(scores.keys(), out.tolist()))


def fuse_risk(modality_scores: Mapping[str, Mapping[str, float]], has_gtvp: Mapping[str, bool] | None = None,
              mode: str = "zscore") -> RiskScores:
    """Average the available modality scores per patient.

    ``modality_scores`` maps modality to ``{patient id: score}`` and must
    contain a clinical score for every patient. With ``mode='zscore'`` each
    modality is standardized over the patients it scored before averaging.
    Patients without GTVp take the clinical score alone.
    """
    if mode not in FUSION_MODES:
        raise InvalidArgumentError(f"mode must be one of {FUSION_MODES}")
    if "clinical" not in modality_scores:
        raise SchemaError("clinical scores are required for fusion")
    clinical = modality_scores["clinical"]
    ids = list(clinical.keys())
    has_gtvp = {p: True for p in ids} if has_gtvp is None else dict(has_gtvp)
    for m, scores in modality_scores.items():
        extra = set(scores) - set(clinical)
        if extra:
            raise SchemaError(f"{m} scores for patients without a clinical score: {sorted(extra)[:5]}")
    standardized = {m: (_standardize(s) if mode == "zscore" else dict(s)) for m, s in modality_scores.items()}
    fused = {}
    for p in ids:
        if not has_gtvp.get(p, True):
            fused[p] = standardized["clinical"][p]
            continue
        vals = [standardized[m][p] for m in modality_scores if p in standardized[m]]
        missing = [m for m in modality_scores if p not in standardized[m]]
        if missing:
            raise SchemaError(f"patient {p} has GTVp but no {missing} score")
        fused[p] = float(np.mean(vals))
    return RiskScores(patient_ids=ids, modality_scores={m: dict(s) for m, s in modality_scores.items()},
                      standardized=standardized, fused=fused, has_gtvp={p: bool(has_gtvp.get(p, True)) for p in ids},
                      mode=mode)


def stratify(scores, threshold: float = 0.0) -> dict:
    """``'high'`` when the fused score exceeds ``threshold``, else ``'low'``."""
    fused = scores.fused if isinstance(scores, RiskScores) else scores
    return {p: ("high" if s > threshold else "low") for p, s in fused.items()}


def evaluate_groups(groups: Mapping[str, str], records: Mapping[str, SurvivalRecord]) -> dict:
    """KM curves per risk group and the high-vs-low log-rank test.

    A single populated group or an uninformative split yields
    ``logrank = None`` with ``degenerate = True`` instead of an error.
    """
    members = {"high": [], "low": []}
    for p, g in groups.items():
        members[g].append(records[p])
    curves = {g: km_estimate(recs) for g, recs in members.items() if recs}
    out = {"n_high": len(members["high"]), "n_low": len(members["low"]), "curves": curves,
           "logrank": None, "degenerate": False}
    try:
        out["logrank"] = logrank_test(members["high"], members["low"])
    except (InvalidArgumentError, DegenerateTestError) as exc:
        out["degenerate"] = True
        out["reason"] = str(exc)
    return out
