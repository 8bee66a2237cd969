import numpy as np
import pytest

from hncrfs.coxph import fit_cox, predict_risk
from hncrfs.errors import DegenerateMetricError, IngestionError, InvalidArgumentError, SchemaError
from hncrfs.pipeline import (
    ClinicalRecord,
    FeatureTable,
    InnerCV,
    correlation_prune,
    encode_clinical,
    evaluate_groups,
    fit_modality_model,
    forward_select,
    fuse_risk,
    make_cv_plan,
    stratify,
    univariate_screen,
)
from hncrfs.survstat import SurvivalRecord, harrell_c, record_arrays
from hncrfs.synth import SynthSpec, generate_survival
from hncrfs.volume import NodeStatistics
from oracles import exhaustive_best_subset


def cohort(n=400, betas=(1.0,), noise=0, seed=0, censoring=0.25):
    return generate_survival(SynthSpec(n=n, betas=betas, censoring_rate=censoring, seed=seed), noise)


# --- clinical encoding -------------------------------------------------------

def test_encode_clinical_status_coding():
    recs = [
        ClinicalRecord("a", "M", 60.0, tobacco=0.0, hpv_status=None, performance_status=2.0, surgery=1.0),
        ClinicalRecord("b", "F", None, tobacco=1.0, hpv_status=1.0),
        ClinicalRecord("c", None, 70.0),
    ]
    table = encode_clinical(recs)
    row = dict(zip(table.feature_names, table.values[0]))
    assert row["tobacco"] == -1.0
    assert row["hpv_status"] == 0.0
    assert row["performance_status"] == 2.0
    assert row["surgery"] == 1.0
    assert row["gender"] == 1.0
    assert table.column("gender").tolist() == [1.0, -1.0, 0.0]
    assert table.column("age")[1] == 65.0  # median of 60 and 70


def test_encode_clinical_node_stats():
    recs = [ClinicalRecord("a", "M", 60.0), ClinicalRecord("b", "F", 50.0)]
    stats = {"a": NodeStatistics(1, 12.5, 0, 0.0, 0.0, ())}
    table = encode_clinical(recs, stats)
    assert table.column("gtvn_count").tolist() == [0.0, 0.0]
    assert table.column("gtvn_volume_ml").tolist() == [0.0, 0.0]
    assert table.column("gtvp_volume_ml").tolist() == [12.5, 0.0]


def test_encode_clinical_duplicate_ids():
    with pytest.raises(IngestionError):
        encode_clinical([ClinicalRecord("a"), ClinicalRecord("a")])


# --- CV plans ----------------------------------------------------------------

def test_plan_ten_by_five():
    ids = [f"p{i}" for i in range(10)]
    plan = make_cv_plan(ids, k=5, repeats=3, seed=1)
    for folds in plan.assignments:
        assert [len(f) for f in folds] == [2] * 5
        flat = [p for f in folds for p in f]
        assert sorted(flat) == sorted(ids)


def test_plan_sizes_differ_by_at_most_one():
    plan = make_cv_plan(range(23), k=5, repeats=4, seed=0)
    for folds in plan.assignments:
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1


def test_plan_determinism_and_variety():
    ids = [f"p{i:03d}" for i in range(100)]
    a = make_cv_plan(ids, 5, 100, seed=7)
    b = make_cv_plan(list(reversed(ids)), 5, 100, seed=7)
    assert a.assignments == b.assignments
    assert len(set(a.assignments)) > 1


def test_plan_errors():
    with pytest.raises(InvalidArgumentError):
        make_cv_plan(["a", "b"], k=5)
    with pytest.raises(InvalidArgumentError):
        make_cv_plan(["a", "a", "b"], k=2)


def test_stratified_plan_balances_events():
    ids = [f"p{i:02d}" for i in range(50)]
    events = {p: i < 10 for i, p in enumerate(ids)}
    plan = make_cv_plan(ids, 5, 3, seed=0, events=events)
    for folds in plan.assignments:
        assert [sum(events[p] for p in f) for f in folds] == [2] * 5


# --- screening ---------------------------------------------------------------

def test_screen_keeps_true_risk():
    table, recs = cohort(n=400, betas=(1.0,))
    risk = table.column("planted_0")
    t = FeatureTable(table.patient_ids, ["true_risk"], risk[:, None])
    report = univariate_screen(t, recs, make_cv_plan(t.patient_ids, 5, 5, seed=0))
    assert report.ranked_features[0][1] > 0.65
    assert report.retained == ["true_risk"]


def test_screen_negated_risk_scores_like_true_risk():
    # the per-fold Cox fit absorbs the sign, so -risk is as informative as risk
    table, recs = cohort(n=400, betas=(1.0,))
    risk = table.column("planted_0")
    t = FeatureTable(table.patient_ids, ["true_risk", "anti_risk"], np.c_[risk, -risk])
    report = univariate_screen(t, recs, make_cv_plan(t.patient_ids, 5, 5, seed=0))
    scores = dict(report.ranked_features)
    assert scores["anti_risk"] == pytest.approx(scores["true_risk"], abs=1e-12)


def test_screen_drops_below_half():
    table, recs = cohort(n=200, betas=(1.0,), noise=20, seed=1)
    report = univariate_screen(table, recs, make_cv_plan(table.patient_ids, 5, 3, seed=0))
    low = [n for n, c in report.ranked_features if c < 0.5]
    assert low, "expected some noise features below 0.5 on this draw"
    assert [n for n, _ in report.dropped_low_signal] == low
    assert not set(low) & set(report.retained)
    assert "planted_0" in report.retained


def test_screen_invariant_to_column_order():
    table, recs = cohort(n=150, betas=(0.8, -0.4), noise=4, seed=2)
    plan = make_cv_plan(table.patient_ids, 5, 3, seed=0)
    a = univariate_screen(table, recs, plan)
    rev = table.select(list(reversed(table.feature_names)))
    b = univariate_screen(rev, recs, plan)
    assert a.ranked_features == b.ranked_features


def test_screen_drops_constant_columns():
    table, recs = cohort(n=60, noise=1, seed=3)
    t = FeatureTable(table.patient_ids, [*table.feature_names, "const"], np.c_[table.values, np.ones(60)])
    report = univariate_screen(t, recs, make_cv_plan(t.patient_ids, 3, 2, 0))
    assert report.dropped_constant == ["const"]
    assert "const" not in dict(report.ranked_features)


# --- correlation pruning -----------------------------------------------------

def table_of(**cols):
    n = len(next(iter(cols.values())))
    return FeatureTable([f"p{i}" for i in range(n)], list(cols), np.column_stack(list(cols.values())))


def test_prune_duplicate_and_affine():
    rng = np.random.default_rng(0)
    x = rng.normal(size=50)
    y = rng.normal(size=50)
    t = table_of(x=x, dup=x.copy(), aff=2 * x + 3, y=y)
    kept, dropped = correlation_prune(t, ["x", "dup", "aff", "y"])
    assert kept == ["x", "y"]
    assert [(a, b) for a, b, _ in dropped] == [("dup", "x"), ("aff", "x")]
    assert all(r == pytest.approx(1.0, abs=1e-12) for _, _, r in dropped)


def test_prune_independent_columns_survive():
    rng = np.random.default_rng(1)
    cols = {f"f{i}": rng.normal(size=500) for i in range(20)}
    t = table_of(**cols)
    kept, dropped = correlation_prune(t, list(cols))
    assert kept == list(cols) and dropped == []


def test_prune_negative_correlation_and_zero_variance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=40)
    t = table_of(x=x, neg=-x, const=np.zeros(40))
    kept, dropped = correlation_prune(t, ["const", "x", "neg"])
    assert kept == ["const", "x"]
    assert dropped[0][2] == pytest.approx(-1.0, abs=1e-12)


def test_prune_prefix_stability():
    rng = np.random.default_rng(3)
    base = rng.normal(size=(100, 4))
    cols = {
        "a": base[:, 0],
        "b": base[:, 0] + 0.2 * base[:, 1],
        "c": base[:, 2],
        "d": base[:, 2] + 0.1 * base[:, 3],
        "e": base[:, 3],
    }
    t = table_of(**cols)
    ranked = list(cols)
    kept_full, _ = correlation_prune(t, ranked)
    for cut in range(1, len(ranked) + 1):
        kept_prefix, _ = correlation_prune(t, ranked[:cut])
        assert kept_prefix == [n for n in kept_full if n in ranked[:cut]]


def test_prune_rejects_unknown_names():
    with pytest.raises(SchemaError):
        correlation_prune(table_of(x=np.arange(3.0)), ["x", "nope"])


# --- forward selection -------------------------------------------------------

def oracle_mean_c(table, recs, plan, names):
    """Mean validation C of a cold-started Cox fit per plan cell; failures score 0.5."""
    time, event = record_arrays(recs)
    pos = {p: i for i, p in enumerate(table.patient_ids)}
    X = table.columns(names)
    scores = []
    for folds in plan.assignments:
        for fold in folds:
            val = sorted(pos[p] for p in fold)
            train = sorted(set(range(len(recs))) - set(val))
            try:
                model = fit_cox(X[train], (time[train], event[train]))
                scores.append(harrell_c(time[val], event[val], predict_risk(model, X[val])))
            except DegenerateMetricError:
                scores.append(0.5)
    return float(np.mean(scores))


@pytest.mark.parametrize("seed,n", [(0, 200), (1, 400), (3, 400)])
def test_forward_select_matches_exhaustive_oracle(seed, n):
    table, recs = cohort(n=n, betas=(1.0,), noise=9, seed=seed)
    plan = make_cv_plan(table.patient_ids, 5, 3, seed)
    report = forward_select(table, recs, plan, max_features=2)
    best, best_c = exhaustive_best_subset(lambda names: oracle_mean_c(table, recs, plan, names),
                                          table.feature_names, 2)
    assert report.selected[0] == "planted_0"
    assert set(report.selected) == set(best)
    assert report.trace[-1][2] == pytest.approx(best_c, abs=1e-9)


def test_forward_select_single_informative_feature():
    # on this draw the exhaustive oracle itself prefers the lone informative feature
    table, recs = cohort(n=400, betas=(1.0,), noise=9, seed=3)
    plan = make_cv_plan(table.patient_ids, 5, 10, 3)
    best, _ = exhaustive_best_subset(lambda names: oracle_mean_c(table, recs, plan, names),
                                     table.feature_names, 2)
    assert best == ("planted_0",)
    assert forward_select(table, recs, plan, max_features=5).selected == ["planted_0"]


def test_forward_select_cap_and_redundancy():
    table, recs = cohort(n=200, betas=(1.0, 0.7), noise=2, seed=4)
    plan = make_cv_plan(table.patient_ids, 5, 2, 0)
    assert len(forward_select(table, recs, plan, max_features=1).selected) <= 1
    x = table.column("planted_0")
    dup = FeatureTable(table.patient_ids, ["best", "best_copy"], np.c_[x, x])
    report = forward_select(dup, recs, plan, max_features=5)
    assert report.selected == ["best"]


def test_forward_select_empty_candidates():
    table, recs = cohort(n=50, noise=2)
    plan = make_cv_plan(table.patient_ids, 5, 1, 0)
    assert forward_select(table, recs, plan, 5, candidates=[]).selected == []


# --- per-modality model ------------------------------------------------------

def test_modality_model_out_of_fold_and_permutation_invariant():
    table, recs = cohort(n=120, betas=(1.0, -0.7), noise=6, seed=5)
    outer = make_cv_plan(table.patient_ids, 5, 1, 0).assignments[0]
    inner = InnerCV(5, 2, 11)
    res = fit_modality_model(table, recs, outer, inner, max_features=3)
    assert set(res.scores) == set(table.patient_ids)
    assert res.c_index > 0.65
    for f, model in enumerate(res.fold_models):
        assert model is not None and len(model.feature_names) <= 3
        assert res.reports[f].selected == list(model.feature_names)

    perm = np.random.default_rng(0).permutation(len(table))
    ptable = table.subset([table.patient_ids[i] for i in perm])
    precs = [recs[i] for i in perm]
    pres = fit_modality_model(ptable, precs, outer, inner, max_features=3)
    assert pres.scores == res.scores


def test_modality_model_flags_fold_without_events():
    table, recs = cohort(n=30, noise=2, seed=6)
    recs = [SurvivalRecord(r.time, i < 6) for i, r in enumerate(recs)]
    ids = table.patient_ids
    # all six events sit in fold 0, so fold 0's training part has none
    outer = [ids[:6], ids[6:12], ids[12:18], ids[18:24], ids[24:]]
    res = fit_modality_model(table, recs, outer, InnerCV(3, 1, 0), max_features=2)
    assert res.flagged_folds == [0]
    assert all(res.scores[p] == 0.0 for p in ids[:6])


# --- fusion and stratification ----------------------------------------------

def test_fuse_raw_mean():
    r = fuse_risk({"clinical": {"a": 0.1}, "CT": {"a": 0.2}, "PET": {"a": 0.3}}, mode="raw")
    assert r.fused["a"] == pytest.approx(0.2, abs=1e-15)


def test_fuse_no_gtvp_uses_clinical_alone():
    scores = {"clinical": {"a": 1.0, "b": -1.0, "c": 3.0}, "CT": {"a": 5.0, "c": 1.0}, "PET": {"a": 2.0, "c": 0.0}}
    r = fuse_risk(scores, {"a": True, "b": False, "c": True})
    assert r.fused["b"] == r.standardized["clinical"]["b"]
    assert set(r.fused) == {"a", "b", "c"}
    raw = fuse_risk(scores, {"a": True, "b": False, "c": True}, mode="raw")
    assert raw.fused["b"] == -1.0


def test_fuse_identical_modalities():
    s = {"a": 0.5, "b": -1.0, "c": 2.0}
    r = fuse_risk({"clinical": s, "CT": dict(s), "PET": dict(s)})
    for p in s:
        assert r.fused[p] == pytest.approx(r.standardized["clinical"][p], abs=1e-15)


def test_fuse_errors():
    with pytest.raises(SchemaError):
        fuse_risk({"CT": {"a": 1.0}})
    with pytest.raises(SchemaError):
        fuse_risk({"clinical": {"a": 1.0, "b": 0.0}, "CT": {"a": 1.0}})
    with pytest.raises(InvalidArgumentError):
        fuse_risk({"clinical": {"a": 1.0}}, mode="median")


def test_stratify_threshold():
    assert stratify({"a": -0.5, "b": 0.3, "c": 0.0}) == {"a": "low", "b": "high", "c": "low"}


def test_all_low_is_degenerate_not_an_error():
    groups = stratify({"a": -1.0, "b": -2.0})
    recs = {"a": SurvivalRecord(1.0, True), "b": SurvivalRecord(2.0, False)}
    out = evaluate_groups(groups, recs)
    assert out["degenerate"] and out["logrank"] is None
    assert out["n_high"] == 0 and out["n_low"] == 2
