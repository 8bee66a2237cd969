import math

import numpy as np
import pytest

from hncrfs.coxph import (
    CoxModel,
    FitOptions,
    fit_cox,
    negative_log_partial_likelihood,
    nlpl_gradient_hessian,
    predict_risk,
)
from hncrfs.errors import DegenerateDesignError, InvalidArgumentError, NoEventsError, SchemaError
from hncrfs.survstat import SurvivalRecord, concordance_index
from hncrfs.synth import SynthSpec, generate_survival
from oracles import brute_nlpl, central_difference_gradient


def random_instance(rng, n=None, p=None, tied=True):
    n = n or int(rng.integers(5, 31))
    p = p or int(rng.integers(1, 5))
    X = rng.normal(size=(n, p))
    t = rng.integers(1, 8, n).astype(float) if tied else rng.permutation(n) + 1.0
    e = rng.random(n) < 0.7
    e[0] = True
    beta = rng.normal(scale=0.5, size=p)
    return X, t, e, beta


# --- likelihood --------------------------------------------------------------

def test_nlpl_at_zero_is_log_factorial():
    X = np.array([[0.3], [-1.0], [2.0]])
    recs = [SurvivalRecord(t, True) for t in (1.0, 2.0, 3.0)]
    assert negative_log_partial_likelihood(X, recs, [0.0]) == pytest.approx(math.log(6), abs=1e-14)


def test_nlpl_no_events_is_zero():
    X = np.ones((3, 1))
    recs = [SurvivalRecord(t, False) for t in (1.0, 2.0, 3.0)]
    assert negative_log_partial_likelihood(X, recs, [0.7]) == 0.0


@pytest.mark.parametrize("ties", ["efron", "breslow"])
def test_nlpl_matches_textbook_sums(ties):
    rng = np.random.default_rng(11)
    for _ in range(20):
        X, t, e, beta = random_instance(rng)
        got = negative_log_partial_likelihood(X, (t, e), beta, ties)
        assert got == pytest.approx(brute_nlpl(X, t, e, beta, ties), rel=1e-11, abs=1e-11)


def test_efron_equals_breslow_without_ties():
    rng = np.random.default_rng(5)
    X, t, e, beta = random_instance(rng, n=20, p=3, tied=False)
    a = negative_log_partial_likelihood(X, (t, e), beta, "efron")
    b = negative_log_partial_likelihood(X, (t, e), beta, "breslow")
    assert abs(a - b) <= 1e-12


# --- derivatives -------------------------------------------------------------

@pytest.mark.parametrize("ties", ["efron", "breslow"])
def test_gradient_matches_central_differences(ties):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(25):
        X, t, e, beta = random_instance(rng)
        grad, _ = nlpl_gradient_hessian(X, (t, e), beta, ties)
        fd = central_difference_gradient(lambda b: negative_log_partial_likelihood(X, (t, e), b, ties), beta)
        worst = max(worst, float(np.max(np.abs(grad - fd))))
    assert worst <= 1e-6


@pytest.mark.parametrize("ties", ["efron", "breslow"])
def test_hessian_matches_gradient_differences(ties):
    rng = np.random.default_rng(7)
    for _ in range(10):
        X, t, e, beta = random_instance(rng)
        _, hess = nlpl_gradient_hessian(X, (t, e), beta, ties)
        h = 1e-5
        for k in range(len(beta)):
            d = np.zeros_like(beta)
            d[k] = h
            gp, _ = nlpl_gradient_hessian(X, (t, e), beta + d, ties)
            gm, _ = nlpl_gradient_hessian(X, (t, e), beta - d, ties)
            np.testing.assert_allclose(hess[:, k], (gp - gm) / (2 * h), atol=1e-6)
        assert np.array_equal(hess, hess.T)
        # the NLPL is convex
        assert np.linalg.eigvalsh(hess).min() >= -1e-10


def test_binary_gradient_formula_at_zero():
    # gradient = -(events in group 1 - sum over events of group-1 share of the risk set)
    x = np.array([1, 0, 1, 0, 1, 0], float)
    t = np.array([1, 2, 3, 4, 5, 6], float)
    e = np.array([1, 1, 0, 1, 1, 0], bool)
    grad, _ = nlpl_gradient_hessian(x[:, None], (t, e), [0.0], "breslow")
    observed = sum(x[i] for i in range(6) if e[i])
    expected = sum(x[t >= t[i]].mean() for i in range(6) if e[i])
    assert grad[0] == pytest.approx(-(observed - expected), abs=1e-14)


# --- fitting -----------------------------------------------------------------

def test_fit_recovers_hazard_ratio_two():
    table, recs = generate_survival(SynthSpec(n=2000, betas=(math.log(2),), seed=1, binary=True))
    model = fit_cox(table.values, recs)
    assert model.converged
    assert abs(model.beta[0] - math.log(2)) <= 0.1 * math.log(2)


def test_fit_is_stationary_point():
    table, recs = generate_survival(SynthSpec(n=300, betas=(0.8, -0.5), censoring_rate=0.3, seed=4),
                                    n_noise_features=1)
    model = fit_cox(table.values, recs)
    grad, _ = nlpl_gradient_hessian(table.values, recs, model.beta)
    assert np.max(np.abs(grad)) < 1e-5


def test_standardize_on_and_off_agree():
    table, recs = generate_survival(SynthSpec(n=300, betas=(0.8, -0.5), censoring_rate=0.3, seed=4))
    a = fit_cox(table.values, recs, FitOptions(standardize=True))
    b = fit_cox(table.values, recs, FitOptions(standardize=False))
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-6)


def test_column_scaling_rescales_beta():
    table, recs = generate_survival(SynthSpec(n=300, betas=(0.7,), censoring_rate=0.2, seed=9),
                                    n_noise_features=1)
    X = table.values
    a = fit_cox(X, recs)
    scaled = X * np.array([10.0, 1.0])
    b = fit_cox(scaled, recs)
    assert b.beta[0] == pytest.approx(a.beta[0] / 10, abs=1e-6)
    ra, rb = predict_risk(a, X), predict_risk(b, scaled)
    np.testing.assert_allclose(ra, rb, atol=1e-6)
    assert concordance_index(recs, ra) == concordance_index(recs, rb)


def test_fit_is_deterministic():
    table, recs = generate_survival(SynthSpec(n=200, betas=(0.5, 0.5), censoring_rate=0.3, seed=2))
    a = fit_cox(table.values, recs)
    b = fit_cox(table.values.copy(), list(recs))
    assert np.array_equal(a.beta, b.beta)


def test_fit_errors():
    recs = [SurvivalRecord(float(t), True) for t in range(1, 6)]
    with pytest.raises(DegenerateDesignError):
        fit_cox(np.c_[np.arange(5.0), np.zeros(5)], recs)
    with pytest.raises(NoEventsError):
        fit_cox(np.arange(5.0)[:, None], [SurvivalRecord(r.time, False) for r in recs])
    with pytest.raises(InvalidArgumentError):
        FitOptions(tie_method="exact")


def test_separable_data_does_not_crash():
    # perfectly separated: the MLE diverges; the fit must stop gracefully
    x = np.arange(10.0)[:, None]
    recs = [SurvivalRecord(float(10 - i), True) for i in range(10)]
    model = fit_cox(x, recs, FitOptions(max_iterations=30))
    assert np.all(np.isfinite(model.beta))
    assert concordance_index(recs, predict_risk(model, x)) == 1.0


# --- prediction --------------------------------------------------------------

def test_predict_risk_dot_product():
    m = CoxModel(("a",), [2.0])
    assert predict_risk(m, np.array([[1.5]]))[0] == 3.0
    zero = CoxModel(("a", "b"), [0.0, 0.0])
    assert np.all(predict_risk(zero, np.ones((4, 2))) == 0.0)


def test_predict_risk_ranking_matches_hazard_ratio():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    m = CoxModel(("a", "b", "c"), [0.3, -1.0, 0.2])
    r = predict_risk(m, X)
    assert np.array_equal(np.argsort(r), np.argsort(np.exp(X @ m.beta)))


def test_predict_risk_schema_checks():
    m = CoxModel(("a", "b"), [1.0, 2.0])
    with pytest.raises(SchemaError):
        predict_risk(m, np.ones((3, 3)))
    with pytest.raises(SchemaError):
        predict_risk(m, np.ones((3, 2)), feature_names=("b", "a"))
