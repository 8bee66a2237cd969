"""Cox proportional-hazards regression fitted by damped Newton iterations.

The negative log partial likelihood (NLPL) and its exact derivatives are
computed in one vectorised pass over subjects sorted by time. Tied event
times use the Efron approximation by default; Breslow is available.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    CoxOverflowError,
    DegenerateDesignError,
    InvalidArgumentError,
    NoEventsError,
    SchemaError,
)
from .survstat import SurvivalRecord, record_arrays

__all__ = [
    "CoxModel",
    "FitOptions",
    "negative_log_partial_likelihood",
    "nlpl_gradient_hessian",
    "fit_cox",
    "fit_cox_arrays",
    "predict_risk",
    "RiskSetLayout",
]

TIE_METHODS = ("efron", "breslow")


@dataclass(frozen=True)
class FitOptions:
    tie_method: str = "efron"
    gradient_tolerance: float = 1e-7
    max_iterations: int = 100
    ridge_jitter: float = 1e-8
    standardize: bool = True
    max_halvings: int = 20

    def __post_init__(self):
        if self.tie_method not in TIE_METHODS:
            raise InvalidArgumentError(f"tie_method must be one of {TIE_METHODS}")
        if not self.gradient_tolerance > 0:
            raise InvalidArgumentError("gradient_tolerance must be > 0")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")
        if self.ridge_jitter < 0:
            raise InvalidArgumentError("ridge_jitter must be >= 0")


@dataclass(frozen=True)
class CoxModel:
    """Fitted coefficients in the original feature scale.

    ``center`` holds the training means; risk scores are ``(x - center) @ beta``
    so that an average training patient scores 0. A hand-built model has a
    zero center and scores plain ``x @ beta``.
    """

    feature_names: tuple
    beta: np.ndarray
    converged: bool = True
    iterations: int = 0
    final_nlpl: float = float("nan")
    center: np.ndarray | None = field(default=None)

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if len(beta) != len(self.feature_names):
            raise SchemaError("beta length must equal the number of feature names")
        center = np.zeros_like(beta) if self.center is None else np.asarray(self.center, dtype=float)
        if center.shape != beta.shape:
            raise SchemaError("center length must equal the number of feature names")
        object.__setattr__(self, "center", center)


class RiskSetLayout:
    """Ordering and tie structure of one ``(time, event)`` sample.

    Subjects are sorted by descending time, so the risk set of an event is a
    prefix ending at the last subject sharing its time. Tied events are
    contiguous runs in this order.
    """

    def __init__(self, time, event):
        time = np.asarray(time, dtype=float)
        event = np.asarray(event, dtype=bool)
        order = np.argsort(-time, kind="stable")
        t = time[order]
        e = event[order]
        self.order = order
        self.n = len(t)
        last_of_tie = np.searchsorted(-t, -t, side="right") - 1
        ev_pos = np.flatnonzero(e)
        m = len(ev_pos)
        self.n_events = m
        self.ev_pos = ev_pos
        self.ev_riskend = last_of_tie[ev_pos]
        ev_times = t[ev_pos]
        starts = np.r_[0, np.flatnonzero(np.diff(ev_times)) + 1] if m else np.zeros(0, dtype=int)
        sizes = np.diff(np.r_[starts, m]).astype(int)
        self.group_starts = starts
        self.group_of_event = np.repeat(np.arange(len(starts)), sizes)
        self.group_size = sizes
        self.has_ties = bool(np.any(sizes > 1))
        rank = np.arange(m) - np.repeat(starts, sizes)
        # Efron weight l/d for the l-th of d tied events
        self.efron_frac = rank / np.repeat(sizes, sizes) if m else np.zeros(0)


def _prepare(X, records):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if isinstance(records, tuple) and len(records) == 2 and not isinstance(records[0], SurvivalRecord):
        time, event = (np.asarray(records[0], dtype=float), np.asarray(records[1], dtype=bool))
    else:
        time, event = record_arrays(records)
    if X.shape[0] != len(time):
        raise SchemaError(f"X has {X.shape[0]} rows but {len(time)} records were given")
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("X contains non-finite entries")
    return X, time, event


def _evaluate(X, layout: RiskSetLayout, beta, ties, order=2):
    # overflow surfaces as non-finite output, which _evaluate_raw turns into CoxOverflowError
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _evaluate_raw(X, layout, beta, ties, order)


def _evaluate_raw(X, layout: RiskSetLayout, beta, ties, order=2):
    """NLPL and, for ``order=2``, its gradient and Hessian.

    ``X`` must already be in layout (descending time) order. Sums over risk
    sets are rewritten as per-subject weights: subject ``j`` contributes to
    every event whose risk set contains it, so
    ``sum_i S2_i / D_i = X^T diag(w * c) X`` with ``c_j = sum_{i: j in R_i} 1/D_i``.
    """
    p = X.shape[1]
    if layout.n_events == 0:
        return 0.0, np.zeros(p), np.zeros((p, p))
    eta = X @ beta
    shift = eta.max()
    if not np.isfinite(shift):
        raise CoxOverflowError("non-finite linear predictor; standardize X")
    w = np.exp(eta - shift)

    ev = layout.ev_pos
    end = layout.ev_riskend
    s0 = np.cumsum(w)[end]
    efron = ties == "efron" and layout.has_ties
    if efron:
        frac = layout.efron_frac
        d0 = np.add.reduceat(w[ev], layout.group_starts)[layout.group_of_event]
        denom = s0 - frac * d0
    else:
        denom = s0
    if not np.all(denom > 0):
        raise CoxOverflowError("risk-set weight underflow; standardize X")

    log_denom = np.log(denom)
    nlpl = float(log_denom.sum() - (eta[ev] - shift).sum())
    if not np.isfinite(nlpl):
        raise CoxOverflowError("non-finite partial likelihood; standardize X")
    if order == 0:
        return nlpl, None, None

    inv = 1.0 / denom
    coef = np.cumsum(np.bincount(end, weights=inv, minlength=layout.n)[::-1])[::-1]
    wx = w[:, None] * X
    s1 = np.cumsum(wx, axis=0)[end]
    if efron:
        group_frac_inv = np.add.reduceat(frac * inv, layout.group_starts)
        coef[ev] -= group_frac_inv[layout.group_of_event]
        d1 = np.add.reduceat(wx[ev], layout.group_starts, axis=0)[layout.group_of_event]
        s1 = s1 - frac[:, None] * d1
    a = s1 * inv[:, None]
    wc = w * coef
    grad = X.T @ wc - X[ev].sum(axis=0)
    hess = (X * wc[:, None]).T @ X - a.T @ a
    hess = 0.5 * (hess + hess.T)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise CoxOverflowError("non-finite partial likelihood derivatives; standardize X")
    return nlpl, grad, hess


def negative_log_partial_likelihood(X, records, beta, ties: str = "efron") -> float:
    """Cox NLPL with Efron or Breslow handling of tied event times."""
    X, time, event = _prepare(X, records)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape != (X.shape[1],):
        raise SchemaError("beta length must match the number of columns of X")
    layout = RiskSetLayout(time, event)
    return _evaluate(X[layout.order], layout, beta, ties, order=0)[0]


def nlpl_gradient_hessian(X, records, beta, ties: str = "efron"):
    """Exact gradient and Hessian of the NLPL at ``beta``."""
    X, time, event = _prepare(X, records)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape != (X.shape[1],):
        raise SchemaError("beta length must match the number of columns of X")
    layout = RiskSetLayout(time, event)
    _, grad, hess = _evaluate(X[layout.order], layout, beta, ties)
    return grad, hess


def fit_cox(X, records, options: FitOptions | None = None, feature_names: Sequence[str] | None = None) -> CoxModel:
    """Maximise the partial likelihood by Newton's method with step halving.

    Parameters
    ----------
    X : array_like, shape (n, p)
        Covariates, one row per record.
    records : sequence of SurvivalRecord or ``(time, event)`` arrays
    options : FitOptions, optional
    feature_names : sequence of str, optional
        Defaults to ``x0, x1, ...``.

    Returns
    -------
    CoxModel
        ``converged`` is False when the gradient tolerance was not reached
        within ``max_iterations``; this is not an error.

    Raises
    ------
    NoEventsError
        No record has an event.
    DegenerateDesignError
        A column of ``X`` is constant.
    """
    X, time, event = _prepare(X, records)
    return fit_cox_arrays(X, time, event, options, feature_names)


def fit_cox_arrays(X, time, event, options=None, feature_names=None, layout=None, init=None) -> CoxModel:
    """Array form of :func:`fit_cox`.

    ``layout`` may be a cached :class:`RiskSetLayout` for the same
    ``(time, event)``; ``init`` is a starting ``beta`` in original scale.
    """
    options = options or FitOptions()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if feature_names is None:
        feature_names = [f"x{i}" for i in range(p)]
    if len(feature_names) != p:
        raise SchemaError("feature_names length must equal the number of columns")
    if not np.any(event):
        raise NoEventsError("no events observed; partial likelihood is empty")

    mean = X.mean(axis=0)
    spread = X.std(axis=0)
    constant = spread <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if np.any(constant):
        bad = [feature_names[i] for i in np.flatnonzero(constant)]
        raise DegenerateDesignError(f"constant column(s): {bad}")

    scale = spread if options.standardize else np.ones(p)
    Z = (X - mean) / scale

    if layout is None:
        layout = RiskSetLayout(np.asarray(time, dtype=float), np.asarray(event, dtype=bool))
    Z = Z[layout.order]
    ties = options.tie_method

    beta = np.zeros(p) if init is None else np.asarray(init, dtype=float) * scale
    try:
        nlpl, grad, hess = _evaluate(Z, layout, beta, ties)
    except CoxOverflowError:
        if init is None:
            raise
        beta = np.zeros(p)
        nlpl, grad, hess = _evaluate(Z, layout, beta, ties)
    converged = False
    iterations = 0
    # gradient tolerance applies in the original feature scale
    while True:
        if np.max(np.abs(grad / scale)) <= options.gradient_tolerance:
            converged = True
            break
        if iterations >= options.max_iterations:
            break
        iterations += 1
        step = _newton_step(hess, grad, options.ridge_jitter)
        accepted = False
        t = 1.0
        for _ in range(options.max_halvings + 1):
            candidate = beta - t * step
            try:
                new_nlpl, new_grad, new_hess = _evaluate(Z, layout, candidate, ties)
            except CoxOverflowError:
                t *= 0.5
                continue
            if new_nlpl <= nlpl:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        progress = nlpl - new_nlpl
        beta, nlpl, grad, hess = candidate, new_nlpl, new_grad, new_hess
        if progress == 0.0 and np.max(np.abs(grad / scale)) > options.gradient_tolerance:
            # stalled at floating-point resolution (e.g. monotone likelihood)
            break

    return CoxModel(
        feature_names=tuple(feature_names),
        beta=beta / scale,
        converged=converged,
        iterations=iterations,
        final_nlpl=nlpl,
        center=mean,
    )


def _newton_step(hess, grad, jitter):
    p = len(grad)
    eye = np.eye(p)
    ridge = 0.0
    for _ in range(30):
        try:
            chol = np.linalg.cholesky(hess + ridge * eye)
        except np.linalg.LinAlgError:
            ridge = jitter if ridge == 0.0 else ridge * 10.0
            if jitter == 0.0 and ridge == 0.0:
                ridge = 1e-12
            continue
        y = np.linalg.solve(chol, grad)
        return np.linalg.solve(chol.T, y)
    return grad


def predict_risk(model: CoxModel, X, feature_names: Sequence[str] | None = None) -> np.ndarray:
    """Linear predictor per row of ``X``; no baseline hazard is applied."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if len(model.beta) == 1 else X[None, :]
    if X.shape[1] != len(model.beta):
        raise SchemaError(f"X has {X.shape[1]} columns, model expects {len(model.beta)}")
    if feature_names is not None and tuple(feature_names) != model.feature_names:
        raise SchemaError(f"feature order {tuple(feature_names)} does not match model {model.feature_names}")
    return (X - model.center) @ model.beta
