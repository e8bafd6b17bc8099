"""Cox proportional-hazards fits on cluster-volume profiles."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .clustering import ClusterProfile
from .dataio import EmbeddingSet
from .exceptions import DataError, NumericalError

logger = logging.getLogger(__name__)


@dataclass
class CoxModel:
    """Fitted Cox model.

    ``columns`` indexes the design columns that entered the fit; ``beta`` is
    aligned with it. ``hr_per_sd`` is ``exp(sd(X @ beta))`` with the
    population standard deviation over the fitted subjects.
    """

    beta: np.ndarray
    hr_per_sd: float
    log_partial_likelihood: float
    n_events: int
    n_censored: int
    converged: bool
    iterations: int
    columns: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    identifiable: bool = True
    ridge: float = 0.0

    @property
    def hazard_ratios(self) -> np.ndarray:
        return np.exp(self.beta)

    def risk_score(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X[:, self.columns] @ self.beta


def _risk_groups(times, events):
    """Sort order plus, per distinct event time, the event rows and the risk-set start."""
    order = np.argsort(times, kind="stable")
    t = times[order]
    e = events[order]
    uniq, first = np.unique(t, return_index=True)
    groups = []
    for u, start in zip(uniq, first):
        stop = np.searchsorted(t, u, side="right")
        ev = np.flatnonzero(e[start:stop]) + start
        if ev.size:
            groups.append((int(start), ev))
    return order, groups


def partial_likelihood(beta, X, times, events, ridge: float = 0.0, derivatives: bool = True):
    """Breslow log partial likelihood minus ``ridge/2 * |beta|^2``.

    Returns ``(value, gradient, hessian)``; with ``derivatives=False`` only
    the value.
    """
    beta = np.asarray(beta, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    order, groups = _risk_groups(times, events)
    Xs = X[order]
    eta = Xs @ beta
    shift = eta.max() if eta.size else 0.0
    w = np.exp(eta - shift)
    # reverse cumulative sums give risk-set totals from each sorted position on
    s0 = np.cumsum(w[::-1])[::-1]
    value = -0.5 * ridge * beta @ beta
    for start, ev in groups:
        value += eta[ev].sum() - ev.size * (np.log(s0[start]) + shift)
    if not derivatives:
        return float(value)
    p = X.shape[1]
    s1 = np.cumsum((w[:, None] * Xs)[::-1], axis=0)[::-1]
    s2 = np.cumsum((w[:, None, None] * Xs[:, :, None] * Xs[:, None, :])[::-1], axis=0)[::-1]
    grad = -ridge * beta
    hess = -ridge * np.eye(p)
    for start, ev in groups:
        mean = s1[start] / s0[start]
        grad += Xs[ev].sum(axis=0) - ev.size * mean
        hess -= ev.size * (s2[start] / s0[start] - np.outer(mean, mean))
    return float(value), grad, hess


def _check_survival(X, times, events):
    X = check_array(X, dtype=np.float64, ensure_min_samples=2)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    events = np.asarray(events).reshape(-1)
    if times.shape[0] != X.shape[0] or events.shape[0] != X.shape[0]:
        raise DataError("times and events need one entry per subject")
    if not np.all(np.isfinite(times)) or np.any(times <= 0):
        raise DataError("survival times must be finite and positive")
    if not np.all(np.isin(events, (0, 1))):
        raise DataError("events must be 0 or 1")
    return X, times, events.astype(np.int64)


def profile_matrix(profiles: Sequence[ClusterProfile]) -> np.ndarray:
    """Stack profiles and drop the last simplex column (fractions sum to one)."""
    F = np.vstack([p.fractions for p in profiles])
    return F[:, :-1]


def cox_fit(
    X,
    times,
    events,
    ridge: float = 1e-4,
    max_iter: int = 100,
    grad_tol: float = 1e-8,
    step_tol: float = 1e-10,
    strict: bool = False,
) -> CoxModel:
    """Ridge-penalised Cox fit by Newton-Raphson with step halving.

    Parameters
    ----------
    X : array (n, p) or list of ClusterProfile
        Covariates. Profiles lose one simplex-redundant column first.
        Constant columns are dropped; if none remain the model is flagged
        non-identifiable with ``beta`` empty and ``hr_per_sd = 1``.
    times, events : array (n,)
        Follow-up times and event indicators.
    strict : bool
        Raise ``NumericalError`` instead of flagging non-convergence.
    """
    if len(X) and isinstance(X[0], ClusterProfile):
        X = profile_matrix(X)
    X, times, events = _check_survival(X, times, events)
    n_events = int(events.sum())
    if n_events == 0:
        raise DataError("no events")
    if n_events < 2:
        raise DataError("at least two events required")
    n = X.shape[0]
    keep = np.flatnonzero(np.ptp(X, axis=0) > 0)
    base = dict(n_events=n_events, n_censored=int(n - n_events), columns=keep, ridge=ridge)
    if keep.size == 0:
        logger.warning("all covariates constant: model not identifiable")
        ll = partial_likelihood(np.zeros(0), X[:, :0], times, events, ridge, derivatives=False)
        return CoxModel(np.zeros(0), 1.0, ll, converged=False, iterations=0, identifiable=False, **base)
    Xk = X[:, keep]

    beta = np.zeros(keep.size)
    value, grad, hess = partial_likelihood(beta, Xk, times, events, ridge)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) / n < grad_tol:
            converged = True
            it -= 1
            break
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular information matrix at iteration {it}") from exc
        if not np.all(np.isfinite(step)):
            raise NumericalError(f"non-finite Newton step at iteration {it}")
        scale = 1.0
        for _ in range(60):
            cand = beta + scale * step
            cv = partial_likelihood(cand, Xk, times, events, ridge, derivatives=False)
            if np.isfinite(cv) and cv >= value - 1e-12 * abs(value):
                break
            scale /= 2
        else:
            raise NumericalError(f"step halving failed at iteration {it}")
        rel = np.linalg.norm(scale * step) / max(np.linalg.norm(beta), 1.0)
        beta = cand
        value, grad, hess = partial_likelihood(beta, Xk, times, events, ridge)
        if rel < step_tol or np.max(np.abs(grad)) / n < grad_tol:
            converged = True
            break
    if not converged:
        msg = f"Cox fit did not converge in {max_iter} iterations (max|score|/n={np.max(np.abs(grad)) / n:.3e})"
        if strict:
            raise NumericalError(msg)
        logger.warning(msg)
    lp = Xk @ beta
    return CoxModel(beta, float(np.exp(lp.std())), value, converged=converged, iterations=it, **base)


def survival_table(emb: EmbeddingSet):
    """Per-patient ``(patient_ids, times, events)`` in patient-vocabulary order.

    Every record of a patient must carry the same outcome.
    """
    if not emb.has_survival.any():
        raise DataError("embedding set carries no survival outcomes")
    codes = emb.codes("patient_id")
    pats = emb.patient_vocab
    t = np.empty(len(pats))
    e = np.empty(len(pats), dtype=np.int64)
    for p, name in enumerate(pats):
        rows = codes == p
        tt, ee = emb.survival_time[rows], emb.event[rows]
        if np.any(np.isnan(tt)) or np.any(ee < 0):
            raise DataError(f"patient {name} lacks survival fields")
        if np.ptp(tt) > 0 or np.ptp(ee) > 0:
            raise DataError(f"patient {name} has inconsistent survival fields across records")
        t[p], e[p] = tt[0], ee[0]
    return pats, t, e


@dataclass
class HRRow:
    k: int
    embedding: str
    hr_per_sd: float
    converged: bool


def hr_report(rows: Sequence[HRRow], path=None) -> list[list]:
    """Tabulate per-k hazard ratios; written as CSV when ``path`` is given."""
    if not rows:
        raise DataError("hr_report needs at least one model")
    table = [["k", "embedding", "hr_per_sd", "converged"]]
    table += [[r.k, r.embedding, repr(float(r.hr_per_sd)), int(bool(r.converged))] for r in rows]
    if path is not None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(table)
    return table


class CoxPH(BaseEstimator):
    """Cox model estimator; ``y`` is an ``(n, 2)`` array of (time, event)."""

    def __init__(self, ridge=1e-4, max_iter=100):
        self.ridge = ridge
        self.max_iter = max_iter

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != 2:
            raise DataError("y must be (n, 2): time, event")
        self.model_ = cox_fit(X, y[:, 0], y[:, 1].astype(np.int64), self.ridge, self.max_iter)
        self.coef_ = np.zeros(X.shape[1])
        self.coef_[self.model_.columns] = self.model_.beta
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        """Linear risk score."""
        check_is_fitted(self, "model_")
        return check_array(X, dtype=np.float64) @ self.coef_

    def score(self, X, y):
        """Harrell's concordance index."""
        y = np.asarray(y, dtype=np.float64)
        return concordance_index(y[:, 0], y[:, 1], self.predict(X))


def concordance_index(times, events, risk) -> float:
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    risk = np.asarray(risk, dtype=np.float64)
    num = den = 0.0
    for i in np.flatnonzero(events):
        later = times > times[i]
        den += later.sum()
        num += (risk[i] > risk[later]).sum() + 0.5 * (risk[i] == risk[later]).sum()
    if den == 0:
        raise DataError("no comparable pairs")
    return float(num / den)
