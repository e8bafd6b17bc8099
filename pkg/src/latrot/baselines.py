"""Linear harmonization baselines: empirical-Bayes ComBat and closed-form CORAL."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataio import EmbeddingSet
from .exceptions import DataError, NumericalError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# ComBat
# ---------------------------------------------------------------------------

@dataclass
class CombatModel:
    """Fitted ComBat parameters.

    Attributes
    ----------
    batches : list of str
        Batch labels in row order of the per-batch arrays.
    grand_mean, var_pooled : ndarray (d,)
        Standardisation parameters.
    beta_cov : ndarray (c, d)
        Covariate effects, zero rows when no covariates were given.
    gamma_hat, delta_hat : ndarray (n_batches, d)
        Per-batch location and scale estimates before shrinkage.
    gamma_star, delta_star : ndarray (n_batches, d)
        Empirical-Bayes posterior estimates used for adjustment.
    passthrough : ndarray of bool (d,)
        Zero-variance features left untouched.
    """

    batches: list
    grand_mean: np.ndarray
    var_pooled: np.ndarray
    beta_cov: np.ndarray
    gamma_hat: np.ndarray
    delta_hat: np.ndarray
    gamma_star: np.ndarray
    delta_star: np.ndarray
    passthrough: np.ndarray
    iterations: int = 0


def _posterior_location(g_hat, g_bar, t2, delta, n):
    return (n * t2 * g_hat + delta * g_bar) / (n * t2 + delta)


def _posterior_scale(s, g_star, a, b, n):
    ss = ((s - g_star) ** 2).sum(axis=0)
    return (0.5 * ss + b) / (n / 2.0 + a - 1.0)


def _inverse_gamma_prior(delta_hat):
    m, v = delta_hat.mean(), delta_hat.var(ddof=1)
    return (2 * v + m ** 2) / v, (m * v + m ** 3) / v


def _eb_batch(s, g_hat, d_hat, tol, max_iter):
    """Iterative conditional posterior updates for one batch (vectorised over features)."""
    n = s.shape[0]
    if g_hat.size < 2:
        return g_hat.copy(), d_hat.copy(), 0
    g_bar, t2 = g_hat.mean(), g_hat.var(ddof=1)
    v = d_hat.var(ddof=1)
    if not (t2 > 0 and v > 0):
        return g_hat.copy(), d_hat.copy(), 0
    a, b = _inverse_gamma_prior(d_hat)
    g_old, d_old = g_hat.copy(), d_hat.copy()
    for it in range(1, max_iter + 1):
        g_new = _posterior_location(g_hat, g_bar, t2, d_old, n)
        d_new = _posterior_scale(s, g_new, a, b, n)
        change = max(
            np.max(np.abs(g_new - g_old) / np.maximum(np.abs(g_old), 1e-300)),
            np.max(np.abs(d_new - d_old) / d_old),
        )
        g_old, d_old = g_new, d_new
        if change < tol:
            return g_new, d_new, it
    logger.warning("ComBat EB updates stopped after %d iterations", max_iter)
    return g_old, d_old, max_iter


def _design(batch_codes, n_batches, covariates):
    onehot = np.eye(n_batches)[batch_codes]
    return onehot if covariates is None else np.hstack([onehot, covariates])


def _check_covariates(covariates, n):
    if covariates is None:
        return None
    c = np.asarray(covariates, dtype=np.float64)
    if c.ndim == 1:
        c = c[:, None]
    if c.shape[0] != n or not np.all(np.isfinite(c)):
        raise DataError("covariates must be a finite (n, c) array")
    return c


def combat_fit(
    X,
    batch,
    covariates=None,
    empirical_bayes: bool = True,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> CombatModel:
    """Estimate ComBat location/scale parameters on ``X``.

    Features are standardised after regressing out batch indicators and
    covariates; per-batch means and variances of the standardised data are
    shrunk with a normal prior on location and an inverse-gamma prior on
    scale, with hyperparameters matched to the across-feature moments.
    """
    X = check_array(X, dtype=np.float64)
    batch = np.asarray(batch).astype(str)
    if batch.shape[0] != X.shape[0]:
        raise DataError("one batch label per row required")
    names, codes = np.unique(batch, return_inverse=True)
    counts = np.bincount(codes, minlength=names.size)
    if names.size < 2:
        raise DataError("ComBat needs at least two batches")
    if counts.min() < 2:
        raise DataError(f"batch {names[np.argmin(counts)]} has fewer than two samples")
    cov = _check_covariates(covariates, X.shape[0])
    n, d = X.shape
    nb = names.size

    design = _design(codes, nb, cov)
    coef, *_ = np.linalg.lstsq(design, X, rcond=None)
    grand_mean = (counts / n) @ coef[:nb]
    beta_cov = coef[nb:] if cov is not None else np.zeros((0, d))
    resid = X - design @ coef
    var_pooled = (resid ** 2).mean(axis=0)
    passthrough = var_pooled <= 1e-300
    if passthrough.any():
        warnings.warn(f"{int(passthrough.sum())} zero-variance feature(s) passed through unchanged", RuntimeWarning)
    sd = np.sqrt(np.where(passthrough, 1.0, var_pooled))

    stand_mean = grand_mean + (cov @ beta_cov if cov is not None else 0.0)
    s = (X - stand_mean) / sd
    live = ~passthrough
    g_hat = np.zeros((nb, d))
    d_hat = np.ones((nb, d))
    g_star = np.zeros((nb, d))
    d_star = np.ones((nb, d))
    iters = 0
    for j in range(nb):
        sj = s[codes == j][:, live]
        g_hat[j, live] = sj.mean(axis=0)
        d_hat[j, live] = sj.var(axis=0, ddof=1)
        if empirical_bayes:
            g, dl, it = _eb_batch(sj, g_hat[j, live], d_hat[j, live], tol, max_iter)
            iters = max(iters, it)
        else:
            g, dl = g_hat[j, live], d_hat[j, live]
        g_star[j, live], d_star[j, live] = g, dl
    if np.any(d_star[:, live] <= 0):
        raise NumericalError("non-positive ComBat scale estimate (constant feature within a batch)")
    return CombatModel(list(names), grand_mean, var_pooled, beta_cov, g_hat, d_hat, g_star, d_star, passthrough, iters)


def combat_apply(model: CombatModel, X, batch, covariates=None, chunk: int = 50000) -> np.ndarray:
    """Adjust ``X`` with fitted parameters, processed in row chunks."""
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != model.grand_mean.shape[0]:
        raise DataError(f"expected {model.grand_mean.shape[0]} features, got {X.shape[1]}")
    batch = np.asarray(batch).astype(str)
    lookup = {b: i for i, b in enumerate(model.batches)}
    unknown = sorted(set(batch.tolist()) - set(lookup))
    if unknown:
        raise DataError(f"batches {unknown} were not seen at fit time")
    codes = np.array([lookup[b] for b in batch], dtype=np.int64)
    cov = _check_covariates(covariates, X.shape[0])
    if (cov is None) != (model.beta_cov.shape[0] == 0):
        raise DataError("covariates must be given at apply time iff they were given at fit time")
    live = ~model.passthrough
    sd = np.sqrt(np.where(live, model.var_pooled, 1.0))
    out = X.copy()
    for start in range(0, X.shape[0], chunk):
        sl = slice(start, start + chunk)
        stand = model.grand_mean + (cov[sl] @ model.beta_cov if cov is not None else 0.0)
        s = (X[sl] - stand) / sd
        c = codes[sl]
        adj = (s - model.gamma_star[c]) / np.sqrt(model.delta_star[c]) * sd + stand
        out[sl, live] = adj[:, live]
    return out


def combat_fit_apply(
    X,
    batch,
    covariates=None,
    fit_fraction: float = 0.2,
    chunk: int = 50000,
    seed: int = 0,
    empirical_bayes: bool = True,
) -> np.ndarray:
    """Fit ComBat on a seeded per-batch subsample and harmonise all rows.

    A single batch is returned unchanged.
    """
    X = check_array(X, dtype=np.float64)
    batch = np.asarray(batch).astype(str)
    names = np.unique(batch)
    if names.size < 2:
        return X.copy()
    if not 0 < fit_fraction <= 1:
        raise DataError("fit_fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    rows = []
    for b in names:
        idx = np.flatnonzero(batch == b)
        take = min(idx.size, max(2, int(round(fit_fraction * idx.size))))
        rows.append(np.sort(rng.choice(idx, size=take, replace=False)) if take < idx.size else idx)
    rows = np.concatenate(rows)
    cov = _check_covariates(covariates, X.shape[0])
    model = combat_fit(X[rows], batch[rows], None if cov is None else cov[rows], empirical_bayes)
    return combat_apply(model, X, batch, cov, chunk)


# ---------------------------------------------------------------------------
# CORAL
# ---------------------------------------------------------------------------

@dataclass
class CoralTransform:
    whiten: np.ndarray
    recolor: np.ndarray
    mean_source: np.ndarray
    mean_target: np.ndarray
    eps: float

    @property
    def A(self) -> np.ndarray:
        return self.whiten @ self.recolor


def _sym_power(C, p):
    w, V = np.linalg.eigh(C)
    if np.any(w <= 0):
        raise NumericalError("covariance not positive definite after regularisation")
    return (V * w ** p) @ V.T


def coral_fit(source, target, eps: float = 1e-5) -> CoralTransform:
    """Closed-form whitening and recolouring from ``source`` to ``target`` statistics."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.ndim != 2 or target.ndim != 2 or source.shape[1] != target.shape[1]:
        raise DataError("source and target must be 2-D with equal feature counts")
    if source.shape[0] < 2 or target.shape[0] < 2:
        raise DataError("CORAL needs at least two rows in source and target")
    d = source.shape[1]
    cs = np.cov(source, rowvar=False).reshape(d, d) + eps * np.eye(d)
    ct = np.cov(target, rowvar=False).reshape(d, d) + eps * np.eye(d)
    if not (np.all(np.isfinite(cs)) and np.all(np.isfinite(ct))):
        raise NumericalError("non-finite covariance")
    return CoralTransform(_sym_power(cs, -0.5), _sym_power(ct, 0.5), source.mean(axis=0), target.mean(axis=0), eps)


def coral_apply(t: CoralTransform, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != t.mean_source.shape[0]:
        raise DataError(f"expected {t.mean_source.shape[0]} features, got shape {X.shape}")
    return (X - t.mean_source) @ t.A + t.mean_target


# ---------------------------------------------------------------------------
# EmbeddingSet helpers and estimators
# ---------------------------------------------------------------------------

def harmonize(emb: EmbeddingSet, method: str, seed: int = 0, **kw) -> EmbeddingSet:
    """Harmonise an embedding set across protocols.

    ``combat`` treats the protocol as batch. ``coral`` maps every other
    protocol onto the first protocol's statistics.
    """
    X = emb.vectors
    if method == "combat":
        Y = combat_fit_apply(X, emb.protocol_id, seed=seed, **kw)
    elif method == "coral":
        vocab = emb.protocol_vocab
        Y = X.copy()
        ref = emb.protocol_id == vocab[0]
        for p in vocab[1:]:
            rows = emb.protocol_id == p
            Y[rows] = coral_apply(coral_fit(X[rows], X[ref], **kw), X[rows])
    else:
        raise DataError(f"unknown harmonization method {method!r}")
    return emb.with_vectors(Y)


class ComBatHarmonizer(TransformerMixin, BaseEstimator):
    """ComBat as an estimator; batch labels are passed as ``y`` to fit and to transform."""

    def __init__(self, empirical_bayes=True, tol=1e-6, max_iter=100, chunk=50000):
        self.empirical_bayes = empirical_bayes
        self.tol = tol
        self.max_iter = max_iter
        self.chunk = chunk

    def fit(self, X, y, covariates=None):
        self.model_ = combat_fit(X, y, covariates, self.empirical_bayes, self.tol, self.max_iter)
        self.n_features_in_ = self.model_.grand_mean.shape[0]
        return self

    def transform(self, X, y=None, covariates=None):
        check_is_fitted(self, "model_")
        if y is None:
            raise DataError("batch labels are required to transform")
        return combat_apply(self.model_, X, y, covariates, self.chunk)


class CoralAligner(TransformerMixin, BaseEstimator):
    """Linear CORAL; ``fit(source, target)`` then ``transform`` source-domain rows."""

    def __init__(self, eps=1e-5):
        self.eps = eps

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        self.transform_ = coral_fit(X, check_array(y, dtype=np.float64), self.eps)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return coral_apply(self.transform_, check_array(X, dtype=np.float64))
