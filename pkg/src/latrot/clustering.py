"""PCA + k-means tissue clustering and per-patient cluster-volume profiles."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import _binary
from .dataio import EmbeddingSet
from .exceptions import ConfigError, DataError

logger = logging.getLogger(__name__)

MAGIC = b"LROTCLUS"
METRICS = ("euclidean", "cosine")


def pca_fit(X: np.ndarray, variance_target: float = 0.95, return_spectrum: bool = False):
    """Mean and the fewest principal directions retaining ``variance_target`` of the variance.

    The spectrum (variance along every principal direction, descending) is
    returned as a third element when ``return_spectrum`` is set.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("PCA needs a 2-D array with at least two rows")
    if not 0 < variance_target <= 1:
        raise ConfigError("variance_target must lie in (0, 1]")
    mean = X.mean(axis=0)
    _, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    ev = s ** 2 / (X.shape[0] - 1)
    total = ev.sum()
    if not total > 0:
        raise DataError("zero total variance")
    ratio = np.cumsum(ev) / total
    p = int(np.searchsorted(ratio, variance_target - 1e-12) + 1)
    p = min(p, Vt.shape[0])
    basis = Vt[:p].T.copy()
    if return_spectrum:
        return mean, basis, ev
    return mean, basis


@dataclass
class ClusterModel:
    pca_mean: np.ndarray
    pca_basis: np.ndarray
    centroids: np.ndarray
    metric: str
    k: int
    inertia: float
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.k < 2:
            raise ConfigError("k must be >= 2")

    @property
    def n_features(self) -> int:
        return self.pca_mean.shape[0]

    def project(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got shape {X.shape}")
        return (X - self.pca_mean) @ self.pca_basis

    def save(self, path) -> None:
        payload = b"".join(
            [
                _binary.pack_strings([self.metric]),
                _binary.pack_u32(self.k),
                np.float64(self.inertia).astype("<f8").tobytes(),
                _binary.pack_array(self.pca_mean),
                _binary.pack_array(self.pca_basis),
                _binary.pack_array(self.centroids),
            ]
        )
        _binary.write_blob(path, MAGIC, payload)

    @classmethod
    def load(cls, path) -> "ClusterModel":
        buf = _binary.read_blob(path, MAGIC)
        (metric,) = _binary.unpack_strings(buf)
        (k,) = _binary.unpack("<I", buf)
        (inertia,) = _binary.unpack("<d", buf)
        mean = _binary.unpack_array(buf)
        basis = _binary.unpack_array(buf)
        cents = _binary.unpack_array(buf)
        return cls(mean, basis, cents, metric, int(k), float(inertia))

    def centroids_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cluster"] + [f"c{j}" for j in range(self.centroids.shape[1])])
            for i, row in enumerate(self.centroids):
                w.writerow([i] + [repr(float(v)) for v in row])


def _unit(X):
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, n, out=np.zeros_like(X), where=n > 0)


def _distances(X, C, metric):
    """Squared Euclidean or cosine distances, computed by direct differences."""
    if metric == "euclidean":
        out = np.empty((X.shape[0], C.shape[0]))
        for j, c in enumerate(C):
            d = X - c
            out[:, j] = np.einsum("ij,ij->i", d, d)
        return out
    return 1.0 - X @ C.T


def _plusplus(X, k, metric, rng):
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    d = _distances(X, X[centers], metric)[:, 0]
    for _ in range(1, k):
        w = np.clip(d, 0, None)
        if metric == "cosine":
            w = w ** 2
        total = w.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=w / total))
        else:
            free = np.setdiff1d(np.arange(n), centers)
            nxt = int(free[rng.integers(free.size)])
        centers.append(nxt)
        d = np.minimum(d, _distances(X, X[[nxt]], metric)[:, 0])
    return X[centers].copy()


def _lloyd(X, C, metric, max_iter):
    history = []
    labels = None
    for _ in range(max_iter):
        D = _distances(X, C, metric)
        new = np.argmin(D, axis=1)
        history.append(float(D[np.arange(X.shape[0]), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        C = C.copy()
        for j in range(C.shape[0]):
            members = labels == j
            if members.any():
                c = X[members].mean(axis=0)
                if metric == "cosine":
                    nrm = np.linalg.norm(c)
                    if nrm > 0:
                        C[j] = c / nrm
                else:
                    C[j] = c
        empty = [j for j in range(C.shape[0]) if not np.any(labels == j)]
        if empty:
            own = _distances(X, C, metric)[np.arange(X.shape[0]), labels]
            taken = set()
            for j in empty:
                order = np.argsort(-own, kind="stable")
                far = next(int(i) for i in order if int(i) not in taken)
                taken.add(far)
                C[j] = X[far]
    D = _distances(X, C, metric)
    labels = np.argmin(D, axis=1)
    inertia = float(D[np.arange(X.shape[0]), labels].sum())
    if inertia < history[-1]:
        history.append(inertia)
    return C, labels, inertia, history


def kmeans_fit(X, k: int, metric: str = "euclidean", seed: int = 0, max_iter: int = 300, restarts: int = 5) -> ClusterModel:
    """k-means++ seeded Lloyd iterations; best of ``restarts`` by final objective.

    The cosine metric clusters unit-normalised rows with unit centroids
    (spherical k-means); its objective is the summed cosine distance.
    The returned model carries an identity projection.
    """
    X = check_array(X, dtype=np.float64)
    n = X.shape[0]
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}")
    if k < 2:
        raise ConfigError("k must be >= 2")
    if k > n:
        raise ConfigError(f"k={k} exceeds the number of points n={n}")
    Xm = _unit(X) if metric == "cosine" else X
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        C0 = _plusplus(Xm, k, metric, rng)
        C, labels, inertia, hist = _lloyd(Xm, C0, metric, max_iter)
        if best is None or inertia < best[2]:
            best = (C, labels, inertia, hist)
    C, labels, inertia, hist = best
    d = X.shape[1]
    return ClusterModel(np.zeros(d), np.eye(d), C, metric, k, inertia, hist)


def assign(model: ClusterModel, X) -> np.ndarray:
    """Nearest-centroid labels; ties go to the lowest centroid index."""
    Z = model.project(X)
    if model.metric == "cosine":
        Z = _unit(Z)
    out = np.empty(Z.shape[0], dtype=np.int64)
    for start in range(0, Z.shape[0], 65536):
        out[start:start + 65536] = np.argmin(_distances(Z[start:start + 65536], model.centroids, model.metric), axis=1)
    return out


def balance_deficit(labels, k: int) -> float:
    """``1 - H(cluster sizes) / log k``; 0 for perfectly balanced clusters."""
    counts = np.bincount(np.asarray(labels), minlength=k).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(1.0 - (-(p * np.log(p)).sum()) / np.log(k))


def fit_cluster_model(
    X,
    k: int,
    metric: str = "euclidean",
    variance_target: float = 0.95,
    seed: int = 0,
    max_iter: int = 300,
    restarts: int = 5,
) -> ClusterModel:
    """PCA followed by k-means. ``metric="auto"`` fits both metrics and keeps the better-balanced one."""
    X = check_array(X, dtype=np.float64)
    mean, basis = pca_fit(X, variance_target)
    Z = (X - mean) @ basis
    if metric == "auto":
        fits = [kmeans_fit(Z, k, mt, seed, max_iter, restarts) for mt in METRICS]
        deficits = [balance_deficit(assign(f, Z), k) for f in fits]
        chosen = fits[1] if deficits[1] < deficits[0] else fits[0]
        logger.debug("k=%d balance deficits euclidean=%.4f cosine=%.4f", k, *deficits)
    else:
        chosen = kmeans_fit(Z, k, metric, seed, max_iter, restarts)
    return ClusterModel(mean, basis, chosen.centroids, chosen.metric, k, chosen.inertia, chosen.history)


@dataclass
class ClusterProfile:
    patient_id: str
    fractions: np.ndarray


def cluster_profiles(labels, emb: EmbeddingSet, k: int) -> list[ClusterProfile]:
    """Fraction of each patient's records per cluster, patients in vocabulary order."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != len(emb):
        raise DataError(f"{labels.shape[0]} labels for {len(emb)} records")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    codes = emb.codes("patient_id")
    out = []
    for p, name in enumerate(emb.patient_vocab):
        lab = labels[codes == p]
        if lab.size == 0:
            raise DataError(f"patient {name} has no records")
        out.append(ClusterProfile(name, np.bincount(lab, minlength=k) / lab.size))
    return out


def write_label_map(path, emb: EmbeddingSet, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "label"])
        for rid, lab in zip(emb.record_ids, labels):
            w.writerow([int(rid), int(lab)])


class TissueClusterer(ClusterMixin, TransformerMixin, BaseEstimator):
    """PCA + k-means as an estimator; ``transform`` returns distances to centroids."""

    def __init__(self, n_clusters=10, metric="euclidean", variance_target=0.95, max_iter=300,
                 n_init=5, random_state=0):
        self.n_clusters = n_clusters
        self.metric = metric
        self.variance_target = variance_target
        self.max_iter = max_iter
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.model_ = fit_cluster_model(X, self.n_clusters, self.metric, self.variance_target,
                                        self.random_state, self.max_iter, self.n_init)
        self.labels_ = assign(self.model_, X)
        self.cluster_centers_ = self.model_.centroids
        self.inertia_ = self.model_.inertia
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return assign(self.model_, check_array(X, dtype=np.float64))

    def transform(self, X):
        check_is_fitted(self, "model_")
        Z = self.model_.project(check_array(X, dtype=np.float64))
        if self.model_.metric == "cosine":
            Z = _unit(Z)
        return _distances(Z, self.model_.centroids, self.model_.metric)
