"""Technical subspace estimation from paired latent differences.

The projector ``P`` (``m x r``, orthonormal columns) is assembled from

1. the dominant axis: the normalised weight vector of a linear logistic
   classifier separating technical (label 1) from biological (label 0)
   differences,
2. ``r - 2`` principal directions of the technical differences after
   removing the dominant axis,
3. the mean offset between two protocols,

stacked in that order and orthonormalised by QR. The technical part of an
embedding is ``P @ P.T @ z`` and the biological part is the remainder.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import _binary
from .dataio import EmbeddingSet
from .exceptions import ConfigError, DataError, NumericalError
from .pairing import PairSet

logger = logging.getLogger(__name__)

MAGIC = b"LROTPROJ"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

def bce_loss_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float = 0.0):
    """Mean binary cross-entropy of ``sigmoid(X @ w + b)`` plus ``l2/2 * |w|^2``, and its gradient.

    The bias is not penalised.
    """
    s = X @ w + b
    loss = float(np.mean(np.logaddexp(0.0, s) - y * s)) + 0.5 * l2 * float(w @ w)
    resid = _sigmoid(s) - y
    return loss, X.T @ resid / X.shape[0] + l2 * w, float(np.mean(resid))


def _sigmoid(s):
    out = np.empty_like(s, dtype=np.float64)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class DeltaClassifier:
    w: np.ndarray
    b: float
    train_accuracy: float
    val_accuracy: float
    loss_history: list = field(default_factory=list)

    def decision_function(self, X):
        return np.asarray(X, dtype=np.float64) @ self.w + self.b

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int8)


def _as_xy(pairs, y=None):
    if isinstance(pairs, PairSet):
        return pairs.deltas, pairs.labels.astype(np.float64)
    X, y = check_X_y(pairs, y, dtype=np.float64)
    return X, y.astype(np.float64)


def fit_delta_classifier(
    pairs,
    y=None,
    epochs: int = 50,
    lr: float = 1e-3,
    batch_size: int = 4096,
    seed: int = 0,
    val_fraction: float = 0.2,
    l2: float = 0.0,
) -> DeltaClassifier:
    """Linear logistic classifier on paired differences, trained with Adam.

    ``loss_history`` holds the training-split objective after each epoch.
    A positive ``l2`` makes the optimum unique and rotation invariant, which
    matters when the classes are linearly separable.
    """
    X, y = _as_xy(pairs, y)
    if len(np.unique(y)) < 2:
        raise DataError("pair set has a single class; both labels are required")
    if epochs < 1 or batch_size < 1 or lr <= 0:
        raise ConfigError("epochs, batch_size and lr must be positive")
    if l2 < 0:
        raise ConfigError("l2 must be non-negative")
    if not 0 <= val_fraction < 1:
        raise ConfigError("val_fraction must lie in [0, 1)")

    rng = np.random.default_rng(seed)
    order = rng.permutation(X.shape[0])
    n_val = int(round(val_fraction * X.shape[0]))
    val, train = order[:n_val], order[n_val:]
    Xt, yt = X[train], y[train]

    m = X.shape[1]
    w, b = np.zeros(m), 0.0
    mw, vw = np.zeros(m), np.zeros(m)
    mb = vb = 0.0
    step = 0
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(Xt.shape[0])
        for start in range(0, perm.size, batch_size):
            idx = perm[start:start + batch_size]
            _, gw, gb = bce_loss_grad(w, b, Xt[idx], yt[idx], l2)
            step += 1
            mw = ADAM_BETA1 * mw + (1 - ADAM_BETA1) * gw
            vw = ADAM_BETA2 * vw + (1 - ADAM_BETA2) * gw * gw
            mb = ADAM_BETA1 * mb + (1 - ADAM_BETA1) * gb
            vb = ADAM_BETA2 * vb + (1 - ADAM_BETA2) * gb * gb
            c1 = 1 - ADAM_BETA1 ** step
            c2 = 1 - ADAM_BETA2 ** step
            w = w - lr * (mw / c1) / (np.sqrt(vw / c2) + ADAM_EPS)
            b = b - lr * (mb / c1) / (np.sqrt(vb / c2) + ADAM_EPS)
        loss = bce_loss_grad(w, b, Xt, yt, l2)[0]
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite training loss at epoch {epoch + 1}")
        history.append(loss)

    clf = DeltaClassifier(w=w, b=float(b), train_accuracy=0.0, val_accuracy=float("nan"), loss_history=history)
    clf.train_accuracy = float(np.mean(clf.predict(Xt) == yt))
    if n_val:
        clf.val_accuracy = float(np.mean(clf.predict(X[val]) == y[val]))
    logger.info("delta classifier: train acc %.3f, val acc %.3f, final loss %.4f",
                clf.train_accuracy, clf.val_accuracy, history[-1])
    return clf


def dominant_axis(clf) -> np.ndarray:
    """Unit vector along the classifier weights (accepts a classifier or a raw vector)."""
    w = np.asarray(clf.w if isinstance(clf, DeltaClassifier) else clf, dtype=np.float64)
    norm = np.linalg.norm(w)
    if not norm > 1e-12:
        raise NumericalError(f"classifier weight norm {norm:.3g} too small; the classifier did not learn")
    return w / norm


# ---------------------------------------------------------------------------
# residual directions, offset, projector
# ---------------------------------------------------------------------------

def _sign_fix(V: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1
    return V * signs


def residual_directions(pairs, v_base: np.ndarray, n_dirs: int, labels=None, source: str = "positive") -> np.ndarray:
    """Top principal directions of the differences projected off ``v_base``.

    ``source="positive"`` uses only technical (label 1) differences;
    ``"all"`` uses every pair.
    """
    if isinstance(pairs, PairSet):
        X, y = pairs.deltas, pairs.labels
    else:
        X, y = np.asarray(pairs, dtype=np.float64), labels
    if source == "positive":
        if y is None:
            raise ConfigError("labels required for source='positive'")
        X = X[np.asarray(y) == 1]
    elif source != "all":
        raise ConfigError(f"unknown residual source {source!r}")
    m = X.shape[1] if X.ndim == 2 else 0
    if n_dirs < 0 or n_dirs > m - 1:
        raise ConfigError(f"n_dirs={n_dirs} must lie in [0, m-1={m - 1}]")
    if X.shape[0] < 2:
        raise DataError("need at least two differences for residual PCA")
    v = np.asarray(v_base, dtype=np.float64)
    v = v / np.linalg.norm(v)
    if n_dirs == 0:
        return np.zeros((m, 0))

    R = X - np.outer(X @ v, v)
    R = R - R.mean(axis=0)
    _, s, Vt = np.linalg.svd(R, full_matrices=False)
    ev = s ** 2 / (X.shape[0] - 1)
    # rank threshold against the raw energy so identical differences read as rank 0
    scale = max(float(np.sum(X * X)) / (X.shape[0] - 1), np.finfo(float).tiny)
    rank = int(np.sum(ev > 1e-10 * scale))
    if rank < n_dirs:
        raise NumericalError(f"residual covariance rank {rank} < requested {n_dirs} directions")
    V = Vt[:n_dirs].T
    V = V - np.outer(v, v @ V)
    V, _ = np.linalg.qr(V)
    return _sign_fix(V)


def mean_protocol_offset(pairs: PairSet, emb: EmbeddingSet, protocol_order: Optional[Sequence[str]] = None):
    """Mean of positive differences oriented as ``z_ref - z_other``.

    Without ``protocol_order`` every (ref, other) pair of protocols with
    positives is evaluated and the offset of largest norm is returned.
    Returns ``(v_diff, (ref, other))``.
    """
    pos_of = {int(r): p for p, r in enumerate(emb.record_ids)}
    try:
        pi = np.array([pos_of[int(r)] for r in pairs.i], dtype=np.int64)
        pj = np.array([pos_of[int(r)] for r in pairs.j], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"pair references record {exc} absent from the embedding set") from None
    prot = emb.protocol_id
    pos = pairs.labels == 1

    def offset(ref, other):
        fwd = pos & (prot[pi] == ref) & (prot[pj] == other)
        rev = pos & (prot[pi] == other) & (prot[pj] == ref)
        count = int(fwd.sum() + rev.sum())
        if count == 0:
            return None
        total = pairs.deltas[fwd].sum(axis=0) - pairs.deltas[rev].sum(axis=0)
        return total / count

    if protocol_order is not None:
        ref, other = protocol_order
        v = offset(ref, other)
        if v is None:
            raise DataError(f"no positive pairs between protocols {ref!r} and {other!r}")
        return v, (ref, other)

    vocab = emb.protocol_vocab
    best = None
    for a in range(len(vocab)):
        for c in range(a + 1, len(vocab)):
            v = offset(vocab[a], vocab[c])
            if v is not None and (best is None or np.linalg.norm(v) > np.linalg.norm(best[0])):
                best = (v, (vocab[a], vocab[c]))
    if best is None:
        raise DataError("no positive pairs between any two protocols")
    return best


@dataclass
class Projector:
    P: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.P.ndim != 2 or self.P.shape[1] >= self.P.shape[0]:
            raise DataError(f"projector must be m x r with r < m, got {self.P.shape}")

    @property
    def m(self) -> int:
        return self.P.shape[0]

    @property
    def r(self) -> int:
        return self.P.shape[1]

    def save(self, path) -> None:
        prov = json.dumps(self.provenance, sort_keys=True).encode("utf-8")
        payload = (
            _binary.pack_u32(self.m)
            + _binary.pack_u32(self.r)
            + np.asarray(self.P, dtype="<f8").tobytes(order="F")
            + _binary.pack_u32(len(prov))
            + prov
        )
        _binary.write_blob(path, MAGIC, payload)

    @classmethod
    def load(cls, path) -> "Projector":
        buf = _binary.read_blob(path, MAGIC)
        m, r = _binary.unpack("<II", buf)
        raw = buf.read(8 * m * r)
        if len(raw) != 8 * m * r:
            raise DataError(f"{path}: truncated projector matrix")
        P = np.frombuffer(raw, dtype="<f8").reshape((m, r), order="F").copy()
        (n,) = _binary.unpack("<I", buf)
        prov = json.loads(buf.read(n).decode("utf-8")) if n else {}
        return cls(P, prov)

    def to_csv(self, path) -> None:
        header = ",".join(f"p{c}" for c in range(self.r))
        np.savetxt(path, self.P, delimiter=",", header=header, comments="", fmt="%.17g")


def build_projector(
    v_base: np.ndarray,
    V_res: np.ndarray,
    v_diff: Optional[np.ndarray],
    r: int,
    backfill: Optional[np.ndarray] = None,
    tol: float = 1e-8,
    technical: Optional[np.ndarray] = None,
    offset_tol: float = 0.25,
    signal_ratio: float = 10.0,
) -> Projector:
    """Orthonormalise ``[v_base | V_res | v_diff]`` into an ``m x r`` projector.

    ``v_diff`` is dropped, and the first usable column of ``backfill`` takes
    its place, when its residual after projecting out the preceding columns
    is below ``tol * |v_diff|``.

    Given ``technical`` (rows of technical differences), a nearly collinear
    offset (relative residual below ``offset_tol``) also yields its slot when
    the first backfill direction is clearly technical: its variance exceeds
    ``signal_ratio`` times the noise floor, the median variance of the rows
    left after projecting out the preceding columns. With two protocols the
    classifier axis and the mean offset are nearly collinear and the offset
    residual holds only the shift a slightly tilted axis misses; it is kept
    when a spare column exists and gives way to a genuine technical
    direction otherwise.
    """
    v_base = np.asarray(v_base, dtype=np.float64).reshape(-1)
    m = v_base.shape[0]
    V_res = np.asarray(V_res, dtype=np.float64).reshape(m, -1)
    if not 1 < r < m:
        raise ConfigError(f"r={r} must satisfy 1 < r < m={m}")
    if V_res.shape[1] != r - 2:
        raise ConfigError(f"V_res has {V_res.shape[1]} columns, expected r-2={r - 2}")

    head = np.column_stack([v_base, V_res])
    Q, R = np.linalg.qr(head)
    d = np.abs(np.diag(R))
    if np.any(d < tol * np.maximum(np.linalg.norm(head, axis=0), 1e-300)):
        raise NumericalError("dominant axis and residual directions are not linearly independent")
    Q = Q * np.sign(np.diag(R))

    def residual(c):
        res = c - Q @ (Q.T @ c)
        res = res - Q @ (Q.T @ res)
        n = np.linalg.norm(res)
        return (res / n, n) if n >= tol * max(np.linalg.norm(c), 1e-300) else (None, n)

    prov = {"v_base_index": 0, "n_residual": int(r - 2), "v_diff_included": False, "backfilled": 0}
    offset_dir = None
    if v_diff is not None:
        v_diff = np.asarray(v_diff, dtype=np.float64).reshape(-1)
        scale = np.linalg.norm(v_diff)
        offset_dir, n = residual(v_diff) if scale > 0 else (None, 0.0)
        prov["offset_residual"] = float(n / scale) if scale > 0 else 0.0
    fill_dir = None
    cands = np.zeros((m, 0)) if backfill is None else np.asarray(backfill, dtype=np.float64).reshape(m, -1)
    for c in cands.T:
        fill_dir, _ = residual(c)
        if fill_dir is not None:
            break

    last = offset_dir
    if offset_dir is not None and fill_dir is not None and technical is not None:
        E = np.asarray(technical, dtype=np.float64).reshape(-1, m)
        Er = E - (E @ Q) @ Q.T
        spectrum = np.linalg.eigvalsh(np.cov(Er, rowvar=False))[::-1][: m - Q.shape[1]]
        noise = float(np.median(spectrum))
        fill_var = float(np.var(E @ fill_dir))
        prov.update(backfill_variance=fill_var, noise_floor=noise)
        if prov["offset_residual"] < offset_tol and fill_var > signal_ratio * noise:
            last = None
    if last is None:
        if fill_dir is None:
            raise NumericalError(f"insufficient independent directions to reach r={r}")
        last = fill_dir
        prov["backfilled"] = 1
        logger.info("mean protocol offset (relative residual %.3g) replaced by a residual direction",
                    prov.get("offset_residual", 0.0))
    else:
        prov["v_diff_included"] = True
    return Projector(np.column_stack([Q, last]), prov)


def split(z: np.ndarray, projector) -> tuple[np.ndarray, np.ndarray]:
    """Technical and biological parts of ``z`` (a vector or rows of vectors)."""
    P = projector.P if isinstance(projector, Projector) else np.asarray(projector, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != P.shape[0]:
        raise DataError(f"dimension mismatch: z has {z.shape[-1]} features, projector has m={P.shape[0]}")
    z_t = (z @ P) @ P.T
    return z_t, z - z_t


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class LatentRotation(TransformerMixin, BaseEstimator):
    """Learn the technical subspace from paired differences.

    ``fit(X, y)`` takes differences ``X`` (n_pairs x m) and labels ``y``
    (1 technical, 0 biological). ``transform`` returns the biological part of
    embeddings; ``transform_technical`` returns the technical part.

    Parameters
    ----------
    r : int
        Dimension of the technical subspace, ``1 < r < m``.
    epochs, learning_rate, batch_size : Adam settings for the classifier.
    val_fraction : float
        Share of pairs held out to report classifier accuracy.
    l2 : float
        Ridge penalty on the classifier weights.
    offset_rule : {"capacity", "dependence"}
        How the last column is chosen (see :func:`build_projector`):
        ``"dependence"`` keeps the mean offset unless it is linearly
        dependent; ``"capacity"`` also lets a clearly technical residual
        direction take the slot of a nearly collinear offset.
    residual_source : {"positive", "all"}
        Which differences feed the residual PCA.
    random_state : int
    """

    def __init__(self, r=30, epochs=50, learning_rate=1e-3, batch_size=4096, val_fraction=0.2,
                 l2=0.1, offset_rule="capacity", residual_source="positive", random_state=0):
        self.r = r
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.l2 = l2
        self.offset_rule = offset_rule
        self.residual_source = residual_source
        self.random_state = random_state

    def fit(self, X, y, offset=None):
        """``offset`` defaults to the mean of the label-1 differences."""
        X, y = check_X_y(X, y, dtype=np.float64)
        m = X.shape[1]
        if not 1 < self.r < m:
            raise ConfigError(f"r={self.r} must satisfy 1 < r < m={m}")
        clf = fit_delta_classifier(X, y, epochs=self.epochs, lr=self.learning_rate,
                                   batch_size=self.batch_size, seed=self.random_state,
                                   val_fraction=self.val_fraction, l2=self.l2)
        v_base = dominant_axis(clf)
        n_extra = min(self.r - 1, m - 1)
        try:
            V = residual_directions(X, v_base, n_extra, labels=y, source=self.residual_source)
        except NumericalError:
            V = residual_directions(X, v_base, self.r - 2, labels=y, source=self.residual_source)
        if offset is None:
            offset = X[y == 1].mean(axis=0)
        if self.offset_rule not in ("capacity", "dependence"):
            raise ConfigError("offset_rule must be 'capacity' or 'dependence'")
        technical = X[y == 1] if self.offset_rule == "capacity" else None
        proj = build_projector(v_base, V[:, : self.r - 2], offset, self.r, backfill=V[:, self.r - 2:],
                               technical=technical)
        proj.provenance.update(train_accuracy=clf.train_accuracy, val_accuracy=clf.val_accuracy)
        self.classifier_ = clf
        self.projector_ = proj
        self.components_ = proj.P.T
        self.n_features_in_ = m
        return self

    def _check(self, Z):
        check_is_fitted(self, "projector_")
        Z = check_array(Z, dtype=np.float64)
        if Z.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} features, got {Z.shape[1]}")
        return Z

    def transform(self, Z):
        return split(self._check(Z), self.projector_)[1]

    def transform_technical(self, Z):
        return split(self._check(Z), self.projector_)[0]


def fit_rotation(
    emb: EmbeddingSet,
    pairs: PairSet,
    r: int = 30,
    epochs: int = 50,
    lr: float = 1e-3,
    batch_size: int = 4096,
    seed: int = 0,
    val_fraction: float = 0.2,
    l2: float = 0.1,
    offset_rule: str = "capacity",
    residual_source: str = "positive",
    protocol_order: Optional[Sequence[str]] = None,
) -> Projector:
    """End-to-end projector from an embedding set and its pair set."""
    if pairs.m != emb.m:
        raise DataError(f"pair dimension {pairs.m} != embedding dimension {emb.m}")
    if not 1 < r < emb.m:
        raise ConfigError(f"r={r} must satisfy 1 < r < m={emb.m}")
    v_diff, order = mean_protocol_offset(pairs, emb, protocol_order)
    est = LatentRotation(r=r, epochs=epochs, learning_rate=lr, batch_size=batch_size,
                         val_fraction=val_fraction, l2=l2, offset_rule=offset_rule,
                         residual_source=residual_source, random_state=seed)
    est.fit(pairs.deltas, pairs.labels, offset=v_diff)
    proj = est.projector_
    proj.provenance["offset_protocols"] = list(order)
    return proj
