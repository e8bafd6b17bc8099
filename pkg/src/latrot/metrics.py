"""Cross-protocol cluster stability and technical-subspace separability."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.linear_model import LogisticRegression

from .clustering import assign, fit_cluster_model
from .dataio import EmbeddingSet
from .exceptions import ConfigError, DataError
from .rotation import Projector, split

logger = logging.getLogger(__name__)

DEFAULT_K = tuple(range(5, 51, 5))


def _check_pair(a, b):
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.shape != b.shape:
        raise DataError(f"label vectors differ in length ({a.size} vs {b.size})")
    return a, b


def contingency(a, b) -> np.ndarray:
    a, b = _check_pair(a, b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max(initial=-1) + 1, bi.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def ari(a, b) -> float:
    """Adjusted Rand index."""
    a, b = _check_pair(a, b)
    if a.size < 2:
        raise DataError("ARI needs at least two points")
    t = contingency(a, b)
    index = _comb2(t).sum()
    sa, sb = _comb2(t.sum(axis=1)).sum(), _comb2(t.sum(axis=0)).sum()
    expected = sa * sb / _comb2(a.size)
    maximum = (sa + sb) / 2
    if maximum == expected:
        # both partitions trivial (one cluster or all singletons)
        return 1.0
    return float((index - expected) / (maximum - expected))


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a, b) -> float:
    """Mutual information normalised by the arithmetic mean of the two entropies."""
    a, b = _check_pair(a, b)
    t = contingency(a, b).astype(np.float64)
    ha, hb = _entropy(t.sum(axis=1)), _entropy(t.sum(axis=0))
    if ha == 0 and hb == 0:
        return 1.0
    if ha == 0 or hb == 0:
        return 0.0
    n = t.sum()
    pij = t / n
    outer = np.outer(t.sum(axis=1), t.sum(axis=0)) / n ** 2
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(min(max(mi / ((ha + hb) / 2), 0.0), 1.0))


def dice_matrix(a, b, k: int) -> np.ndarray:
    a, b = _check_pair(a, b)
    a = a.astype(np.int64)
    b = b.astype(np.int64)
    if a.size and (min(a.min(), b.min()) < 0 or max(a.max(), b.max()) >= k):
        raise DataError(f"labels must lie in [0, {k})")
    overlap = np.zeros((k, k))
    np.add.at(overlap, (a, b), 1)
    sa, sb = np.bincount(a, minlength=k), np.bincount(b, minlength=k)
    denom = sa[:, None] + sb[None, :]
    return np.divide(2 * overlap, denom, out=np.zeros_like(overlap), where=denom > 0)


def dice_matched(a, b, k: int) -> float:
    """Mean Dice over an optimal one-to-one cluster correspondence.

    The correspondence maximises the summed Dice (Hungarian method); the sum
    is divided by the larger number of non-empty clusters, so clusters left
    without a partner count as zero.
    """
    a, b = _check_pair(a, b)
    D = dice_matrix(a, b, k)
    rows, cols = linear_sum_assignment(D, maximize=True)
    used = max(np.unique(a).size, np.unique(b).size)
    if used == 0:
        return 1.0
    return float(D[rows, cols].sum() / used)


@dataclass
class StabilityReport:
    k: int
    metric_used: str
    ari: float
    nmi: float
    dice: float
    embedding: str
    per_pair: dict = field(default_factory=dict)


def coregistered_pairs(emb: EmbeddingSet, ref: str, other: str):
    """Positions ``(i_ref, i_other)`` of records sharing patient and anatomy across two protocols.

    Repeated (patient, anatomy) cells are matched by order of occurrence.
    """
    def keyed(protocol):
        seen, out = {}, {}
        for pos in np.flatnonzero(emb.protocol_id == protocol):
            key = (emb.patient_id[pos], emb.anatomy_id[pos])
            n = seen.get(key, 0)
            seen[key] = n + 1
            out[key + (n,)] = int(pos)
        return out

    a, b = keyed(ref), keyed(other)
    common = [key for key in a if key in b]
    return np.array([a[c] for c in common], dtype=np.int64), np.array([b[c] for c in common], dtype=np.int64)


def stability_reports(
    features: np.ndarray,
    emb: EmbeddingSet,
    embedding: str,
    k_values: Iterable[int] = DEFAULT_K,
    seed: int = 0,
    metric: str = "euclidean",
    variance_target: float = 0.95,
    restarts: int = 5,
) -> list[StabilityReport]:
    """Cluster the reference protocol's records, assign all protocols, compare co-registered pairs."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != len(emb):
        raise DataError("one feature row per record required")
    vocab = emb.protocol_vocab
    if len(vocab) < 2:
        raise DataError("stability needs at least two protocols")
    ref = vocab[0]
    pairs = {}
    for other in vocab[1:]:
        i, j = coregistered_pairs(emb, ref, other)
        if i.size:
            pairs[f"{ref}|{other}"] = (i, j)
    if not pairs:
        raise DataError("no co-registered cross-protocol pairs")
    fit_rows = np.flatnonzero(emb.protocol_id == ref)
    n_fit = fit_rows.size

    out = []
    for k in k_values:
        k = int(k)
        if not 2 <= k <= n_fit:
            raise ConfigError(f"k={k} outside [2, {n_fit}]")
        model = fit_cluster_model(features[fit_rows], k, metric, variance_target, seed, restarts=restarts)
        labels = assign(model, features)
        per = {}
        for name, (i, j) in pairs.items():
            la, lb = labels[i], labels[j]
            per[name] = {"ari": ari(la, lb), "nmi": nmi(la, lb), "dice": dice_matched(la, lb, k), "n": int(i.size)}
        rep = StabilityReport(
            k=k,
            metric_used=model.metric,
            ari=float(np.mean([v["ari"] for v in per.values()])),
            nmi=float(np.mean([v["nmi"] for v in per.values()])),
            dice=float(np.mean([v["dice"] for v in per.values()])),
            embedding=embedding,
            per_pair=per,
        )
        logger.debug("%s k=%d ari=%.3f nmi=%.3f dice=%.3f", embedding, k, rep.ari, rep.nmi, rep.dice)
        out.append(rep)
    return out


def stability_sweep(
    emb: EmbeddingSet,
    projector: Optional[Projector] = None,
    k_values: Iterable[int] = DEFAULT_K,
    seed: int = 0,
    metric: str = "euclidean",
    variance_target: float = 0.95,
    restarts: int = 5,
) -> list[StabilityReport]:
    """Stability in the raw embedding and, given a projector, in its biological part."""
    k_values = list(k_values)
    reports = stability_reports(emb.vectors, emb, "z", k_values, seed, metric, variance_target, restarts)
    if projector is not None:
        z_b = split(emb.vectors, projector)[1]
        reports += stability_reports(z_b, emb, "zB", k_values, seed, metric, variance_target, restarts)
    return reports


def write_stability_csv(reports: list[StabilityReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "metric", "ari", "nmi", "dice", "embedding"])
        for r in reports:
            w.writerow([r.k, r.metric_used, repr(r.ari), repr(r.nmi), repr(r.dice), r.embedding])


def summarize(reports: list[StabilityReport]) -> dict:
    """Mean ARI/NMI/Dice per embedding name."""
    out = {}
    for name in dict.fromkeys(r.embedding for r in reports):
        rs = [r for r in reports if r.embedding == name]
        out[name] = {m: float(np.mean([getattr(r, m) for r in rs])) for m in ("ari", "nmi", "dice")}
    return out


# ---------------------------------------------------------------------------
# technical-subspace classification
# ---------------------------------------------------------------------------

def _fit_score(Xtr, ytr, Xte, yte, lam):
    if np.unique(ytr).size < 2 or np.unique(yte).size < 2:
        raise DataError("classification needs at least two classes in train and test")
    clf = LogisticRegression(C=1.0 / (lam * Xtr.shape[0]), max_iter=2000, tol=1e-8)
    clf.fit(Xtr, ytr)
    pred = clf.predict(Xte)
    per_class = {str(c): float(np.mean(pred[yte == c] == c)) for c in np.unique(yte)}
    return float(np.mean(pred == yte)), per_class


def subspace_classifier_eval(
    train: EmbeddingSet,
    test: EmbeddingSet,
    projector: Projector,
    target: str = "protocol_id",
    lam: float = 1e-2,
) -> dict:
    """Held-out accuracy of an L2-regularised logistic classifier predicting ``target``.

    ``lam`` penalises ``lam/2 * |w|^2`` on top of the mean log-loss. Features
    are the technical part ``z_T``, the raw embedding ``z`` and the
    biological part ``z_B``.
    """
    ytr = np.asarray(getattr(train, target))
    yte = np.asarray(getattr(test, target))
    ztr_t, ztr_b = split(train.vectors, projector)
    zte_t, zte_b = split(test.vectors, projector)
    out = {"chance": float(max(np.mean(yte == c) for c in np.unique(yte)))}
    for name, Xtr, Xte in (("zT", ztr_t, zte_t), ("z", train.vectors, test.vectors), ("zB", ztr_b, zte_b)):
        acc, per = _fit_score(Xtr, ytr, Xte, yte, lam)
        out[f"acc_{name}"] = acc
        out[f"per_class_{name}"] = per
    return out


def write_classification_csv(result: dict, path) -> None:
    classes = sorted(result["per_class_z"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["features"] + classes + ["overall"])
        for name in ("zT", "z", "zB"):
            w.writerow([name] + [repr(result[f"per_class_{name}"][c]) for c in classes] + [repr(result[f"acc_{name}"])])
