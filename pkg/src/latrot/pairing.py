"""Labelled latent differences for learning the technical subspace.

Label 1 pairs share an anatomy site but differ in protocol. Label 0 pairs
share a protocol but differ in anatomy; their partner is a hard negative
drawn uniformly from a mid-rank window of the anchor's cosine neighbours.
Neighbour search is exact and exhaustive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import _binary
from .dataio import EmbeddingSet
from .exceptions import ConfigError, DataError

logger = logging.getLogger(__name__)

MAGIC = b"LROTPAIR"


@dataclass(frozen=True)
class PairSample:
    delta: np.ndarray
    label: int
    i: int
    j: int


@dataclass(frozen=True, eq=False)
class PairSet:
    deltas: np.ndarray
    labels: np.ndarray
    i: np.ndarray
    j: np.ndarray

    def __post_init__(self):
        deltas = np.asarray(self.deltas, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        if deltas.ndim != 2 or deltas.shape[0] != labels.shape[0]:
            raise DataError("deltas must be (n, m) with one label per row")
        for name, v in (("deltas", deltas), ("labels", labels),
                        ("i", np.asarray(self.i, dtype=np.int64)), ("j", np.asarray(self.j, dtype=np.int64))):
            v = v.copy()
            v.flags.writeable = False
            object.__setattr__(self, name, v)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, PairSet):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("deltas", "labels", "i", "j"))

    __hash__ = None

    @property
    def m(self) -> int:
        return int(self.deltas.shape[1])

    @property
    def class_counts(self) -> dict:
        return {0: int(np.sum(self.labels == 0)), 1: int(np.sum(self.labels == 1))}

    @property
    def samples(self) -> list[PairSample]:
        return [PairSample(self.deltas[n], int(self.labels[n]), int(self.i[n]), int(self.j[n])) for n in range(len(self))]

    def save(self, path) -> None:
        dt = _pair_dtype(self.m)
        rec = np.zeros(len(self), dtype=dt)
        rec["i"], rec["j"], rec["label"], rec["delta"] = self.i, self.j, self.labels, self.deltas
        _binary.write_blob(path, MAGIC, _binary.pack_u32(self.m) + _binary.pack_u64(len(self)) + rec.tobytes())

    @classmethod
    def load(cls, path) -> "PairSet":
        buf = _binary.read_blob(path, MAGIC)
        (m,) = _binary.unpack("<I", buf)
        (count,) = _binary.unpack("<Q", buf)
        dt = _pair_dtype(m)
        body = buf.read()
        if len(body) != count * dt.itemsize:
            raise DataError(f"{path}: truncated pair records")
        rec = np.frombuffer(body, dtype=dt)
        return cls(rec["delta"].reshape(count, m), rec["label"], rec["i"].astype(np.int64), rec["j"].astype(np.int64))


def _pair_dtype(m: int) -> np.dtype:
    return np.dtype([("i", "<u8"), ("j", "<u8"), ("label", "u1"), ("delta", "<f8", (m,))])


def _unit_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


def _rank(sims: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k best candidates: descending similarity, then ascending id."""
    return np.lexsort((ids, -sims))[:k]


def knn_cosine(
    emb: EmbeddingSet,
    query_id: int,
    k: int,
    candidate_filter: Optional[Callable[[EmbeddingSet, int, np.ndarray], np.ndarray]] = None,
    return_similarity: bool = False,
):
    """Record ids of the ``k`` nearest neighbours of ``query_id`` by cosine similarity.

    ``candidate_filter(emb, query_pos, positions)`` may return a boolean mask
    over ``positions`` to restrict the pool. The query itself is never returned.
    """
    pos = np.flatnonzero(emb.record_ids == query_id)
    if pos.size != 1:
        raise DataError(f"record_id {query_id} not in set")
    q = int(pos[0])
    qv = emb.vectors[q]
    qn = np.linalg.norm(qv)
    if qn == 0:
        raise DataError(f"record_id {query_id}: zero-norm query vector")
    cand = np.flatnonzero(np.arange(len(emb)) != q)
    if candidate_filter is not None:
        cand = cand[np.asarray(candidate_filter(emb, q, cand), dtype=bool)]
    if cand.size < k:
        raise DataError(f"only {cand.size} candidates for k={k}")
    sims = _unit_rows(emb.vectors[cand]) @ (qv / qn)
    order = _rank(sims, emb.record_ids[cand], k)
    ids = emb.record_ids[cand[order]]
    return (ids, sims[order]) if return_similarity else ids


def build_pair_set(
    emb: EmbeddingSet,
    n_pairs: int,
    rank_lo: int = 10,
    rank_hi: int = 50,
    neighbors: int = 51,
    seed: int = 0,
    symmetrize: bool = False,
    orient_positives: bool = True,
    flip_negatives: bool = True,
    max_rounds: int = 50,
) -> PairSet:
    """Sample a class-balanced set of paired differences ``z_i - z_j``.

    Negative ranks are 1-based among eligible candidates (same protocol,
    different anatomy, query excluded); ``neighbors`` counts the query's own
    slot, so ``neighbors - 1`` candidates are ranked.

    With ``orient_positives`` each positive is ordered so that ``i`` carries
    the protocol earlier in the vocabulary. ``symmetrize`` additionally emits
    ``-delta`` for every sampled pair; the label is sign invariant but a
    linear classifier then has nothing to learn, so it is off by default.

    Negatives are drawn as (anchor, ranked neighbour); neighbours at middle
    ranks sit closer to the bulk than uniform anchors do, so the raw
    differences carry a systematic mean. ``flip_negatives`` swaps each
    negative pair on a seeded coin, which leaves the label intact and makes
    the negative differences symmetric about zero.
    """
    if n_pairs < 2 or n_pairs % 2:
        raise ConfigError("n_pairs must be an even number >= 2")
    if not 1 <= rank_lo <= rank_hi:
        raise ConfigError("need 1 <= rank_lo <= rank_hi")
    if rank_hi > neighbors - 1:
        raise ConfigError(f"rank_hi={rank_hi} exceeds the {neighbors - 1} ranked neighbours")
    if len(emb.protocol_vocab) < 2:
        raise DataError("single protocol: no positive pairs constructible")
    if len(emb.anatomy_vocab) < 2:
        raise DataError("single anatomy site: no negative pairs constructible")

    rng = np.random.default_rng(seed)
    prot = emb.codes("protocol_id")
    ana = emb.codes("anatomy_id")
    per_label = n_pairs // 2
    n_draw = -(-per_label // 2) if symmetrize else per_label

    pos_i, pos_j = _sample_positives(prot, ana, n_draw, rng, orient_positives, max_rounds)
    neg_i, neg_j = _sample_negatives(emb, prot, ana, n_draw, rank_lo, rank_hi, neighbors - 1, rng, max_rounds)
    if flip_negatives:
        swap = rng.random(n_draw) < 0.5
        neg_i, neg_j = np.where(swap, neg_j, neg_i), np.where(swap, neg_i, neg_j)

    I = np.concatenate([pos_i, neg_i])
    J = np.concatenate([pos_j, neg_j])
    labels = np.concatenate([np.ones(n_draw, np.int8), np.zeros(n_draw, np.int8)])
    if symmetrize:
        keep = np.concatenate([np.arange(per_label - n_draw), n_draw + np.arange(per_label - n_draw)])
        I, J = np.concatenate([I, J[keep]]), np.concatenate([J, I[keep]])
        labels = np.concatenate([labels, labels[keep]])
        order = np.argsort(-labels, kind="stable")
        I, J, labels = I[order], J[order], labels[order]
        if len(set(zip(I.tolist(), J.tolist()))) != len(I):
            raise DataError("symmetrised pair collides with a sampled pair; reduce n_pairs")

    deltas = emb.vectors[I] - emb.vectors[J]
    logger.info("built %d pairs (%d positive, %d negative)", len(labels), int(labels.sum()), int((labels == 0).sum()))
    return PairSet(deltas, labels, emb.record_ids[I], emb.record_ids[J])


def _sample_positives(prot, ana, n, rng, orient, max_rounds):
    # partners: same anatomy, different protocol
    groups = {}
    for pos, a in enumerate(ana):
        groups.setdefault(int(a), []).append(pos)
    groups = {a: np.asarray(g) for a, g in groups.items()}
    eligible = np.array([p for p in range(len(ana)) if np.any(prot[groups[int(ana[p])]] != prot[p])], dtype=np.int64)
    if eligible.size == 0:
        raise DataError("no positive pairs constructible: no anatomy site imaged under two protocols")

    chosen, seen = [], set()
    for _ in range(max_rounds):
        need = n - len(chosen)
        if need == 0:
            break
        anchors = eligible[rng.integers(0, eligible.size, size=need)]
        for a in anchors:
            g = groups[int(ana[a])]
            partners = g[prot[g] != prot[a]]
            b = int(partners[rng.integers(0, partners.size)])
            i, j = int(a), b
            if orient and prot[i] > prot[j]:
                i, j = j, i
            if (i, j) not in seen:
                seen.add((i, j))
                chosen.append((i, j))
    if len(chosen) < n:
        raise DataError(f"could only form {len(chosen)} distinct positive pairs, {n} requested")
    arr = np.asarray(chosen, dtype=np.int64)
    return arr[:, 0], arr[:, 1]


def _sample_negatives(emb, prot, ana, n, rank_lo, rank_hi, n_ranked, rng, max_rounds):
    unit = _unit_rows(emb.vectors)
    ids = emb.record_ids
    N = len(emb)
    # anchors need rank_hi eligible candidates and a nonzero vector
    pool = np.array(
        [int(np.sum((prot == prot[p]) & (ana != ana[p]))) for p in range(N)], dtype=np.int64
    )
    eligible = np.flatnonzero((pool >= rank_hi) & (np.linalg.norm(emb.vectors, axis=1) > 0))
    if eligible.size == 0:
        raise DataError(f"insufficient same-protocol candidates: no record has {rank_hi} within its rank window")

    cache: dict[int, np.ndarray] = {}

    def neighbours(p: int) -> np.ndarray:
        if p not in cache:
            cand = np.flatnonzero((prot == prot[p]) & (ana != ana[p]))
            sims = unit[cand] @ unit[p]
            cache[p] = cand[_rank(sims, ids[cand], n_ranked)]
        return cache[p]

    chosen, seen = [], set()
    for _ in range(max_rounds):
        need = n - len(chosen)
        if need == 0:
            break
        anchors = eligible[rng.integers(0, eligible.size, size=need)]
        ranks = rng.integers(rank_lo, rank_hi + 1, size=need)
        for a, r in zip(anchors, ranks):
            b = int(neighbours(int(a))[r - 1])
            if (int(a), b) not in seen:
                seen.add((int(a), b))
                chosen.append((int(a), b))
    if len(chosen) < n:
        raise DataError(f"could only form {len(chosen)} distinct negative pairs, {n} requested")
    arr = np.asarray(chosen, dtype=np.int64)
    return arr[:, 0], arr[:, 1]


def neighbour_rank(emb: EmbeddingSet, i_id: int, j_id: int) -> int:
    """1-based rank of ``j_id`` among the same-protocol, other-anatomy neighbours of ``i_id``."""
    pos = {int(r): p for p, r in enumerate(emb.record_ids)}
    pi, pj = pos[int(i_id)], pos[int(j_id)]
    prot, ana = emb.protocol_id, emb.anatomy_id
    filt = lambda e, q, c: (prot[c] == prot[q]) & (ana[c] != ana[q])  # noqa: E731
    n_cand = int(np.sum(filt(emb, pi, np.arange(len(emb)))))
    ranked = knn_cosine(emb, int(i_id), n_cand, filt)
    hits = np.flatnonzero(ranked == emb.record_ids[pj])
    if hits.size == 0:
        raise DataError(f"{j_id} is not an eligible neighbour of {i_id}")
    return int(hits[0]) + 1
