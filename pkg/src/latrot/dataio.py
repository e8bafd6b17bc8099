"""Embedding dataset model and its CSV / packed-binary formats.

An :class:`EmbeddingSet` is stored column-wise (one array per field) and is
immutable once built: all arrays are flagged read-only so the same set can be
shared between consumers without copies.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _binary
from .exceptions import DataError

logger = logging.getLogger(__name__)

MAGIC = b"LROTEMB1"
META_COLUMNS = ("record_id", "anatomy_id", "protocol_id", "patient_id", "survival_time", "event")
_EVENT_MISSING = 255


@dataclass(frozen=True)
class EmbeddingRecord:
    record_id: int
    vector: np.ndarray
    anatomy_id: str
    protocol_id: str
    patient_id: str
    survival_time: Optional[float] = None
    event: Optional[bool] = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Column-wise collection of embedding records sharing one dimension ``m``.

    Missing survival fields are encoded as ``nan`` in ``survival_time`` and
    ``-1`` in ``event``.
    """

    record_ids: np.ndarray
    vectors: np.ndarray
    anatomy_id: np.ndarray
    protocol_id: np.ndarray
    patient_id: np.ndarray
    survival_time: Optional[np.ndarray] = None
    event: Optional[np.ndarray] = None
    m: Optional[int] = None
    _vocab: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        ids = np.asarray(self.record_ids, dtype=np.int64).reshape(-1)
        n = ids.shape[0]
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.size == 0 and vectors.ndim < 2:
            if self.m is None:
                raise DataError("m must be given for an empty EmbeddingSet")
            vectors = vectors.reshape(0, self.m)
        if vectors.ndim != 2 or vectors.shape[0] != n:
            raise DataError(f"vectors must have shape (n={n}, m), got {vectors.shape}")
        m = vectors.shape[1] if self.m is None else int(self.m)
        if vectors.shape[1] != m:
            raise DataError(f"vector length {vectors.shape[1]} != m={m}")
        if not np.all(np.isfinite(vectors)):
            bad = int(np.argwhere(~np.isfinite(vectors))[0, 0])
            raise DataError(f"record {bad}: non-finite value in vector")
        if np.any(ids < 0):
            raise DataError("record_id must be non-negative")
        if len(np.unique(ids)) != n:
            raise DataError("duplicate record_id")

        cats = {}
        for name in ("anatomy_id", "protocol_id", "patient_id"):
            col = np.asarray([str(v) for v in getattr(self, name)], dtype=object)
            if col.shape[0] != n:
                raise DataError(f"{name} has {col.shape[0]} entries, expected {n}")
            cats[name] = col

        if self.survival_time is None:
            st = np.full(n, np.nan)
        else:
            st = np.asarray(self.survival_time, dtype=np.float64).reshape(-1)
        if self.event is None:
            ev = np.full(n, -1, dtype=np.int8)
        else:
            ev = np.asarray(self.event, dtype=np.int8).reshape(-1)
        if st.shape[0] != n or ev.shape[0] != n:
            raise DataError("survival fields must have one entry per record")
        if not np.all(np.isin(ev, (-1, 0, 1))):
            raise DataError("event must be 0, 1 or missing")
        has_t = ~np.isnan(st)
        if np.any(has_t != (ev >= 0)):
            raise DataError("survival_time must be present iff event is present")
        if np.any(st[has_t] <= 0) or not np.all(np.isfinite(st[has_t])):
            raise DataError("survival_time must be positive and finite")

        set_ = object.__setattr__
        set_(self, "record_ids", _readonly(ids.copy()))
        set_(self, "vectors", _readonly(vectors.copy()))
        for name, col in cats.items():
            set_(self, name, _readonly(col))
        set_(self, "survival_time", _readonly(st.copy()))
        set_(self, "event", _readonly(ev.copy()))
        set_(self, "m", m)

    # -- basic protocol ---------------------------------------------------
    def __len__(self) -> int:
        return int(self.record_ids.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.m == other.m
            and np.array_equal(self.record_ids, other.record_ids)
            and np.array_equal(self.vectors, other.vectors)
            and all(
                np.array_equal(getattr(self, c), getattr(other, c))
                for c in ("anatomy_id", "protocol_id", "patient_id", "event")
            )
            and np.array_equal(self.survival_time, other.survival_time, equal_nan=True)
        )

    __hash__ = None

    def _vocab_of(self, name: str) -> list[str]:
        if name not in self._vocab:
            self._vocab[name] = sorted(set(getattr(self, name).tolist()))
        return self._vocab[name]

    @property
    def protocol_vocab(self) -> list[str]:
        return self._vocab_of("protocol_id")

    @property
    def anatomy_vocab(self) -> list[str]:
        return self._vocab_of("anatomy_id")

    @property
    def patient_vocab(self) -> list[str]:
        return self._vocab_of("patient_id")

    def codes(self, name: str) -> np.ndarray:
        """Integer codes of a categorical column into its sorted vocabulary."""
        vocab = self._vocab_of(name)
        lookup = {v: i for i, v in enumerate(vocab)}
        return np.fromiter((lookup[v] for v in getattr(self, name)), dtype=np.int64, count=len(self))

    @property
    def has_survival(self) -> np.ndarray:
        return self.event >= 0

    @property
    def records(self) -> list[EmbeddingRecord]:
        out = []
        for i in range(len(self)):
            has = self.event[i] >= 0
            out.append(
                EmbeddingRecord(
                    record_id=int(self.record_ids[i]),
                    vector=self.vectors[i],
                    anatomy_id=self.anatomy_id[i],
                    protocol_id=self.protocol_id[i],
                    patient_id=self.patient_id[i],
                    survival_time=float(self.survival_time[i]) if has else None,
                    event=bool(self.event[i]) if has else None,
                )
            )
        return out

    @classmethod
    def from_records(cls, records: Sequence[EmbeddingRecord], m: Optional[int] = None) -> "EmbeddingSet":
        if not records:
            return cls(np.zeros(0, np.int64), np.zeros((0, m or 0)), [], [], [], m=m)
        return cls(
            record_ids=[r.record_id for r in records],
            vectors=np.vstack([np.asarray(r.vector, dtype=np.float64) for r in records])
            if len({len(r.vector) for r in records}) == 1
            else _ragged(records),
            anatomy_id=[r.anatomy_id for r in records],
            protocol_id=[r.protocol_id for r in records],
            patient_id=[r.patient_id for r in records],
            survival_time=[np.nan if r.survival_time is None else r.survival_time for r in records],
            event=[-1 if r.event is None else int(r.event) for r in records],
            m=m,
        )

    # -- derived sets ------------------------------------------------------
    def subset(self, index) -> "EmbeddingSet":
        """Rows selected by a boolean mask or integer index, in that order."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return EmbeddingSet(
            self.record_ids[index],
            self.vectors[index],
            self.anatomy_id[index],
            self.protocol_id[index],
            self.patient_id[index],
            self.survival_time[index],
            self.event[index],
            m=self.m,
        )

    def with_vectors(self, vectors: np.ndarray) -> "EmbeddingSet":
        vectors = np.asarray(vectors, dtype=np.float64)
        return EmbeddingSet(
            self.record_ids, vectors, self.anatomy_id, self.protocol_id, self.patient_id,
            self.survival_time, self.event, m=vectors.shape[1],
        )

    def with_survival(self, survival_time, event) -> "EmbeddingSet":
        return EmbeddingSet(
            self.record_ids, self.vectors, self.anatomy_id, self.protocol_id, self.patient_id,
            survival_time, event, m=self.m,
        )


def _ragged(records):
    lengths = [len(r.vector) for r in records]
    bad = next(i for i, n in enumerate(lengths) if n != lengths[0])
    raise DataError(f"record {bad}: vector length {lengths[bad]} != {lengths[0]}")


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _infer_format(path, format):
    if format is not None:
        if format not in ("csv", "binary"):
            raise DataError(f"unknown format {format!r}; expected 'csv' or 'binary'")
        return format
    return "csv" if str(path).lower().endswith(".csv") else "binary"


def save_embeddings(emb: EmbeddingSet, path, format: Optional[str] = None) -> None:
    """Write ``emb`` as CSV or packed binary (chosen from the suffix if not given)."""
    format = _infer_format(path, format)
    path = Path(path)
    if format == "csv":
        _save_csv(emb, path)
    else:
        _save_binary(emb, path)


def load_embeddings(path, format: Optional[str] = None) -> EmbeddingSet:
    format = _infer_format(path, format)
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if format == "csv":
        return _load_csv(path)
    return _load_binary(path)


def _save_csv(emb: EmbeddingSet, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(META_COLUMNS) + [f"z{i}" for i in range(emb.m)])
        for i in range(len(emb)):
            has = emb.event[i] >= 0
            w.writerow(
                [
                    int(emb.record_ids[i]),
                    emb.anatomy_id[i],
                    emb.protocol_id[i],
                    emb.patient_id[i],
                    repr(float(emb.survival_time[i])) if has else "",
                    int(emb.event[i]) if has else "",
                ]
                + [repr(float(v)) for v in emb.vectors[i]]
            )


def _load_csv(path: Path) -> EmbeddingSet:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, missing header") from None
        if tuple(header[: len(META_COLUMNS)]) != META_COLUMNS:
            raise DataError(f"{path}: malformed header, expected leading columns {','.join(META_COLUMNS)}")
        zcols = header[len(META_COLUMNS):]
        if zcols != [f"z{i}" for i in range(len(zcols))]:
            raise DataError(f"{path}: malformed header, vector columns must be z0..z{{m-1}}")
        m = len(zcols)
        width = len(META_COLUMNS) + m

        ids, vecs, ana, pro, pat, st, ev = [], [], [], [], [], [], []
        seen = set()
        for row_no, row in enumerate(reader, start=1):
            where = f"{path}: row {row_no} (line {row_no + 1})"
            if len(row) != width:
                raise DataError(f"{where}: expected {width} fields (m={m}), got {len(row)}")
            try:
                rid = int(row[0])
            except ValueError:
                raise DataError(f"{where}: record_id {row[0]!r} is not an integer") from None
            if rid in seen:
                raise DataError(f"{where}: duplicate record_id {rid}")
            seen.add(rid)
            try:
                vec = [float(x) for x in row[len(META_COLUMNS):]]
            except ValueError as exc:
                raise DataError(f"{where}: {exc}") from None
            if not all(math.isfinite(v) for v in vec):
                raise DataError(f"{where}: non-finite value in vector")
            t_raw, e_raw = row[4], row[5]
            if (t_raw == "") != (e_raw == ""):
                raise DataError(f"{where}: survival_time and event must both be present or both empty")
            if t_raw == "":
                st.append(np.nan)
                ev.append(-1)
            else:
                try:
                    t = float(t_raw)
                except ValueError:
                    raise DataError(f"{where}: bad survival_time {t_raw!r}") from None
                if not (math.isfinite(t) and t > 0):
                    raise DataError(f"{where}: survival_time must be positive")
                if e_raw not in ("0", "1"):
                    raise DataError(f"{where}: event must be 0 or 1, got {e_raw!r}")
                st.append(t)
                ev.append(int(e_raw))
            ids.append(rid)
            vecs.append(vec)
            ana.append(row[1])
            pro.append(row[2])
            pat.append(row[3])

    vectors = np.asarray(vecs, dtype=np.float64).reshape(len(ids), m)
    return EmbeddingSet(np.asarray(ids, dtype=np.int64), vectors, ana, pro, pat, st, ev, m=m)


def _record_dtype(m: int) -> np.dtype:
    return np.dtype(
        [
            ("record_id", "<u8"),
            ("anatomy", "<u4"),
            ("protocol", "<u4"),
            ("patient", "<u4"),
            ("survival_time", "<f8"),
            ("event", "u1"),
            ("vector", "<f8", (m,)),
        ]
    )


def _save_binary(emb: EmbeddingSet, path: Path) -> None:
    rec = np.zeros(len(emb), dtype=_record_dtype(emb.m))
    rec["record_id"] = emb.record_ids
    rec["anatomy"] = emb.codes("anatomy_id")
    rec["protocol"] = emb.codes("protocol_id")
    rec["patient"] = emb.codes("patient_id")
    rec["survival_time"] = emb.survival_time
    rec["event"] = np.where(emb.event >= 0, emb.event, _EVENT_MISSING)
    rec["vector"] = emb.vectors
    payload = b"".join(
        [
            _binary.pack_u32(emb.m),
            _binary.pack_u64(len(emb)),
            _binary.pack_strings(emb.anatomy_vocab),
            _binary.pack_strings(emb.protocol_vocab),
            _binary.pack_strings(emb.patient_vocab),
            rec.tobytes(),
        ]
    )
    _binary.write_blob(path, MAGIC, payload)


def _load_binary(path: Path) -> EmbeddingSet:
    buf = _binary.read_blob(path, MAGIC)
    (m,) = _binary.unpack("<I", buf)
    (count,) = _binary.unpack("<Q", buf)
    ana_v = _binary.unpack_strings(buf)
    pro_v = _binary.unpack_strings(buf)
    pat_v = _binary.unpack_strings(buf)
    dt = _record_dtype(m)
    body = buf.read()
    if len(body) != count * dt.itemsize:
        raise DataError(f"{path}: expected {count} records of {dt.itemsize} bytes, got {len(body)} bytes")
    rec = np.frombuffer(body, dtype=dt)
    try:
        ana = np.asarray(ana_v, dtype=object)[rec["anatomy"]] if count else []
        pro = np.asarray(pro_v, dtype=object)[rec["protocol"]] if count else []
        pat = np.asarray(pat_v, dtype=object)[rec["patient"]] if count else []
    except IndexError:
        raise DataError(f"{path}: categorical code outside vocabulary") from None
    event = rec["event"].astype(np.int16)
    event[event == _EVENT_MISSING] = -1
    return EmbeddingSet(
        rec["record_id"].astype(np.int64),
        rec["vector"].reshape(count, m),
        ana, pro, pat,
        rec["survival_time"],
        event.astype(np.int8),
        m=m,
    )
