"""Columnar example storage, padded batches and the line-delimited record format.

A :class:`Partition` holds one day of examples.  Behavior sequences are
ragged: each kind keeps flat item arrays plus per-example (start, length)
pointers, so impressions of the same user on the same day share storage.

Record format (one JSON object per line, fields in this order)::

    day, user_id, ad_id,
    dense        {name: float}
    categorical  {name: int}
    pretrained   {name: [float, ...]}
    sequences    {kind: [[item_id, action, timestamp, [emb...], advertiser_id], ...]}
    labels       {head: 0 | 1}
    masks        {head: 0 | 1}        (optional; 1 = label observed)
"""

from __future__ import annotations

import gzip
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .config import SEQUENCE_KINDS
from .errors import DataError

ACTIONS = ("pad", "click", "long_click", "save", "hide", "checkout", "add_to_cart", "signup",
           "search_issue", "match", "attribute")
ACTION_IDS = {a: i for i, a in enumerate(ACTIONS)}
RECORD_FIELDS = ("day", "user_id", "ad_id", "dense", "categorical", "pretrained", "sequences",
                 "labels", "masks")


@dataclass
class SequenceColumn:
    """Ragged per-example sequences of one kind, time-ascending within each example."""

    items: np.ndarray
    actions: np.ndarray
    timestamps: np.ndarray
    embeddings: np.ndarray
    advertisers: np.ndarray
    starts: np.ndarray
    lengths: np.ndarray

    @property
    def emb_dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def empty(cls, n: int, emb_dim: int) -> "SequenceColumn":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), np.zeros((0, emb_dim)), z.copy(),
                   np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))

    def row(self, i: int) -> slice:
        s = int(self.starts[i])
        return slice(s, s + int(self.lengths[i]))

    def take(self, idx: np.ndarray) -> "SequenceColumn":
        """Gather rows into a compact column that no longer shares storage."""
        lengths = self.lengths[idx]
        starts = np.zeros(len(idx), dtype=np.int64)
        if len(idx):
            starts[1:] = np.cumsum(lengths)[:-1]
        flat = _ragged_index(self.starts[idx], lengths)
        return SequenceColumn(self.items[flat], self.actions[flat], self.timestamps[flat],
                              self.embeddings[flat], self.advertisers[flat], starts, lengths)

    def padded(self, idx: np.ndarray, max_len: int) -> "PaddedSequence":
        """Right-padded (B, L) view keeping the most recent ``max_len`` items per row."""
        lengths = np.minimum(self.lengths[idx], max_len)
        starts = self.starts[idx] + self.lengths[idx] - lengths
        b = len(idx)
        width = max(int(lengths.max()) if b else 0, 1)
        pos = np.arange(width)[None, :]
        valid = pos < lengths[:, None]
        src = np.where(valid, starts[:, None] + pos, 0)
        if self.items.size == 0:
            src = np.zeros_like(src)
            valid = np.zeros_like(valid)
            lengths = np.zeros_like(lengths)

        def gather(arr, fill=0):
            if arr.size == 0:
                shape = (b, width) + arr.shape[1:]
                return np.full(shape, fill, dtype=arr.dtype)
            out = arr[src]
            mask = valid if out.ndim == 2 else valid[..., None]
            return np.where(mask, out, fill).astype(arr.dtype)

        return PaddedSequence(gather(self.items), gather(self.actions), gather(self.timestamps, 0.0),
                              gather(self.embeddings, 0.0), gather(self.advertisers), lengths.astype(np.int64))


def _ragged_index(starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
    return np.arange(total, dtype=np.int64) + offsets


@dataclass
class PaddedSequence:
    items: np.ndarray
    actions: np.ndarray
    timestamps: np.ndarray
    embeddings: np.ndarray
    advertisers: np.ndarray
    lengths: np.ndarray

    @property
    def batch(self) -> int:
        return self.items.shape[0]

    @property
    def width(self) -> int:
        return self.items.shape[1]


@dataclass
class Batch:
    user_ids: np.ndarray
    ad_ids: np.ndarray
    dense: dict[str, np.ndarray]
    categorical: dict[str, np.ndarray]
    pretrained: dict[str, np.ndarray]
    sequences: dict[str, PaddedSequence]
    labels: dict[str, np.ndarray]
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.user_ids)


@dataclass
class Partition:
    day: int
    user_ids: np.ndarray
    ad_ids: np.ndarray
    dense: dict[str, np.ndarray]
    categorical: dict[str, np.ndarray]
    pretrained: dict[str, np.ndarray]
    sequences: dict[str, SequenceColumn]
    labels: dict[str, np.ndarray]
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    raw_negatives: int | None = None

    def __len__(self) -> int:
        return len(self.user_ids)

    def batch(self, idx, max_len: int = 500) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(
            self.user_ids[idx], self.ad_ids[idx],
            {k: v[idx] for k, v in self.dense.items()},
            {k: v[idx] for k, v in self.categorical.items()},
            {k: v[idx] for k, v in self.pretrained.items()},
            {k: col.padded(idx, max_len) for k, col in self.sequences.items()},
            {k: v[idx] for k, v in self.labels.items()},
            {k: v[idx] for k, v in self.masks.items()},
        )

    def take(self, idx) -> "Partition":
        idx = np.asarray(idx, dtype=np.int64)
        return Partition(
            self.day, self.user_ids[idx], self.ad_ids[idx],
            {k: v[idx] for k, v in self.dense.items()},
            {k: v[idx] for k, v in self.categorical.items()},
            {k: v[idx] for k, v in self.pretrained.items()},
            {k: col.take(idx) for k, col in self.sequences.items()},
            {k: v[idx] for k, v in self.labels.items()},
            {k: v[idx] for k, v in self.masks.items()},
        )

    def data_hash(self) -> str:
        """sha256 over the example content (independent of shared sequence storage)."""
        return hash_partitions([self])


def hash_partitions(parts: Iterable[Partition]) -> str:
    h = hashlib.sha256()
    for part in parts:
        compact = part.take(np.arange(len(part)))
        h.update(np.int64(part.day).tobytes())
        for name, arr in (("user_ids", compact.user_ids), ("ad_ids", compact.ad_ids)):
            _hash_array(h, name, arr)
        for group in ("dense", "categorical", "pretrained", "labels", "masks"):
            for name in sorted(getattr(compact, group)):
                _hash_array(h, f"{group}.{name}", getattr(compact, group)[name])
        for kind in sorted(compact.sequences):
            col = compact.sequences[kind]
            for attr in ("items", "actions", "timestamps", "embeddings", "advertisers", "lengths"):
                _hash_array(h, f"seq.{kind}.{attr}", getattr(col, attr))
    return h.hexdigest()


def _hash_array(h, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    h.update(name.encode())
    h.update(str(arr.dtype).encode())
    h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
    h.update(arr.tobytes())


# --------------------------------------------------------------------------- records


def _num(x: float):
    """JSON-friendly float (shortest exact repr); integral labels stay ints."""
    return float(x)


def iter_records(part: Partition) -> Iterable[dict]:
    dense_names = list(part.dense)
    cat_names = list(part.categorical)
    pre_names = list(part.pretrained)
    for i in range(len(part)):
        seqs = {}
        for kind, col in part.sequences.items():
            r = col.row(i)
            seqs[kind] = [[int(it), ACTIONS[int(a)], _num(ts), [_num(e) for e in emb], int(adv)]
                          for it, a, ts, emb, adv in zip(col.items[r], col.actions[r], col.timestamps[r],
                                                          col.embeddings[r], col.advertisers[r])]
        rec = {
            "day": int(part.day),
            "user_id": int(part.user_ids[i]),
            "ad_id": int(part.ad_ids[i]),
            "dense": {k: _num(part.dense[k][i]) for k in dense_names},
            "categorical": {k: int(part.categorical[k][i]) for k in cat_names},
            "pretrained": {k: [_num(v) for v in part.pretrained[k][i]] for k in pre_names},
            "sequences": seqs,
            "labels": {k: int(part.labels[k][i]) for k in part.labels},
        }
        if part.masks:
            rec["masks"] = {k: int(part.masks[k][i]) for k in part.masks}
        yield rec


def dumps_partition(part: Partition) -> str:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in iter_records(part))


def write_partition(part: Partition, path: str | Path) -> None:
    path = Path(path)
    text = dumps_partition(part)
    if path.suffix == ".gz":
        with gzip.open(path, "wt", encoding="utf-8") as f:
            f.write(text)
    else:
        path.write_text(text, encoding="utf-8")


def _check_record(rec, lineno: int) -> None:
    if not isinstance(rec, dict):
        raise DataError(f"line {lineno}: record must be a JSON object")
    for key in rec:
        if key not in RECORD_FIELDS:
            raise DataError(f"line {lineno}: unknown field {key!r}")
    for key in RECORD_FIELDS[:-1]:
        if key not in rec:
            raise DataError(f"line {lineno}: missing field {key!r}")
    for kind in rec["sequences"]:
        if kind not in SEQUENCE_KINDS:
            raise DataError(f"line {lineno}: unknown sequence kind {kind!r}")


def loads_partition(text: str) -> Partition:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    recs = []
    for n, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {n}: malformed record ({exc.msg})") from exc
        _check_record(rec, n)
        recs.append(rec)
    if not recs:
        raise DataError("partition file has no records")
    try:
        return _from_records(recs)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise DataError(f"inconsistent records: {exc}") from exc


def _from_records(recs: list[dict]) -> Partition:
    first = recs[0]
    days = {r["day"] for r in recs}
    if len(days) != 1:
        raise DataError(f"records span several days: {sorted(days)}")
    n = len(recs)
    dense = {k: np.array([r["dense"][k] for r in recs], dtype=np.float64) for k in first["dense"]}
    cat = {k: np.array([r["categorical"][k] for r in recs], dtype=np.int64) for k in first["categorical"]}
    pre = {k: np.array([r["pretrained"][k] for r in recs], dtype=np.float64) for k in first["pretrained"]}
    labels = {k: np.array([r["labels"][k] for r in recs], dtype=np.float64) for k in first["labels"]}
    masks = {}
    if "masks" in first:
        masks = {k: np.array([r["masks"][k] for r in recs], dtype=bool) for k in first["masks"]}
    seqs = {}
    for kind in first["sequences"]:
        rows = [r["sequences"][kind] for r in recs]
        lengths = np.array([len(x) for x in rows], dtype=np.int64)
        starts = np.zeros(n, dtype=np.int64)
        starts[1:] = np.cumsum(lengths)[:-1]
        flat = [it for x in rows for it in x]
        emb_dim = len(flat[0][3]) if flat else len(next(iter(pre.values()))[0]) if pre else 1
        if not flat:
            col = SequenceColumn.empty(n, emb_dim)
        else:
            col = SequenceColumn(
                np.array([it[0] for it in flat], dtype=np.int64),
                np.array([ACTION_IDS[it[1]] for it in flat], dtype=np.int64),
                np.array([it[2] for it in flat], dtype=np.float64),
                np.array([it[3] for it in flat], dtype=np.float64).reshape(len(flat), emb_dim),
                np.array([it[4] for it in flat], dtype=np.int64),
                starts, lengths)
        seqs[kind] = col
    return Partition(int(first["day"]), np.array([r["user_id"] for r in recs], dtype=np.int64),
                     np.array([r["ad_id"] for r in recs], dtype=np.int64), dense, cat, pre, seqs,
                     labels, masks)


def read_partition(path: str | Path) -> Partition:
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rt", encoding="utf-8") as f:
                text = f.read()
        else:
            text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read partition {path}: {exc}") from exc
    try:
        return loads_partition(text)
    except DataError as exc:
        raise DataError(f"{path.name}: {exc}") from exc


def partition_files(data_dir: str | Path) -> list[Path]:
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"data directory {d} does not exist")
    files = sorted(list(d.glob("day-*.jsonl")) + list(d.glob("day-*.jsonl.gz")))
    if not files:
        raise DataError(f"no partition files (day-*.jsonl) in {d}")
    return files


def partition_filename(day: int, gzip_output: bool = False) -> str:
    return f"day-{day:04d}.jsonl" + (".gz" if gzip_output else "")
