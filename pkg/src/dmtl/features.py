"""Feature schema, samples, embedding tables and input encoding.

A dataset is held column-wise in :class:`Batch` (one array per field); single
records are :class:`Sample` objects and exist mostly for ingestion and tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_EMBEDDING_DIM = 30
DEFAULT_DURATION_THRESHOLD = 50.0


class SchemaError(ValueError):
    pass


class RecordError(ValueError):
    """A dataset record violates the sample invariants."""


@dataclass(frozen=True)
class FeatureSchema:
    user_fields: tuple[tuple[str, int], ...]
    item_fields: tuple[tuple[str, int], ...]
    dense_dim: int = 0
    embedding_dim: int = DEFAULT_EMBEDDING_DIM

    def __post_init__(self):
        object.__setattr__(self, "user_fields", tuple((str(n), int(c)) for n, c in self.user_fields))
        object.__setattr__(self, "item_fields", tuple((str(n), int(c)) for n, c in self.item_fields))
        names = [n for n, _ in self.user_fields + self.item_fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"field names must be unique: {names}")
        for name, card in self.user_fields + self.item_fields:
            if card < 1:
                raise SchemaError(f"field {name!r} has cardinality {card} < 1")
        if self.embedding_dim < 1:
            raise SchemaError("embedding_dim must be >= 1")
        if self.dense_dim < 0:
            raise SchemaError("dense_dim must be >= 0")

    @property
    def user_dim(self) -> int:
        return len(self.user_fields) * self.embedding_dim

    @property
    def item_dim(self) -> int:
        return len(self.item_fields) * self.embedding_dim

    @property
    def teacher_dim(self) -> int:
        return self.user_dim + self.item_dim + self.dense_dim

    def to_dict(self) -> dict:
        return {
            "user_fields": [[n, c] for n, c in self.user_fields],
            "item_fields": [[n, c] for n, c in self.item_fields],
            "dense_dim": self.dense_dim,
            "embedding_dim": self.embedding_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            user_fields=tuple(tuple(f) for f in d["user_fields"]),
            item_fields=tuple(tuple(f) for f in d["item_fields"]),
            dense_dim=int(d.get("dense_dim", 0)),
            embedding_dim=int(d.get("embedding_dim", DEFAULT_EMBEDDING_DIM)),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


def duration_label(duration_seconds, threshold: float = DEFAULT_DURATION_THRESHOLD):
    """Long-read label: strictly more than ``threshold`` seconds."""
    return (np.asarray(duration_seconds, dtype=np.float64) > threshold).astype(np.int64)


@dataclass
class Sample:
    user_ids: tuple[int, ...]
    item_ids: tuple[int, ...]
    dense: np.ndarray
    click: int
    duration_seconds: float
    threshold: float = DEFAULT_DURATION_THRESHOLD
    z: int = field(init=False)

    def __post_init__(self):
        self.dense = np.asarray(self.dense, dtype=np.float64)
        self.z = int(duration_label(self.duration_seconds, self.threshold))
        validate_record(self.click, self.duration_seconds)


def validate_record(click, duration_seconds):
    if click not in (0, 1):
        raise RecordError(f"click must be 0 or 1, got {click!r}")
    if not np.isfinite(duration_seconds) or duration_seconds < 0:
        raise RecordError(f"duration_seconds must be finite and >= 0, got {duration_seconds!r}")
    if click == 0 and duration_seconds != 0:
        raise RecordError(f"un-clicked record has nonzero duration {duration_seconds}")


@dataclass
class Batch:
    """Column-wise samples. ``z`` is derived from durations and the threshold."""

    user_ids: np.ndarray
    item_ids: np.ndarray
    dense: np.ndarray
    click: np.ndarray
    duration: np.ndarray
    threshold: float = DEFAULT_DURATION_THRESHOLD
    z: np.ndarray = field(init=False)

    def __post_init__(self):
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        n = self.user_ids.shape[0]
        dense = np.asarray(self.dense, dtype=np.float64)
        # an empty (0, D) block keeps its width; reshape(0, -1) cannot infer it
        width = dense.shape[1] if dense.ndim == 2 else -1
        self.dense = dense.reshape(n, width if n == 0 else -1)
        self.click = np.asarray(self.click, dtype=np.int64)
        self.duration = np.asarray(self.duration, dtype=np.float64)
        self.z = duration_label(self.duration, self.threshold)

    def __len__(self) -> int:
        return int(self.user_ids.shape[0])

    def subset(self, idx) -> "Batch":
        return Batch(
            self.user_ids[idx], self.item_ids[idx], self.dense[idx],
            self.click[idx], self.duration[idx], self.threshold,
        )

    def validate(self):
        bad = (self.click != 0) & (self.click != 1)
        bad |= ~np.isfinite(self.duration) | (self.duration < 0)
        bad |= (self.click == 0) & (self.duration != 0)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            validate_record(int(self.click[i]), float(self.duration[i]))
        return self

    def sample(self, i: int) -> Sample:
        return Sample(
            tuple(int(v) for v in self.user_ids[i]), tuple(int(v) for v in self.item_ids[i]),
            self.dense[i].copy(), int(self.click[i]), float(self.duration[i]), self.threshold,
        )

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], threshold=DEFAULT_DURATION_THRESHOLD) -> "Batch":
        if not samples:
            raise ValueError("no samples")
        return cls(
            np.array([s.user_ids for s in samples]), np.array([s.item_ids for s in samples]),
            np.array([s.dense for s in samples]), np.array([s.click for s in samples]),
            np.array([s.duration_seconds for s in samples]), threshold,
        )

    def check_schema(self, schema: FeatureSchema):
        _check_ids(self.user_ids, schema.user_fields)
        _check_ids(self.item_ids, schema.item_fields)
        if self.dense.shape[1] != schema.dense_dim:
            raise SchemaError(f"dense has {self.dense.shape[1]} columns, schema expects {schema.dense_dim}")


def _check_ids(ids: np.ndarray, fields):
    if ids.ndim != 2 or ids.shape[1] != len(fields):
        raise SchemaError(f"id array of shape {ids.shape} does not match {len(fields)} fields")
    for j, (name, card) in enumerate(fields):
        col = ids[:, j]
        if col.size and (col.min() < 0 or col.max() >= card):
            bad = int(col[(col < 0) | (col >= card)][0])
            raise SchemaError(f"id {bad} out of range for field {name!r} (cardinality {card})")


def write_dataset(batch: Batch, path):
    """Write one JSON object per line. Output is byte-deterministic."""
    with open(path, "w") as fh:
        for u, i, d, c, t in zip(batch.user_ids.tolist(), batch.item_ids.tolist(), batch.dense.tolist(),
                                 batch.click.tolist(), batch.duration.tolist()):
            fh.write(json.dumps({"user_ids": u, "item_ids": i, "dense": d, "click": c,
                                 "duration_seconds": t}, separators=(",", ":")))
            fh.write("\n")


def read_dataset(path, threshold=DEFAULT_DURATION_THRESHOLD, schema: FeatureSchema | None = None) -> Batch:
    """Load a dataset file; records violating the sample invariants are rejected."""
    cols = {"user_ids": [], "item_ids": [], "dense": [], "click": [], "duration_seconds": []}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                validate_record(rec["click"], float(rec["duration_seconds"]))
            except RecordError as err:
                raise RecordError(f"{path}:{lineno}: {err}") from None
            for k in cols:
                cols[k].append(rec[k])
    if not cols["click"]:
        raise ValueError(f"{path}: empty dataset")
    n = len(cols["click"])
    batch = Batch(
        np.array(cols["user_ids"], dtype=np.int64).reshape(n, -1),
        np.array(cols["item_ids"], dtype=np.int64).reshape(n, -1),
        np.array(cols["dense"], dtype=np.float64).reshape(n, -1),
        np.array(cols["click"]), np.array(cols["duration_seconds"], dtype=np.float64), threshold,
    )
    if schema is not None:
        batch.check_schema(schema)
    return batch


class EmbeddingSet:
    """One (cardinality x dim) table per field, with matching gradient buffers."""

    def __init__(self, fields, dim: int, rng: np.random.Generator, scale: float = 0.05):
        self.fields = tuple((str(n), int(c)) for n, c in fields)
        self.dim = int(dim)
        self.tables = [rng.uniform(-scale, scale, size=(c, self.dim)) for _, c in self.fields]
        self.grads = [np.zeros_like(t) for t in self.tables]
        self._ids = None

    @property
    def out_dim(self) -> int:
        return len(self.fields) * self.dim

    def lookup(self, ids, record: bool = True):
        """Concatenate the looked-up rows of every field; ``ids`` is (n, F) or (F,)."""
        ids = np.asarray(ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        ids2 = ids[None, :] if squeeze else ids
        _check_ids(ids2, self.fields)
        if not self.fields:
            out = np.zeros((ids2.shape[0], 0))
        else:
            out = np.concatenate([t[ids2[:, j]] for j, t in enumerate(self.tables)], axis=1)
        if record:
            self._ids = ids2
        return out[0] if squeeze else out

    def backward(self, grad):
        """Scatter-add ``grad`` (n, F*dim) into the rows used by the last lookup."""
        if self._ids is None:
            raise RuntimeError("embedding backward requires a recorded lookup")
        grad = np.asarray(grad, dtype=np.float64).reshape(self._ids.shape[0], -1)
        for j, g in enumerate(self.grads):
            np.add.at(g, self._ids[:, j], grad[:, j * self.dim:(j + 1) * self.dim])

    def embedding_backward(self, grad_slice, field_index: int, row: int):
        self.grads[field_index][row] += grad_slice

    def zero_grad(self):
        for g in self.grads:
            g.fill(0.0)

    def named_params(self, prefix: str):
        return [(f"{prefix}.{name}", t, g) for (name, _), t, g in zip(self.fields, self.tables, self.grads)]


def encode_user(ids, embeddings: EmbeddingSet, record: bool = False):
    return embeddings.lookup(ids, record=record)


def encode_item(ids, embeddings: EmbeddingSet, record: bool = False):
    return embeddings.lookup(ids, record=record)


def encode_teacher_input(user_ids, item_ids, dense, user_emb: EmbeddingSet, item_emb: EmbeddingSet,
                         record: bool = False):
    """x = concat(user embeddings, item embeddings, dense features)."""
    u = user_emb.lookup(user_ids, record=record)
    v = item_emb.lookup(item_ids, record=record)
    d = np.asarray(dense, dtype=np.float64)
    if d.ndim < u.ndim:
        d = d.reshape(u.shape[:-1] + (-1,))
    return np.concatenate([u, v, d], axis=-1)


def iter_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
