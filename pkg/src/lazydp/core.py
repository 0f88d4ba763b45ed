"""Domain types shared by every trainer."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DEFAULT_MEMORY_CAP = 8 * 10**9

# Per-table row counts of the 26-table MLPerf DLRM reference model
# (Criteo Terabyte, 40M row cap); 128-dim fp32 gives the ~96 GB model.
DLRM_TABLE_ROWS = (
    39884406, 39043, 17289, 7420, 20263, 3, 7120, 1543, 63, 38532951,
    2953546, 403346, 10, 2208, 11938, 155, 4, 976, 14, 39979771,
    25641295, 39664984, 585935, 12972, 108, 36,
)

HISTORY_ENTRY_BYTES = 4
QUEUE_ENTRY_BYTES = 4


class ConfigError(ValueError):
    """Invalid hyperparameters or experiment configuration."""


class SizingError(ConfigError):
    def __init__(self, nbytes: int, cap: int):
        self.nbytes = nbytes
        self.cap = cap
        super().__init__(
            f"model needs {nbytes:,} bytes, above the memory cap of {cap:,} bytes"
        )


class TraceError(ValueError):
    """A trace is malformed or does not match the training configuration."""


class StateError(RuntimeError):
    """Trainer bookkeeping is corrupted or an operation is out of order."""


@dataclass(frozen=True)
class HyperParams:
    clip_c: float = 1.0
    noise_mult: float = 1.0
    batch_b: int = 8
    lr: float = 0.1
    iters_n: int = 10
    dim: int = 16
    rows_e: int = 1000
    pooling: int = 1
    precision: str = "double"
    seed: int = 0
    num_tables: int = 1
    table_rows: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.clip_c > 0:
            raise ConfigError(f"clip_c must be positive, got {self.clip_c}")
        if self.noise_mult < 0:
            raise ConfigError(f"noise_mult must be non-negative, got {self.noise_mult}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("batch_b", "dim", "rows_e", "pooling", "num_tables"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.iters_n < 0:
            raise ConfigError(f"iters_n must be >= 0, got {self.iters_n}")
        if self.precision not in ("double", "single"):
            raise ConfigError(f"precision must be 'double' or 'single', got {self.precision!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.table_rows is not None:
            if len(self.table_rows) != self.num_tables:
                raise ConfigError("table_rows must list one size per table")
            if min(self.table_rows) < 1:
                raise ConfigError("every table needs at least one row")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    @property
    def noise_variance(self) -> float:
        """Per-step noise variance sigma^2 C^2, before the 1/B scaling."""
        return (self.noise_mult * self.clip_c) ** 2

    def rows_per_table(self) -> tuple[int, ...]:
        if self.table_rows is not None:
            return tuple(self.table_rows)
        return (self.rows_e,) * self.num_tables

    def with_(self, **changes) -> "HyperParams":
        return replace(self, **changes)


def dlrm_default_params(**overrides) -> HyperParams:
    """The reference 26-table, 128-dim, batch-2048 configuration."""
    base = dict(
        batch_b=2048, dim=128, pooling=1, num_tables=len(DLRM_TABLE_ROWS),
        rows_e=max(DLRM_TABLE_ROWS), table_rows=DLRM_TABLE_ROWS,
        precision="single",
    )
    base.update(overrides)
    return HyperParams(**base)


def model_bytes(params: HyperParams) -> int:
    itemsize = np.dtype(params.dtype).itemsize
    return sum(params.rows_per_table()) * params.dim * itemsize


def check_memory(params: HyperParams, memory_cap: int = DEFAULT_MEMORY_CAP) -> int:
    nbytes = model_bytes(params)
    if nbytes > memory_cap:
        raise SizingError(nbytes, memory_cap)
    return nbytes


def history_overhead_bytes(params: HyperParams) -> int:
    """HistoryTable footprint: one 4-byte iteration id per embedding row."""
    return sum(params.rows_per_table()) * HISTORY_ENTRY_BYTES


def queue_overhead_bytes(params: HyperParams, num_tables: int | None = None) -> int:
    """Footprint of the one extra mini-batch the InputQueue holds."""
    if num_tables is None:
        num_tables = params.num_tables
    return params.batch_b * num_tables * params.pooling * QUEUE_ENTRY_BYTES


@dataclass
class EmbeddingTable:
    values: np.ndarray
    table_id: int = 0

    @property
    def rows_e(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.values.copy(), self.table_id)


def new_table(params: HyperParams, init="zeros", table_id: int = 0,
              memory_cap: int = DEFAULT_MEMORY_CAP) -> EmbeddingTable:
    """Allocate one table.

    ``init`` is ``"zeros"`` or ``("uniform", lo, hi)``; uniform draws come
    from a generator seeded by ``(seed, table_id)``.
    """
    check_memory(params, memory_cap)
    rows = params.rows_per_table()[table_id]
    shape = (rows, params.dim)
    if init == "zeros":
        values = np.zeros(shape, dtype=params.dtype)
    elif isinstance(init, tuple) and init[0] == "uniform":
        _, lo, hi = init
        rng = np.random.default_rng([params.seed, table_id, 0x7AB1E])
        values = rng.uniform(lo, hi, size=shape).astype(params.dtype, copy=False)
    else:
        raise ConfigError(f"unknown init {init!r}")
    return EmbeddingTable(values, table_id)


def new_tables(params: HyperParams, init="zeros",
               memory_cap: int = DEFAULT_MEMORY_CAP) -> list[EmbeddingTable]:
    return [new_table(params, init, t, memory_cap) for t in range(params.num_tables)]


def parse_init(text: str):
    """``zeros`` or ``uniform(lo,hi)`` / ``uniform:lo:hi``."""
    text = text.strip()
    if text == "zeros":
        return "zeros"
    if text.startswith("uniform"):
        body = text[len("uniform"):].strip("():")
        parts = body.replace(":", ",").split(",") if body else ["-1", "1"]
        lo, hi = (float(p) for p in parts)
        return ("uniform", lo, hi)
    raise ConfigError(f"unknown init {text!r}")


@dataclass
class MiniBatch:
    """One iteration of input: ``indices`` is (batch_b, num_tables, pooling)."""

    indices: np.ndarray
    targets: np.ndarray

    @property
    def batch_b(self) -> int:
        return self.indices.shape[0]

    def table_indices(self, table: int) -> np.ndarray:
        return self.indices[:, table, :]

    def unique_rows(self, table: int) -> np.ndarray:
        return np.unique(self.indices[:, table, :])

    def examples(self) -> Iterator[dict]:
        for b in range(self.batch_b):
            yield {"indices": self.indices[b].tolist(), "target": float(self.targets[b])}

    def validate(self, rows_e: int, num_tables: int, pooling: int, batch_b: int):
        if self.indices.shape != (batch_b, num_tables, pooling):
            raise TraceError(
                f"batch shape {self.indices.shape} != {(batch_b, num_tables, pooling)}"
            )
        if self.targets.shape != (batch_b,):
            raise TraceError("one target per example required")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= rows_e):
            raise TraceError(f"index out of range [0, {rows_e})")


@dataclass(frozen=True)
class TraceHeader:
    rows_e: int
    num_tables: int
    pooling: int
    batch_b: int
    iters_n: int
    seed: int = 0


@dataclass
class TrainingTrace:
    header: TraceHeader
    indices: np.ndarray  # (iters_n, batch_b, num_tables, pooling)
    targets: np.ndarray  # (iters_n, batch_b)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.validate()

    def __len__(self) -> int:
        return self.header.iters_n

    def batch(self, it: int) -> MiniBatch:
        """Mini-batch consumed at 1-indexed iteration ``it``."""
        if not 1 <= it <= self.header.iters_n:
            raise IndexError(f"iteration {it} outside 1..{self.header.iters_n}")
        return MiniBatch(self.indices[it - 1], self.targets[it - 1])

    def batches(self) -> Iterator[MiniBatch]:
        for it in range(1, self.header.iters_n + 1):
            yield self.batch(it)

    def validate(self):
        h = self.header
        expected = (h.iters_n, h.batch_b, h.num_tables, h.pooling)
        if self.indices.shape != expected:
            raise TraceError(f"trace body shape {self.indices.shape} != header {expected}")
        if self.targets.shape != (h.iters_n, h.batch_b):
            raise TraceError("trace targets do not match header")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= h.rows_e):
            raise TraceError(f"trace index out of range [0, {h.rows_e})")

    def check_params(self, params: HyperParams):
        h = self.header
        mismatches = [
            f"{name}: trace={getattr(h, name)} config={value}"
            for name, value in (
                ("rows_e", params.rows_e), ("num_tables", params.num_tables),
                ("pooling", params.pooling), ("batch_b", params.batch_b),
                ("iters_n", params.iters_n),
            )
            if getattr(h, name) != value
        ]
        if len(set(params.rows_per_table())) != 1:
            mismatches.append("traces address equally sized tables only")
        if mismatches:
            raise TraceError("trace/config mismatch: " + "; ".join(mismatches))

    def __eq__(self, other):
        if not isinstance(other, TrainingTrace):
            return NotImplemented
        return (self.header == other.header
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.targets, other.targets))


TRACE_MAGIC = b"LZDPTRC1"
TRACE_VERSION = 1
_HEADER = struct.Struct("<8s8Q")


def _record_dtype(num_tables: int, pooling: int) -> np.dtype:
    return np.dtype([("idx", "<u4", (num_tables * pooling,)), ("target", "<f8")])


def trace_to_bytes(trace: TrainingTrace) -> bytes:
    h = trace.header
    if h.rows_e > 2**32:
        raise TraceError("row ids must fit in u32 for the binary trace format")
    head = _HEADER.pack(TRACE_MAGIC, TRACE_VERSION, h.rows_e, h.num_tables, h.pooling,
                        h.batch_b, h.iters_n, h.seed, 0)
    body = np.empty(h.iters_n * h.batch_b, dtype=_record_dtype(h.num_tables, h.pooling))
    body["idx"] = trace.indices.reshape(h.iters_n * h.batch_b, h.num_tables * h.pooling)
    body["target"] = trace.targets.reshape(-1)
    return head + body.tobytes()


def trace_from_bytes(data: bytes) -> TrainingTrace:
    if len(data) < _HEADER.size:
        raise TraceError("truncated trace header")
    magic, version, rows_e, num_tables, pooling, batch_b, iters_n, seed, _ = \
        _HEADER.unpack_from(data)
    if magic != TRACE_MAGIC:
        raise TraceError(f"bad magic {magic!r}")
    if version != TRACE_VERSION:
        raise TraceError(f"unsupported trace version {version}")
    dt = _record_dtype(num_tables, pooling)
    count = iters_n * batch_b
    if len(data) != _HEADER.size + count * dt.itemsize:
        raise TraceError("trace body length does not match header")
    body = np.frombuffer(data, dtype=dt, count=count, offset=_HEADER.size)
    header = TraceHeader(rows_e, num_tables, pooling, batch_b, iters_n, seed)
    indices = body["idx"].astype(np.int64).reshape(iters_n, batch_b, num_tables, pooling)
    targets = body["target"].reshape(iters_n, batch_b).copy()
    return TrainingTrace(header, indices, targets)


def save_trace(trace: TrainingTrace, path) -> None:
    Path(path).write_bytes(trace_to_bytes(trace))


def load_trace(path) -> TrainingTrace:
    return trace_from_bytes(Path(path).read_bytes())


def load_trace_csv(path, rows_e: int | None = None, seed: int = 0) -> TrainingTrace:
    """Read a hand-written trace.

    Columns: ``iteration`` (1-based), ``example``, ``table`` (0-based),
    ``indices`` (space-separated row ids) and ``target``.  Lines starting
    with ``#`` are ignored.  ``rows_e`` defaults to the largest index + 1.
    """
    records = []
    with open(path, newline="") as fh:
        lines = (line for line in fh if line.strip() and not line.lstrip().startswith("#"))
        for rec in csv.DictReader(lines):
            idx = [int(tok) for tok in rec["indices"].split()]
            records.append((int(rec["iteration"]), int(rec["example"]), int(rec["table"]),
                            idx, float(rec["target"])))
    if not records:
        raise TraceError("empty CSV trace")
    iters_n = max(r[0] for r in records)
    batch_b = max(r[1] for r in records) + 1
    num_tables = max(r[2] for r in records) + 1
    pooling = len(records[0][3])
    if min(r[0] for r in records) < 1:
        raise TraceError("CSV iterations are 1-based")
    indices = np.full((iters_n, batch_b, num_tables, pooling), -1, dtype=np.int64)
    targets = np.full((iters_n, batch_b), np.nan)
    for it, ex, tb, idx, target in records:
        if len(idx) != pooling:
            raise TraceError(f"iteration {it} example {ex}: expected {pooling} indices")
        if indices[it - 1, ex, tb, 0] != -1:
            raise TraceError(f"duplicate row for iteration {it} example {ex} table {tb}")
        if not np.isnan(targets[it - 1, ex]) and targets[it - 1, ex] != target:
            raise TraceError(f"conflicting targets for iteration {it} example {ex}")
        indices[it - 1, ex, tb] = idx
        targets[it - 1, ex] = target
    if (indices < 0).any() or np.isnan(targets).any():
        raise TraceError("CSV trace is missing (iteration, example, table) entries")
    if rows_e is None:
        rows_e = int(indices.max()) + 1
    header = TraceHeader(rows_e, num_tables, pooling, batch_b, iters_n, seed)
    return TrainingTrace(header, indices, targets)


class HistoryTable:
    """Last iteration whose noise has been applied, per row (0 = none yet)."""

    def __init__(self, rows_e: int):
        self.last_noised = np.zeros(rows_e, dtype=np.int64)

    def __len__(self):
        return len(self.last_noised)

    def pending(self, it: int) -> np.ndarray:
        """Outstanding per-step noise count of every row at iteration ``it``."""
        return it - self.last_noised


@dataclass
class InputQueue:
    """Two-slot lookahead: head is consumed now, tail next iteration."""

    slots: list = field(default_factory=list)

    def push(self, batch: MiniBatch | None):
        if len(self.slots) >= 2:
            raise StateError("InputQueue already holds two mini-batches")
        self.slots.append(batch)

    def pop(self) -> MiniBatch:
        if not self.slots:
            raise StateError("InputQueue is empty")
        return self.slots.pop(0)

    def head(self) -> MiniBatch:
        return self.slots[0]

    def tail(self) -> MiniBatch | None:
        return self.slots[1] if len(self.slots) > 1 else None

    def __len__(self):
        return len(self.slots)


@dataclass
class SparseGrad:
    """Row-sparse gradient: ``rows`` sorted unique, ``values[i]`` belongs to ``rows[i]``."""

    rows: np.ndarray
    values: np.ndarray

    @classmethod
    def from_dict(cls, entries: dict, dim: int | None = None) -> "SparseGrad":
        rows = np.array(sorted(entries), dtype=np.int64)
        if dim is None:
            dim = len(next(iter(entries.values()))) if entries else 1
        values = np.array([np.asarray(entries[r], dtype=np.float64) for r in rows]).reshape(len(rows), dim)
        return cls(rows, values)

    def to_dict(self) -> dict:
        return {int(r): self.values[i] for i, r in enumerate(self.rows)}

    def norm_sq(self) -> float:
        return float(np.sum(self.values * self.values))

    def scaled(self, factor: float) -> "SparseGrad":
        return SparseGrad(self.rows.copy(), self.values * factor)


def merge_sparse(parts: Sequence[SparseGrad], dim: int) -> SparseGrad:
    """Key-wise vector sum, accumulating in the order the parts are given."""
    nonempty = [p for p in parts if len(p.rows)]
    if not nonempty:
        return SparseGrad(np.zeros(0, dtype=np.int64), np.zeros((0, dim)))
    rows = np.unique(np.concatenate([p.rows for p in nonempty]))
    values = np.zeros((len(rows), dim))
    for p in nonempty:
        values[np.searchsorted(rows, p.rows)] += p.values
    return SparseGrad(rows, values)


TABLE_MAGIC = b"LZDPTBL1"
TABLE_VERSION = 1
_TABLE_HEADER = struct.Struct("<8s8Q")


def tables_to_bytes(tables: Sequence[EmbeddingTable], seed: int = 0, iters_n: int = 0) -> bytes:
    """Little-endian float64 dump; header echoes (num_tables, rows_e, dim, seed, iters_n)."""
    if not tables:
        raise ValueError("nothing to dump")
    rows_e, dim = tables[0].values.shape
    if any(t.values.shape != (rows_e, dim) for t in tables):
        raise ValueError("dumped tables must share one shape")
    head = _TABLE_HEADER.pack(TABLE_MAGIC, TABLE_VERSION, len(tables), rows_e, dim,
                              seed, iters_n, 0, 0)
    return head + b"".join(t.values.astype("<f8").tobytes() for t in tables)


def tables_from_bytes(data: bytes) -> tuple[dict, np.ndarray]:
    """Returns ``(header, values)`` with values shaped (num_tables, rows_e, dim)."""
    if len(data) < _TABLE_HEADER.size:
        raise ValueError("truncated table dump")
    magic, version, num_tables, rows_e, dim, seed, iters_n, _, _ = \
        _TABLE_HEADER.unpack_from(data)
    if magic != TABLE_MAGIC:
        raise ValueError(f"bad table dump magic {magic!r}")
    if version != TABLE_VERSION:
        raise ValueError(f"unsupported table dump version {version}")
    count = num_tables * rows_e * dim
    if len(data) != _TABLE_HEADER.size + 8 * count:
        raise ValueError("table dump length does not match header")
    values = np.frombuffer(data, dtype="<f8", count=count, offset=_TABLE_HEADER.size)
    header = dict(num_tables=num_tables, rows_e=rows_e, dim=dim, seed=seed, iters_n=iters_n)
    return header, values.reshape(num_tables, rows_e, dim).astype(np.float64)


def save_tables(path, tables, seed: int = 0, iters_n: int = 0) -> None:
    Path(path).write_bytes(tables_to_bytes(tables, seed, iters_n))


def load_tables(path) -> tuple[dict, np.ndarray]:
    return tables_from_bytes(Path(path).read_bytes())


REL_DIFF_FLOOR = 1e-6


def max_rel_diff(a: np.ndarray, b: np.ndarray, floor: float = REL_DIFF_FLOOR) -> float:
    """Largest ``|a - b| / max(|a|, |b|, floor)`` over all elements.

    The floor keeps elements that happen to sit at zero from turning
    last-bit rounding noise into a huge relative error.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
