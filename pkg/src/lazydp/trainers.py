"""Training loops for sparse embedding tables.

All trainers share one gradient source (a linear readout over sum-pooled
embeddings, squared loss) and one update rule,
``theta[r] <- theta[r] - lr * (S[r] / B)``, where ``S`` is the summed
(clipped) gradient plus whatever unscaled noise lands on row ``r`` this
step.  They differ only in which rows receive noise and when:

* ``sgd``: no noise, no clipping (clipping optional).
* ``dense``: every row receives its per-step draw every iteration.
* ``lazydp``: rows receive the noise they missed right before they are
  gathered again, using the next mini-batch to know which rows those are;
  ``finalize`` flushes whatever is still pending after the last step.
  With ``ans`` the pending draws are replaced by one draw of summed variance.
* ``eana``: only the rows gathered this iteration are noised.

Noise is counter-addressed (see :mod:`lazydp.noise`), so dense and lazy
training without ANS apply the same addends to every row.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import noise
from .core import (
    DEFAULT_MEMORY_CAP,
    ConfigError,
    EmbeddingTable,
    HistoryTable,
    HyperParams,
    InputQueue,
    MiniBatch,
    SparseGrad,
    StateError,
    TrainingTrace,
    new_tables,
)
from .instrument import Metrics, step_clock

ALGORITHMS = ("sgd", "dense", "lazydp", "lazydp-noans", "eana")
OPTIMIZERS = ("sgd",)
CHUNK_ROWS = 16384


def readout_vectors(params: HyperParams) -> np.ndarray:
    """Fixed, untrained readout weights, one dim-vector per table."""
    rng = np.random.default_rng([params.seed, 0x4EAD])
    return rng.standard_normal((params.num_tables, params.dim)) / np.sqrt(params.dim)


@dataclass
class ToyModel:
    tables: list
    readouts: np.ndarray

    @classmethod
    def for_params(cls, params: HyperParams, tables) -> "ToyModel":
        return cls(list(tables), readout_vectors(params))

    def pooled(self, batch: MiniBatch) -> list:
        return [
            self.tables[t].values[batch.indices[:, t, :]].astype(np.float64).sum(axis=1)
            for t in range(len(self.tables))
        ]

    def predict(self, batch: MiniBatch) -> np.ndarray:
        pred = np.zeros(batch.batch_b)
        for t, pooled in enumerate(self.pooled(batch)):
            pred += pooled @ self.readouts[t]
        return pred

    def loss(self, batch: MiniBatch) -> np.ndarray:
        return 0.5 * (self.predict(batch) - batch.targets) ** 2


def _check_batch(model: ToyModel, batch: MiniBatch):
    for t, table in enumerate(model.tables):
        idx = batch.indices[:, t, :]
        if idx.size and (idx.min() < 0 or idx.max() >= table.rows_e):
            raise IndexError(f"table {t}: index out of range [0, {table.rows_e})")


def per_example_grads(model: ToyModel, batch: MiniBatch) -> list:
    """Unclipped gradient of each example, one :class:`SparseGrad` per table.

    A row gathered k times by an example gets k times the residual-scaled
    readout.
    """
    _check_batch(model, batch)
    resid = model.predict(batch) - batch.targets
    dim = model.readouts.shape[1]
    grads = []
    for b in range(batch.batch_b):
        per_table = []
        for t in range(len(model.tables)):
            rows, counts = np.unique(batch.indices[b, t], return_counts=True)
            values = (counts * resid[b])[:, None] * model.readouts[t][None, :]
            per_table.append(SparseGrad(rows.astype(np.int64), values.reshape(len(rows), dim)))
        grads.append(per_table)
    return grads


def clip_l2(grad, c: float):
    """Rescale so the joint L2 norm over all entries is at most ``c``.

    ``grad`` is a :class:`SparseGrad` or a list of them (one per table); the
    norm spans every part.
    """
    if not c > 0:
        raise ValueError("clipping bound must be positive")
    parts = [grad] if isinstance(grad, SparseGrad) else list(grad)
    norm = np.sqrt(sum(p.norm_sq() for p in parts))
    if norm <= c:
        return grad
    factor = c / norm
    scaled = [p.scaled(factor) for p in parts]
    return scaled[0] if isinstance(grad, SparseGrad) else scaled


def batch_grads(model: ToyModel, batch: MiniBatch, clip_c: float | None,
                metrics: Metrics | None = None) -> list:
    """Sum over examples of (optionally clipped) per-example gradients.

    Vectorized form of ``sum(clip_l2(g, C) for g in per_example_grads(...))``;
    contributions accumulate in example order.  Returns one SparseGrad per
    table whose rows are the unique gathered rows.
    """
    metrics = metrics if metrics is not None else Metrics()
    _check_batch(model, batch)
    B, T, P = batch.indices.shape
    dim = model.readouts.shape[1]

    with metrics.timed("forward"):
        resid = model.predict(batch) - batch.targets
    metrics.record("rows_read", B * T * P)
    metrics.add_flops("forward", "axpy_scalar", B * T * (P + 1) * dim)

    with metrics.timed("backward"):
        coef = resid
        if clip_c is not None:
            idx = batch.indices
            # sum over distinct rows of count^2 == number of equal index pairs
            pair_counts = (idx[:, :, :, None] == idx[:, :, None, :]).sum(axis=(2, 3))
            readout_sq = np.einsum("td,td->t", model.readouts, model.readouts)
            norm = np.abs(resid) * np.sqrt(pair_counts @ readout_sq)
            with np.errstate(divide="ignore", invalid="ignore"):
                factor = np.where(norm > clip_c, clip_c / norm, 1.0)
            coef = resid * factor
        grads = []
        for t in range(T):
            flat = batch.indices[:, t, :].reshape(-1)
            rows, inverse = np.unique(flat, return_inverse=True)
            acc = np.zeros(len(rows))
            np.add.at(acc, inverse, np.repeat(coef, P))
            grads.append(SparseGrad(rows, acc[:, None] * model.readouts[t][None, :]))
    metrics.add_flops("backward", "axpy_scalar", B * T * P * dim)
    return grads


def _apply_update(values: np.ndarray, where, summed: np.ndarray, lr: float, batch_b: int):
    # single update expression shared by every trainer; float32 tables round once
    values[where] = values[where] - lr * (summed / batch_b)


def _merge(grad: SparseGrad, noise_rows: np.ndarray, noise_vals: np.ndarray, dim: int):
    """Merge a gradient and a noise set into one row-sparse noisy sum."""
    rows = np.union1d(grad.rows, noise_rows)
    summed = np.zeros((len(rows), dim))
    summed[np.searchsorted(rows, grad.rows)] += grad.values
    if len(noise_rows):
        summed[np.searchsorted(rows, noise_rows)] += noise_vals
    return rows, summed


def compute_delays(history: HistoryTable, next_accesses: np.ndarray, it: int) -> np.ndarray:
    """Pending per-step noise count of each row about to be gathered.

    ``next_accesses`` must be sorted and duplicate free.  Renews the
    HistoryTable entries to ``it``.  Returns delays aligned with the rows.
    """
    if it < 1:
        raise StateError(f"iterations are 1-based, got {it}")
    next_accesses = np.asarray(next_accesses, dtype=np.int64)
    if len(next_accesses) > 1 and np.any(np.diff(next_accesses) <= 0):
        raise ValueError("next_accesses must be deduplicated and sorted")
    delays = it - history.last_noised[next_accesses]
    if len(delays) and delays.min() <= 0:
        raise StateError("HistoryTable ahead of the current iteration")
    history.last_noised[next_accesses] = it
    return delays


@dataclass
class TrainerState:
    params: HyperParams
    algorithm: str
    tables: list
    readouts: np.ndarray
    metrics: Metrics = field(default_factory=Metrics)
    ans: bool = True
    clip_sgd: bool = False
    threads: int = 1
    chunk_rows: int = CHUNK_ROWS
    iter: int = 0
    history: list | None = None
    queue: InputQueue | None = None
    finalized: bool = False
    _pool: ThreadPoolExecutor | None = field(default=None, repr=False)

    @property
    def model(self) -> ToyModel:
        return ToyModel(self.tables, self.readouts)

    def map_chunks(self, fn, rows_e: int):
        """Run ``fn(r0, r1, metrics)`` over fixed row chunks and merge worker metrics.

        Chunk boundaries do not depend on the thread count and every row is
        owned by exactly one chunk, so results are identical for any
        ``threads``.
        """
        step = self.chunk_rows
        bounds = [(r0, min(r0 + step, rows_e)) for r0 in range(0, rows_e, step)]
        if self.threads <= 1 or len(bounds) == 1:
            for r0, r1 in bounds:
                fn(r0, r1, self.metrics)
            return
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.threads)
        groups = [bounds[w::self.threads] for w in range(self.threads)]

        def work(group):
            local = Metrics()
            for r0, r1 in group:
                fn(r0, r1, local)
            return local

        for local in self._pool.map(work, groups):
            self.metrics.absorb(local)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def new_state(params: HyperParams, algorithm: str, tables=None, *, ans: bool = True,
              clip_sgd: bool = False, metrics: Metrics | None = None, threads: int = 1,
              chunk_rows: int = CHUNK_ROWS, init="zeros",
              memory_cap: int = DEFAULT_MEMORY_CAP) -> TrainerState:
    if algorithm == "lazydp-noans":
        algorithm, ans = "lazydp", False
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}")
    if tables is None:
        tables = new_tables(params, init, memory_cap)
    if len(tables) != params.num_tables:
        raise ConfigError("one table per configured table required")
    state = TrainerState(
        params=params, algorithm=algorithm, tables=list(tables),
        readouts=readout_vectors(params), metrics=metrics if metrics is not None else Metrics(),
        ans=ans, clip_sgd=clip_sgd, threads=max(1, int(threads)), chunk_rows=int(chunk_rows),
    )
    if algorithm == "lazydp":
        state.history = [HistoryTable(t.rows_e) for t in tables]
        state.queue = InputQueue()
    return state


def _require(state: TrainerState, algorithm: str):
    if state.algorithm != algorithm:
        raise StateError(f"{algorithm} step on a {state.algorithm} trainer")
    if state.finalized:
        raise StateError("trainer already finalized")


def sgd_step(state: TrainerState, batch: MiniBatch) -> None:
    _require(state, "sgd")
    p, m = state.params, state.metrics
    state.iter += 1
    grads = batch_grads(state.model, batch, p.clip_c if state.clip_sgd else None, m)
    for t, g in enumerate(grads):
        table = state.tables[t]
        with m.timed("noisy_grad_update"):
            rows, summed = _merge(g, g.rows[:0], np.zeros((0, p.dim)), p.dim)
            _apply_update(table.values, rows, summed, p.lr, p.batch_b)
        m.record("rows_written", len(rows))
        m.add_flops("noisy_grad_update", "axpy_scalar", len(rows) * p.dim)


def dense_dpsgd_step(state: TrainerState, batch: MiniBatch) -> None:
    _require(state, "dense")
    p = state.params
    state.iter += 1
    it = state.iter
    variance = p.noise_variance
    grads = batch_grads(state.model, batch, p.clip_c, state.metrics)

    for t, g in enumerate(grads):
        table = state.tables[t]

        def chunk(r0, r1, m, table=table, g=g, t=t):
            n = r1 - r0
            buf = np.empty((n, p.dim))
            with m.timed("noise_sampling"):
                noise.range_noise(buf, p.seed, t, r0, it, variance)
            if variance:
                m.record("noise_scalars_sampled", n * p.dim)
                m.add_flops("noise_sampling", "gauss_scalar", n * p.dim)
            with m.timed("noisy_grad_gen"):
                lo, hi = np.searchsorted(g.rows, [r0, r1])
                buf[g.rows[lo:hi] - r0] += g.values[lo:hi]
            m.add_flops("noisy_grad_gen", "axpy_scalar", n * p.dim)
            with m.timed("noisy_grad_update"):
                _apply_update(table.values, slice(r0, r1), buf, p.lr, p.batch_b)
            m.record("rows_written", n)
            m.add_flops("noisy_grad_update", "axpy_scalar", n * p.dim)

        state.map_chunks(chunk, table.rows_e)


def eana_step(state: TrainerState, batch: MiniBatch) -> None:
    _require(state, "eana")
    p, m = state.params, state.metrics
    state.iter += 1
    it = state.iter
    grads = batch_grads(state.model, batch, p.clip_c, m)
    for t, g in enumerate(grads):
        table = state.tables[t]
        with m.timed("noise_sampling"):
            ones = np.full(len(g.rows), it, dtype=np.int64)
            vals = noise.rows_noise(p.seed, t, g.rows, ones, ones, p.dim, p.noise_variance)
        _count_noise(m, p, np.ones(len(g.rows), dtype=np.int64), ans=True)
        with m.timed("noisy_grad_gen"):
            rows, summed = _merge(g, g.rows, vals, p.dim)
        m.add_flops("noisy_grad_gen", "axpy_scalar", len(g.rows) * p.dim)
        with m.timed("noisy_grad_update"):
            _apply_update(table.values, rows, summed, p.lr, p.batch_b)
        m.record("rows_written", len(rows))
        m.add_flops("noisy_grad_update", "axpy_scalar", len(rows) * p.dim)


def _count_noise(m: Metrics, p: HyperParams, delays, ans: bool):
    if p.noise_variance == 0:
        return
    scalars = noise.scalars_sampled(delays, p.dim, ans)
    m.record("noise_scalars_sampled", scalars)
    m.add_flops("noise_sampling", "gauss_scalar", scalars)


def lazydp_step(state: TrainerState, cur_batch: MiniBatch, next_batch: MiniBatch | None) -> None:
    """One iteration of lazy noise update.

    Gradients come from ``cur_batch``; noise goes to the deduplicated rows
    of ``next_batch``, covering every iteration since each row was last
    noised up to and including this one.  ``next_batch`` may be ``None``
    only on the final iteration.
    """
    _require(state, "lazydp")
    p, m = state.params, state.metrics
    if next_batch is None and state.iter + 1 != p.iters_n:
        raise StateError("next mini-batch missing before the final iteration")
    state.iter += 1
    it = state.iter
    grads = batch_grads(state.model, cur_batch, p.clip_c, m)

    for t, g in enumerate(grads):
        table = state.tables[t]
        history = state.history[t]
        with m.timed("lazydp_overhead"):
            if next_batch is None:
                next_rows = np.zeros(0, dtype=np.int64)
            else:
                next_rows = next_batch.unique_rows(t)
            first = history.last_noised[next_rows] + 1
            delays = compute_delays(history, next_rows, it)
        with m.timed("noise_sampling"):
            last = np.full(len(next_rows), it, dtype=np.int64)
            vals = noise.rows_noise(p.seed, t, next_rows, first, last, p.dim,
                                    p.noise_variance, ans=state.ans)
        _count_noise(m, p, delays, state.ans)
        with m.timed("noisy_grad_gen"):
            rows, summed = _merge(g, next_rows, vals, p.dim)
        m.add_flops("noisy_grad_gen", "axpy_scalar", len(next_rows) * p.dim)
        with m.timed("noisy_grad_update"):
            _apply_update(table.values, rows, summed, p.lr, p.batch_b)
        m.record("rows_written", len(rows))
        m.add_flops("noisy_grad_update", "axpy_scalar", len(rows) * p.dim)


def flush_rows(state: TrainerState, table_id: int, rows, metrics: Metrics | None = None) -> int:
    """Apply all noise pending on ``rows`` through the current iteration.

    Rows with nothing pending are skipped.  Returns the number of rows
    written.  Flushing early never changes the result as long as it happens
    before a row's next gather, which is what lets ``finalize`` and eager
    schedulers share this path.
    """
    if state.algorithm != "lazydp":
        raise StateError("only the lazy trainer tracks pending noise")
    p = state.params
    m = metrics if metrics is not None else state.metrics
    history = state.history[table_id]
    rows = np.unique(np.asarray(rows, dtype=np.int64))
    with m.timed("lazydp_overhead"):
        rows = rows[history.last_noised[rows] < state.iter]
        first = history.last_noised[rows] + 1
        delays = state.iter - history.last_noised[rows]
        history.last_noised[rows] = state.iter
    if not len(rows):
        return 0
    with m.timed("noise_sampling"):
        last = np.full(len(rows), state.iter, dtype=np.int64)
        vals = noise.rows_noise(p.seed, table_id, rows, first, last, p.dim,
                                p.noise_variance, ans=state.ans)
    _count_noise(m, p, delays, state.ans)
    with m.timed("noisy_grad_update"):
        _apply_update(state.tables[table_id].values, rows, vals, p.lr, p.batch_b)
    m.record("rows_written", len(rows))
    m.add_flops("noisy_grad_update", "axpy_scalar", len(rows) * p.dim)
    return len(rows)


def finalize(state: TrainerState) -> None:
    """Flush every row's outstanding noise so the released tables carry all N steps."""
    if state.algorithm != "lazydp":
        raise StateError("finalize applies to the lazy trainer only")
    if state.finalized:
        raise StateError("finalize called twice")
    if state.iter != state.params.iters_n:
        raise StateError(f"finalize at iteration {state.iter} before N={state.params.iters_n}")
    for t, table in enumerate(state.tables):
        def chunk(r0, r1, m, t=t):
            flush_rows(state, t, np.arange(r0, r1), m)
        state.map_chunks(chunk, table.rows_e)
    state.finalized = True


def pending_noise(state: TrainerState) -> int:
    """Total outstanding per-step draws across all rows and tables."""
    return int(sum(h.pending(state.iter).sum() for h in state.history))


@dataclass
class TrainResult:
    tables: list
    metrics: Metrics
    state: TrainerState

    @property
    def private(self) -> bool:
        s = self.state
        return s.algorithm in ("dense", "eana") or (s.algorithm == "lazydp" and s.finalized)


def train(algorithm: str, trace: TrainingTrace, params: HyperParams, ans: bool = True,
          metrics: Metrics | None = None, *, tables=None, do_finalize: bool = True,
          threads: int = 1, chunk_rows: int = CHUNK_ROWS, clip_sgd: bool = False,
          init="zeros", memory_cap: int = DEFAULT_MEMORY_CAP, on_step=None) -> TrainResult:
    """Run all ``iters_n`` steps of ``algorithm`` over ``trace``.

    ``tables`` are trained in place when given.  ``on_step(state)`` runs
    after each iteration (used by tests to check invariants or to flush
    eagerly).
    """
    trace.check_params(params)
    state = new_state(params, algorithm, tables, ans=ans, clip_sgd=clip_sgd, metrics=metrics,
                      threads=threads, chunk_rows=chunk_rows, init=init, memory_cap=memory_cap)
    m = state.metrics
    try:
        if state.algorithm == "lazydp":
            _lazydp_loop(state, trace, on_step)
            if do_finalize:
                t0 = time.perf_counter_ns()
                finalize(state)
                m.wall_nanos += time.perf_counter_ns() - t0
        else:
            step = {"sgd": sgd_step, "dense": dense_dpsgd_step, "eana": eana_step}[state.algorithm]
            for it, batch in enumerate(trace.batches(), start=1):
                with step_clock(m, it):
                    step(state, batch)
                if on_step is not None:
                    on_step(state)
    finally:
        state.close()
    return TrainResult(state.tables, m, state)


def _lazydp_loop(state: TrainerState, trace: TrainingTrace, on_step):
    queue = state.queue
    batches = trace.batches()
    first = next(batches, None)
    if first is None:
        return
    queue.push(first)
    for it in range(1, trace.header.iters_n + 1):
        with step_clock(state.metrics, it):
            queue.push(next(batches, None))
            lazydp_step(state, queue.head(), queue.tail())
            queue.pop()
        if on_step is not None:
            on_step(state)
