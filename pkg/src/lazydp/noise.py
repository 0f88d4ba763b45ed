"""Counter-addressable Gaussian noise.

Every scalar is a pure function of ``(seed, table_id, row, iter, lane)``.
A Philox4x32-10 block keyed by the seed is evaluated on the counter
``(lane // 2, table_id, row, iter)``; its 128 output bits become two
uniforms in (0, 1] and Box-Muller turns them into two normals, the cosine
branch feeding the even lane and the sine branch the odd lane.

Because noise is addressed rather than streamed, the dense trainer and the
lazy trainer can materialize the same per-(row, iteration) draw at
different times and still agree.

This is a reproducibility-oriented source, not a vetted DP noise source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

MASK32 = 0xFFFFFFFF
MAX_COUNTER_FIELD = MASK32

_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = np.uint64(0x9E3779B9)
_PHILOX_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(MASK32)
_SHIFT32 = np.uint64(32)
_SHIFT11 = np.uint64(11)
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / 9007199254740992.0


@dataclass(frozen=True)
class NoiseKey:
    seed: int
    table_id: int
    row: int
    iter: int
    lane: int = 0

    def __post_init__(self):
        _check_key(self.seed, self.table_id, self.row, self.iter, self.lane)


def _check_key(seed, table_id, row, it, lane=0):
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must fit in 64 bits, got {seed}")
    for name, value in (("table_id", table_id), ("row", row), ("iter", it)):
        if not 0 <= value <= MAX_COUNTER_FIELD:
            raise ValueError(f"{name}={value} outside the 32-bit counter range")
    if not 0 <= lane < 2**33:
        raise ValueError(f"lane={lane} outside the counter range")


def seed_words(seed: int) -> tuple[int, int]:
    """Split a 64-bit seed into the two 32-bit Philox key words (lo, hi)."""
    seed &= 0xFFFFFFFFFFFFFFFF
    return seed & MASK32, seed >> 32


@numba.njit(inline="always")
def _philox4x32_10(c0, c1, c2, c3, k0, k1):
    for _ in range(9):
        p0 = _PHILOX_M0 * c0
        p1 = _PHILOX_M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT32) ^ c1 ^ k0,
            p1 & _MASK,
            (p0 >> _SHIFT32) ^ c3 ^ k1,
            p0 & _MASK,
        )
        k0 = (k0 + _PHILOX_W0) & _MASK
        k1 = (k1 + _PHILOX_W1) & _MASK
    p0 = _PHILOX_M0 * c0
    p1 = _PHILOX_M1 * c2
    return (
        (p1 >> _SHIFT32) ^ c1 ^ k0,
        p1 & _MASK,
        (p0 >> _SHIFT32) ^ c3 ^ k1,
        p0 & _MASK,
    )


@numba.njit(cache=True)
def philox4x32_10(c0, c1, c2, c3, k0, k1):
    """Raw Philox4x32-10 block; exposed for known-answer tests."""
    return _philox4x32_10(
        np.uint64(c0), np.uint64(c1), np.uint64(c2), np.uint64(c3),
        np.uint64(k0), np.uint64(k1),
    )


@numba.njit(inline="always")
def _normal_pair(k0, k1, table_id, row, it, pair):
    x0, x1, x2, x3 = _philox4x32_10(
        np.uint64(pair), np.uint64(table_id), np.uint64(row), np.uint64(it), k0, k1
    )
    # 53-bit integers shifted by one so the uniforms land in (0, 1]
    u1 = (float(((x0 << _SHIFT32) | x1) >> _SHIFT11) + 1.0) * _INV_2_53
    u2 = (float(((x2 << _SHIFT32) | x3) >> _SHIFT11) + 1.0) * _INV_2_53
    r = math.sqrt(-2.0 * math.log(u1))
    theta = _TWO_PI * u2
    return r * math.cos(theta), r * math.sin(theta)


@numba.njit(cache=True)
def _standard_normal(k0, k1, table_id, row, it, lane):
    z0, z1 = _normal_pair(np.uint64(k0), np.uint64(k1), table_id, row, it, lane >> 1)
    return z0 if lane & 1 == 0 else z1


@numba.njit(inline="always")
def _fill_standard(out, k0, k1, table_id, row, it):
    dim = out.shape[0]
    for pair in range((dim + 1) >> 1):
        z0, z1 = _normal_pair(k0, k1, table_id, row, it, pair)
        out[2 * pair] = z0
        if 2 * pair + 1 < dim:
            out[2 * pair + 1] = z1


@numba.njit(cache=True, nogil=True)
def _fill_rows(out, k0, k1, table_id, rows, it_from, it_to, std, ans):
    """Write the pending noise of each row into ``out[i]``.

    ``ans`` set: one draw keyed at ``it_to`` scaled by sqrt(delay) * std.
    Otherwise the per-iteration draws for ``it_from..it_to`` are summed in
    ascending iteration order, each pre-scaled by ``std``.
    """
    k0 = np.uint64(k0)
    k1 = np.uint64(k1)
    dim = out.shape[1]
    z = np.empty(dim)
    for i in range(rows.shape[0]):
        row = rows[i]
        lo = it_from[i]
        hi = it_to[i]
        if ans:
            scale = math.sqrt(std * std * (hi - lo + 1))
            _fill_standard(z, k0, k1, table_id, row, hi)
            for j in range(dim):
                out[i, j] = scale * z[j]
        else:
            for j in range(dim):
                out[i, j] = 0.0
            for it in range(lo, hi + 1):
                _fill_standard(z, k0, k1, table_id, row, it)
                for j in range(dim):
                    out[i, j] += std * z[j]


@numba.njit(cache=True, nogil=True)
def _fill_range(out, k0, k1, table_id, row0, it, std):
    """Per-step noise for the contiguous rows ``row0 .. row0 + len(out)``."""
    k0 = np.uint64(k0)
    k1 = np.uint64(k1)
    dim = out.shape[1]
    z = np.empty(dim)
    for i in range(out.shape[0]):
        _fill_standard(z, k0, k1, table_id, row0 + i, it)
        for j in range(dim):
            out[i, j] = std * z[j]


def gaussian(key: NoiseKey, variance: float) -> float:
    """One N(0, variance) draw addressed by ``key``."""
    if variance < 0:
        raise ValueError("variance must be non-negative")
    if variance == 0:
        return 0.0
    k0, k1 = seed_words(key.seed)
    z = _standard_normal(k0, k1, key.table_id, key.row, key.iter, key.lane)
    return math.sqrt(variance) * z


def noise_vector(seed, table_id, row, it, dim, variance) -> np.ndarray:
    """Lane ``j`` of the result is ``gaussian(NoiseKey(..., lane=j), variance)``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return summed_noise(seed, table_id, row, it, it, dim, variance)


def summed_noise(seed, table_id, row, iter_from, iter_to, dim, per_step_variance):
    """Sum of the per-step noise vectors for ``iter_from..iter_to`` inclusive."""
    if iter_from > iter_to:
        raise ValueError(f"empty iteration range [{iter_from}, {iter_to}]")
    return _rows_noise(seed, table_id, [row], [iter_from], [iter_to], dim,
                       per_step_variance, ans=False)[0]


def ans_noise(seed, table_id, row, it, delay, dim, per_step_variance):
    """Aggregated draw standing in for ``delay`` per-step draws.

    Keyed at ``it`` (the sampling iteration), so ``delay == 1`` reproduces
    ``noise_vector(seed, table_id, row, it, ...)`` bit for bit.
    """
    if delay < 1:
        raise ValueError(f"delay must be >= 1, got {delay}")
    if delay > it:
        raise ValueError(f"delay {delay} reaches before iteration 1 (iter={it})")
    return _rows_noise(seed, table_id, [row], [it - delay + 1], [it], dim,
                       per_step_variance, ans=True)[0]


def _rows_noise(seed, table_id, rows, it_from, it_to, dim, variance, ans):
    if variance < 0:
        raise ValueError("variance must be non-negative")
    rows = np.asarray(rows, dtype=np.int64)
    it_from = np.asarray(it_from, dtype=np.int64)
    it_to = np.asarray(it_to, dtype=np.int64)
    out = np.zeros((len(rows), dim))
    if variance == 0 or len(rows) == 0:
        return out
    _check_key(seed, table_id, int(rows.max()), int(it_to.max()))
    if it_from.min() < 0:
        raise ValueError("iterations must be non-negative")
    k0, k1 = seed_words(seed)
    _fill_rows(out, k0, k1, table_id, rows, it_from, it_to, math.sqrt(variance), ans)
    return out


def rows_noise(seed, table_id, rows, it_from, it_to, dim, per_step_variance, ans=True):
    """Vectorized pending-noise sampler used by the trainers.

    Row ``rows[i]`` receives noise covering iterations
    ``it_from[i] .. it_to[i]``; with ``ans`` a single aggregated draw, else
    the exact per-step sum.  Returns a ``(len(rows), dim)`` float64 array.
    """
    return _rows_noise(seed, table_id, rows, it_from, it_to, dim, per_step_variance, ans)


def range_noise(out, seed, table_id, row0, it, per_step_variance):
    """Fill ``out`` (k x dim) with per-step noise for rows ``row0 .. row0+k``."""
    if per_step_variance == 0:
        out[:] = 0.0
        return out
    _check_key(seed, table_id, row0 + len(out) - 1, it)
    k0, k1 = seed_words(seed)
    _fill_range(out, k0, k1, table_id, row0, it, math.sqrt(per_step_variance))
    return out


def scalars_sampled(delays, dim: int, ans: bool) -> int:
    """Gaussian scalars a pending-noise request consumes."""
    delays = np.asarray(delays)
    if ans:
        return int(len(delays)) * dim
    return int(delays.sum()) * dim
