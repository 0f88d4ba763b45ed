"""Synthetic access traces with controllable skew."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, HyperParams, TraceHeader, TrainingTrace

DEFAULT_ZIPF_ALPHA = 1.05

# fraction of rows that absorbs 90% of all accesses
SKEW_PRESETS = {"low": 0.36, "medium": 0.10, "high": 0.006}
PRESET_HOT_MASS = 0.9


@dataclass(frozen=True)
class SkewSpec:
    kind: str = "uniform"
    alpha: float = DEFAULT_ZIPF_ALPHA
    hot_fraction: float = 1.0
    hot_mass: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "zipf", "hotset"):
            raise ConfigError(f"unknown skew kind {self.kind!r}")
        if self.kind == "zipf" and not self.alpha > 0:
            raise ConfigError("zipf alpha must be positive")
        if self.kind == "hotset":
            if not 0 < self.hot_fraction <= 1:
                raise ConfigError("hot_fraction must lie in (0, 1]")
            if not 0 < self.hot_mass <= 1:
                raise ConfigError("hot_mass must lie in (0, 1]")

    @classmethod
    def parse(cls, text: str) -> "SkewSpec":
        """``uniform``, ``zipf`` / ``zipf:<alpha>``, or ``skew:low|medium|high``."""
        text = text.strip()
        if text == "uniform":
            return cls()
        if text == "zipf":
            return cls("zipf")
        if text.startswith("zipf:"):
            return cls("zipf", alpha=float(text.split(":", 1)[1]))
        if text.startswith("skew:"):
            level = text.split(":", 1)[1]
            if level not in SKEW_PRESETS:
                raise ConfigError(f"unknown skew preset {level!r}")
            return cls("hotset", hot_fraction=SKEW_PRESETS[level], hot_mass=PRESET_HOT_MASS)
        raise ConfigError(f"unknown skew spec {text!r}")

    def hot_rows(self, rows_e: int) -> int:
        return int(round(self.hot_fraction * rows_e))

    def probabilities(self, rows_e: int) -> np.ndarray:
        """Marginal access probability of every row (hot rows first for hotset)."""
        if self.kind == "uniform":
            return np.full(rows_e, 1.0 / rows_e)
        if self.kind == "zipf":
            w = np.arange(1, rows_e + 1, dtype=np.float64) ** -self.alpha
            return w / w.sum()
        hot = self.hot_rows(rows_e)
        cold = rows_e - hot
        p = np.empty(rows_e)
        if cold == 0:
            p[:] = 1.0 / rows_e
            return p
        p[:hot] = self.hot_mass / hot
        p[hot:] = (1.0 - self.hot_mass) / cold
        return p


def _sample(skew: SkewSpec, rows_e: int, size, rng: np.random.Generator) -> np.ndarray:
    if skew.kind == "uniform":
        return rng.integers(0, rows_e, size=size)
    if skew.kind == "hotset":
        hot = skew.hot_rows(rows_e)
        cold = rows_e - hot
        in_hot = rng.random(size) < skew.hot_mass if cold else np.ones(size, dtype=bool)
        hot_idx = rng.integers(0, hot, size=size)
        cold_idx = hot + rng.integers(0, max(cold, 1), size=size)
        return np.where(in_hot, hot_idx, cold_idx)
    cdf = np.cumsum(skew.probabilities(rows_e))
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, rng.random(size), side="right"), rows_e - 1)


def generate(params: HyperParams, num_tables: int | None = None, skew: SkewSpec | str = "uniform",
             seed: int | None = None) -> TrainingTrace:
    """Draw an ``iters_n``-iteration trace.

    Indices are i.i.d. from the skew's marginal (independently per table);
    targets are i.i.d. standard normal.  Each iteration uses its own
    generator derived from ``(seed, iteration)``, so any single batch can
    be regenerated without the rest.
    """
    if isinstance(skew, str):
        skew = SkewSpec.parse(skew)
    num_tables = params.num_tables if num_tables is None else num_tables
    seed = params.seed if seed is None else seed
    rows_e = params.rows_e
    if skew.kind == "hotset" and skew.hot_rows(rows_e) < 1:
        raise ConfigError(
            f"hot set of {skew.hot_fraction} x {rows_e} rows is empty"
        )
    n, b, p = params.iters_n, params.batch_b, params.pooling
    indices = np.empty((n, b, num_tables, p), dtype=np.int64)
    targets = np.empty((n, b))
    for it in range(n):
        rng = np.random.default_rng([seed, it, 0x7EACE])
        indices[it] = _sample(skew, rows_e, (b, num_tables, p), rng)
        targets[it] = rng.standard_normal(b)
    header = TraceHeader(rows_e, num_tables, p, b, n, seed)
    return TrainingTrace(header, indices, targets)
