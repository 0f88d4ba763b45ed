"""Statistical checks for aggregated noise sampling.

A single draw of variance ``n * v`` must be indistinguishable from the sum
of ``n`` independent draws of variance ``v``.  Both sides are sampled from
the counter-keyed source on disjoint keys so the two samples are
independent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as sps

from . import noise

N_SE = 4.0
KS_ALPHA = 0.01
ANS_TABLE = 0
SUMMED_TABLE = 1


@dataclass
class MomentCheck:
    n: int
    mean: float
    var: float
    expected_var: float
    se_mean: float
    se_var: float
    ok: bool


def moment_check(samples: np.ndarray, expected_var: float, n_se: float = N_SE) -> MomentCheck:
    """Mean within ``n_se`` SE of 0 and variance within ``n_se`` SE of ``expected_var``.

    SE of the sample variance of normal data is ``v * sqrt(2 / (n - 1))``.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    n = len(x)
    mean = float(x.mean())
    var = float(x.var(ddof=1))
    se_mean = math.sqrt(expected_var / n)
    se_var = expected_var * math.sqrt(2.0 / (n - 1))
    if expected_var == 0:
        ok = bool(np.all(x == 0))
    else:
        ok = abs(mean) <= n_se * se_mean and abs(var - expected_var) <= n_se * se_var
    return MomentCheck(n, mean, var, expected_var, se_mean, se_var, ok)


def ks_critical(n: int, m: int, alpha: float = KS_ALPHA) -> float:
    """Asymptotic two-sample Kolmogorov-Smirnov critical value."""
    c = math.sqrt(-math.log(alpha / 2.0) / 2.0)
    return c * math.sqrt((n + m) / (n * m))


@dataclass
class KSCheck:
    statistic: float
    critical: float
    pvalue: float
    ok: bool


def ks_check(a, b, alpha: float = KS_ALPHA) -> KSCheck:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if not np.any(a) and not np.any(b):
        return KSCheck(0.0, ks_critical(len(a), len(b), alpha), 1.0, True)
    res = sps.ks_2samp(a, b)
    crit = ks_critical(len(a), len(b), alpha)
    return KSCheck(float(res.statistic), crit, float(res.pvalue), float(res.statistic) < crit)


def ans_samples(seed: int, delay: int, samples: int, variance: float) -> np.ndarray:
    """``samples`` aggregated draws (one per row) for a ``delay``-step window ending at ``delay``."""
    rows = np.arange(samples)
    first = np.ones(samples, dtype=np.int64)
    last = np.full(samples, delay, dtype=np.int64)
    return noise.rows_noise(seed, ANS_TABLE, rows, first, last, 1, variance, ans=True)[:, 0]


def summed_samples(seed: int, delay: int, samples: int, variance: float) -> np.ndarray:
    """``samples`` explicit ``delay``-term sums of per-step draws."""
    rows = np.arange(samples)
    first = np.ones(samples, dtype=np.int64)
    last = np.full(samples, delay, dtype=np.int64)
    return noise.rows_noise(seed, SUMMED_TABLE, rows, first, last, 1, variance, ans=False)[:, 0]


def ans_suite(seed: int = 0, delays=(1, 2, 3, 8, 64), samples: int = 100_000,
              variance: float = 1.0, alpha: float = KS_ALPHA) -> dict:
    """Moment and KS checks of aggregated vs. summed noise for each delay."""
    results = []
    for delay in delays:
        a = ans_samples(seed, delay, samples, variance)
        s = summed_samples(seed, delay, samples, variance)
        ans_m = moment_check(a, delay * variance)
        sum_m = moment_check(s, delay * variance)
        ks = ks_check(a, s, alpha)
        results.append({
            "delay": delay,
            "ans": asdict(ans_m),
            "summed": asdict(sum_m),
            "ks": asdict(ks),
            "ok": ans_m.ok and sum_m.ok and ks.ok,
        })
    return {
        "seed": seed, "samples": samples, "per_step_variance": variance, "alpha": alpha,
        "results": results, "ok": all(r["ok"] for r in results),
    }
