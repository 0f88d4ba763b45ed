import numpy as np
import pytest

from lazydp import stats


def test_moment_check_accepts_true_variance():
    x = np.random.default_rng(0).normal(0, 2.0, 100_000)
    assert stats.moment_check(x, 4.0).ok


def test_moment_check_rejects_wrong_variance():
    x = np.random.default_rng(0).normal(0, 2.0, 100_000)
    assert not stats.moment_check(x, 4.4).ok


def test_degenerate_variance():
    assert stats.moment_check(np.zeros(10), 0.0).ok
    assert not stats.moment_check(np.array([0.0, 1e-9]), 0.0).ok


def test_ks_critical_value():
    # c(0.01) = 1.628 for the two-sample asymptotic bound
    assert stats.ks_critical(100, 100, 0.01) == pytest.approx(1.628 * np.sqrt(0.02), rel=1e-3)


def test_ks_detects_scale_change():
    rng = np.random.default_rng(1)
    assert not stats.ks_check(rng.normal(size=20_000), rng.normal(0, 1.1, 20_000)).ok


def test_suite_small():
    doc = stats.ans_suite(seed=5, delays=(1, 4), samples=20_000)
    assert doc["ok"]
