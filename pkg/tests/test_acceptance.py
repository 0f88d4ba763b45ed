"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.  The wall-clock
criterion (4) trains a 10^7-row table densely and takes several minutes.
"""

import gc
import time

import numpy as np
import pytest

from lazydp import core, stats, tracegen, trainers
from lazydp.core import HyperParams, MiniBatch
from lazydp.instrument import Metrics


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def _reheader(trace, rows_e):
    h = trace.header
    header = core.TraceHeader(rows_e, h.num_tables, h.pooling, h.batch_b, h.iters_n, h.seed)
    return core.TrainingTrace(header, trace.indices, trace.targets)


# 1 -------------------------------------------------------------------------

def test_c1_lazy_without_ans_matches_dense(capsys):
    p = HyperParams(rows_e=1000, dim=16, batch_b=8, iters_n=50, clip_c=1.0, noise_mult=1.0,
                    lr=0.1, seed=1)
    t0 = time.perf_counter()
    diffs = {}
    for skew in ("uniform", "skew:high"):
        trace = tracegen.generate(p, skew=skew)
        dense = trainers.train("dense", trace, p)
        lazy = trainers.train("lazydp-noans", trace, p)
        assert lazy.private
        diffs[skew] = max(core.max_rel_diff(a.values, b.values)
                          for a, b in zip(dense.tables, lazy.tables))
    elapsed = time.perf_counter() - t0
    ok = all(d <= 1e-9 for d in diffs.values()) and elapsed < 10
    verdict(capsys, 1, ok, f"max rel diff {diffs}, {elapsed:.2f} s (limit 1e-9, 10 s)")


# 2 -------------------------------------------------------------------------

def test_c2_aggregated_noise_distribution(capsys):
    t0 = time.perf_counter()
    doc = stats.ans_suite(seed=0, delays=(1, 2, 3, 8, 64), samples=100_000, variance=1.0)
    elapsed = time.perf_counter() - t0
    parts = []
    for r in doc["results"]:
        z = abs(r["ans"]["var"] - r["ans"]["expected_var"]) / r["ans"]["se_var"]
        parts.append(f"n={r['delay']}: {z:.2f} SE, KS {r['ks']['statistic']:.4f}"
                     f"<{r['ks']['critical']:.4f}")
    ok = doc["ok"] and elapsed < 30
    verdict(capsys, 2, ok, "; ".join(parts) + f"; {elapsed:.2f} s")


# 3 -------------------------------------------------------------------------

def test_c3_traffic_ratio(capsys):
    base = HyperParams(rows_e=10**4, dim=4, batch_b=2048, pooling=1, iters_n=10, seed=3)
    trace = tracegen.generate(base)  # one trace, valid at every table size below
    totals, lazy_writes, worst = {}, {}, 0.0
    for rows_e in (10**4, 10**5, 10**6):
        p = base.with_(rows_e=rows_e)
        tr = _reheader(trace, rows_e)
        dense = trainers.train("dense", tr, p).metrics
        lazy = trainers.train("lazydp", tr, p, metrics=Metrics(series=[]),
                              do_finalize=False).metrics
        lazy_writes[rows_e] = lazy.rows_written
        totals[rows_e] = dense.rows_written / lazy.rows_written
        batches = list(tr.batches())
        for it, row in enumerate(lazy.series):
            uniq_cur = len(batches[it].unique_rows(0))
            uniq_next = len(batches[it + 1].unique_rows(0)) if it + 1 < len(batches) else 0
            measured = rows_e / row["rows_written"]
            predicted = rows_e / (uniq_cur + uniq_next)
            worst = max(worst, abs(measured / predicted - 1))
    linear = all(np.isclose(totals[e] / e, totals[10**4] / 10**4, rtol=1e-12) for e in totals)
    constant = len(set(lazy_writes.values())) == 1
    within = worst <= 0.05
    verdict(capsys, 3, linear and constant and within,
            f"dense/lazy {({e: round(r, 2) for e, r in totals.items()})}, linear={linear}, "
            f"lazy rows_written equal={constant}, worst per-iteration deviation from "
            f"E/(uniq(cur)+uniq(next)) {worst:.3%} (limit 5%)")


# 4 -------------------------------------------------------------------------

@pytest.mark.slow
def test_c4_wall_clock_trend(capsys):
    base = HyperParams(rows_e=10**5, dim=64, batch_b=2048, iters_n=20, precision="single",
                       seed=4)
    warm = base.with_(rows_e=1000, iters_n=2)
    for algo in ("dense", "lazydp"):
        trainers.train(algo, tracegen.generate(warm), warm)
    trace = tracegen.generate(base)
    dense_s, lazy_s = {}, {}
    for rows_e in (10**5, 10**6, 10**7):
        p = base.with_(rows_e=rows_e)
        tr = _reheader(trace, rows_e)
        tables = core.new_tables(p, "zeros")
        runs = []
        for _ in range(3):
            t0 = time.perf_counter()
            trainers.train("lazydp", tr, p, tables=tables, do_finalize=False)
            runs.append(time.perf_counter() - t0)
        lazy_s[rows_e] = min(runs)
        t0 = time.perf_counter()
        trainers.train("dense", tr, p, tables=tables)
        dense_s[rows_e] = time.perf_counter() - t0
        del tables
        gc.collect()
    speedup = dense_s[10**7] / lazy_s[10**7]
    lazy_var = max(lazy_s.values()) / min(lazy_s.values())
    dense_var = dense_s[10**7] / dense_s[10**5]
    ok = speedup >= 20 and lazy_var <= 2 and dense_var >= 10
    verdict(capsys, 4, ok,
            f"speedup at E=1e7 {speedup:.0f}x (>=20), lazy spread {lazy_var:.2f}x (<=2), "
            f"dense spread {dense_var:.1f}x (>=10); dense s {dense_s}, lazy s {lazy_s}")


# 5 -------------------------------------------------------------------------

def test_c5_flop_share(capsys):
    base = HyperParams(rows_e=10**4, dim=128, batch_b=2048, pooling=1, iters_n=2, seed=5)
    shares = {}
    for rows_e in (10**4, 10**5, 10**6):
        p = base.with_(rows_e=rows_e)
        m = trainers.train("dense", tracegen.generate(p), p).metrics
        flops = m.stage_flops
        shares[rows_e] = (flops["noise_sampling"] + flops["noisy_grad_update"]) / m.flop_estimate
        gc.collect()
    values = [shares[e] for e in sorted(shares)]
    increasing = all(a < b for a, b in zip(values, values[1:]))
    ok = increasing and shares[10**6] > 0.8
    verdict(capsys, 5, ok, f"noise+update flop share {({e: round(s, 5) for e, s in shares.items()})}")


# 6 -------------------------------------------------------------------------

def test_c6_untouched_rows(capsys):
    touched, untouched = 100, 100_000
    p = HyperParams(rows_e=touched + untouched, dim=4, batch_b=8, iters_n=10, seed=6,
                    noise_mult=1.0, clip_c=1.0, lr=0.1)
    trace = _reheader(tracegen.generate(p.with_(rows_e=touched)), p.rows_e)
    init = ("uniform", -1.0, 1.0)
    start = core.new_table(p, init).values
    expected = p.iters_n * p.lr**2 * p.noise_variance / p.batch_b**2
    cold = slice(touched, None)

    eana = trainers.train("eana", trace, p, init=init).tables[0].values
    eana_ok = np.array_equal(eana[cold], start[cold])
    parts = [f"EANA untouched rows bitwise unchanged={eana_ok}"]
    ok = eana_ok
    for algo in ("dense", "lazydp", "lazydp-noans"):
        final = trainers.train(algo, trace, p, init=init).tables[0].values
        delta = (final[cold] - start[cold])[:, 0]
        check = stats.moment_check(delta, expected)
        z = abs(check.var - expected) / check.se_var
        parts.append(f"{algo} var {check.var:.6g} vs {expected:.6g} ({z:.2f} SE)")
        ok = ok and check.ok
    verdict(capsys, 6, ok, "; ".join(parts))


# 7 -------------------------------------------------------------------------

def test_c7_metadata_overheads(capsys):
    p = core.dlrm_default_params()
    history = core.history_overhead_bytes(p)
    queue = core.queue_overhead_bytes(p, len(core.DLRM_TABLE_ROWS))
    ok = round(history / 1e6) == 751 and round(queue / 1e3) == 213
    verdict(capsys, 7, ok, f"history {history:,} B = {history / 1e6:.0f} MB, "
                           f"queue {queue:,} B = {queue / 1e3:.0f} KB")


# 8 -------------------------------------------------------------------------

def _random_config(rng):
    return HyperParams(
        rows_e=int(rng.integers(1, 10**4 + 1)),
        dim=int(rng.integers(1, 5)),
        batch_b=int(rng.integers(1, 9)),
        pooling=int(rng.integers(1, 4)),
        num_tables=int(rng.integers(1, 3)),
        iters_n=int(rng.integers(1, 7)),
        clip_c=float(rng.uniform(0.05, 2.0)),
        noise_mult=float(rng.uniform(0.5, 2.0)),
        lr=float(rng.uniform(0.01, 1.0)),
        seed=int(rng.integers(0, 2**32)),
    )


def _history_invariant(p, trace):
    batches = list(trace.batches())
    failures = []

    def check(state):
        it = state.iter
        for t, h in enumerate(state.history):
            expected = np.zeros(p.rows_e, dtype=np.int64)
            for j in range(1, it + 1):
                if j < len(batches):
                    expected[batches[j].unique_rows(t)] = j
            if not np.array_equal(h.last_noised, expected):
                failures.append(it)

    res = trainers.train("lazydp", trace, p, on_step=check)
    final_ok = all(np.all(h.last_noised == p.iters_n) for h in res.state.history)
    return not failures and final_ok


def _conservation(p, trace):
    ok = []

    def check(state):
        drawn = state.metrics.noise_scalars_sampled // p.dim
        ok.append(drawn + trainers.pending_noise(state)
                  == p.num_tables * p.rows_e * state.iter)

    res = trainers.train("lazydp-noans", trace, p, on_step=check)
    done = res.metrics.noise_scalars_sampled == p.num_tables * p.rows_e * p.iters_n * p.dim
    return all(ok) and done and trainers.pending_noise(res.state) == 0


def _clip_bound(p, trace, rng):
    tables = [core.EmbeddingTable(rng.normal(0, 3, (p.rows_e, p.dim)), t)
              for t in range(p.num_tables)]
    model = trainers.ToyModel.for_params(p, tables)
    for batch in trace.batches():
        for b in range(batch.batch_b):
            one = MiniBatch(batch.indices[b:b + 1], batch.targets[b:b + 1] * 10)
            norm = np.sqrt(sum(g.norm_sq() for g in trainers.batch_grads(model, one, p.clip_c)))
            if norm > p.clip_c * (1 + 1e-12):
                return False
    return True


def _threads(p, trace, rng):
    chunk = int(rng.integers(7, 500))
    for algo in ("dense", "lazydp"):
        one = trainers.train(algo, trace, p, threads=1, chunk_rows=chunk)
        three = trainers.train(algo, trace, p, threads=3, chunk_rows=chunk)
        if one.metrics.counters() != three.metrics.counters():
            return False
        if not all(np.array_equal(a.values, b.values) for a, b in zip(one.tables, three.tables)):
            return False
    return True


def test_c8_property_suites(capsys):
    rng = np.random.default_rng(8)
    configs = 100
    failed = {"history": 0, "conservation": 0, "clip": 0, "threads": 0}
    for _ in range(configs):
        p = _random_config(rng)
        skew = str(rng.choice(["uniform", "zipf", "skew:low"]))
        if skew == "skew:low" and p.rows_e < 3:
            skew = "uniform"
        trace = tracegen.generate(p, skew=skew, seed=int(rng.integers(0, 2**32)))
        failed["history"] += not _history_invariant(p, trace)
        failed["conservation"] += not _conservation(p, trace)
        failed["clip"] += not _clip_bound(p, trace, rng)
        failed["threads"] += not _threads(p, trace, rng)
    ok = not any(failed.values())
    verdict(capsys, 8, ok, f"{configs} random configs, failures per property {failed}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
