"""Counters, stage timers, and report emission.

The stage names follow the model-update breakdown used to characterize
private embedding training: forward and backward propagation, noise
sampling, noisy gradient generation, noisy gradient update, and the extra
bookkeeping the lazy trainer introduces.  Wall time not attributed to any
stage is reported as ``others``.
"""

from __future__ import annotations

import csv
import io
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

STAGES = (
    "forward",
    "backward",
    "noise_sampling",
    "noisy_grad_gen",
    "noisy_grad_update",
    "lazydp_overhead",
)
COUNTERS = ("rows_read", "rows_written", "noise_scalars_sampled", "flop_estimate")
SERIES_FIELDS = ("iteration",) + COUNTERS + ("wall_nanos",)

# Box-Muller sample cost, and the load-scale-add of a streaming update,
# both counted in scalar operations.
FLOP_COSTS = {"gauss_scalar": 101, "axpy_scalar": 2}


def flop_cost(kind: str) -> int:
    try:
        return FLOP_COSTS[kind]
    except KeyError:
        raise ValueError(f"unknown flop kind {kind!r}") from None


@dataclass
class Metrics:
    rows_read: int = 0
    rows_written: int = 0
    noise_scalars_sampled: int = 0
    flop_estimate: int = 0
    wall_nanos: int = 0
    steps: int = 0
    stage_nanos: dict = field(default_factory=lambda: dict.fromkeys(STAGES, 0))
    stage_flops: dict = field(default_factory=lambda: dict.fromkeys(STAGES, 0))
    series: list | None = None

    def record(self, event: str, amount: int = 1) -> None:
        if event not in COUNTERS:
            raise ValueError(f"unknown event {event!r}")
        if amount < 0:
            raise ValueError("counters are monotone; amount must be >= 0")
        setattr(self, event, getattr(self, event) + int(amount))

    def add_flops(self, stage: str, kind: str, scalars: int) -> None:
        amount = flop_cost(kind) * int(scalars)
        self.stage_flops[stage] += amount
        self.flop_estimate += amount

    def add_time(self, stage: str, nanos: int) -> None:
        self.stage_nanos[stage] += int(nanos)

    @contextmanager
    def timed(self, stage: str):
        t0 = time.perf_counter_ns()
        try:
            yield
        finally:
            self.stage_nanos[stage] += time.perf_counter_ns() - t0

    def merge(self, other: "Metrics") -> "Metrics":
        """Field-wise sum; per-iteration series are concatenated."""
        out = Metrics()
        for name in COUNTERS + ("wall_nanos", "steps"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        for stage in STAGES:
            out.stage_nanos[stage] = self.stage_nanos[stage] + other.stage_nanos[stage]
            out.stage_flops[stage] = self.stage_flops[stage] + other.stage_flops[stage]
        if self.series is not None or other.series is not None:
            out.series = (self.series or []) + (other.series or [])
        return out

    def absorb(self, other: "Metrics") -> None:
        """In-place merge of a worker's private counters."""
        merged = self.merge(other)
        self.__dict__.update(merged.__dict__)

    def counters(self) -> dict:
        return {name: getattr(self, name) for name in COUNTERS}

    def others_nanos(self) -> int:
        return self.wall_nanos - sum(self.stage_nanos.values())

    def snapshot(self) -> "Metrics":
        return self.merge(Metrics())


@contextmanager
def step_clock(metrics: Metrics, iteration: int):
    """Attribute a whole training step's wall time and append its series row."""
    before = metrics.counters()
    t0 = time.perf_counter_ns()
    try:
        yield
    finally:
        elapsed = time.perf_counter_ns() - t0
        metrics.wall_nanos += elapsed
        metrics.steps += 1
        if metrics.series is not None:
            row = {"iteration": iteration}
            row.update({k: v - before[k] for k, v in metrics.counters().items()})
            row["wall_nanos"] = elapsed
            metrics.series.append(row)


def _ratio(a, b):
    return a / b if b else None


def report_dict(metrics: Metrics, config: dict | None = None,
                baseline: Metrics | None = None, notes=()) -> dict:
    stages = dict(metrics.stage_nanos)
    stages["others"] = metrics.others_nanos()
    total_flops = metrics.flop_estimate
    doc = {
        "config": dict(sorted((config or {}).items())),
        "counters": metrics.counters(),
        "steps": metrics.steps,
        "wall_nanos": metrics.wall_nanos,
        "stage_nanos": stages,
        "stage_flops": dict(metrics.stage_flops),
        "derived": {
            "noise_and_update_flop_share": _ratio(
                metrics.stage_flops["noise_sampling"] + metrics.stage_flops["noisy_grad_update"],
                total_flops),
            "rows_written_per_step": _ratio(metrics.rows_written, metrics.steps),
        },
        "notes": list(notes),
    }
    if baseline is not None:
        doc["derived"]["baseline_over_run"] = {
            name: _ratio(getattr(baseline, name), getattr(metrics, name))
            for name in COUNTERS + ("wall_nanos",)
        }
    return doc


def report(metrics: Metrics, fmt: str = "json", config: dict | None = None,
           baseline: Metrics | None = None, notes=()) -> bytes:
    """Serialize a run.

    ``json`` emits the whole document with a fixed key order.  ``csv`` emits
    one row per recorded iteration (or a single totals row when no series
    was kept), suitable for plotting.
    """
    if fmt == "json":
        doc = report_dict(metrics, config, baseline, notes)
        return (json.dumps(doc, indent=2) + "\n").encode()
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=SERIES_FIELDS, lineterminator="\n")
        writer.writeheader()
        if metrics.series:
            writer.writerows(metrics.series)
        else:
            row = {"iteration": "total", **metrics.counters(), "wall_nanos": metrics.wall_nanos}
            writer.writerow(row)
        return buf.getvalue().encode()
    raise ValueError(f"unknown report format {fmt!r}")
