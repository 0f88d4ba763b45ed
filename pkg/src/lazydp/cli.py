"""Command-line experiment runner.

Subcommands: ``gen``, ``train``, ``compare``, ``stats``, ``bench``.
Settings come from a flat ``key = value`` file (``--config``) and are
overridden by matching flags (``--rows-e 100000``).  Exit codes: 0 success,
1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import core, instrument, stats, tracegen, trainers

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2

# key -> (parser, default); every accepted config key is listed here
CONFIG_KEYS = {
    "clip_c": (float, 1.0),
    "noise_mult": (float, 1.0),
    "batch_b": (int, 8),
    "lr": (float, 0.1),
    "iters_n": (int, 10),
    "dim": (int, 16),
    "rows_e": (int, 1000),
    "pooling": (int, 1),
    "precision": (str, "double"),
    "seed": (int, 0),
    "num_tables": (int, 1),
    "algorithm": (str, "lazydp"),
    "optimizer": (str, "sgd"),
    "skew": (str, "uniform"),
    "init": (str, "zeros"),
    "trace": (str, "trace.bin"),
    "report": (str, "-"),
    "format": (str, "json"),
    "dump": (str, ""),
    "finalize": ("bool", True),
    "memory_cap": (int, core.DEFAULT_MEMORY_CAP),
    "threads": (int, 1),
    "samples": (int, 100_000),
    "delays": (str, "1,2,3,8,64"),
}
HYPER_KEYS = ("clip_c", "noise_mult", "batch_b", "lr", "iters_n", "dim", "rows_e",
              "pooling", "precision", "seed", "num_tables")

# desk-scale versions of the sensitivity sweeps
SWEEP_PRESETS = {
    "table-size": {"rows_e": [10**4, 10**5, 10**6, 10**7]},
    "pooling": {"pooling": [1, 10, 20, 30]},
    "skew": {"skew": ["skew:low", "skew:medium", "skew:high"]},
}


class UsageError(Exception):
    pass


def _parse_value(key: str, text):
    kind, _ = CONFIG_KEYS[key]
    if not isinstance(text, str):
        return text
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "on", "yes"):
                return True
            if low in ("0", "false", "off", "no"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(float(text)) if "e" in text.lower() else int(text, 0)
        return kind(text)
    except ValueError:
        raise UsageError(f"bad value for {key}: {text!r}") from None


def read_config_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def effective_config(args) -> dict:
    cfg = {key: default for key, (_, default) in CONFIG_KEYS.items()}
    if getattr(args, "config", None):
        try:
            cfg.update(read_config_file(args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _parse_value(key, value)
    if cfg["optimizer"] != "sgd":
        raise UsageError("only the stateless 'sgd' optimizer keeps lazy and dense updates equivalent")
    if cfg["algorithm"] not in trainers.ALGORITHMS:
        raise UsageError(f"unknown algorithm {cfg['algorithm']!r}; choose from {', '.join(trainers.ALGORITHMS)}")
    if cfg["format"] not in ("json", "csv"):
        raise UsageError("format must be json or csv")
    return cfg


def hyperparams(cfg: dict) -> core.HyperParams:
    try:
        return core.HyperParams(**{k: cfg[k] for k in HYPER_KEYS})
    except core.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _emit(data: bytes, dest: str):
    if dest in ("", "-"):
        sys.stdout.write(data.decode())
    else:
        Path(dest).write_bytes(data)


def cmd_gen(args) -> int:
    cfg = effective_config(args)
    params = hyperparams(cfg)
    out = Path(args.out or cfg["trace"])
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    try:
        trace = tracegen.generate(params, skew=cfg["skew"])
    except core.ConfigError as exc:
        raise UsageError(str(exc)) from None
    core.save_trace(trace, out)
    print(f"wrote {out} ({params.iters_n} iterations x {params.batch_b} examples)", file=sys.stderr)
    return EXIT_OK


def _load_any_trace(path: str):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"trace {p} not found")
    try:
        if p.suffix == ".csv":
            return core.load_trace_csv(p)
        return core.load_trace(p)
    except core.TraceError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = effective_config(args)
    params = hyperparams(cfg)
    trace = _load_any_trace(args.trace or cfg["trace"])
    algorithm = cfg["algorithm"]
    notes = []
    try:
        init = core.parse_init(cfg["init"])
        result = trainers.train(
            algorithm, trace, params, ans=(algorithm == "lazydp"),
            metrics=instrument.Metrics(series=[]), do_finalize=cfg["finalize"],
            threads=cfg["threads"], init=init, memory_cap=cfg["memory_cap"],
        )
    except (core.ConfigError, core.TraceError) as exc:
        raise UsageError(str(exc)) from None
    if algorithm == "sgd":
        notes.append("non-private run: noise fields are zero")
    if not result.private:
        notes.append("final model not private: pending lazy noise was never flushed")
    dump = args.dump or cfg["dump"]
    if dump:
        core.save_tables(dump, result.tables, params.seed, params.iters_n)
    doc = instrument.report(result.metrics, cfg["format"], config=cfg, notes=notes)
    _emit(doc, args.out or cfg["report"])
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        ha, a = core.load_tables(args.dump_a)
        hb, b = core.load_tables(args.dump_b)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch: {a.shape} vs {b.shape}")
    per_table = [core.max_rel_diff(a[t], b[t]) for t in range(a.shape[0])]
    ok = all(d <= args.rel_tol for d in per_table)
    doc = {
        "a": str(args.dump_a), "b": str(args.dump_b),
        "rel_tol": args.rel_tol, "floor": core.REL_DIFF_FLOOR,
        "max_rel_diff": per_table, "within_tolerance": ok,
    }
    print(json.dumps(doc, indent=2))
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_stats(args) -> int:
    cfg = effective_config(args)
    params = hyperparams(cfg)
    try:
        delays = [int(d) for d in cfg["delays"].split(",") if d.strip()]
    except ValueError:
        raise UsageError(f"bad delay list {cfg['delays']!r}") from None
    if not delays or min(delays) < 1:
        raise UsageError("delays must be positive integers")
    doc = stats.ans_suite(params.seed, delays, cfg["samples"], params.noise_variance)
    _emit((json.dumps(doc, indent=2) + "\n").encode(), args.out or cfg["report"])
    return EXIT_OK if doc["ok"] else EXIT_CHECK_FAILED


def bench_runs(cfg: dict, sweep: dict, algorithms, do_finalize: bool, repeats: int = 1):
    """Time each (sweep point, algorithm) pair on a freshly generated trace."""
    keys = list(sweep)
    points = [dict(zip(keys, vals)) for vals in zip(*sweep.values())] if keys else [{}]
    rows = []
    for point in points:
        local = dict(cfg, **point)
        params = hyperparams(local)
        trace = tracegen.generate(params, skew=local["skew"])
        for algorithm in algorithms:
            best = None
            for _ in range(repeats):
                t0 = time.perf_counter()
                result = trainers.train(
                    algorithm, trace, params, ans=(algorithm == "lazydp"),
                    do_finalize=do_finalize, threads=local["threads"],
                    memory_cap=local["memory_cap"],
                )
                elapsed = time.perf_counter() - t0
                if best is None or elapsed < best[0]:
                    best = (elapsed, result.metrics)
            elapsed, m = best
            row = {**point, "algorithm": algorithm, "seconds": elapsed, **m.counters()}
            row.update({f"nanos_{k}": v for k, v in m.stage_nanos.items()})
            row["nanos_others"] = m.others_nanos()
            rows.append(row)
    return rows


def cmd_bench(args) -> int:
    cfg = effective_config(args)
    if args.preset:
        sweep = dict(SWEEP_PRESETS[args.preset])
    else:
        sweep = {}
    for key, values in (args.sweep or []):
        if key not in CONFIG_KEYS:
            raise UsageError(f"unknown sweep key {key!r}")
        sweep[key] = [_parse_value(key, v) for v in values.split(",")]
    lengths = {len(v) for v in sweep.values()}
    if len(lengths) > 1:
        raise UsageError("all swept keys need the same number of values")
    algorithms = [a.strip() for a in args.algorithms.split(",")]
    for a in algorithms:
        if a not in trainers.ALGORITHMS:
            raise UsageError(f"unknown algorithm {a!r}")
    try:
        rows = bench_runs(cfg, sweep, algorithms, cfg["finalize"] and not args.no_finalize,
                          args.repeats)
    except (core.ConfigError, core.TraceError) as exc:
        raise UsageError(str(exc)) from None
    if cfg["format"] == "csv":
        import csv
        import io
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        data = buf.getvalue().encode()
    else:
        doc = {"config": dict(sorted(cfg.items())), "sweep": sweep, "runs": rows}
        data = (json.dumps(doc, indent=2) + "\n").encode()
    _emit(data, args.out or cfg["report"])
    return EXIT_OK


def _add_config_flags(parser: argparse.ArgumentParser, skip=()):
    parser.add_argument("--config", help="flat key = value config file")
    for key in CONFIG_KEYS:
        if key in skip:
            continue
        parser.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                            metavar=key.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lazydp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic trace")
    _add_config_flags(p)
    p.add_argument("--out", help="trace path (defaults to the trace key)")
    p.add_argument("--force", action="store_true", help="overwrite an existing file")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on a trace and report counters")
    _add_config_flags(p, skip=("dump",))
    p.add_argument("--out", help="report destination (defaults to the report key)")
    p.add_argument("--dump", help="write the final tables as a float64 dump")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="max relative difference between two table dumps")
    p.add_argument("dump_a")
    p.add_argument("dump_b")
    p.add_argument("--rel-tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("stats", help="moment and KS checks of aggregated noise")
    _add_config_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("bench", help="timed sweeps over table size, pooling or skew")
    _add_config_flags(p)
    p.add_argument("--out")
    p.add_argument("--preset", choices=sorted(SWEEP_PRESETS), help="desk-scale sweep axis")
    p.add_argument("--sweep", nargs=2, action="append", metavar=("KEY", "V1,V2,..."))
    p.add_argument("--algorithms", default="sgd,dense,lazydp-noans,lazydp,eana")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--no-finalize", action="store_true",
                   help="skip the final noise flush (timing only; model not private)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lazydp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except core.SizingError as exc:
        print(f"lazydp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
