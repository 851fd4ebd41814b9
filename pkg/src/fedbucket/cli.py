"""Command-line front end: ``run``, ``cost`` and ``sweep``.

Per-round metrics CSV (``metrics.csv``), one row per federated round:

=============================  ==============================================
column                         meaning
=============================  ==============================================
round                          round index k, from 0
sampled                        space-separated client ids, ascending
clients                        number of sampled clients
train_loss, train_accuracy     global model after the round, federated pool
test_loss, test_accuracy       global model after the round, test set
uplink_index_bits              index (or raw/QSGD) bits, per client
uplink_codebook_bits           codebook bits actually sent, per client
uplink_codebook_bits_amortised amortised codebook charge, per client
downlink_bits                  downlink bits actually sent, per client
downlink_bits_amortised        downlink charge with amortised codebooks
baseline_bits                  full-precision up+down cost, per client
wire_uplink_bits               measured size of all uplink payloads
wire_downlink_bits             measured size of all downlink payloads
bits_per_client                amortised up+down bits per client
cumulative_bits_per_client     running sum of ``bits_per_client``
refresh                        1 if codebooks were refreshed this round
update_range                   per-layer range of the mean update, ``;``-joined
update_variance                per-layer variance, ``;``-joined
update_excess_kurtosis         per-layer excess kurtosis, ``;``-joined
=============================  ==============================================

The wire columns equal ``clients`` times the matching per-client bits
(payload headers excluded). The calibration round that seeds the first
codebooks is not a row; its cost is in ``summary.json``.

Floats are written with ``repr`` so a rerun with the same config is
byte-identical. Timestamps only appear in ``manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, costing
from .config import PRESETS, SWEEP_AXES, ExperimentConfig, load_config
from .data import Dataset, load_idx, make_synthetic
from .errors import ConfigError, FedBucketError
from .federation import RoundRecord, run_experiment
from .rng import derive_seed

log = logging.getLogger("fedbucket")

OUT_DIR_ENV = "FEDBUCKET_OUT_DIR"

METRICS_COLUMNS = (
    "round", "sampled", "clients", "train_loss", "train_accuracy", "test_loss", "test_accuracy",
    "uplink_index_bits", "uplink_codebook_bits", "uplink_codebook_bits_amortised",
    "downlink_bits", "downlink_bits_amortised", "baseline_bits",
    "wire_uplink_bits", "wire_downlink_bits", "bits_per_client", "cumulative_bits_per_client",
    "refresh", "update_range", "update_variance", "update_excess_kurtosis",
)

SWEEP_COLUMNS = (
    "quantiser", "axis", "value", "runs",
    "final_test_accuracy_mean", "final_test_accuracy_std",
    "final_test_loss_mean", "final_test_loss_std",
    "bits_per_client_round_mean", "total_bits_amortised_mean", "total_bits_amortised_std",
    "total_bits_actual_mean", "total_bits_actual_std",
)

RUN_COLUMNS = ("quantiser", "axis", "value", "seed", "final_test_accuracy", "final_test_loss",
               "bits_per_client_round", "total_bits_amortised", "total_bits_actual")

COST_COLUMNS = ("method", "levels", "uplink_bits", "downlink_bits", "total_bits", "reduction")


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, Fraction):
        return str(x.numerator) if x.denominator == 1 else repr(float(x))
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------- datasets

def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    ds = cfg.dataset
    if ds["kind"] == "idx":
        classes = ds.get("classes", 10)
        train = load_idx(ds["train_images"], ds["train_labels"], classes)
        test = None
        if "test_images" in ds and "test_labels" in ds:
            test = load_idx(ds["test_images"], ds["test_labels"], classes)
        return train, test
    root = ds.get("seed", cfg.seed)
    classes = ds.get("classes", 4)
    train = make_synthetic(classes, ds["per_class"], ds["feature_dim"], ds["spread"],
                           derive_seed(root, "data"), ds["separation"])
    test = make_synthetic(classes, ds["test_per_class"], ds["feature_dim"], ds["spread"],
                          derive_seed(root, "test-data"), ds["separation"])
    return train, test


def run_config(cfg: ExperimentConfig, on_round=None):
    """Build data and model for ``cfg`` and run it; returns ``(result, spec)``."""
    train, test = build_datasets(cfg)
    spec = cfg.model_spec(train.feature_dim, train.class_count)
    if spec.input_dim != train.feature_dim or spec.class_count != train.class_count:
        raise ConfigError(
            f"model {spec.widths} does not fit data with {train.feature_dim} features "
            f"and {train.class_count} classes", field="model.widths")
    return run_experiment(cfg.round, spec, train, test, alpha=cfg.alpha, on_round=on_round), spec


def metrics_rows(records: list[RoundRecord]):
    cum = Fraction(0)
    for r in records:
        c = r.cost
        per_client = c.per_client_amortised
        cum += per_client
        yield (
            r.round, " ".join(map(str, r.sampled)), c.clients,
            _num(r.train_loss), _num(r.train_accuracy), _num(r.test_loss), _num(r.test_accuracy),
            _num(c.uplink_index_bits), _num(c.uplink_codebook_bits_actual),
            _num(c.uplink_codebook_bits), _num(c.downlink_bits), _num(c.downlink_bits_amortised),
            _num(c.baseline_bits), _num(c.wire_uplink_bits), _num(c.wire_downlink_bits),
            _num(per_client), _num(cum), _num(r.refresh),
            ";".join(_num(s.range) for s in r.layer_stats),
            ";".join(_num(s.variance) for s in r.layer_stats),
            ";".join(_num(s.excess_kurtosis) for s in r.layer_stats),
        )


def metrics_csv(records: list[RoundRecord]) -> str:
    return _csv_text(METRICS_COLUMNS, metrics_rows(records))


def _manifest(cfg: ExperimentConfig, command: str, argv: list[str]) -> dict:
    root = cfg.dataset.get("seed", cfg.seed)
    return {
        "command": command,
        "argv": argv,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "seeds": {
            "root": cfg.seed,
            "data": str(derive_seed(root, "data")) if cfg.dataset["kind"] == "synthetic" else None,
            "test_data": str(derive_seed(root, "test-data")) if cfg.dataset["kind"] == "synthetic" else None,
            "init": str(derive_seed(cfg.seed, "init")),
            "partition": str(derive_seed(cfg.seed, "partition")),
        },
        "config": cfg.raw,
    }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _resolve_out_dir(args, cfg: ExperimentConfig) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        return Path(env) / cfg.name
    return Path(cfg.out_dir)


# --------------------------------------------------------------------------- commands

def cmd_run(args) -> int:
    cfg = _load(args)
    out = _resolve_out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        log.info("round %d  test_acc=%s  bits/client=%.1f", rec.round, rec.test_accuracy,
                 float(rec.cost.per_client_amortised))

    result, _ = run_config(cfg, on_round=progress)

    (out / "metrics.csv").write_text(metrics_csv(result.records))
    summary = dict(result.summary, name=cfg.name, seed=cfg.seed,
                   alpha=cfg.alpha, ledger_rows=len(result.ledger))
    _write_json(out / "summary.json", summary)
    _write_json(out / "manifest.json", _manifest(cfg, "run", args.argv))
    print(f"{cfg.name}: {len(result.records)} rounds, final test accuracy "
          f"{summary['final_test_accuracy']}, reduction {summary.get('reduction_percent', '-')}")
    print(f"wrote {out / 'metrics.csv'}, {out / 'summary.json'}, {out / 'manifest.json'}")
    return 0


def cost_rows(cfg: ExperimentConfig) -> list[tuple]:
    """Cost table rows: method, levels, uplink, downlink, total (ceil), reduction."""
    dims = cfg.cost_dims()
    base = costing.round_total(dims, None)
    rows = [("baseline", None, base.uplink, base.downlink, base.total_bits, base.reduction_percent)]
    for method in cfg.cost_methods:
        if method == "baseline":
            continue
        if method == "none":
            rows.append(("none", None, base.uplink, base.downlink, base.total_bits,
                         base.reduction_percent))
            continue
        for levels in cfg.cost_levels:
            if method == "qsgd":
                t = costing.qsgd_cost(dims, levels)
            else:
                cc = cfg.round.cost_config()
                cc = costing.CostConfig(
                    levels=levels, refresh_period=cc.refresh_period, boundary_bits=cc.boundary_bits,
                    downlink_levels=cc.downlink_levels,
                    downlink_refresh_period=cc.downlink_refresh_period,
                    float_bits=cc.float_bits, codebook_scope=cc.codebook_scope)
                t = costing.round_total(dims, cc)
            rows.append((method, levels, t.uplink, t.downlink, t.total_bits, t.reduction_percent))
    return rows


def cmd_cost(args) -> int:
    cfg = _load(args)
    rows = cost_rows(cfg)
    dims = cfg.cost_dims()
    if args.format == "csv":
        sys.stdout.write(_csv_text(COST_COLUMNS, (
            (m, "" if l is None else l, _num(u), _num(d), t, p) for m, l, u, d, t, p in rows)))
        return 0
    if args.format == "json":
        print(json.dumps({"layer_dims": list(dims), "model_dim": sum(dims), "rows": [
            dict(zip(COST_COLUMNS, (m, l, _num(u), _num(d), t, p))) for m, l, u, d, t, p in rows
        ]}, indent=2))
        return 0
    print(f"model dim d = {sum(dims):,} over {len(dims)} layers; "
          f"b = {cfg.round.boundary_bits}, T = {cfg.round.refresh_period}, "
          f"codebook scope = {cfg.round.codebook_scope}, "
          f"downlink = {'full' if cfg.round.downlink_levels is None else 'quantised'}")
    print(f"{'method':<9}{'L':>5}{'uplink':>16}{'downlink':>16}{'total bits':>14}{'reduction':>11}")
    for m, l, u, d, t, p in rows:
        print(f"{m:<9}{'-' if l is None else l:>5}{_fmt_bits(u):>16}{_fmt_bits(d):>16}"
              f"{t:>14,}{p + '%':>11}")
    return 0


def _fmt_bits(x) -> str:
    x = Fraction(x)
    if x.denominator == 1:
        return f"{x.numerator:,}"
    return f"{float(x):,.1f}"


def _sweep_job(job):
    key, cfg = job
    result, _ = run_config(cfg)
    return key, result.summary


def sweep_jobs(cfg: ExperimentConfig, axis: str, seed_override: int | None = None):
    """Canonically ordered ``((quantiser, value, seed), config)`` pairs for a sweep."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    sweep = cfg.sweep
    if axis not in sweep:
        raise ConfigError(f"--axis {axis} needs a non-empty sweep.{axis} list", field=f"sweep.{axis}")
    quantisers = list(sweep.get("quantisers", [cfg.round.quantiser]))
    if axis == "seeds":
        values, seeds = [None], list(sweep["seeds"])
    else:
        values = list(sweep[axis])
        seeds = [seed_override] if seed_override is not None else list(sweep.get("seeds", [cfg.seed]))
    jobs = []
    for q in quantisers:
        for v in values:
            for s in seeds:
                patch: dict = {"seed": s, "quantiser": {"kind": q}}
                if axis == "alpha":
                    patch["partition"] = ({"kind": "iid"} if v == "iid"
                                          else {"kind": "dirichlet", "alpha": v})
                elif axis == "levels":
                    patch["quantiser"]["levels"] = v
                jobs.append(((q, v, s), cfg.with_overrides(**patch)))
    return jobs


def aggregate_sweep(axis: str, results: list[tuple[tuple, dict]]) -> list[tuple]:
    """One row per (quantiser, axis value); std is the sample std (ddof=1, 0 for one run)."""
    groups: dict[tuple, list[dict]] = {}
    for (q, v, _s), summary in results:
        groups.setdefault((q, v), []).append(summary)

    def stats(xs):
        a = np.asarray(xs, dtype=np.float64)
        return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0

    rows = []
    for (q, v), runs in groups.items():
        acc = stats([r["final_test_accuracy"] for r in runs])
        loss = stats([r["final_test_loss"] for r in runs])
        bpc = stats([r.get("bits_per_client_round", 0.0) for r in runs])
        amort = stats([r.get("total_bits_amortised", 0) for r in runs])
        actual = stats([r.get("total_bits_actual", 0) for r in runs])
        rows.append((q, axis, "all" if v is None else _num(v) if v != "iid" else "iid", len(runs),
                     _num(acc[0]), _num(acc[1]), _num(loss[0]), _num(loss[1]), _num(bpc[0]),
                     _num(amort[0]), _num(amort[1]), _num(actual[0]), _num(actual[1])))
    return rows


def cmd_sweep(args) -> int:
    cfg = _load(args, apply_seed=False)
    jobs = sweep_jobs(cfg, args.axis, args.seed)
    out = _resolve_out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    log.info("sweep over %s: %d runs", args.axis, len(jobs))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    rows = aggregate_sweep(args.axis, results)
    per_run = [(q, args.axis, "" if v is None else _num(v) if v != "iid" else "iid", s,
                _num(r["final_test_accuracy"]), _num(r["final_test_loss"]),
                _num(r.get("bits_per_client_round")), _num(r.get("total_bits_amortised")),
                _num(r.get("total_bits_actual"))) for (q, v, s), r in results]
    stem = f"sweep-{args.axis}"
    (out / f"{stem}.csv").write_text(_csv_text(SWEEP_COLUMNS, rows))
    (out / f"{stem}-runs.csv").write_text(_csv_text(RUN_COLUMNS, per_run))
    _write_json(out / f"{stem}-manifest.json", dict(
        _manifest(cfg, "sweep", args.argv), axis=args.axis,
        runs=[{"quantiser": q, "value": v, "seed": s} for (q, v, s), _ in jobs]))
    print(f"{len(jobs)} runs, {len(rows)} aggregated rows -> {out / (stem + '.csv')}")
    return 0


# --------------------------------------------------------------------------- entry point

def _load(args, apply_seed: bool = True) -> ExperimentConfig:
    cfg = load_config(args.config, preset=args.preset)
    if apply_seed and args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedbucket", description=(
        "Federated learning simulator with bucketed update quantisation and bit-exact cost accounting."))
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", nargs="?", help="YAML config file (optional with --preset)")
        sp.add_argument("--preset", choices=PRESETS, help="start from a shipped preset")
        sp.add_argument("--seed", type=int, help="override the root seed")
        sp.add_argument("--out-dir", help=f"output directory (default: ${OUT_DIR_ENV}/<name>, "
                                          "else output.dir from the config)")

    common(sub.add_parser("run", help="run one experiment"))
    c = sub.add_parser("cost", help="print the analytic communication-cost table")
    common(c)
    c.add_argument("--format", choices=("table", "csv", "json"), default="table")
    s = sub.add_parser("sweep", help="run a grid and write mean/std per point")
    common(s)
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    if args.config is None and args.preset is None:
        parser.error("give a config file or --preset")
    handler = {"run": cmd_run, "cost": cmd_cost, "sweep": cmd_sweep}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FedBucketError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
