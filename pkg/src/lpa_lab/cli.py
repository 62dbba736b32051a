"""``lpa-lab`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analyze
from .config import (
    RunConfig,
    load_json,
    parse_compare_config,
    parse_config,
    parse_method,
    run_config_to_dict,
)
from .data import load_csv, make_splits
from .exceptions import ConfigError, DimensionError, LPAError
from .net import forward_full, load_checkpoint, save_checkpoint
from .perturb import solve_plan
from .schedule import LayerChoice, Mode, layer_bounds, partition, split_statistic
from .train import LPA, LPL, LPLPlusLPA, overall_accuracy, train

log = logging.getLogger("lpa_lab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
TAIL_CLASSES = 3
METRIC_COLUMNS = [
    "epoch",
    "row",
    "stage",
    "layer",
    "class",
    "s_bar",
    "set",
    "eps_c",
    "eps_c_layer",
    "train_acc",
    "val_acc",
    "train_loss",
    "learning_rate",
    "val_overall",
    "wall_clock",
]


def _atomic_write(path: Path, write):
    tmp = path.with_name(path.name + ".tmp")
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _write_csv(path: Path, columns, rows):
    def write(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns)
            w.writeheader()
            for r in rows:
                w.writerow(r)

    _atomic_write(path, write)


def _write_json(path: Path, obj):
    _atomic_write(path, lambda tmp: tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n"))


def metric_rows(record, val_overall):
    for ep, overall in zip(record.epochs, val_overall):
        if ep.schedule:
            for entry in ep.schedule:
                c = entry["class"]
                yield {
                    "epoch": ep.epoch,
                    "row": "class",
                    **entry,
                    "train_acc": ep.train_accuracy[c],
                    "val_acc": ep.val_accuracy[c],
                }
        else:
            for c in range(len(ep.train_accuracy)):
                yield {
                    "epoch": ep.epoch,
                    "row": "class",
                    "class": c,
                    "train_acc": ep.train_accuracy[c],
                    "val_acc": ep.val_accuracy[c],
                }
        yield {
            "epoch": ep.epoch,
            "row": "summary",
            "layer": " ".join(str(l) for l in ep.layers),
            "train_loss": ep.train_loss,
            "learning_rate": ep.learning_rate,
            "val_overall": overall,
            "wall_clock": ep.wall_clock,
        }


def tail_classes(counts, k=TAIL_CLASSES):
    """Indices of the ``k`` rarest classes (ties broken toward higher index)."""
    order = sorted(range(len(counts)), key=lambda c: (counts[c], -c))
    return sorted(order[:k])


def execute_run(cfg: RunConfig) -> dict:
    """Train one configuration and write its run directory.

    On failure a ``FAILED`` marker holding the traceback is left behind and
    no metrics file is written.
    """
    out = Path(cfg.output_dir) / cfg.run_id()
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    _write_json(out / "config.json", run_config_to_dict(cfg))
    try:
        splits = make_splits(cfg.dataset)
        rec = train(cfg.train, splits.train, splits.val)
        # overall accuracy per epoch is derived from per-class accuracy weighted by val counts
        counts = splits.val.class_counts
        val_overall = [float(np.nansum(ep.val_accuracy * counts) / counts.sum()) for ep in rec.epochs]
        _write_csv(out / "metrics.csv", METRIC_COLUMNS, metric_rows(rec, val_overall))
        _atomic_write(out / "checkpoint.npz", lambda tmp: save_checkpoint(rec.network, tmp))
        epochs = [ep.epoch for ep in rec.epochs]
        _write_json(
            out / "plot_data.json",
            {
                "series": [
                    {"label": "val_accuracy", "x": epochs, "y": val_overall},
                    {"label": "train_loss", "x": epochs, "y": [ep.train_loss for ep in rec.epochs]},
                ]
            },
        )
        summary = {
            "run_id": cfg.run_id(),
            "method": cfg.method.name,
            "seed": cfg.seed,
            "val_accuracy": overall_accuracy(rec.network, splits.val),
            "tail_accuracy": None,
            "wall_clock": sum(ep.wall_clock for ep in rec.epochs),
        }
        if cfg.dataset.scenario == "longtail":
            tail = tail_classes(splits.train.class_counts)
            summary["tail_accuracy"] = float(np.mean(rec.final_val_accuracy[tail]))
        if getattr(rec.perturber, "stages", None):
            report = analyze.run_variation(rec, splits.train)
            _write_csv(out / "variation.csv", _VARIATION_COLUMNS, report.rows())
        _write_json(out / "summary.json", summary)
        return summary
    except Exception:
        marker.write_text(traceback.format_exc())
        raise


_VARIATION_COLUMNS = ["method", "epoch", "class", "count", "mean_delta_norm", "mean_activation_norm", "ratio"]


def _workers(n_jobs):
    cap = os.environ.get("LPA_LAB_THREADS")
    try:
        limit = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"LPA_LAB_THREADS must be an integer, got {cap!r}", "LPA_LAB_THREADS") from None
    return max(1, min(limit, n_jobs))


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    summary = execute_run(cfg)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_compare(args) -> int:
    spec = parse_compare_config(load_json(args.config))
    cells = list(spec.cells())
    workers = _workers(len(cells))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(execute_run, [c for _, c in cells]))
    else:
        results = [execute_run(c) for _, c in cells]
    rows = []
    for label in spec.methods:
        mine = [r for (lab, _), r in zip(cells, results) if lab == label]
        acc = np.array([r["val_accuracy"] for r in mine])
        row = {
            "method": label,
            "seeds": len(mine),
            "accuracy_mean": float(acc.mean()),
            "accuracy_std": float(acc.std()),
            "tail_accuracy_mean": "",
            "tail_accuracy_std": "",
            "wall_clock_mean": float(np.mean([r["wall_clock"] for r in mine])),
        }
        if spec.dataset.scenario == "longtail":
            tail = np.array([r["tail_accuracy"] for r in mine])
            row["tail_accuracy_mean"] = float(tail.mean())
            row["tail_accuracy_std"] = float(tail.std())
        rows.append(row)
    out = Path(spec.output_dir) / f"compare-{_digest(load_json(args.config))}"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "summary.csv", list(rows[0]), rows)
    for r in rows:
        print(f"{r['method']}: {r['accuracy_mean']:.4f} +/- {r['accuracy_std']:.4f}")
    print(out / "summary.csv")
    return EXIT_OK


def _parse_layers(text):
    try:
        layers = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}", "--layers") from None
    if not layers:
        raise ConfigError("need at least one layer", "--layers")
    return layers


def cmd_layer_scan(args) -> int:
    cfg = parse_config(args.config)
    if not isinstance(cfg.method, LPA):
        raise ConfigError("layer scans need an lpa method", "method.name")
    depth = len(cfg.train.hidden_sizes) + 1
    layers = _parse_layers(args.layers)
    for l in layers:
        if not 1 <= l <= depth:
            raise ConfigError(f"layer {l} outside [1, {depth}]", "--layers")
    rows = []
    for l in layers:
        method = replace(cfg.method, layer_choice=LayerChoice("fixed", (l,)))
        summary = execute_run(replace(cfg, train=replace(cfg.train, method=method)))
        rows.append({"layer": l, "val_accuracy": summary["val_accuracy"], "tail_accuracy": summary["tail_accuracy"], "run_id": summary["run_id"]})
    out = Path(cfg.output_dir) / f"layer-scan-{cfg.run_id()}"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "layer_scan.csv", list(rows[0]), rows)
    _write_json(
        out / "plot_data.json",
        {"series": [{"label": "val_accuracy", "x": [r["layer"] for r in rows], "y": [r["val_accuracy"] for r in rows]}]},
    )
    for r in rows:
        print(f"layer {r['layer']}: {r['val_accuracy']:.4f}")
    return EXIT_OK


PROBES = ("variation", "amplification", "sharpness")


def _variation_probe(net, ds, method, out):
    if isinstance(method, LPLPlusLPA):
        method = method.lpa
    if isinstance(method, LPL):
        method = method.as_lpa(net.depth)
    if not isinstance(method, LPA):
        raise ConfigError("the variation probe needs an lpa or lpl method", "--method")
    l = method.layer_choice.resolve(net.depth)[0]
    acc = analyze.per_class_accuracy(net, ds)
    acc = np.array([acc.get(c, 0.0) for c in range(net.n_classes)])
    counts = np.bincount(ds.labels, minlength=net.n_classes)
    stat = split_statistic(method.mode, acc, counts)
    part = partition(method.mode, stat, method.bounds.tau)
    trace = forward_full(net, ds.features)
    bounds = layer_bounds(method.bounds, part, l, net.depth)
    plan = solve_plan(net, l, trace.activations[l], ds.labels, part.signs(), bounds, method.pgd)
    report = analyze.activation_variation(trace, plan, ds.labels, method.name)
    rows = list(report.rows())
    _write_csv(out / "variation.csv", _VARIATION_COLUMNS, rows)
    return {"label": "relative_variation", "x": [r["class"] for r in rows], "y": [r["ratio"] for r in rows]}


def cmd_analyze(args) -> int:
    probes = [p.strip() for p in args.probes.split(",") if p.strip()]
    if not probes:
        raise ConfigError("probe list is empty", "--probes")
    for p in probes:
        if p not in PROBES:
            raise ConfigError(f"unknown probe {p!r} (choose from {', '.join(PROBES)})", "--probes")
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"no such file: {args.checkpoint}", "--checkpoint")
    if not Path(args.dataset).is_file():
        raise ConfigError(f"no such file: {args.dataset}", "--dataset")
    net = load_checkpoint(args.checkpoint)
    ds = load_csv(args.dataset, n_classes=net.n_classes)
    if ds.n_features != net.input_dim:
        raise ConfigError(f"dataset has {ds.n_features} features, checkpoint expects {net.input_dim}", "--dataset")
    out = Path(args.output or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    layer = args.layer if args.layer is not None else net.depth - 1
    series = []
    if "variation" in probes:
        if args.method:
            method = parse_method(load_json(args.method), "method")
        else:
            method = LPA(Mode.BALANCED, layer_choice=LayerChoice("fixed", (layer,)))
        series.append(_variation_probe(net, ds, method, out))
    if "amplification" in probes:
        entries = analyze.amplification_report(net, ds.features[: args.max_probes], args.epsilon, args.trials, args.seed)
        rows = [
            {"layer": e.layer, "max_ratio": e.max_ratio, "bound": e.bound, "probes": e.probes, "within_bound": e.within_bound}
            for e in entries
        ]
        _write_csv(out / "amplification.csv", list(rows[0]), rows)
        series.append({"label": "amplification_max_ratio", "x": [r["layer"] for r in rows], "y": [r["max_ratio"] for r in rows]})
        series.append({"label": "amplification_bound", "x": [r["layer"] for r in rows], "y": [r["bound"] for r in rows]})
    if "sharpness" in probes:
        from ._rng import stream

        res = analyze.sharpness_probe(
            net, ds.features, ds.labels, layer, args.radius, args.trials, stream(args.seed, "sharpness", layer)
        )
        _write_csv(
            out / "sharpness.csv",
            ["layer", "radius", "trials", "mean_increase", "stderr"],
            [{"layer": layer, "radius": args.radius, "trials": args.trials, "mean_increase": res.mean, "stderr": res.stderr}],
        )
    _write_json(out / "analysis_plot_data.json", {"series": series})
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpa-lab", description="Learned activation perturbation experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="train several methods over several seeds")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("layer-scan", help="train one LPA run per perturbation layer")
    p.add_argument("--config", required=True)
    p.add_argument("--layers", required=True, help="comma-separated layer indices, e.g. 1,2,3")
    p.set_defaults(func=cmd_layer_scan)

    p = sub.add_parser("analyze", help="probe a saved network")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="CSV written by lpa_lab.data.save_csv")
    p.add_argument("--probes", required=True, help="comma-separated: " + ",".join(PROBES))
    p.add_argument("--method", help="JSON file holding a method object (variation probe)")
    p.add_argument("--output")
    p.add_argument("--layer", type=int)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--radius", type=float, default=0.5)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--max-probes", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DimensionError as exc:
        print(f"incompatible input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LPAError, ArithmeticError, OSError, RuntimeError, AssertionError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
