"""Command-line experiment drivers.

Every run is described by one JSON config (see ``README.md``), optionally
patched with ``--set path.to.key=value``. Outputs embed the resolved config
and its hash, and contain no timestamps, so reruns are byte-identical.

Exit codes: 0 success, 2 config error, 3 runtime failure or divergence,
4 I/O or schema error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .arch_learn import (DivergenceError, RegConfig, TrainConfig, Trainer, complexity_norm,
                         prepare_gates, read_metrics_csv, suggest_lambdas, write_metrics_csv)
from .core_math import SeededRng
from .data_io import (Dataset, ParseError, build_mnist_subset, filter_classes, load_checkpoint,
                      load_mnist_idx, mnist_paths, save_checkpoint, synth_blobs, train_val_split)
from .layers import accuracy, init_network
from .surgery import (PlanError, SurgeryError, SurgeryPlan, architecture_of, compress_svd,
                      eligible_collapses, param_count, run_surgery)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
DATA_ENV = "ARCHLEARN_DATA"
FULL_MNIST_TRAIN, FULL_MNIST_VAL = 60000, 5000
PIXEL_NOTE = "pixels scaled to [0,1] by 1/255, no mean subtraction"


class ConfigError(ValueError):
    pass


class SchemaError(ValueError):
    """An input file is readable but lacks required fields."""


# ---------------------------------------------------------------------------
# architecture strings

_TOKEN = re.compile(r"^(conv):(\d+)x(\d+)x(\d+)$|^(pool):(\d+)$|^(fc|out):(\d+)$")
_REPEAT = re.compile(r"\(([^()]*)\)\s*\*\s*(\d+)")


def parse_arch(text: str) -> list[tuple]:
    """Parse ``"conv:20x5x5 pool:2 fc:500 out:10"`` into layer specs.

    ``(fc:75)*3`` repeats the bracketed group. The string must end with a
    single ``out:`` layer.
    """
    expanded = _REPEAT.sub(lambda m: " ".join([m.group(1)] * int(m.group(2))), text)
    if "(" in expanded or ")" in expanded:
        raise ConfigError(f"arch: unbalanced or unexpanded group in {text!r}")
    specs = []
    for tok in expanded.split():
        m = _TOKEN.match(tok)
        if not m:
            raise ConfigError(f"arch: cannot parse token {tok!r}")
        if m.group(1):
            specs.append(("conv", int(m.group(2)), int(m.group(3)), int(m.group(4))))
        elif m.group(5):
            specs.append(("pool", int(m.group(6))))
        else:
            specs.append((m.group(7), int(m.group(8))))
    if not specs or specs[-1][0] != "out" or sum(s[0] == "out" for s in specs) != 1:
        raise ConfigError("arch: must end with exactly one out:<classes> layer")
    if any(s[1] < 1 for s in specs if s[0] != "pool") or any(s[1] < 2 for s in specs if s[0] == "pool"):
        raise ConfigError("arch: widths must be positive and pool windows at least 2")
    return specs


def arch_widths(specs) -> list[int]:
    return [s[1] for s in specs if s[0] != "pool"]


# ---------------------------------------------------------------------------
# config

DEFAULT_CONFIG = {
    "arch": "conv:20x5x5 pool:2 conv:50x5x5 pool:2 fc:500 out:10",
    "data": {
        "source": "mnist",  # mnist | mnist-subset | blobs
        "dir": None,
        "classes": None,
        "val_size": None,  # None: 5000 for the full MNIST training set, else no split
        "blobs": {"n_per_class": 200, "n_test_per_class": 100, "dim": 20, "separation": 10.0,
                  "seed": 0},
    },
    "train": dataclasses.asdict(TrainConfig()),
    "reg": {"suggest": {"base_lambda3": 1e-5, "reference_width": 500, "width_ratio": 2.5,
                        "lambda3_scale": 1.0}},
    "surgery": {"prune": True, "collapse": []},
    "output_dir": "runs/default",
}


def _merge(base: dict, patch: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in patch.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key != "reg":
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _set_path(cfg: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {} if k not in node or node[k] is None else node[k]
            if not isinstance(node[k], dict):
                raise ConfigError(f"--set {dotted}: {k!r} is not a section")
        node = node[k]
    node[keys[-1]] = value


def load_config(path=None, overrides=()) -> dict:
    """Merge a JSON config file and ``key=value`` overrides onto the defaults."""
    patch = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            patch = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        if not isinstance(patch, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(patch, key.strip(), raw)
    return config_from_dict(patch)


def config_from_dict(patch: dict) -> dict:
    """Merge a partial config onto the defaults and validate it."""
    cfg = _merge(DEFAULT_CONFIG, patch)
    validate_config(cfg)
    return cfg


_TEMPLATE = re.compile(r"(\)\s*\*\s*)n\b")


def expand_template(arch: str, n: int) -> str:
    """Substitute ``n`` in a ``(...)*n`` depth template."""
    return _TEMPLATE.sub(rf"\g<1>{int(n)}", arch)


def validate_config(cfg: dict) -> None:
    specs = parse_arch(expand_template(cfg["arch"], 1))
    try:
        TrainConfig(**cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc
    resolve_reg(cfg, specs)
    if cfg["data"]["source"] not in ("mnist", "mnist-subset", "blobs"):
        raise ConfigError(f"data.source: unknown source {cfg['data']['source']!r}")
    collapse = cfg["surgery"]["collapse"]
    if collapse != "eligible" and not (isinstance(collapse, list) and all(isinstance(i, int) for i in collapse)):
        raise ConfigError("surgery.collapse must be a list of layer indices or \"eligible\"")


def resolve_reg(cfg: dict, specs) -> RegConfig:
    reg = dict(cfg["reg"])
    suggest = reg.pop("suggest", None)
    try:
        if suggest is not None:
            suggest = dict(suggest)
            scale = suggest.pop("lambda3_scale", 1.0)
            base = suggest_lambdas(arch_widths(specs)[:-1] or arch_widths(specs), **suggest)
            base.lambda3 *= scale
            fields = dataclasses.asdict(base)
            fields.update(reg)
            return RegConfig(**fields)
        return RegConfig(**reg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"reg: {exc}") from exc


def portable(cfg: dict) -> dict:
    """The config without its output location, as embedded in outputs."""
    return {k: v for k, v in cfg.items() if k != "output_dir"}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(portable(cfg), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# data

def _data_dir(data_cfg: dict) -> Path:
    if data_cfg.get("dir"):
        return Path(data_cfg["dir"])
    return Path(os.environ.get(DATA_ENV, "data"))


def load_data(data_cfg: dict):
    """``(train, val or None, test)`` datasets for a data config section."""
    source = data_cfg["source"]
    if source == "blobs":
        b = data_cfg["blobs"]
        classes = data_cfg.get("classes") or 2
        per = b["n_per_class"] + b["n_test_per_class"]
        full = synth_blobs(per, classes, b["dim"], b["separation"], b["seed"])
        cut = b["n_per_class"] * classes
        train = Dataset(full.images[:cut], full.labels[:cut], classes, "train")
        test = Dataset(full.images[cut:], full.labels[cut:], classes, "test")
    else:
        root = _data_dir(data_cfg)
        if source == "mnist-subset":
            root = root / "mnist-subset"
            try:
                mnist_paths(root, "train")
            except FileNotFoundError:
                build_mnist_subset(root)
        train = load_mnist_idx(*mnist_paths(root, "train"), split="train")
        test = load_mnist_idx(*mnist_paths(root, "test"), split="test")
        k = data_cfg.get("classes")
        if k is not None and k != train.class_count:
            train, test = filter_classes(train, k), filter_classes(test, k)
    val = None
    val_size = data_cfg.get("val_size")
    if val_size is None:
        val_size = FULL_MNIST_VAL if source == "mnist" and len(train) == FULL_MNIST_TRAIN else 0
    if val_size:
        train, val = train_val_split(train, val_size)
    return train, val, test


# ---------------------------------------------------------------------------
# experiments

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def build_network(cfg: dict, input_shape):
    specs = parse_arch(cfg["arch"])
    tcfg = TrainConfig(**cfg["train"])
    net = init_network(input_shape, specs, SeededRng(tcfg.seed ^ 0x5EED5EED),
                       dtype=np.dtype(tcfg.dtype), gain=tcfg.init_gain)
    return prepare_gates(net, tcfg)


def run_experiment(cfg: dict, out_dir=None, data=None, log=None) -> dict:
    """Train, apply surgery and write checkpoint, metrics and report files.

    Returns the report dictionary (also written to ``report.json``).
    """
    log = log or (lambda msg: None)
    out = Path(out_dir or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    specs = parse_arch(cfg["arch"])
    tcfg = TrainConfig(**cfg["train"])
    reg = resolve_reg(cfg, specs)
    train, val, test = data if data is not None else load_data(cfg["data"])
    if specs[-1][1] != train.class_count:
        raise ConfigError(f"arch has {specs[-1][1]} outputs but data has {train.class_count} classes")
    net = build_network(cfg, train.images.shape[1:])
    chash = config_hash(cfg)

    trainer = Trainer(net, train.images, train.labels, tcfg, reg,
                      None if val is None else val.images, None if val is None else val.labels)
    started = time.perf_counter()
    while not trainer.done:
        trainer.run(max_steps=trainer.steps_per_epoch)
        last = trainer.timeline[-1] if trainer.timeline else None
        log(f"epoch {trainer.epoch}/{tcfg.epochs} loss={trainer.last_loss:.4f} "
            f"phi={last.phi if last else '-'} ({time.perf_counter() - started:.0f}s)")

    header = json.dumps({"config": portable(cfg), "config_hash": chash, "reg": dataclasses.asdict(reg),
                         "note": PIXEL_NOTE}, sort_keys=True)
    write_metrics_csv(out / "metrics.csv", trainer.timeline, header)
    provenance = {"config": portable(cfg), "config_hash": chash}
    trainer.save(out / "trained.alnckpt", provenance)

    surg = cfg["surgery"]
    collapse = eligible_collapses(net) if surg["collapse"] == "eligible" else list(surg["collapse"])
    plan = SurgeryPlan(prune=bool(surg["prune"]), collapse_layers=collapse)
    small, report = run_surgery(net, plan, test.images, test.labels)
    save_checkpoint(small, out / "final.alnckpt", trainer.iteration, None, provenance)
    result = report.to_dict()
    result.update({
        "config": portable(cfg),
        "config_hash": chash,
        "reg": dataclasses.asdict(reg),
        "eligible_collapses": eligible_collapses(net),
        "complexity": complexity_norm(report.phi_after),
        "depth_before": len(report.phi_before),
        "depth_after": len(report.phi_after),
        "test_error": None if report.acc_after is None else 1.0 - report.acc_after,
        "iterations": trainer.iteration,
    })
    _write_json(out / "report.json", result)
    return result


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    rho = spearmanr(x, y).statistic
    return float(rho)


def _run_isolated(args):
    cfg, out_dir = args
    return run_experiment(cfg, out_dir)


def _run_many(jobs, parallel: int, log):
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_isolated, jobs))
    results = []
    for cfg, out_dir in jobs:
        log(f"run -> {out_dir}")
        results.append(run_experiment(cfg, out_dir, log=log))
    return results


def sweep_classes(cfg: dict, ks, out_dir=None, parallel: int = 1, log=None) -> dict:
    log = log or (lambda msg: None)
    out = Path(out_dir or cfg["output_dir"])
    jobs = []
    for k in ks:
        run_cfg = copy.deepcopy(cfg)
        run_cfg["data"]["classes"] = int(k)
        run_cfg["arch"] = re.sub(r"out:\d+", f"out:{int(k)}", run_cfg["arch"])
        jobs.append((run_cfg, out / f"classes_{k}"))
    reports = _run_many(jobs, parallel, log)
    rows = [{"k": int(k), "complexity": r["complexity"], "error": r["test_error"],
             "phi": r["phi_after"], "params": r["params_after"]} for k, r in zip(ks, reports)]
    summary = {
        "rows": rows,
        "spearman_complexity": spearman([r["k"] for r in rows], [r["complexity"] for r in rows]),
        "spearman_error": spearman([r["k"] for r in rows], [r["error"] for r in rows]),
        "config": portable(cfg),
        "config_hash": config_hash(cfg),
    }
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "sweep_classes.json", summary)
    with open(out / "sweep_classes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "complexity", "error", "params"])
        for r in rows:
            w.writerow([r["k"], r["complexity"], repr(r["error"]), r["params"]])
    return summary


def sweep_depth(cfg: dict, repeats, out_dir=None, parallel: int = 1, log=None) -> dict:
    log = log or (lambda msg: None)
    if not _TEMPLATE.search(cfg["arch"]):
        raise ConfigError("sweep-depth needs an arch template with a '(...)*n' group")
    out = Path(out_dir or cfg["output_dir"])
    jobs = []
    for n in repeats:
        run_cfg = copy.deepcopy(cfg)
        run_cfg["arch"] = expand_template(cfg["arch"], n)
        run_cfg["surgery"]["collapse"] = "eligible"
        jobs.append((run_cfg, out / f"repeat_{n}"))
    reports = _run_many(jobs, parallel, log)
    rows = [{"n": int(n), "depth_before": r["depth_before"], "depth_after": r["depth_after"],
             "phi": r["phi_after"], "error": r["test_error"]} for n, r in zip(repeats, reports)]
    summary = {"rows": rows, "config": portable(cfg), "config_hash": config_hash(cfg)}
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "sweep_depth.json", summary)
    return summary


def svd_baseline(checkpoint, layer: int, rank: int, data, al_report=None) -> dict:
    net = load_checkpoint(checkpoint)
    _, _, test = data
    small = compress_svd(net, layer, rank)
    result = {
        "layer": layer,
        "rank": rank,
        "params_before": param_count(net),
        "params_after": param_count(small),
        "acc_before": accuracy(net, test.images, test.labels),
        "acc_after": accuracy(small, test.images, test.labels),
        "phi_after": architecture_of(small),
    }
    if al_report is not None:
        result["al"] = {k: al_report.get(k) for k in ("params_after", "acc_after", "phi_after")}
    return result


def consolidate_reports(paths, plot_csv=None) -> dict:
    """Merge metrics CSVs keyed by config hash; optionally write plot data."""
    if not paths:
        raise ConfigError("report needs at least one metrics CSV")
    runs: dict = {}
    plot_rows = []
    for path in paths:
        try:
            comments, records = read_metrics_csv(path)
        except ValueError as exc:
            raise SchemaError(str(exc)) from exc
        meta = {}
        for line in comments:
            try:
                meta = json.loads(line)
            except json.JSONDecodeError:
                continue
        key = meta.get("config_hash", str(path))
        iters = [r.iteration for r in records]
        if any(b <= a for a, b in zip(iters, iters[1:])):
            raise SchemaError(f"{path}: iteration column is not increasing")
        final = records[-1] if records else None
        runs.setdefault(key, []).append({
            "path": str(path),
            "records": len(records),
            "final_iteration": final.iteration if final else None,
            "final_loss": final.loss if final else None,
            "final_phi": final.phi if final else None,
            "final_complexity": complexity_norm(final.phi) if final else None,
            "min_complexity": min((complexity_norm(r.phi) for r in records), default=None),
        })
        for r in records:
            plot_rows.append([key, str(path), r.iteration, *r.phi])
    summary = {"runs": runs, "run_count": sum(len(v) for v in runs.values())}
    if plot_csv:
        width = max(len(r) for r in plot_rows) - 3 if plot_rows else 0
        with open(plot_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["config_hash", "path", "iter"] + [f"phi_{i}" for i in range(width)])
            w.writerows(plot_rows)
    return summary


# ---------------------------------------------------------------------------
# entry point

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="archlearn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=False, help="JSON experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. train.epochs=3")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("-q", "--quiet", action="store_true")

    common(sub.add_parser("train", help="train with gates, prune, optionally collapse"))
    sp = sub.add_parser("sweep-classes", help="repeat training on the first k classes")
    common(sp)
    sp.add_argument("--classes", default="2,4,6,8,10")
    sp.add_argument("--parallel", type=int, default=1)
    sp = sub.add_parser("sweep-depth", help="repeat training for several (...)*n depths")
    common(sp)
    sp.add_argument("--repeats", default="3,5,7")
    sp.add_argument("--parallel", type=int, default=1)
    sp = sub.add_parser("svd-baseline", help="low-rank compress one dense layer of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--layer", type=int, required=True)
    sp.add_argument("--rank", type=int, required=True)
    sp.add_argument("--al-report", help="report.json of an AL run to show alongside")
    sp = sub.add_parser("report", help="merge metrics CSVs")
    sp.add_argument("metrics", nargs="*")
    sp.add_argument("--out", help="consolidated JSON path (default: stdout)")
    sp.add_argument("--plot-csv", help="write iteration vs architecture CSV here")
    sp = sub.add_parser("suggest-lambdas", help="regularizer weights for an architecture")
    sp.add_argument("--arch", required=True)
    sp.add_argument("--base-lambda3", type=float, default=1e-5)
    sp.add_argument("--reference-width", type=int, default=500)
    sp.add_argument("--width-ratio", type=float, default=2.5)
    return p


def _int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise ConfigError("list must not be empty")
    return values


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    quiet = getattr(args, "quiet", False)

    def log(msg):
        if not quiet:
            print(msg, file=sys.stderr, flush=True)

    try:
        if args.command == "suggest-lambdas":
            reg = suggest_lambdas(arch_widths(parse_arch(args.arch))[:-1], args.reference_width,
                                  args.base_lambda3, args.width_ratio)
            print(json.dumps(dataclasses.asdict(reg), indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "report":
            summary = consolidate_reports(args.metrics, args.plot_csv)
            text = json.dumps(summary, indent=2, sort_keys=True)
            if args.out:
                Path(args.out).write_text(text + "\n")
            else:
                print(text)
            return EXIT_OK

        cfg = load_config(args.config, args.set)
        if args.out:
            cfg["output_dir"] = args.out
        out = Path(cfg["output_dir"])
        if args.command == "train":
            result = run_experiment(cfg, out, log=log)
            log(f"phi {result['phi_before']} -> {result['phi_after']}, params "
                f"{result['params_before']} -> {result['params_after']}, "
                f"acc {result['acc_before']:.4f} -> {result['acc_after']:.4f}")
        elif args.command == "sweep-classes":
            summary = sweep_classes(cfg, _int_list(args.classes), out, args.parallel, log)
            for r in summary["rows"]:
                log(f"k={r['k']} complexity={r['complexity']} error={r['error']:.4f}")
        elif args.command == "sweep-depth":
            summary = sweep_depth(cfg, _int_list(args.repeats), out, args.parallel, log)
            for r in summary["rows"]:
                log(f"n={r['n']} depth {r['depth_before']} -> {r['depth_after']} phi={r['phi']}")
        elif args.command == "svd-baseline":
            al = json.loads(Path(args.al_report).read_text()) if args.al_report else None
            result = svd_baseline(args.checkpoint, args.layer, args.rank, load_data(cfg["data"]), al)
            result["config_hash"] = config_hash(cfg)
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / f"svd_layer{args.layer}_rank{args.rank}.json", result)
            log(json.dumps(result, sort_keys=True))
        return EXIT_OK
    except (ConfigError, PlanError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ParseError, PermissionError, IsADirectoryError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, SurgeryError, ValueError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
