"""Command-line entry point: ``cpt <subcommand> [--config PATH] [--set k=v ...] [--out DIR] [--seed N]``.

A config file is JSON with optional sections ``model``, ``train``, ``data``,
``eval``, ``ablate``, ``gradcheck`` and ``bench`` plus a top-level ``seed``.
``--set section.key=value`` overrides one entry (the value is parsed as JSON,
falling back to a plain string). Unknown keys are rejected. Every run writes
the fully resolved config to ``<out>/config.json``; passing that file back via
``--config`` reproduces the run.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from . import toy
from .data import DataError, generate_dataset, load_dataset, load_manifest, make_splits, subset, write_dataset
from .gradcheck import check_gradients
from .graph import accelerate_knn, knn_graph
from .model import (
    CheckpointError,
    ModelConfig,
    ModelConfigError,
    forward,
    init_params,
    load_checkpoint,
    save_params,
)
from .train import (
    DivergenceError,
    RunReport,
    TrainConfig,
    TrainConfigError,
    ablation_harness,
    cross_entropy,
    point_count_table,
    stream,
    train,
)

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

SUBCOMMANDS = ("gen-data", "train", "eval", "ablate", "gradcheck", "bench-knn")

# criterion-sized network for the finite-difference suite
GRADCHECK_MODEL = {
    "k": 4,
    "layer_dims": [8, 8],
    "interpoint_flags": [True, False],
    "shared_mlp_dim": 16,
    "head_mlp_dims": [8],
    "num_classes": 3,
    "heads": 1,
    "proj_kernel": 1,
}

DEFAULTS: Dict[str, object] = {
    "seed": 0,
    "model": toy.MODEL.to_dict(),
    "train": {k: v for k, v in toy.TRAIN.to_dict().items() if k != "seed"},
    "data": {
        "families": ["sphere", "cube", "torus"],
        "per_class": 30,
        "points": 128,
        "sigma": 0.0,
        "segment": False,
        "train_fraction": 2 / 3,
        "train_manifest": None,
        "test_manifest": None,
    },
    "eval": {"checkpoint": None, "manifest": None, "point_counts": []},
    "ablate": {"axes": {"k": [10, 20, 30, 40], "graph_mode": ["dynamic", "static"], "no_locality": True}, "seeds": [0]},
    "gradcheck": {"model": GRADCHECK_MODEL, "points": 16, "batch": 2, "h": 1e-3, "tolerance": 1e-4},
    "bench": {"sizes": [256, 1024, 4096], "ks": [10, 20], "batch": 1},
}


class ConfigError(ValueError):
    """Bad config file, override or option."""


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

# mappings replaced wholesale by an override rather than merged key by key
REPLACED = ("ablate.axes", "gradcheck.model")


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and where not in REPLACED:
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(out[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_override(text: str) -> dict:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested: dict = {}
    cur = nested
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return nested


def resolve_config(path: Optional[str], overrides: Sequence[str], seed: Optional[int]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, loaded)
    for text in overrides:
        cfg = _merge(cfg, _parse_override(text))
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    # validate the typed sections eagerly
    model_config(cfg)
    train_config(cfg)
    ModelConfig.from_dict({**cfg["model"], **cfg["gradcheck"]["model"]})
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_split(manifest_path, what: str, num_classes: int):
    if not manifest_path:
        raise ConfigError(f"no {what} manifest given (set data.{what}_manifest)")
    return load_dataset(load_manifest(manifest_path), num_classes)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict, out: Path) -> int:
    d = cfg["data"]
    rng = stream(cfg["seed"], "data")
    ds = generate_dataset(d["families"], d["per_class"], d["points"], rng, d["sigma"], d["segment"])
    class_ids = np.repeat(np.arange(len(d["families"]))[None], d["per_class"], axis=0).reshape(-1)
    train_idx, test_idx = make_splits(class_ids, d["train_fraction"], cfg["seed"])
    names = [] if d["segment"] else list(d["families"])
    train_manifest = write_dataset(out / "train", subset(ds, train_idx), names)
    test_manifest = write_dataset(out / "test", subset(ds, test_idx), names)
    print(f"wrote {len(train_idx)} training clouds to {train_manifest}")
    print(f"wrote {len(test_idx)} test clouds to {test_manifest}")
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    mc, tc = model_config(cfg), train_config(cfg)
    train_set = _load_split(cfg["data"]["train_manifest"], "train", mc.num_classes)
    test_manifest = cfg["data"]["test_manifest"]
    test_set = _load_split(test_manifest, "test", mc.num_classes) if test_manifest else None
    best = {"score": -1.0}
    ckpt = out / "model.cpt"
    key = "test_acc" if test_set is not None else "train_acc"

    def on_epoch(record, params):
        line = "  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items())
        print(line, flush=True)
        if key in record and record[key] > best["score"]:
            best["score"] = record[key]
            save_params(params, ckpt, mc)

    try:
        params, report = train(mc, tc, train_set, test_set, on_epoch=on_epoch)
    except DivergenceError as exc:
        print(f"error: numeric divergence in epoch {exc.epoch}: loss {exc.loss}", file=sys.stderr)
        return EXIT_DIVERGED
    if best["score"] < 0:
        save_params(params, ckpt, mc)
    report.write(out / "report.jsonl")
    (out / "report.txt").write_text(report.table() + "\n")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    e = cfg["eval"]
    if not e["checkpoint"]:
        raise ConfigError("no checkpoint given (set eval.checkpoint)")
    mc, params = load_checkpoint(e["checkpoint"])
    manifest = e["manifest"] or cfg["data"]["test_manifest"]
    test_set = _load_split(manifest, "test", mc.num_classes)
    try:
        with T.no_grad():
            forward(test_set.features[:1], mc, params)
    except (T.ShapeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint incompatible with data: {exc}") from exc
    rows = point_count_table(test_set, mc, params, e["point_counts"], cfg["seed"])
    report = RunReport(tables={"eval": rows})
    report.write(out / "eval.jsonl")
    print(report.table())
    return EXIT_OK


def cmd_ablate(cfg: dict, out: Path) -> int:
    mc, tc = model_config(cfg), train_config(cfg)
    train_set = _load_split(cfg["data"]["train_manifest"], "train", mc.num_classes)
    test_set = _load_split(cfg["data"]["test_manifest"], "test", mc.num_classes)
    try:
        report = ablation_harness(mc, tc, train_set, test_set, cfg["ablate"]["axes"], cfg["ablate"]["seeds"])
    except DivergenceError as exc:
        print(f"error: numeric divergence in epoch {exc.epoch}: loss {exc.loss}", file=sys.stderr)
        return EXIT_DIVERGED
    report.write(out / "ablation.jsonl")
    (out / "ablation.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    g = cfg["gradcheck"]
    mc = ModelConfig.from_dict({**cfg["model"], **g["model"]})
    params = init_params(mc, stream(cfg["seed"], "init"))
    rng = stream(cfg["seed"], "data")
    x = rng.normal(size=(g["batch"], g["points"], mc.in_dim))
    x /= np.linalg.norm(x[..., :3], axis=-1).max()
    if mc.head == "segmentation":
        y = rng.integers(0, mc.num_classes, size=(g["batch"], g["points"]))
    else:
        y = rng.integers(0, mc.num_classes, size=g["batch"])
    report = check_gradients(lambda: cross_entropy(forward(x, mc, params), y), dict(params.named()), h=g["h"])
    failed = []
    width = max(len(n) for n in report)
    print(f"{'tensor'.ljust(width)}  {'rel_error':>10}  {'single_step':>11}  kinks")
    for name, r in report.items():
        flag = "" if r.error < g["tolerance"] else "  FAIL"
        print(f"{name.ljust(width)}  {r.error:10.2e}  {r.plain:11.2e}  {r.adapted:5d}{flag}")
        if flag:
            failed.append(name)
    _write_json(out / "gradcheck.json", {n: dataclasses.asdict(r) for n, r in report.items()})
    if failed:
        print(f"FAILED: {len(failed)} tensor(s) above {g['tolerance']}: {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"all {len(report)} tensors below {g['tolerance']}")
    return EXIT_OK


def cmd_bench_knn(cfg: dict, out: Path) -> int:
    b = cfg["bench"]
    rng = stream(cfg["seed"], "data")
    rows, ok = [], True
    for n in b["sizes"]:
        cloud = rng.normal(size=(b["batch"], n, 3))
        for k in b["ks"]:
            if k >= n:
                continue
            t0 = time.perf_counter()
            brute = knn_graph(cloud, k)
            t1 = time.perf_counter()
            fast = accelerate_knn(cloud, k)
            t2 = time.perf_counter()
            equal = bool(np.array_equal(brute.neighbor_idx, fast.neighbor_idx))
            ok &= equal
            rows.append({"points": n, "k": k, "brute_s": t1 - t0, "accelerated_s": t2 - t1, "identical": equal})
    report = RunReport(tables={"bench_knn": rows})
    report.write(out / "bench_knn.jsonl")
    print(report.table())
    return EXIT_OK if ok else EXIT_VERIFY


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "bench-knn": cmd_bench_knn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpt", description="Convolutional point transformer tools")
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config entry, e.g. model.k=10 (repeatable)")
    parser.add_argument("--out", default="cpt-out", help="output directory (default: cpt-out)")
    parser.add_argument("--seed", type=int, help="run seed (overrides the config)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", cfg)
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, ModelConfigError, TrainConfigError, DataError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
