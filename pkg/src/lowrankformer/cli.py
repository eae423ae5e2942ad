"""Command-line entry point: size, bench, estimate, train, validate."""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema

from . import bench, checks, estimator
from .attention import ModelConfig
from .blocks import ClassifierModel, VariantSpec
from .toytrain import SyntheticSpec, TrainConfig, load_mnist_idx, make_synthetic, train

log = logging.getLogger("lowrankformer")

_INT = {"type": "integer", "minimum": 0}
_POS = {"type": "integer", "minimum": 1}
_POS_LIST = {"type": "array", "items": _POS}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {"d_model": _POS, "n_heads": _POS, "d_ff": _POS, "n_enc_layers": _INT,
                           "n_dec_layers": _INT, "ff_bias": {"type": "boolean"}},
        },
        "variant": {"enum": ["transformer", "lrt", "linformer"]},
        "lowrank": {"type": "object", "additionalProperties": False, "properties": {"r": _POS}},
        "linformer": {"type": "object", "additionalProperties": False,
                      "properties": {"k": _POS, "n_max": _POS}},
        "bench": {
            "type": "object", "additionalProperties": False,
            "properties": {"seq_lens": _POS_LIST, "ranks": _POS_LIST, "batch": _POS, "runs": _POS,
                           "warmup": _INT, "mode": {"enum": ["fwd", "fwd_bwd", "both"]},
                           "variants": {"type": "array",
                                        "items": {"enum": ["transformer", "lrt", "linformer"]}},
                           "n_max": _POS},
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {"epochs": _POS, "batch_size": _POS,
                           "learning_rate": {"type": "number", "minimum": 0},
                           "patience": _POS, "target_accuracy": {"type": "number"},
                           "n_classes": _POS, "seq_len": _POS, "n_train": _POS, "n_test": _POS},
        },
        "seed": _INT,
        "dtype": {"enum": ["float32", "float64"]},
    },
}

# BERT-base sized efficiency setup: 2 encoder layers, d=768, d_ff=3072, 12 heads
DEFAULT_CONFIG = {
    "model": {"d_model": 768, "n_heads": 12, "d_ff": 3072, "n_enc_layers": 2, "n_dec_layers": 0,
              "ff_bias": True},
    "variant": "transformer",
    "lowrank": {"r": 64},
    "linformer": {"k": 64, "n_max": 2048},
    "bench": {"seq_lens": [128, 256, 512, 1024, 2048], "ranks": [32, 64, 128, 256], "batch": 1,
              "runs": 30, "warmup": 3, "mode": "fwd",
              "variants": ["transformer", "lrt", "linformer"]},
    "train": {"epochs": 20, "batch_size": 64, "learning_rate": 1e-3},
    "seed": 0,
    "dtype": "float32",
}


class UsageError(Exception):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    user = {}
    if path:
        with open(path) as f:
            user = json.load(f)
    jsonschema.validate(user, CONFIG_SCHEMA)
    cfg = _merge(DEFAULT_CONFIG, user)
    if "GFL_SEED" in os.environ:
        cfg["seed"] = int(os.environ["GFL_SEED"])
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def variant_spec(cfg: dict, variant: str | None = None) -> VariantSpec:
    variant = variant or cfg["variant"]
    rank = cfg["lowrank"]["r"] if variant == "lrt" else cfg["linformer"]["k"]
    return VariantSpec.build(variant, model_config(cfg), rank, cfg["linformer"]["n_max"])


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _open_out(path: str | None):
    return open(path, "w", newline="") if path else sys.stdout


# -- subcommands -------------------------------------------------------------

def cmd_size(args) -> int:
    cfg = load_config(args.config)
    ranks = _int_list(args.ranks) if args.ranks is not None else cfg["bench"]["ranks"]
    n_max = cfg["linformer"]["n_max"]
    rows = bench.size_rows(model_config(cfg), ranks, n_max)
    out = _open_out(args.out)
    try:
        w = csv.DictWriter(out, fieldnames=["variant", "rank", "params", "log2_rank", "log2_params"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _grid(cfg: dict, grid_arg: str | None, runs: int | None) -> bench.SweepGrid:
    b = dict(cfg["bench"])
    if grid_arg:
        text = Path(grid_arg).read_text() if Path(grid_arg).exists() else grid_arg
        extra = json.loads(text)
        unknown = set(extra) - set(CONFIG_SCHEMA["properties"]["bench"]["properties"])
        if unknown:
            raise UsageError(f"unknown grid keys: {sorted(unknown)}")
        b.update(extra)
    modes = ("fwd", "fwd_bwd") if b["mode"] == "both" else (b["mode"],)
    return bench.SweepGrid(model_config(cfg), tuple(b["seq_lens"]), tuple(b["ranks"]),
                           tuple(b["variants"]), modes, runs or b["runs"], b["warmup"],
                           b["batch"], cfg["seed"], cfg["dtype"], b.get("n_max"))


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    grid = _grid(cfg, args.grid, args.runs)
    results = bench.sweep(grid, args.out, timing=not args.analytic_only)
    if not args.out:
        bench.write_csv(results, sys.stdout)
    return 1 if any(r.error for r in results) and args.strict else 0


def cmd_estimate(args) -> int:
    doc = estimator.load_document(args.input)
    text = estimator.rows_to_csv(estimator.estimate_from_document(doc))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _dataset(arg: str, cfg: dict):
    t = cfg["train"]
    if arg == "synthetic":
        return make_synthetic(SyntheticSpec(
            n_classes=t.get("n_classes", 4), seq_len=t.get("seq_len", 32),
            n_train=t.get("n_train", 4000), n_test=t.get("n_test", 1000), seed=cfg["seed"]))
    if arg.startswith("mnist:"):
        parts = arg.split(":")
        factor = int(parts[2]) if len(parts) > 2 else 1
        return load_mnist_idx(parts[1], factor)
    raise UsageError(f"--dataset must be 'synthetic' or 'mnist:DIR[:FACTOR]', got {arg!r}")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data = _dataset(args.dataset, cfg)
    spec = variant_spec(cfg, args.variant)
    if spec.lin is not None and spec.lin.n_max < data.seq_len + 1:
        spec = VariantSpec.build("linformer", spec.cfg, spec.lin.k, data.seq_len + 1)
    model = ClassifierModel(spec, data.n_classes, data.seq_len, data.vocab_size,
                            seed=cfg["seed"], dtype=cfg["dtype"])
    t = cfg["train"]
    tc = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                     learning_rate=t["learning_rate"], patience=t.get("patience"),
                     target_accuracy=t.get("target_accuracy"), seed=cfg["seed"])
    hist = train(model, data, tc)
    if args.out:
        hist.write_csv(args.out)
    else:
        hist.write_csv(sys.stdout)
    if args.save_model:
        for name, arr in hist.best_state.items():
            model.params.set(name, arr)
        model.save(args.save_model)
    print(f"best test accuracy {hist.best_test_accuracy:.4f} at epoch {hist.best_epoch}",
          file=sys.stderr)
    return 0


def cmd_validate(args) -> int:
    fn = checks.off_by_one if args.inject_fault else None
    results = checks.run_quick_suite(fn) if fn else checks.run_quick_suite()
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}  {r.detail}")
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lowrankformer",
                                description="Transformer / LRT / Linformer cost analysis toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("size", help="parameter counts per variant and rank")
    s.add_argument("--config")
    s.add_argument("--ranks", help="comma-separated ranks (default: config bench.ranks)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_size)

    s = sub.add_parser("bench", help="timing and memory sweep")
    s.add_argument("--config")
    s.add_argument("--grid", help="JSON object or file overriding the bench section")
    s.add_argument("--runs", type=int)
    s.add_argument("--analytic-only", action="store_true", help="skip timing")
    s.add_argument("--strict", action="store_true", help="exit 1 if any cell failed")
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("estimate", help="pretraining cost table")
    s.add_argument("--input", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("train", help="train a classifier variant")
    s.add_argument("--config")
    s.add_argument("--dataset", default="synthetic")
    s.add_argument("--variant", choices=["transformer", "lrt", "linformer"])
    s.add_argument("--out")
    s.add_argument("--save-model")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("validate", help="cost-model oracle and quick invariant suite")
    s.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, jsonschema.ValidationError, RuntimeError,
            AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
