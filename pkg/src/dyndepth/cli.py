"""Command-line entry point.

Subcommands: gen, train, finetune, layerdrop, prune, eval, analyze.
All commands are driven by a JSON config file; flags override file values and
the effective config is echoed into the output directory.  Exit codes:
0 success, 2 usage/config error, 3 missing prerequisite, 4 numerical failure.
Set DYNDEPTH_LOG=debug|info|warning to adjust verbosity.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    evaluate,
    gate_statistics,
    length_vs_blocks,
    write_gate_stats_csv,
    write_length_blocks_csv,
    write_sweep_csv,
)
from .data import SyntheticTaskSpec, batchify, generate_utterances, load_dataset, save_dataset
from .encoder import EncoderConfig
from .errors import ConfigError, DynDepthError, TrainingDivergedError
from .gating import read_traces_csv, write_traces_csv
from .model import Checkpoint
from .training import (
    TrainConfig,
    finetune_i3d,
    iterative_layer_prune,
    train_dense,
    train_layerdrop,
)

logger = logging.getLogger("dyndepth")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

DEFAULT_SPLITS = {"train": 160, "valid": 32, "test": 32}


def _setup_logging():
    level = os.environ.get("DYNDEPTH_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


class RunConfig:
    """Merged encoder/train/task configuration plus run bookkeeping."""

    def __init__(self, raw, overrides):
        if "seed" not in raw:
            raise ConfigError("config must set a seed")
        self.seed = int(overrides.get("seed") or raw["seed"])
        out = overrides.get("out") or raw.get("out")
        if not out:
            raise ConfigError("config must set an output directory ('out')")
        self.out = Path(out)
        self.encoder = EncoderConfig.from_dict(raw.get("encoder", {}))
        self.train = TrainConfig.from_dict(raw.get("train", {}))
        task = dict(raw.get("task", {}))
        task.setdefault("seed", self.seed)
        self.task = SyntheticTaskSpec.from_dict(task)
        self.task.validate(self.encoder.subsample_factor)
        self.splits = dict(raw.get("splits", DEFAULT_SPLITS))
        for name in ("train", "valid", "test"):
            if name not in self.splits or int(self.splits[name]) < 0:
                raise ConfigError(f"splits must give a nonnegative count for {name!r}")
        if overrides.get("lam") is not None:
            self.train.lam = float(overrides["lam"])
            self.train.validate()
        if overrides.get("beta") is not None:
            self.encoder.beta = float(overrides["beta"])
            self.encoder.validate()

    def to_dict(self):
        return {
            "seed": self.seed,
            "out": str(self.out),
            "encoder": self.encoder.to_dict(),
            "train": self.train.to_dict(),
            "task": self.task.to_dict(),
            "splits": self.splits,
        }

    def echo(self):
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "config.effective.json"
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")


def _load_run_config(args):
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    overrides = {
        "seed": getattr(args, "seed", None),
        "out": getattr(args, "out", None),
        "lam": getattr(args, "lam", None),
        "beta": getattr(args, "beta", None),
    }
    return RunConfig(raw, overrides)


def _dataset_paths(cfg):
    return {name: cfg.out / "data" / f"{name}.bin" for name in ("train", "valid", "test")}


def _load_split(cfg, name):
    path = _dataset_paths(cfg)[name]
    if not path.exists():
        raise FileNotFoundError(f"dataset split {name!r} missing at {path}; run 'gen' first")
    _, utts = load_dataset(path)
    return batchify(utts, cfg.train.batch_size)


def _write_log(path, lines):
    Path(path).write_text("".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    cfg = _load_run_config(args)
    cfg.echo()
    data_dir = cfg.out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    offsets = {"train": 0, "valid": 1, "test": 2}
    for name, path in _dataset_paths(cfg).items():
        spec = copy.deepcopy(cfg.task)
        # disjoint deterministic streams per split
        spec.seed = cfg.task.seed * 1000 + offsets[name]
        utts = generate_utterances(spec, int(cfg.splits[name]),
                                   cfg.encoder.subsample_factor, id_prefix=name)
        save_dataset(path, spec, utts, name)
        logger.info("wrote %s (%d utterances)", path, len(utts))
    return EXIT_OK


def cmd_train(args):
    cfg = _load_run_config(args)
    cfg.echo()
    train_b = _load_split(cfg, "train")
    valid_b = _load_split(cfg, "valid")
    log = [f"command=train seed={cfg.seed} lambda=0"]
    ckpt = train_dense(cfg.encoder, cfg.train, train_b, valid_b, cfg.seed, log)
    ckpt.save(cfg.out / "dense.ckpt")
    _write_log(cfg.out / "train_dense.log", log)
    return EXIT_OK


def cmd_finetune(args):
    cfg = _load_run_config(args)
    cfg.echo()
    dense_path = cfg.out / "dense.ckpt"
    if not dense_path.exists():
        raise FileNotFoundError(f"dense checkpoint missing at {dense_path}; run 'train' first")
    dense = Checkpoint.load(dense_path)
    enc = copy.deepcopy(cfg.encoder)
    if enc.predictor_kind == "none":
        enc.predictor_kind = "global"
    train_b = _load_split(cfg, "train")
    valid_b = _load_split(cfg, "valid")
    lam = cfg.train.lam
    log = [f"command=finetune seed={cfg.seed} lambda={lam:.10g} predictor={enc.predictor_kind}"]
    ckpt = finetune_i3d(dense, enc, cfg.train, train_b, valid_b, cfg.seed, log)
    name = f"i3d_lambda{lam:g}.ckpt"
    ckpt.save(cfg.out / name)
    _write_log(cfg.out / f"finetune_lambda{lam:g}.log", log)
    return EXIT_OK


def cmd_layerdrop(args):
    cfg = _load_run_config(args)
    cfg.echo()
    if cfg.train.layerdrop_prob <= 0:
        raise ConfigError("layerdrop requires train.layerdrop_prob > 0")
    train_b = _load_split(cfg, "train")
    valid_b = _load_split(cfg, "valid")
    log = [f"command=layerdrop seed={cfg.seed} p={cfg.train.layerdrop_prob:.10g}"]
    ckpt = train_layerdrop(cfg.encoder, cfg.train, train_b, valid_b, cfg.seed, log)
    ckpt.save(cfg.out / "layerdrop.ckpt")
    _write_log(cfg.out / "train_layerdrop.log", log)
    return EXIT_OK


def cmd_prune(args):
    cfg = _load_run_config(args)
    cfg.echo()
    ckpt_path = Path(args.ckpt) if args.ckpt else cfg.out / "layerdrop.ckpt"
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint missing at {ckpt_path}")
    ckpt = Checkpoint.load(ckpt_path)
    valid_b = _load_split(cfg, "valid")
    sizes = iterative_layer_prune(ckpt, valid_b, args.target_layers)
    for pruned in sizes:
        pruned.save(cfg.out / f"pruned_{pruned.config.num_layers}layers.ckpt")
    return EXIT_OK


def _parse_sweep(sweep):
    try:
        lo, hi, steps = sweep.split(":")
        lo, hi, steps = float(lo), float(hi), int(steps)
    except ValueError as exc:
        raise ConfigError(f"malformed --sweep-beta {sweep!r}, expected lo:hi:steps") from exc
    if steps < 1 or not 0 <= lo <= hi <= 1:
        raise ConfigError(f"invalid sweep range {sweep!r}")
    return [float(b) for b in np.linspace(lo, hi, steps)]


def cmd_eval(args):
    cfg = _load_run_config(args)
    cfg.echo()
    ckpt_path = Path(args.ckpt) if args.ckpt else cfg.out / "dense.ckpt"
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint missing at {ckpt_path}")
    ckpt = Checkpoint.load(ckpt_path)
    model = ckpt.to_model()
    batches = _load_split(cfg, args.split)
    betas = _parse_sweep(args.sweep_beta) if args.sweep_beta else [
        args.beta if args.beta is not None else model.config.beta
    ]
    rows = []
    for beta in betas:
        report = evaluate(model, batches, beta)
        rows.append((beta, model.config.lam, report.avg_layers, report.token_error_rate))
        if report.traces:
            write_traces_csv(cfg.out / f"traces_beta{beta:g}.csv", report.traces)
    write_sweep_csv(cfg.out / "sweep.csv", rows)
    return EXIT_OK


def cmd_analyze(args):
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for entry in args.traces:
        p = Path(entry)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.csv")))
        elif p.exists():
            paths.append(p)
        else:
            raise ConfigError(f"trace file not found: {p}")
    traces = []
    for p in paths:
        traces.extend(read_traces_csv(p))
    if not traces:
        raise ConfigError("no gate traces found")
    write_gate_stats_csv(out / "gate_stats.csv", gate_statistics(traces))
    write_length_blocks_csv(out / "length_blocks.csv", length_vs_blocks(traces))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dyndepth",
        description="Dynamic-depth Transformer encoder experiments on synthetic data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)

    p = sub.add_parser("gen", help="generate dataset splits")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="dense pretraining")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="gated fine-tuning from the dense checkpoint")
    common(p)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("layerdrop", help="train with stochastic layer dropping")
    common(p)
    p.set_defaults(func=cmd_layerdrop)

    p = sub.add_parser("prune", help="iterative layer pruning")
    common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--target-layers", type=int, required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="threshold-gated evaluation")
    common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--sweep-beta", dest="sweep_beta", default=None,
                   help="lo:hi:steps inclusive linspace")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="gate statistics and length analysis from traces")
    p.add_argument("--traces", nargs="+", required=True,
                   help="trace CSV files or directories")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, DynDepthError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
