"""Command-line interface.

Exit codes: 0 on success, 1 when a computation fails, 2 for usage,
configuration, or dataset errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import layers
from . import numeric as nm
from .config import RunConfig, parse_value
from .evaluation import MODES, LinkExampleSet, evaluate
from .graph import (GraphFormatError, NodeRangeError, SnapshotSequence, load_features, load_snapshots,
                    one_hot_features, save_snapshots, snapshots_from_interactions)
from .layers import ConfigError, ModelConfig
from .synthetic import alternating_blocks
from .training import (DySATTrainer, RepresentationStore, TrainingError, embed, fit, incremental_fit,
                       incsat_config)


class UsageError(Exception):
    """Bad arguments, configuration, or input data; maps to exit code 2."""


# shared helpers -------------------------------------------------------------

def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v.strip())
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    return out


def _load_run(args) -> RunConfig:
    return RunConfig.load(args.config, _overrides(args))


def _load_data(cfg: RunConfig) -> tuple[SnapshotSequence, np.ndarray]:
    path = cfg.data_path()
    if path is None:
        raise UsageError("no dataset: set data.path in the config")
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    n = cfg.get("data.num_nodes")
    seq = load_snapshots(path, None if n is None else int(n))
    feat_path = cfg.data_path("data.features")
    if feat_path is None:
        X = one_hot_features(seq.num_nodes)
    elif not feat_path.exists():
        raise UsageError(f"feature file not found: {feat_path}")
    else:
        X = load_features(feat_path, seq.num_nodes)
    return seq, X


def _ablate(config: ModelConfig, what: str | None) -> ModelConfig:
    if what is None:
        return config
    return replace(config, **{f"use_{what}": False})


def _model_config(cfg: RunConfig, X: np.ndarray, seq_len: int, ablate: str | None = None) -> ModelConfig:
    config = _ablate(cfg.model_config(X.shape[1]), ablate)
    if "model.max_steps" not in cfg.values:
        config = replace(config, max_steps=max(seq_len, 1))
    return config


def _out_dir(cfg: RunConfig, args) -> Path:
    out = cfg.output_dir(getattr(args, "out", None))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


# commands -------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    """Bucket ``u v epoch_seconds`` lines into windows of ``--window-days``."""
    src = Path(args.input)
    if not src.exists():
        raise UsageError(f"interaction log not found: {src}")
    if args.window_days <= 0:
        raise UsageError("--window-days must be positive")
    records = []
    with open(src) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise GraphFormatError(src, lineno, f"expected 'u v timestamp', got {len(parts)} fields")
            try:
                records.append((parts[0], parts[1], float(parts[2])))
            except ValueError as exc:
                raise GraphFormatError(src, lineno, str(exc)) from None
    seq, labels = snapshots_from_interactions(records, args.window_days * 86400.0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_snapshots(seq, out)
    with open(out.with_suffix(".nodes.tsv"), "w") as fh:
        for i, name in enumerate(labels):
            fh.write(f"{i}\t{name}\n")
    print(f"{len(seq)} snapshots over {seq.num_nodes} nodes -> {out}")
    return 0


def cmd_synth(args) -> int:
    seq = alternating_blocks(num_nodes=args.nodes, steps=args.steps, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_snapshots(seq, out)
    print(f"{len(seq)} snapshots over {seq.num_nodes} nodes -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run(args)
    seq, X = _load_data(cfg)
    upto = len(seq) if args.upto is None else args.upto
    if not 1 <= upto <= len(seq):
        raise UsageError(f"--upto must lie in [1, {len(seq)}], got {upto}")
    seq = seq[:upto]
    config = _model_config(cfg, X, len(seq), args.ablate)
    train_cfg, sampler_cfg = cfg.train_config(), cfg.sampler_config()
    out = _out_dir(cfg, args)
    if args.incremental:
        config = incsat_config(config) if "model.structural_dropout" not in cfg.values else config
        store = RepresentationStore(out / "store")
        rows = []
        for t in range(len(seq)):
            if t in store.steps():
                continue
            res = incremental_fit(seq[t], store, config, train_cfg, step=t, X=X, sampler_cfg=sampler_cfg)
            rows += [{"step": t, **h} for h in res.history]
            nm.write_tsv(out / f"emb_t{t}.tsv", res.embeddings, range(seq.num_nodes))
            params = res.params
        if rows:
            layers.save_checkpoint(out / "checkpoint.bin", params, config,
                                   {"steps": len(seq), "incremental": True, "seed": cfg.seed})
        lines = ["step,epoch,loss,val_auc"] + [
            f"{r['step']},{r['epoch']},{r['loss']!r}," + ("" if r["val_auc"] is None else repr(r["val_auc"]))
            for r in rows]
        _write(out / "history.csv", "\n".join(lines) + "\n")
    else:
        result = fit(seq, X, config, train_cfg, sampler_cfg)
        layers.save_checkpoint(out / "checkpoint.bin", result.params, config,
                               {"steps": len(seq), "best_epoch": result.best_epoch, "seed": cfg.seed})
        _write(out / "history.csv", result.history_csv())
    print(f"trained on snapshots 1-{len(seq)} -> {out}")
    return 0


class _StoredEmbeddings:
    """Trainer stand-in that returns exported ``emb_t{t}.tsv`` files instead of training."""

    def __init__(self, directory: Path, num_nodes: int):
        self.directory = directory
        self.num_nodes = num_nodes

    def __call__(self, train_seq: SnapshotSequence, val: LinkExampleSet | None, seed: int) -> np.ndarray:
        t = len(train_seq) - 1
        path = self.directory / f"emb_t{t}.tsv"
        if not path.exists():
            raise UsageError(f"no exported embeddings for step {t}: {path}")
        return load_features(path, self.num_nodes)


def cmd_evaluate(args) -> int:
    cfg = _load_run(args)
    seq, X = _load_data(cfg)
    ev = cfg.eval_options()
    mode = args.mode or ev["mode"]
    runs = args.runs or int(ev["runs"])
    horizon = args.horizon or int(ev["horizon"])
    if args.embeddings:
        trainer = _StoredEmbeddings(Path(args.embeddings), seq.num_nodes)
    else:
        config = _model_config(cfg, X, len(seq), args.ablate)
        trainer = DySATTrainer(config, cfg.train_config(), cfg.sampler_config(), X)
    report = evaluate(seq, trainer, mode=mode, runs=runs, seed=cfg.seed, start=int(ev["start"]),
                      horizon=horizon, val_fraction=float(ev["val_fraction"]),
                      train_fraction=float(ev["train_fraction"]), classifier_l2=float(ev["classifier_l2"]),
                      downstream_only=bool(ev["downstream_only"]), threads=args.threads)
    out = _out_dir(cfg, args)
    _write(out / "report.json", report.to_json())
    _write(out / "scores.csv", report.to_csv())
    _write(out / "per_step.csv", report.per_step_csv())
    print(f"{mode}: micro AUC {report.micro_auc:.4f} +- {report.micro_std:.4f}, "
          f"macro AUC {report.macro_auc:.4f} +- {report.macro_std:.4f}")
    return 0


def cmd_bench(args) -> int:
    """Seconds per epoch and temporal-attention multiply-adds per history window."""
    cfg = _load_run(args)
    seq, X = _load_data(cfg)
    windows = [int(w) for w in args.windows.split(",") if w.strip()]
    if not windows or min(windows) < 1:
        raise UsageError("--windows needs positive integers, e.g. 2,4,8")
    train_cfg = replace(cfg.train_config(), max_epochs=args.epochs, selection="loss")
    rows = []
    for w in windows:
        sub = seq[-min(w, len(seq)):]
        config = replace(cfg.model_config(X.shape[1]), max_steps=len(sub))
        layers.FLOPS.clear()
        start = time.perf_counter()
        fit(sub, X, config, train_cfg, cfg.sampler_config())
        elapsed = (time.perf_counter() - start) / args.epochs
        flops = layers.FLOPS["temporal"] // args.epochs
        rows.append((w, len(sub), elapsed, flops))
    out = _out_dir(cfg, args)
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["window", "steps", "seconds_per_epoch", "temporal_flops_per_epoch"])
        for w, steps, sec, flops in rows:
            writer.writerow([w, steps, f"{sec:.6f}", flops])
    for w, steps, sec, flops in rows:
        print(f"window {w:>3} ({steps} steps): {sec:.3f} s/epoch, {flops} temporal multiply-adds")
    return 0


def _config_diff(ck: ModelConfig, want: ModelConfig) -> list[str]:
    a, b = ck.to_dict(), want.to_dict()
    return [f"{k}: checkpoint {a[k]!r} vs dataset/config {b[k]!r}" for k in a if a[k] != b[k]]


def cmd_export(args) -> int:
    cfg = _load_run(args)
    seq, X = _load_data(cfg)
    ck = Path(args.checkpoint)
    if not ck.exists():
        raise UsageError(f"checkpoint not found: {ck}")
    params, config, extra = layers.load_checkpoint(ck)
    steps = int(extra.get("steps", len(seq)))
    seq = seq[: min(steps, len(seq))]
    problems = []
    if X.shape[1] != config.input_dim:
        problems.append(f"input_dim: checkpoint {config.input_dim} vs features {X.shape[1]}")
    if config.use_temporal and len(seq) > config.max_steps:
        problems.append(f"max_steps: checkpoint {config.max_steps} vs dataset steps {len(seq)}")
    if args.strict:
        want = _model_config(cfg, X, len(seq))
        problems += [p for p in _config_diff(config, want) if p.split(":")[0] not in
                     ("structural_dropout", "temporal_dropout")]
    if problems:
        raise UsageError("checkpoint does not match the dataset:\n  " + "\n  ".join(problems))
    out = _out_dir(cfg, args)
    E = embed(seq, X, params, config)
    for t in range(len(seq)):
        nm.write_tsv(out / f"emb_t{t}.tsv", E[t], range(seq.num_nodes))
    layers.export_attention_weights(params, config, seq, X).write_csv(
        out / "temporal_attention.csv", out / "structural_attention.csv")
    print(f"exported {len(seq)} embedding files and attention weights -> {out}")
    return 0


# entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dysat", description="Dynamic graph self-attention embeddings.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, out=True):
        sp.add_argument("--config", required=True, help="TOML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if seed:
            sp.add_argument("--seed", type=int, help="override the config seed")
        if out:
            sp.add_argument("--out", help="output directory (else $DYSAT_OUTPUT_DIR, else output.dir)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for independent jobs")

    sp = sub.add_parser("preprocess", help="window a timestamped interaction log into snapshots")
    sp.add_argument("--input", required=True)
    sp.add_argument("--window-days", type=float, required=True)
    sp.add_argument("--out", required=True, help="edge-list file to write")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("synth", help="write the alternating-block synthetic graph")
    sp.add_argument("--out", required=True)
    sp.add_argument("--nodes", type=int, default=60)
    sp.add_argument("--steps", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train on the first snapshots and write a checkpoint")
    common(sp)
    sp.add_argument("--upto", type=int, help="train on snapshots 1..UPTO (default: all)")
    sp.add_argument("--ablate", choices=("structural", "temporal"))
    sp.add_argument("--incremental", action="store_true",
                    help="train step by step from stored representations")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="run the link-prediction protocol")
    common(sp)
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--runs", type=int)
    sp.add_argument("--ablate", choices=("structural", "temporal"))
    sp.add_argument("--embeddings", help="directory of exported emb_t{t}.tsv files to score instead of training")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("bench", help="time training per temporal history window")
    common(sp)
    sp.add_argument("--windows", default="2,4,8")
    sp.add_argument("--epochs", type=int, default=1)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("export", help="write embeddings and attention weights from a checkpoint")
    common(sp, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--strict", action="store_true", help="also require the model section to match")
    sp.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (UsageError, ConfigError, GraphFormatError, NodeRangeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, nm.InstabilityError, ArithmeticError, ValueError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
