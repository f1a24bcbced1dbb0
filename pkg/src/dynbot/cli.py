"""Command-line interface: ``dynbot <command> [options]``.

Exit codes: 0 success, 1 invalid input, 2 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import load_checkpoint, save_checkpoint
from .data import DatasetError, IngestResult, export, ingest, read_manifest
from .dyngraph import GraphError
from .model import (
    ABLATIONS,
    Dataset,
    ModelConfig,
    TrainingConfig,
    TrainingDiverged,
    evaluate,
    forward,
    predict,
    train,
)
from .synth import SyntheticSpec, synth_generate, threshold_baseline

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2
CHECKPOINT = "checkpoint.bin"
CONFIG = "config.json"
EPOCH_LOG = "epoch_log.csv"
REPORT = "report.json"


class UsageError(ValueError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> IngestResult:
    if not args.manifest:
        raise UsageError("--manifest is required for this command")
    return ingest(args.manifest)


# ---------------------------------------------------------------- config plumbing


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        hidden_dim=args.hidden_dim,
        structural_layers=args.structural_layers,
        structural_heads=args.structural_heads,
        temporal_heads=args.temporal_heads,
        head_hidden=args.head_hidden,
        bucket_count=args.buckets,
        self_loops=not args.no_self_loops,
        residual=args.residual,
        layer_norm=args.layer_norm,
    )


def _ablation(values) -> frozenset:
    names = set()
    for v in values or []:
        names.update(x.strip() for x in v.split(",") if x.strip())
    unknown = names - set(ABLATIONS)
    if unknown:
        raise UsageError(f"unknown ablation(s): {', '.join(sorted(unknown))}; choose from {', '.join(ABLATIONS)}")
    return frozenset(names)


def _training_config(args) -> TrainingConfig:
    return TrainingConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        seed=args.seed,
        optimizer=args.optimizer,
        loss_scope=args.loss_scope,
        ablation=_ablation(args.ablation),
        model=_model_config(args),
    )


def _config_from_json(data: dict) -> tuple[TrainingConfig, dict]:
    tc = dict(data["training"])
    tc["model"] = ModelConfig(**tc["model"])
    tc["ablation"] = frozenset(tc["ablation"])
    return TrainingConfig(**tc), data


def _sidecar(checkpoint: Path) -> Path:
    return checkpoint.with_name(CONFIG)


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    result = _load(args)
    lines = result.report_lines()
    print("\n".join(lines))
    if args.out:
        out = _out_dir(args)
        _write(out / "ingest_report.txt", "\n".join(lines) + "\n")
        if args.export:
            export(result, out / "dataset")
    return EXIT_OK


def _metrics_block(dataset: Dataset, res, cfg: TrainingConfig) -> dict:
    batch = dataset.batch(cfg.model)
    pred = predict(batch, res.params, cfg.model, cfg.ablation)
    out = {}
    for split in ("train", "val", "test"):
        nodes = dataset.splits.get(split)
        if nodes is not None and len(nodes):
            out[split] = evaluate(pred, dataset.labels, nodes).as_dict()
    return out


def cmd_train(args) -> int:
    result = _load(args)
    out = _out_dir(args)
    cfg = _training_config(args)
    dataset = result.dataset()
    res = train(dataset, cfg)
    batch_input_dim = dataset.features.shape[1]
    save_checkpoint(out / CHECKPOINT, res.params)
    sidecar = {
        "training": cfg.describe(),
        "input_dim": batch_input_dim,
        "num_snapshots": len(dataset.graph),
        "snapshot": asdict(result.manifest.snapshot),
        "version": __version__,
    }
    _write(out / CONFIG, _dump(sidecar))
    _write(out / EPOCH_LOG, res.log_csv())
    report = {
        "header": {
            "command": "train",
            "ablation": sorted(cfg.ablation),
            "seed": cfg.seed,
            "epochs": cfg.epochs,
            "num_nodes": dataset.graph.num_nodes,
            "num_snapshots": len(dataset.graph),
        },
        "best_epoch": res.best_epoch,
        "metrics": _metrics_block(dataset, res, cfg),
    }
    _write(out / REPORT, _dump(report))
    test = report["metrics"].get("test")
    summary = f"best epoch {res.best_epoch}"
    if test:
        summary += f"; test accuracy {test['accuracy']:.4f} f1 {test['f1']:.4f}"
    print(summary)
    return EXIT_OK


def _restore(args) -> tuple[TrainingConfig, dict, dict]:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required for this command")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    config_path = Path(args.config) if args.config else _sidecar(ckpt)
    if not config_path.exists():
        raise UsageError(f"model config not found: {config_path}")
    cfg, meta = _config_from_json(json.loads(config_path.read_text(encoding="utf-8")))
    params = load_checkpoint(ckpt)
    return cfg, meta, params


def _check_compatible(meta: dict, dataset: Dataset):
    if meta["num_snapshots"] != len(dataset.graph):
        raise UsageError(
            f"checkpoint was trained on {meta['num_snapshots']} snapshots, dataset has {len(dataset.graph)}"
        )
    if meta["input_dim"] != dataset.features.shape[1]:
        raise UsageError(f"checkpoint expects {meta['input_dim']} features, dataset has {dataset.features.shape[1]}")


def cmd_eval(args) -> int:
    cfg, meta, params = _restore(args)
    dataset = _load(args).dataset()
    _check_compatible(meta, dataset)
    pred = predict(dataset.batch(cfg.model), params, cfg.model, cfg.ablation)
    nodes = dataset.splits.get(args.split)
    if nodes is None or not len(nodes):
        raise UsageError(f"split {args.split!r} is empty")
    m = evaluate(pred, dataset.labels, nodes, args.at_snapshot)
    report = {
        "header": {"command": "eval", "ablation": sorted(cfg.ablation), "split": args.split,
                   "at_snapshot": args.at_snapshot},
        "metrics": m.as_dict(),
    }
    if args.baseline:
        base, rule = threshold_baseline(dataset.metrics, dataset.labels, dataset.splits, args.at_snapshot)
        report["threshold_baseline"] = {"rule": rule, "metrics": base.as_dict()}
    text = _dump(report)
    if args.out:
        _write(_out_dir(args) / "eval.json", text)
    sys.stdout.write(text)
    return EXIT_OK


SWEEP_HEADER = ["interval_days", "num_snapshots", "accuracy", "precision", "recall", "f1"]


def cmd_sweep(args) -> int:
    if not args.manifest:
        raise UsageError("--manifest is required for this command")
    intervals = [float(x) for x in args.intervals.split(",") if x.strip()]
    if len(intervals) < 2:
        raise UsageError("sweep-granularity needs at least two intervals")
    if any(v <= 0 for v in intervals):
        raise UsageError("intervals must be positive")
    manifest = read_manifest(args.manifest)
    cfg = _training_config(args)
    rows = []
    for days in intervals:
        result = ingest(manifest.with_snapshot(interval=days, num_snapshots=None))
        dataset = result.dataset()
        res = train(dataset, cfg)
        m = evaluate(predict(dataset.batch(cfg.model), res.params, cfg.model, cfg.ablation),
                     dataset.labels, dataset.splits["test"])
        rows.append([f"{days:g}", len(dataset.graph), f"{m.accuracy:.6f}", f"{m.precision:.6f}",
                     f"{m.recall:.6f}", f"{m.f1:.6f}"])
        print(f"interval {days:g} days: {len(dataset.graph)} snapshots, test f1 {m.f1:.4f}", file=sys.stderr)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    w.writerows(rows)
    if args.out:
        _write(_out_dir(args) / "sweep.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _node_set(spec: str, dataset: Dataset) -> np.ndarray:
    if spec in dataset.splits:
        nodes = dataset.splits[spec]
    elif spec == "all":
        nodes = np.arange(dataset.graph.num_nodes)
    else:
        try:
            nodes = np.array(sorted({int(x) for x in spec.split(",") if x.strip()}), dtype=np.int64)
        except ValueError:
            raise UsageError(f"bad node set {spec!r}") from None
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        raise UsageError("node set is empty")
    if nodes.min() < 0 or nodes.max() >= dataset.graph.num_nodes:
        raise UsageError("node id out of range")
    return nodes


def attention_table(dataset: Dataset, params, cfg: TrainingConfig, nodes) -> np.ndarray:
    """Mean temporal attention ``(T, T)``: heads averaged, then nodes active at the query row."""
    if "no_temporal" in cfg.ablation:
        raise UsageError("model was trained without the temporal module")
    batch = dataset.batch(cfg.model)
    out = forward(batch, params, cfg.model, cfg.ablation, keep_attention=True)
    weights = out.attention[nodes].mean(axis=1)  # (m, T, T)
    active = batch.active[nodes]  # (m, T)
    T = weights.shape[-1]
    table = np.zeros((T, T))
    for q in range(T):
        who = active[:, q]
        if who.any():
            table[q] = weights[who, q].mean(axis=0)
    return table


def cmd_export_attention(args) -> int:
    cfg, meta, params = _restore(args)
    dataset = _load(args).dataset()
    _check_compatible(meta, dataset)
    nodes = _node_set(args.nodes, dataset)
    table = attention_table(dataset, params, cfg, nodes)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["snapshot_query", "snapshot_key", "mean_weight"])
    T = table.shape[0]
    for q in range(T):
        for k in range(T):
            w.writerow([q, k, repr(float(table[q, k]))])
    if args.out:
        _write(_out_dir(args) / "attention.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_synth(args) -> int:
    out = _out_dir(args)
    spec = SyntheticSpec(
        num_humans=args.num_humans,
        num_bots=args.num_bots,
        num_snapshots=args.num_snapshots,
        human_cluster_size=args.cluster_size,
        bot_out_degree=args.bot_out_degree,
        reciprocity_human=args.reciprocity_human,
        reciprocity_bot=args.reciprocity_bot,
        camouflage=args.camouflage,
        seed=args.seed,
    )
    path = synth_generate(spec, out)
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _global_flags(parser: argparse.ArgumentParser, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--manifest", default=d(None), help="dataset manifest file")
    parser.add_argument("--seed", type=int, default=d(0), help="random seed")
    parser.add_argument("--out", default=d(None), help="output directory")


def _training_flags(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--loss-scope", choices=("all", "final"), default="all")
    p.add_argument("--ablation", action="append", help=f"one of {', '.join(ABLATIONS)}; repeatable")
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--structural-layers", type=int, default=2)
    p.add_argument("--structural-heads", type=int, default=4)
    p.add_argument("--temporal-heads", type=int, default=4)
    p.add_argument("--head-hidden", type=int, default=32)
    p.add_argument("--buckets", type=int, default=20)
    p.add_argument("--no-self-loops", action="store_true")
    p.add_argument("--residual", action="store_true")
    p.add_argument("--layer-norm", action="store_true")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which is reserved for divergence here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dynbot", description="Bot detection on dynamic social graphs.")
    parser.add_argument("--version", action="version", version=f"dynbot {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = command("ingest", cmd_ingest, "validate a dataset and print snapshot statistics")
    p.add_argument("--export", action="store_true", help="also re-export the parsed dataset under --out")

    p = command("train", cmd_train, "train a model and write checkpoint, epoch log and report")
    _training_flags(p)

    p = command("eval", cmd_eval, "evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="model config (defaults to config.json next to the checkpoint)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--at-snapshot", type=int, default=-1)
    p.add_argument("--baseline", action="store_true", help="also report the static threshold baseline")

    p = command("sweep-granularity", cmd_sweep, "retrain at several snapshot intervals")
    p.add_argument("--intervals", required=True, help="comma-separated interval lengths in days")
    _training_flags(p)

    p = command("export-attention", cmd_export_attention, "mean temporal attention weights as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--nodes", default="test", help="split name, 'all', or comma-separated node ids")

    p = command("synth", cmd_synth, "generate a synthetic dataset")
    defaults = SyntheticSpec()
    p.add_argument("--num-humans", type=int, default=defaults.num_humans)
    p.add_argument("--num-bots", type=int, default=defaults.num_bots)
    p.add_argument("--num-snapshots", type=int, default=defaults.num_snapshots)
    p.add_argument("--cluster-size", type=int, default=defaults.human_cluster_size)
    p.add_argument("--bot-out-degree", type=int, default=defaults.bot_out_degree)
    p.add_argument("--reciprocity-human", type=float, default=defaults.reciprocity_human)
    p.add_argument("--reciprocity-bot", type=float, default=defaults.reciprocity_bot)
    p.add_argument("--camouflage", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, DatasetError, GraphError, ValueError, IndexError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
