"""Command-line entry points: ``circuitgcl <command> ...``.

Exit codes: 0 success, 1 input error, 2 numeric failure, 3 config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import augment as au
from . import downstream as ds
from . import graph as cg
from .contrastive import (LossConfig, NumericFailure, TrainConfig, pretrain, relation_stats,
                          split_holdout, write_metrics_csv)
from .corpus import load_corpus, load_labels
from .encoders import DepthParamsMismatch, EncoderSpec, load_encoder, save_encoder
from .netlist import NetlistError, parse_netlist

log = logging.getLogger("circuitgcl")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


# ---------------------------------------------------------------- run config

@dataclass(frozen=True)
class DownstreamConfig:
    d_D: int = 2
    d_p: int = 0
    d_s: int = 2
    hidden: int = 512
    lr: Optional[float] = None          # None: per-task default
    batch_size: Optional[int] = None
    epochs: Optional[int] = None
    decoder_hidden: int = 256
    decoder_dropout: float = 0.3


@dataclass(frozen=True)
class RunConfig:
    """JSON run configuration; every section is optional."""

    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    holdout: float = 0.1
    seed: int = 0


_SECTIONS = {"encoder": EncoderSpec, "loss": LossConfig, "train": TrainConfig,
             "downstream": DownstreamConfig}


def _section(cls, blob, where: str):
    if not isinstance(blob, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(blob) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**blob)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_run_config(path: Optional[str]) -> RunConfig:
    if not path:
        return RunConfig()
    try:
        blob = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return run_config_from_dict(blob, where=str(path))


def run_config_from_dict(blob: dict, where: str = "config") -> RunConfig:
    if not isinstance(blob, dict):
        raise ConfigError(f"{where}: top level must be an object")
    unknown = sorted(set(blob) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kw = {}
    for name, cls in _SECTIONS.items():
        if name in blob:
            kw[name] = _section(cls, blob[name], f"{where}.{name}")
    for name in ("holdout", "seed"):
        if name in blob:
            kw[name] = blob[name]
    return RunConfig(**kw)


def _override(obj, **kw):
    """``dataclasses.replace`` with only the non-None values (CLI > config)."""
    kw = {k: v for k, v in kw.items() if v is not None}
    if not kw:
        return obj
    try:
        return replace(obj, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- helpers

def _read_graph(path: Path) -> cg.CircuitGraph:
    if path.suffix == ".json":
        return cg.from_json(path.read_text())
    return cg.build_graph(parse_netlist(path.read_text(), name=path.stem))


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix) if path.suffix != ".json" else \
        path.with_suffix(suffix)


def _write_json(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n")


# ---------------------------------------------------------------- commands

def cmd_parse(args) -> int:
    path = Path(args.netlist)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", cg.FloatingTerminalWarning)
        g = cg.build_graph(parse_netlist(path.read_text(), name=path.stem), strict=args.strict)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    counts = g.type_counts()
    summary = ", ".join(f"{cg.NODE_TYPE_NAMES[t]}={int(c)}" for t, c in enumerate(counts) if c)
    print(f"{g.name}: {g.num_nodes} nodes, {g.num_arcs} arcs ({summary})", file=sys.stderr)
    if args.emit_graph:
        _write_json(Path(args.emit_graph), cg.to_json(g))
    else:
        print(cg.to_json(g))
    return EXIT_OK


def cmd_augment(args) -> int:
    corpus = load_corpus(directory=args.corpus_dir)
    samples, relations = au.generate_dataset(corpus, args.n_pos, args.n_neg,
                                             args.max_chain, args.seed)
    meta = {"n_pos": args.n_pos, "n_neg": args.n_neg, "max_chain": args.max_chain,
            "seed": args.seed, "origins": [g.name for g in corpus]}
    au.save_dataset(args.out, samples, relations, meta)
    print(f"wrote {len(samples)} samples from {len(corpus)} circuits to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    enc = _override(cfg.encoder, arch=args.arch, depth=args.depth, hidden=args.hidden)
    loss = _override(cfg.loss, kind=args.loss)
    train = _override(cfg.train, lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                      seed=seed)
    holdout = args.holdout if args.holdout is not None else cfg.holdout

    samples, _ = au.load_dataset(args.dataset_dir)
    fit, held = split_holdout(samples, holdout, seed)
    res = pretrain(fit, enc, loss, train, eval_samples=held or None,
                   on_epoch=lambda r: log.info("epoch %d loss %.6f", r["epoch"], r["mean_loss"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_encoder(out, res.encoder, {"loss": asdict(loss), "train": asdict(train),
                                    "holdout": holdout, "dataset": Path(args.dataset_dir).name})
    metrics = Path(args.metrics) if args.metrics else _sidecar(out, ".metrics.csv")
    write_metrics_csv(metrics, res.metrics)
    if not args.no_plot:
        from .plotting import plot_pretrain_curves
        plot_pretrain_curves(res.metrics, metrics.with_suffix(".png"))
    last = res.metrics[-1]
    print(f"epochs={len(res.metrics)} loss={last['mean_loss']:.6f} "
          f"pos={last['pos_mean']:.4f} noneq={last['noneq_mean']:.4f} neg={last['neg_mean']:.4f}")
    return EXIT_OK


def cmd_eval_relations(args) -> int:
    samples, relations = au.load_dataset(args.dataset_dir)
    encoder = load_encoder(args.ckpt)
    stats = relation_stats(encoder.embed([s.graph for s in samples]), relations)
    pos, neq, neg = relations.masks()
    counts = {k: int(np.triu(m, 1).sum()) for k, m in (("pos", pos), ("noneq", neq),
                                                        ("neg", neg))}
    rows = [(k, stats[f"{k}_mean"], stats[f"{k}_std"], counts[k]) for k in ("pos", "noneq", "neg")]
    for k, m, s, n in rows:
        print(f"{k:6s} {m:+.4f} +- {s:.4f}  (pairs={n})")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["relation", "mean", "std", "pairs"])
            for k, m, s, n in rows:
                w.writerow([k, repr(float(m)), repr(float(s)), n])
        if not args.no_plot:
            from .plotting import plot_relation_bars
            plot_relation_bars(stats, out.with_suffix(".png"), title=Path(args.ckpt).name)
    return EXIT_OK


def cmd_embed(args) -> int:
    encoder = load_encoder(args.ckpt)
    ids, origins, pols, graphs = [], [], [], []
    for item in args.graphs:
        path = Path(item)
        if path.is_dir():
            samples, _ = au.load_dataset(path)
            for s in samples:
                ids.append(s.sample_id)
                origins.append(s.origin_id)
                pols.append(s.polarity.value)
                graphs.append(s.graph)
        else:
            g = _read_graph(path)
            ids.append(path.stem)
            origins.append(g.origin or g.name)
            pols.append(au.Polarity.ORIGINAL.value)
            graphs.append(g)
    if not graphs:
        raise InputError("no graphs given")
    Z = encoder.embed(graphs)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ds.write_embeddings_csv(args.out, ids, origins, pols, Z)
    print(f"wrote {len(ids)} x {Z.shape[1]} embeddings to {args.out}")
    return EXIT_OK


def _parse_depths(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--depths expects dD,dp,ds, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 0:
        raise ConfigError(f"--depths expects three non-negative integers, got {text!r}")
    return parts


def cmd_train_task(args) -> int:
    cfg = load_run_config(args.config)
    task = args.task
    seed = args.seed if args.seed is not None else cfg.seed
    dcfg = cfg.downstream
    if args.depths:
        d_D, d_p, d_s = _parse_depths(args.depths)
        dcfg = replace(dcfg, d_D=d_D, d_p=d_p, d_s=d_s)
    dcfg = _override(dcfg, hidden=args.hidden, lr=args.lr, batch_size=args.batch_size,
                     epochs=args.epochs)
    defaults = ds.TASK_DEFAULTS[task]
    train_cfg = ds.DownstreamTrainConfig(
        lr=dcfg.lr if dcfg.lr is not None else defaults["lr"],
        batch_size=dcfg.batch_size if dcfg.batch_size is not None else defaults["batch_size"],
        epochs=dcfg.epochs if dcfg.epochs is not None else defaults["epochs"],
        seed=seed, decoder_hidden=dcfg.decoder_hidden, decoder_dropout=dcfg.decoder_dropout)
    enc_cfg = ds.EncoderConfig(dcfg.d_D, dcfg.d_p, dcfg.d_s, dcfg.hidden)

    frozen = None
    if enc_cfg.d_D > 0:
        if not args.ckpt:
            raise ds.MissingCheckpoint(f"--depths has d_D={enc_cfg.d_D} but no --ckpt given")
        frozen = load_encoder(args.ckpt)

    if task == 1:
        directory = args.data or None
        graphs = load_corpus(directory=directory)
        labels, test = load_labels(directory)
        missing = [g.name for g in graphs if g.name not in labels]
        if missing:
            raise InputError(f"circuits without labels: {missing}")
        data = (graphs, [labels[g.name] for g in graphs], test)
    else:
        if not args.data:
            raise InputError(f"task {task} needs --data <csv>")
        data = ds.load_regression_csv(args.data, args.sidecar)
        if data.targets.shape[1] != ds.TASK_OUT_DIMS[task]:
            raise InputError(f"task {task} expects {ds.TASK_OUT_DIMS[task]} targets, "
                             f"CSV has {data.targets.shape[1]}")
    metrics = ds.train_task(task, data, enc_cfg, train_cfg, frozen)
    config = {"encoder": asdict(enc_cfg), "train": asdict(train_cfg),
              "ckpt": Path(args.ckpt).name if frozen is not None else None}
    text = ds.metrics_json(task, config, seed, metrics)
    if args.out:
        _write_json(Path(args.out), text)
    print(text)
    return EXIT_OK


def cmd_make_delay_data(args) -> int:
    path = ds.make_rc_delay_dataset(args.out, args.rows, args.seed)
    print(f"wrote {args.rows} rows to {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="circuitgcl",
                                description="Contrastive pretraining for circuit graphs.")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS worker threads (default: library setting)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("parse", help="netlist -> graph JSON")
    s.add_argument("netlist")
    s.add_argument("--emit-graph", metavar="OUT_JSON")
    s.add_argument("--strict", action="store_true", help="treat floating terminals as errors")
    s.set_defaults(func=cmd_parse)

    s = sub.add_parser("augment", help="build an augmented dataset from a netlist directory")
    s.add_argument("corpus_dir")
    s.add_argument("--n-pos", type=int, default=100)
    s.add_argument("--n-neg", type=int, default=100)
    s.add_argument("--max-chain", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("pretrain", help="contrastive pretraining on an augmented dataset")
    s.add_argument("dataset_dir")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="checkpoint path (JSON)")
    s.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")
    s.add_argument("--arch", choices=("dice", "gcn", "sage", "gat", "gin"))
    s.add_argument("--loss", choices=("dice", "ntxent", "simsiam"))
    s.add_argument("--depth", type=int)
    s.add_argument("--hidden", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--holdout", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("eval-relations", help="mean/std cosine per relation class")
    s.add_argument("dataset_dir")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", help="CSV path; a bar chart is written next to it")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_eval_relations)

    s = sub.add_parser("embed", help="export graph embeddings as CSV")
    s.add_argument("graphs", nargs="+", help="netlists, graph JSON files or dataset dirs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("train-task", help="downstream training with metrics JSON")
    s.add_argument("task", type=int, choices=(1, 2, 3))
    s.add_argument("--data", help="task 1: labeled netlist dir (default bundled); "
                                  "tasks 2/3: CSV")
    s.add_argument("--sidecar", help="param-to-node mapping JSON (default: <csv>.json)")
    s.add_argument("--ckpt")
    s.add_argument("--depths", help="dD,dp,ds")
    s.add_argument("--config")
    s.add_argument("--hidden", type=int)
    s.add_argument("--epochs", type=int, help="epochs (task 1: optimizer steps)")
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="metrics JSON path")
    s.set_defaults(func=cmd_train_task)

    s = sub.add_parser("make-delay-data", help="synthetic RC-ladder delay regression data")
    s.add_argument("out")
    s.add_argument("--rows", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_delay_data)
    return p


INPUT_ERRORS = (InputError, NetlistError, cg.GraphError, au.AugmentError, ds.MissingCheckpoint,
                DepthParamsMismatch, FileNotFoundError, IsADirectoryError, KeyError,
                json.JSONDecodeError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
