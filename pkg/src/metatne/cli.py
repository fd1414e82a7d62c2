"""Command-line entry point: ``metatne {train,eval,sample-tasks,inspect,make-sbm}``.

A checkpoint directory written by ``train`` holds::

    embeddings.bin (+ .cfg)   center and context matrices
    transform.bin             transformation parameters
    config.cfg                fully resolved configuration
    split.txt                 known / validation / novel label ids
    node_map.txt label_map.txt  dense id -> external id tables
    train.log                 one line per logged step
    manifest.json             digests, seed, config and validation history

Exit codes: 0 success, 1 runtime failure, 2 usage or I/O problem.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from .errors import (
    CheckpointError,
    ConfigError,
    MetaTNEError,
    NoEligibleLabelError,
    ParseError,
    UsageError,
)
from .graph import IdMap, LabelSplit, load_edge_list, load_labels, split_labels
from .metrics import evaluate
from .rng import subseed, substream
from .structural import load_embeddings, save_embeddings
from .synthetic import make_sbm_dataset, write_labels
from .tasks import eligible_labels, read_tasks, sample_tasks, write_tasks
from .training import Model, TrainingAborted, train
from .transform import load_transform, save_transform

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SHAPE_KEYS = ("k_support_pos", "k_support_neg", "k_query_pos", "k_query_neg")
CHECKPOINT_FILES = ("embeddings.bin", "embeddings.bin.cfg", "transform.bin", "config.cfg",
                    "split.txt", "node_map.txt", "label_map.txt")


def _read_text(path: str | Path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _add_config_flags(parser: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        parser.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE")


def _flag_values(args: argparse.Namespace, keys) -> dict:
    return {k: cfgmod.parse_value(k, getattr(args, k)) for k in keys if getattr(args, k, None) is not None}


def _load_dataset(edges: str, labels: str, node_map: IdMap | None = None, label_map: IdMap | None = None):
    edge_lines = _read_text(edges)
    label_lines = _read_text(labels)
    if node_map is None:
        toks = IdMap.from_files(edge_lines).external + IdMap.from_files(label_lines, column=0).external
        node_map = IdMap(toks)
    if label_map is None:
        label_map = IdMap.from_files(label_lines, column=1)
    graph = load_edge_list(edge_lines, id_map=node_map)
    lm = load_labels(label_lines, graph.node_count, node_map=node_map, label_map=label_map)
    return graph, lm, node_map, label_map


def _finite_or_none(x):
    return None if isinstance(x, float) and math.isnan(x) else x


# -- train -----------------------------------------------------------------


def save_checkpoint(out: Path, model: Model, values: dict, split: LabelSplit,
                    node_map: IdMap, label_map: IdMap) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(out / "embeddings.bin", model.emb, {"seed": values["seed"]})
    save_transform(out / "transform.bin", model.params)
    with open(out / "config.cfg", "w") as f:
        cfgmod.write_config(values, f)
    with open(out / "split.txt", "w") as f:
        split.write(f)
    with open(out / "node_map.txt", "w") as f:
        node_map.write(f)
    with open(out / "label_map.txt", "w") as f:
        label_map.write(f)


def write_manifest(out: Path, values: dict, datasets: dict, history: list, best_step) -> None:
    manifest = {
        "seed": values["seed"],
        "config": {k: values[k] for k in cfgmod.FIELDS},
        "datasets": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in datasets.items()},
        "checkpoint": {name: _sha256(out / name) for name in CHECKPOINT_FILES + ("train.log",)},
        "best_step": best_step,
        "history": [{k: _finite_or_none(v) for k, v in h.items()} for h in history],
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_train(args: argparse.Namespace) -> int:
    values = cfgmod.resolve(args.config, _flag_values(args, cfgmod.FIELDS))
    tcfg = cfgmod.transform_config(values)
    train_cfg = cfgmod.train_config(values)
    sched = cfgmod.schedule_config(values)
    graph, labels, node_map, label_map = _load_dataset(args.edges, args.labels)
    split = split_labels(labels, cfgmod.split_ratio(values), subseed(values["seed"], "split"))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log"
    with open(log_path, "w") as log_file:
        def on_log(step, phase, tau, loss):
            line = f"step={step} phase={phase} tau={tau:.6f} loss={loss:.6f}"
            log_file.write(line + "\n")
            if not args.quiet:
                print(line, flush=True)

        try:
            result = train(graph, labels, split, tcfg, train_cfg, sched, on_log=on_log)
        except TrainingAborted as exc:
            save_checkpoint(out, exc.model, values, split, node_map, label_map)
            print(f"error: {exc}; last model saved to {out}", file=sys.stderr)
            return EXIT_RUNTIME
        for h in result.history:
            log_file.write(
                f"validation step={h['step']} auc={h['val_auc']:.6f} "
                f"f1={h['val_f1']:.6f} recall={h['val_recall']:.6f}\n"
            )
        log_file.write(f"selected step={result.best_step} struct={result.phase_counts['struct']} "
                       f"meta={result.phase_counts['meta']}\n")

    save_checkpoint(out, result.model, values, split, node_map, label_map)
    write_manifest(out, values, {"edges": args.edges, "labels": args.labels}, result.history, result.best_step)
    print(f"checkpoint written to {out} (selected step {result.best_step})")
    return EXIT_OK


# -- checkpoint loading ----------------------------------------------------


def load_checkpoint(directory: str | Path):
    """Return ``(model, values, split, node_map, label_map)``."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"checkpoint directory not found: {d}")
    emb = load_embeddings(d / "embeddings.bin")
    params = load_transform(d / "transform.bin")
    if emb.dim != params.config.d:
        raise CheckpointError(
            f"shape mismatch: embeddings have d={emb.dim} but the transform expects d={params.config.d}"
        )
    values = cfgmod.resolve(d / "config.cfg", environ={})
    if values["d"] != emb.dim:
        raise CheckpointError(f"shape mismatch: config.cfg has d={values['d']}, embeddings have d={emb.dim}")
    split = LabelSplit.read(_read_text(d / "split.txt"))
    node_map = IdMap.read(_read_text(d / "node_map.txt"))
    label_map = IdMap.read(_read_text(d / "label_map.txt"))
    if len(node_map) > emb.node_count:
        raise CheckpointError(f"node map lists {len(node_map)} nodes, embeddings hold {emb.node_count}")
    return Model(emb, params, values), values, split, node_map, label_map


def _checkpoint_labels(args, emb_nodes: int, node_map: IdMap, label_map: IdMap):
    label_lines = _read_text(args.labels)
    return load_labels(label_lines, emb_nodes, node_map=node_map, label_map=label_map)


# -- eval ------------------------------------------------------------------


def cmd_eval(args: argparse.Namespace) -> int:
    model, saved, split, node_map, label_map = load_checkpoint(args.checkpoint)
    values = dict(saved)
    values.update(_flag_values(args, SHAPE_KEYS + ("threshold", "seed")))
    shape = cfgmod.task_shape(values)

    if args.tasks:
        tasks = read_tasks(_read_text(args.tasks))
        source = tasks
        n_tasks = len(tasks)
    else:
        if not args.labels:
            raise UsageError("eval needs --tasks or --labels")
        labels = _checkpoint_labels(args, model.emb.node_count, node_map, label_map)
        pool = split.pool(args.pool)
        if not eligible_labels(labels, pool, shape):
            raise NoEligibleLabelError(f"no {args.pool} label can fill task shape {shape}")

        def source(n, rng):
            return sample_tasks(labels, pool, shape, n, rng)

        n_tasks = args.n_tasks
    report = evaluate(model, source, n_tasks, args.trials, substream(values["seed"], "eval"),
                      threshold=values["threshold"], task_agnostic=args.task_agnostic)
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as f:
            report.write(f)
    return EXIT_OK


# -- sample-tasks ----------------------------------------------------------


def cmd_sample_tasks(args: argparse.Namespace) -> int:
    if args.checkpoint:
        model, saved, split, node_map, label_map = load_checkpoint(args.checkpoint)
        values = dict(saved)
        labels = _checkpoint_labels(args, model.emb.node_count, node_map, label_map)
    else:
        if not args.edges:
            raise UsageError("sample-tasks needs --checkpoint or --edges")
        values = cfgmod.resolve(args.config)
        _, labels, _, _ = _load_dataset(args.edges, args.labels)
        values.update(_flag_values(args, ("seed",)))
        split = split_labels(labels, cfgmod.split_ratio(values), subseed(values["seed"], "split"))
    values.update(_flag_values(args, SHAPE_KEYS + ("seed",)))
    shape = cfgmod.task_shape(values)
    pool = split.pool(args.pool)
    try:
        tasks = sample_tasks(labels, pool, shape, args.n_tasks, substream(values["seed"], "eval"))
    except NoEligibleLabelError:
        raise NoEligibleLabelError(f"no {args.pool} label can fill task shape {shape}") from None
    for t in tasks:
        t.check(labels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        write_tasks(tasks, f)
    print(f"wrote {len(tasks)} tasks with shape {shape} to {out}")
    return EXIT_OK


# -- inspect ---------------------------------------------------------------


def cmd_inspect(args: argparse.Namespace) -> int:
    model, values, split, node_map, _ = load_checkpoint(args.checkpoint)
    cfg = model.params.config
    print("config:")
    for key in cfgmod.FIELDS:
        print(f"  {key} = {values[key]}")
    print(f"labels: known={len(split.known)} validation={len(split.validation)} novel={len(split.novel)}")
    print("parameter norms:")
    for name, arr in model.params.named_arrays().items():
        print(f"  {name:<18} shape={'x'.join(map(str, arr.shape)):<10} norm={np.linalg.norm(arr):.6f}")
    gains = np.concatenate([np.concatenate([b.ln1_gain, b.ln2_gain]) for b in model.params.blocks])
    print(f"layer-norm gain mean: {gains.mean():.6f}")
    norms = np.linalg.norm(model.emb.center, axis=1)
    print(f"embeddings: nodes={model.emb.node_count} d={model.emb.dim} "
          f"norm min={norms.min():.6f} max={norms.max():.6f} mean={norms.mean():.6f}")
    actual = sum(a.size for a in model.params.named_arrays().values())
    print(f"parameter count: {cfg.param_count()} (tensors hold {actual})")
    return EXIT_OK


# -- make-sbm --------------------------------------------------------------


def cmd_make_sbm(args: argparse.Namespace) -> int:
    graph, labels = make_sbm_dataset(args.seed, args.nodes, args.communities, args.p_in, args.p_out, args.unions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "edges.txt", "w") as f:
        for u, v in graph.edges:
            f.write(f"{u} {v}\n")
    with open(out / "labels.txt", "w") as f:
        write_labels(labels, f)
    print(f"wrote {graph.node_count} nodes, {graph.edge_count} edges, {labels.label_count} labels to {out}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metatne", description="Few-shot node classification on novel labels.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train embeddings and the transformation")
    t.add_argument("--edges", required=True)
    t.add_argument("--labels", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--quiet", action="store_true", help="do not echo log lines")
    _add_config_flags(t, cfgmod.FIELDS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on few-shot tasks")
    e.add_argument("--checkpoint", required=True)
    src = e.add_mutually_exclusive_group()
    src.add_argument("--tasks", help="frozen task file")
    src.add_argument("--n-tasks", type=int, default=1000)
    e.add_argument("--labels", help="label file (needed unless --tasks is given)")
    e.add_argument("--pool", default="novel", choices=("known", "validation", "novel", "train", "val", "test"))
    e.add_argument("--trials", type=int, default=50)
    e.add_argument("--task-agnostic", action="store_true",
                   help="skip the transformation (nearest prototype over raw embeddings)")
    e.add_argument("--out", help="key=value report file")
    _add_config_flags(e, SHAPE_KEYS + ("threshold", "seed", "threads"))
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample-tasks", help="export a frozen task file")
    s.add_argument("--labels", required=True)
    s.add_argument("--checkpoint", help="reuse the id maps and split of a checkpoint")
    s.add_argument("--edges")
    s.add_argument("--config")
    s.add_argument("--pool", default="novel", choices=("known", "validation", "novel", "train", "val", "test"))
    s.add_argument("--n-tasks", type=int, default=1000)
    s.add_argument("--out", required=True)
    _add_config_flags(s, SHAPE_KEYS + ("seed",))
    s.set_defaults(func=cmd_sample_tasks)

    i = sub.add_parser("inspect", help="summarize a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)

    m = sub.add_parser("make-sbm", help="write a planted-community dataset")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--nodes", type=int, default=400)
    m.add_argument("--communities", type=int, default=8)
    m.add_argument("--p-in", type=float, default=0.2)
    m.add_argument("--p-out", type=float, default=0.01)
    m.add_argument("--unions", type=int, default=8)
    m.set_defaults(func=cmd_make_sbm)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        path = exc.filename if exc.filename is not None else exc
        print(f"error: no such file: {path}", file=sys.stderr)
        return EXIT_USAGE
    except (IsADirectoryError, PermissionError) as exc:
        print(f"error: cannot read {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ParseError, CheckpointError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MetaTNEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
