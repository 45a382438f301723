"""Command-line entry point.

Subcommands: gen-data, train, evaluate, build-index, query, bench. Progress
and metrics go to stderr as one JSON object per line; query results go to
stdout.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 bench
acceptance failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, pipeline
from .config import ConfigError, RunConfig, dumps_config, load_config, save_config
from .datagen import WorldModel
from .features import RecordError, SchemaError
from .numerics import ShapeError
from .retrieval import RetrievalIndex, build_index, save_vector_table
from .student import StudentModel
from .tensorio import TensorFileError, file_sha256

OUTPUT_ENV = "DMTL_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ACCEPTANCE = 0, 1, 2, 3

log = logging.getLogger("dmtl.cli")

DATA_ERRORS = (ConfigError, RecordError, SchemaError, ShapeError, TensorFileError, FileNotFoundError,
               ValueError, KeyError, json.JSONDecodeError)


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        rec = {"level": record.levelname.lower(), "event": record.getMessage()}
        rec.update(getattr(record, "fields", {}))
        return json.dumps(rec, sort_keys=True, default=str)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.run.seed
    return cfg.with_seed(seed)


class staged_output:
    """Write into a sibling temp directory and move it into place on success,
    so a failed command leaves no partial outputs behind."""

    def __init__(self, target: Path):
        self.target = Path(target)

    def __enter__(self) -> Path:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.partial-", dir=self.target.parent))
        return self.stage

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.stage, ignore_errors=True)
            log.warning("removed partial outputs", extra={"fields": {"out": str(self.target)}})
            return False
        self.target.mkdir(parents=True, exist_ok=True)
        for entry in sorted(self.stage.iterdir()):
            dest = self.target / entry.name
            if dest.is_dir():
                shutil.rmtree(dest)
            elif dest.exists():
                dest.unlink()
            shutil.move(str(entry), str(dest))
        self.stage.rmdir()
        log.info("wrote", extra={"fields": {"out": str(self.target)}})
        return False


def _out_dir(args, name: str) -> Path:
    return Path(args.out) if args.out else default_output_root() / name


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    with staged_output(_out_dir(args, f"data_seed{cfg.run.seed}")) as out:
        pipeline.gen_data(cfg, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    models = tuple(args.models.split(",")) if args.models else None
    if models:
        unknown = set(models) - set(pipeline.LEARNED)
        if unknown:
            raise UsageError(f"unknown model(s) {sorted(unknown)}; choose from {', '.join(pipeline.LEARNED)}")
    data = Path(args.data)
    with staged_output(_out_dir(args, f"models_seed{cfg.run.seed}")) as out:
        pipeline.train_models(cfg, data, out, models)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    with staged_output(_out_dir(args, f"eval_seed{cfg.run.seed}")) as out:
        report = pipeline.evaluate(cfg, Path(args.data), Path(args.models), out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_build_index(args) -> int:
    cfg = resolve_config(args)
    world = WorldModel.load(Path(args.data) / "world.bin")
    student = StudentModel.load(args.checkpoint)
    cells = cfg.eval.num_cells if args.num_cells is None else args.num_cells
    with staged_output(_out_dir(args, "index")) as out:
        ckpt = file_sha256(args.checkpoint)
        index = build_index(np.arange(world.num_items), world.item_features, student, ckpt, cells,
                            cfg.eval.kmeans_iters, cfg.run.seed)
        save_vector_table(out / "vectors.bin", index.ids, index.vectors, {"checkpoint_hash": ckpt})
        index.save(out / "index.bin")
        save_config(cfg, out / "config.ini")
    log.info("build-index", extra={"fields": {"items": len(index), "cells": index.num_cells}})
    return EXIT_OK


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def cmd_query(args) -> int:
    index = RetrievalIndex.load(args.index)
    if args.vector:
        try:
            q = np.array([float(t) for t in args.vector.replace(",", " ").split()])
        except ValueError:
            raise UsageError(f"--vector expects comma-separated floats, got {args.vector!r}") from None
    else:
        if not args.checkpoint:
            raise UsageError("--user-features and --user-id need --checkpoint")
        student = StudentModel.load(args.checkpoint)
        if args.user_id is not None:
            if not args.data:
                raise UsageError("--user-id needs --data to look up the user's features")
            world = WorldModel.load(Path(args.data) / "world.bin")
            if not 0 <= args.user_id < world.num_users:
                raise ValueError(f"user id {args.user_id} outside [0, {world.num_users})")
            feats = world.user_features[args.user_id]
        elif args.user_features:
            feats = np.array(_parse_ints(args.user_features))
        else:
            raise UsageError("give one of --vector, --user-id or --user-features")
        q = student.user_vector(feats)
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    results = index.topk_pruned(q, args.k, args.nprobe) if args.nprobe else index.topk(q, args.k)
    for rank, (item, score) in enumerate(results, 1):
        sys.stdout.write(f"{rank}\t{item}\t{score:.6f}\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    if args.num_seeds is not None:
        cfg.run.num_seeds = args.num_seeds
    with staged_output(_out_dir(args, f"bench_seed{cfg.run.seed}")) as out:
        _, ok = pipeline.bench(cfg, out)
    target = _out_dir(args, f"bench_seed{cfg.run.seed}")
    sys.stdout.write((target / "summary.txt").read_text())
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def build_parser() -> argparse.ArgumentParser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="INI config file; omitted keys take defaults "
                        "(see configs/default.ini)")
    common.add_argument("--seed", type=int, help="overrides [run] seed for every stage")
    common.add_argument("--out", help=f"output directory (default: under ${OUTPUT_ENV} or ./runs)")

    p = Parser(prog="dmtl", description="Distilled multi-task candidate generation: synthetic data, "
               "training, evaluation and retrieval.",
               epilog="default configuration (every key may be overridden in --config):\n\n"
               + dumps_config(RunConfig()),
               formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate world, datasets and ground truth")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train DMTL and baselines")
    t.add_argument("--data", required=True, help="directory written by gen-data")
    t.add_argument("--models", help="comma-separated subset of dmtl,regression,classification,click")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="offline AUC and simulated serving")
    e.add_argument("--data", required=True)
    e.add_argument("--models", required=True, help="directory written by train")
    e.set_defaults(fn=cmd_evaluate)

    b = sub.add_parser("build-index", parents=[common], help="index a student's item vectors")
    b.add_argument("--data", required=True)
    b.add_argument("--checkpoint", required=True, help="student checkpoint (dmtl.bin or a baseline)")
    b.add_argument("--num-cells", type=int, help="k-means cells; 0 builds an exact-only index")
    b.set_defaults(fn=cmd_build_index)

    q = sub.add_parser("query", help="top-k items for one user")
    q.add_argument("--index", required=True)
    q.add_argument("--k", type=int, default=10)
    q.add_argument("--nprobe", type=int, default=0, help="probe this many cells (0: exact search)")
    q.add_argument("--checkpoint", help="student checkpoint used to embed the user")
    q.add_argument("--user-id", type=int, help="look the user's features up in --data")
    q.add_argument("--user-features", help="comma-separated user field ids")
    q.add_argument("--vector", help="comma-separated user vector, bypassing the model")
    q.add_argument("--data")
    q.set_defaults(fn=cmd_query)

    r = sub.add_parser("bench", parents=[common], help="multi-seed benchmark with acceptance checks")
    r.add_argument("--num-seeds", type=int, help="overrides [run] num_seeds")
    r.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("dmtl")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if args.quiet else logging.INFO)
    root.propagate = False
    try:
        return args.fn(args)
    except UsageError as err:
        parser.exit(EXIT_USAGE, f"dmtl: error: {err}\n")
    except DATA_ERRORS as err:
        log.error("failed", extra={"fields": {"error": str(err), "type": type(err).__name__}})
        sys.stderr.write(f"dmtl: {err}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
