"""Workflow stages shared by the command line and the acceptance suite.

Each stage reads its inputs from disk and writes its outputs into a directory,
so any stage can be rerun on its own from the files of the previous one. The
layout of one seeded run is::

    data/    world.bin schema.json train.jsonl test.jsonl *_truth.jsonl status.json
    models/  teacher.bin dmtl.bin regression.bin classification.bin click.bin history.jsonl
    eval/    vectors_<model>.bin index_<model>.bin report.json report.txt
    config.ini
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from .baselines import train_baseline
from .config import RunConfig, dumps_config, save_config
from .datagen import WorldModel, generate_all, read_truth, write_truth
from .evaluation import (
    MODEL_ORDER,
    EvalReport,
    auc,
    evaluate_offline,
    oracle_serving,
    simulate_serving,
    student_scorer,
    truth_scorer,
)
from .features import FeatureSchema, read_dataset, write_dataset
from .retrieval import build_index, recall_at_k, save_vector_table
from .student import StudentModel, train_dmtl
from .teacher import TeacherModel
from .tensorio import file_sha256

log = logging.getLogger(__name__)

LEARNED = MODEL_ORDER
# users whose pruned results are compared against exact search
RECALL_QUERIES = 100


def _emit(event: str, **fields):
    log.info(event, extra={"fields": fields})


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def gen_data(cfg: RunConfig, out: Path) -> dict:
    """World, train/test datasets and ground-truth sidecars for ``cfg.gen``."""
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    data = generate_all(cfg.gen)
    data.world.save(out / "world.bin")
    data.world.schema(cfg.model.embedding_dim).save(out / "schema.json")
    for split, res in (("train", data.train), ("test", data.test)):
        write_dataset(res.dataset, out / f"{split}.jsonl")
        write_truth(res.truth, out / f"{split}_truth.jsonl")
    status = {
        "train_records": len(data.train.dataset), "test_records": len(data.test.dataset),
        "train_positive_rate": float(data.train.dataset.z.mean()) if len(data.train.dataset) else 0.0,
        "warnings": data.train.warnings + data.test.warnings,
        "status": "warning" if data.train.warnings or data.test.warnings else "ok",
    }
    _write_json(out / "status.json", status)
    save_config(cfg, out / "config.ini")
    _emit("gen-data", seconds=round(time.perf_counter() - t0, 2), **status)
    return status


def load_data_dir(data: Path, split: str, threshold: float):
    schema = FeatureSchema.load(data / "schema.json")
    return read_dataset(data / f"{split}.jsonl", threshold, schema=schema), schema


def train_models(cfg: RunConfig, data: Path, out: Path, models=None) -> dict[str, str]:
    """Train the requested models on ``data/train.jsonl``; returns checkpoint sha256 by name."""
    models = tuple(models or cfg.run.models)
    out.mkdir(parents=True, exist_ok=True)
    train, schema = load_data_dir(data, "train", cfg.train.duration_threshold)
    if train.click.sum() == 0:
        raise ValueError(f"{data / 'train.jsonl'} has no positive samples; nothing to learn from")
    hashes = {}
    history = []

    def progress(rec):
        history.append(rec)
        _emit("epoch", **rec)

    for name in [m for m in LEARNED if m in models]:
        t0 = time.perf_counter()
        if name == "dmtl":
            teacher, student, _ = train_dmtl(train, schema, cfg.model, cfg.train, log=progress)
            hashes["teacher"] = teacher.save(out / "teacher.bin")
            hashes["dmtl"] = student.save(out / "dmtl.bin")
        else:
            model, _ = train_baseline(name, train, schema, cfg.model, cfg.train, log=progress)
            hashes[name] = model.save(out / f"{name}.bin")
        _emit("trained", model=name, seconds=round(time.perf_counter() - t0, 2))
    with open(out / "history.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    save_config(cfg, out / "config.ini")
    return hashes


def evaluate(cfg: RunConfig, data: Path, model_dir: Path, out: Path) -> EvalReport:
    """Offline AUC on the test split plus simulated top-k serving for every
    checkpoint found in ``model_dir``. Also writes each model's item-vector
    table and a quantized index."""
    out.mkdir(parents=True, exist_ok=True)
    test, schema = load_data_dir(data, "test", cfg.train.duration_threshold)
    truth = read_truth(data / "test_truth.jsonl")
    world = WorldModel.load(data / "world.bin")
    names = [m for m in LEARNED if (model_dir / f"{m}.bin").exists()]
    if not names:
        raise FileNotFoundError(f"no model checkpoints in {model_dir}")
    students = {m: StudentModel.load(model_dir / f"{m}.bin") for m in names}
    scorers = {m: student_scorer(s) for m, s in students.items()}
    if (model_dir / "teacher.bin").exists():
        teacher = TeacherModel.load(model_dir / "teacher.bin")
        scorers["teacher"] = lambda b: teacher.predict(b).pctcvr
    scorers["oracle"] = truth_scorer(truth)
    report = EvalReport()
    report.auc = evaluate_offline(scorers, test)
    report.auc["oracle_duration"] = auc(truth["expected_duration"], test.z)

    ev = cfg.eval
    users = np.arange(world.num_users)
    user_feats = world.user_features
    item_ids = np.arange(world.num_items)
    recall = {}
    for m, student in students.items():
        ckpt_hash = file_sha256(model_dir / f"{m}.bin")
        index = build_index(item_ids, world.item_features, student, ckpt_hash, ev.num_cells,
                            ev.kmeans_iters, cfg.run.seed)
        save_vector_table(out / f"vectors_{m}.bin", index.ids, index.vectors, {"checkpoint_hash": ckpt_hash})
        index.save(out / f"index_{m}.bin")
        uvec = student.user_vector(user_feats)
        res = simulate_serving(index, uvec, world, ev.k, users, ev.sampled_serving, cfg.run.seed)
        report.avg_duration[m] = res.avg_duration
        report.clickbait_fraction[m] = res.clickbait_fraction
        probe = np.random.default_rng([cfg.run.seed, 600]).choice(
            users, min(RECALL_QUERIES, users.size), replace=False)
        recall[m] = float(np.mean([
            recall_at_k(index.topk(uvec[u], ev.k), index.topk_pruned(uvec[u], ev.k, ev.nprobe)) for u in probe
        ]))
    best = oracle_serving(world, ev.k, users, ev.sampled_serving, cfg.run.seed)
    report.avg_duration["oracle_duration"] = best.avg_duration
    report.clickbait_fraction["oracle_duration"] = best.clickbait_fraction
    report.meta = {
        "seed": cfg.run.seed, "k": ev.k, "nprobe": ev.nprobe, "num_cells": ev.num_cells,
        "recall_at_k": recall,
        "train_sha256": file_sha256(data / "train.jsonl"), "test_sha256": file_sha256(data / "test.jsonl"),
        "config_sha256": _sha256_text(dumps_config(cfg)),
    }
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    save_config(cfg, out / "config.ini")
    _emit("evaluated", auc=report.auc, avg_duration=report.avg_duration)
    return report


def run_seed(cfg: RunConfig, out: Path) -> EvalReport:
    """gen-data, train and evaluate for one seed under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    gen_data(cfg, out / "data")
    train_models(cfg, out / "data", out / "models")
    return evaluate(cfg, out / "data", out / "models", out / "eval")


def check_criteria(reports: list[EvalReport], min_wins: int | None = None) -> dict:
    """Pass/fail for the seed-replicated ordering and retrieval checks.

    ``auc_ordering``: Regression < Classification < Click < DMTL in at least
    ``min_wins`` seeds (default: all but one), DMTL's mean AUC at least 0.03
    above Classification and 0.005 above Click.
    ``serving``: DMTL has the highest average duration among learned models in
    ``min_wins`` seeds and a lower mean clickbait share than Click.
    ``recall``: pruned search recall@k of at least 0.9 for every model and seed.
    """
    n = len(reports)
    need = max(n - 1, 1) if min_wins is None else min_wins
    aucs = {m: np.array([r.auc[m] for r in reports]) for m in LEARNED}
    ordered = int(np.sum((aucs["regression"] < aucs["classification"]) & (aucs["classification"] < aucs["click"])
                         & (aucs["click"] < aucs["dmtl"])))
    gap_cls = float(aucs["dmtl"].mean() - aucs["classification"].mean())
    gap_click = float(aucs["dmtl"].mean() - aucs["click"].mean())
    dur_wins = int(sum(max(LEARNED, key=lambda m: r.avg_duration[m]) == "dmtl" for r in reports))
    cb_dmtl = float(np.mean([r.clickbait_fraction["dmtl"] for r in reports]))
    cb_click = float(np.mean([r.clickbait_fraction["click"] for r in reports]))
    recall = min(v for r in reports for v in r.meta["recall_at_k"].values())
    return {
        "auc_ordering": {"passed": ordered >= need and gap_cls >= 0.03 and gap_click >= 0.005,
                         "ordered_seeds": ordered, "required": need, "dmtl_minus_classification": gap_cls,
                         "dmtl_minus_click": gap_click,
                         "mean_auc": {m: float(v.mean()) for m, v in aucs.items()}},
        "serving": {"passed": dur_wins >= need and cb_dmtl < cb_click, "dmtl_best_seeds": dur_wins,
                    "required": need, "clickbait_dmtl": cb_dmtl, "clickbait_click": cb_click,
                    "mean_avg_duration": {m: float(np.mean([r.avg_duration[m] for r in reports]))
                                          for m in LEARNED}},
        "recall": {"passed": recall >= 0.9, "min_recall_at_k": recall},
    }


def summary_text(reports: list[EvalReport], seeds: list[int], checks: dict) -> str:
    lines = []
    for s, r in zip(seeds, reports):
        lines.append(f"seed {s}")
        lines.append(r.to_text())
    for name, res in checks.items():
        lines.append(f"{name}: {'PASS' if res['passed'] else 'FAIL'}  "
                     + ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                                 for k, v in res.items() if k != "passed" and not isinstance(v, dict)))
    return "\n".join(lines) + "\n"


def bench(cfg: RunConfig, out: Path) -> tuple[dict, bool]:
    """Run ``cfg.run.num_seeds`` consecutive seeds starting at ``cfg.run.seed``
    and check the cross-seed criteria; writes summary.json and summary.txt."""
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    seeds = [cfg.run.seed + i for i in range(cfg.run.num_seeds)]
    reports = []
    for s in seeds:
        t0 = time.perf_counter()
        reports.append(run_seed(cfg.with_seed(s), out / f"seed_{s}"))
        _emit("seed-done", seed=s, seconds=round(time.perf_counter() - t0, 2))
    checks = check_criteria(reports)
    summary = {"seeds": seeds, "checks": checks, "reports": {str(s): r.to_dict() for s, r in zip(seeds, reports)}}
    _write_json(out / "summary.json", summary)
    (out / "summary.txt").write_text(summary_text(reports, seeds, checks))
    ok = all(c["passed"] for c in checks.values())
    _emit("bench", passed=ok, **{k: v["passed"] for k, v in checks.items()})
    return summary, ok
