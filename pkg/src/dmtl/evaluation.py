"""Duration-task AUC and a simulated serving metric (average reading duration
of retrieved candidates), plus the report that carries both."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .datagen import WorldModel, sample_durations
from .features import Batch
from .retrieval import RetrievalIndex
from .student import StudentModel

log = logging.getLogger(__name__)

MODEL_ORDER = ("regression", "classification", "click", "dmtl")
DISPLAY = {"regression": "DSSM-Regression", "classification": "DSSM-Classification",
           "click": "DSSM-Click", "dmtl": "DMTL", "teacher": "DMTL teacher (MTL)",
           "oracle": "oracle (true ctr*cvr)", "oracle_duration": "oracle (true E[dur])",
           "random": "random"}


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties = 1/2).

    Rank-sum formulation with average ranks over tied groups, O(n log n).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC needs both classes (got {n_pos} positives, {n_neg} negatives)")
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    # average 1-based rank for each run of equal scores
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    ends = np.r_[starts[1:], ss.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(ss.size)
    ranks[order] = np.repeat(avg, ends - starts)
    rank_sum = float(np.sum(ranks[y == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


Scorer = Callable[[Batch], np.ndarray]


def student_scorer(model: StudentModel) -> Scorer:
    """Regression ranks by the raw inner product; the others by its sigmoid."""
    if model.kind == "regression":
        return model.scores
    return model.predict


@dataclass
class EvalReport:
    auc: dict[str, float] = field(default_factory=dict)
    avg_duration: dict[str, float] = field(default_factory=dict)
    clickbait_fraction: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"auc": self.auc, "avg_duration": self.avg_duration,
                "clickbait_fraction": self.clickbait_fraction, "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d.get("auc", {}), d.get("avg_duration", {}), d.get("clickbait_fraction", {}),
                   d.get("meta", {}))

    def to_text(self) -> str:
        names = [m for m in MODEL_ORDER + ("teacher", "oracle", "oracle_duration")
                 if m in self.auc or m in self.avg_duration]
        names += sorted((set(self.auc) | set(self.avg_duration)) - set(names))
        width = max(len(DISPLAY.get(n, n)) for n in names) if names else 6
        lines = [f"{'model':<{width}}  {'AUC':>7}  {'avg duration (s)':>16}  {'clickbait@k':>11}",
                 "-" * (width + 42)]
        for n in names:
            a = f"{self.auc[n]:.4f}" if n in self.auc else "-"
            d = f"{self.avg_duration[n]:.3f}" if n in self.avg_duration else "-"
            c = f"{self.clickbait_fraction[n]:.4f}" if n in self.clickbait_fraction else "-"
            lines.append(f"{DISPLAY.get(n, n):<{width}}  {a:>7}  {d:>16}  {c:>11}")
        return "\n".join(lines) + "\n"


def evaluate_offline(models: Mapping[str, Scorer], test_set: Batch) -> dict[str, float]:
    """Duration-task AUC (label z) for every scorer on the held-out set."""
    if len(test_set) == 0:
        raise ValueError("empty test set")
    return {name: auc(scorer(test_set), test_set.z) for name, scorer in models.items()}


def truth_scorer(truth: dict) -> Scorer:
    """Scores a dataset by true ctr*cvr; ``truth`` must be aligned with it."""
    score = np.asarray(truth["ctr"]) * np.asarray(truth["cvr"])

    def fn(batch):
        if len(batch) != score.size:
            raise ValueError("truth sidecar is not aligned with the dataset")
        return score

    return fn


@dataclass
class ServingResult:
    avg_duration: float
    clickbait_fraction: float
    served: np.ndarray  # (n_users, k) item ids


def clamp_k(k: int, corpus: int) -> int:
    if k > corpus:
        log.warning("k=%d exceeds corpus size %d; clamped", k, corpus)
        return corpus
    return k


def _serving_metrics(world: WorldModel, users: np.ndarray, served: np.ndarray, sampled: bool, seed: int):
    uu = np.repeat(users, served.shape[1])
    ii = served.ravel()
    if sampled:
        rng = np.random.default_rng([seed, 500])
        click = rng.uniform(size=ii.size) < world.ctr(uu, ii)
        long_read = click & (rng.uniform(size=ii.size) < world.cvr(uu, ii))
        dur = np.where(click, sample_durations(rng, long_read, world.config), 0.0)
        avg = float(dur.mean())
    else:
        avg = float(np.mean(world.expected_duration(uu, ii)))
    return ServingResult(avg, float(np.mean(world.clickbait[ii])), served)


def simulate_serving(index: RetrievalIndex, user_vectors: np.ndarray, world: WorldModel, k: int,
                     users: np.ndarray | None = None, sampled: bool = False, seed: int = 0) -> ServingResult:
    """Serve each user the exact top-k of ``index`` and average the true E[duration]
    over every served (user, item) impression."""
    users = np.arange(world.num_users) if users is None else np.asarray(users)
    k = clamp_k(k, len(index))
    served = index.topk_batch(user_vectors, k)
    return _serving_metrics(world, users, served, sampled, seed)


def oracle_serving(world: WorldModel, k: int, users: np.ndarray | None = None, sampled: bool = False,
                   seed: int = 0, chunk: int = 256) -> ServingResult:
    """Upper bound: serve each user the k items with the largest true E[duration]."""
    users = np.arange(world.num_users) if users is None else np.asarray(users)
    k = clamp_k(k, world.num_items)
    served = np.empty((users.size, k), dtype=np.int64)
    for start in range(0, users.size, chunk):
        ed = world.user_item_matrix(users[start:start + chunk])
        top = np.argsort(-ed, axis=1, kind="stable")[:, :k]
        served[start:start + chunk] = top
    return _serving_metrics(world, users, served, sampled, seed)
