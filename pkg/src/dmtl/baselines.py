"""Competing double-tower models that share the student architecture.

* regression: inner product regresses the reading duration (zero for negatives)
  with a square loss.
* classification: sigmoid(inner product) against the long-read label z.
* click: sigmoid(inner product) against the click label y.
"""

from __future__ import annotations

import enum

import numpy as np

from .config import ModelConfig, TrainConfig
from .features import Batch, FeatureSchema, iter_minibatches
from .numerics import bce, bce_grad_prob, sigmoid
from .student import History, StudentModel, batch_order_rng


class BaselineKind(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"
    CLICK = "click"


def _require(batch: Batch):
    if len(batch) == 0:
        raise ValueError("loss needs a non-empty batch")


def regression_score_loss(scores, batch: Batch):
    _require(batch)
    resid = scores - batch.duration
    return float(np.sum(resid * resid)), 2.0 * resid


def _bce_score_loss(scores, labels):
    q = sigmoid(scores)
    loss = float(np.sum(bce(labels, q)))
    # equals q - y wherever q is not clamped
    return loss, bce_grad_prob(labels, q) * q * (1.0 - q)


def classification_score_loss(scores, batch: Batch):
    _require(batch)
    return _bce_score_loss(scores, batch.z)


def click_score_loss(scores, batch: Batch):
    _require(batch)
    return _bce_score_loss(scores, batch.click)


LOSSES = {
    BaselineKind.REGRESSION: regression_score_loss,
    BaselineKind.CLASSIFICATION: classification_score_loss,
    BaselineKind.CLICK: click_score_loss,
}


def regression_loss(batch: Batch, model: StudentModel) -> float:
    return regression_score_loss(model.scores(batch), batch)[0]


def classification_loss(batch: Batch, model: StudentModel) -> float:
    return classification_score_loss(model.scores(batch), batch)[0]


def click_loss(batch: Batch, model: StudentModel) -> float:
    return click_score_loss(model.scores(batch), batch)[0]


def parse_kind(kind) -> BaselineKind:
    try:
        return BaselineKind(kind)
    except ValueError:
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of "
                         f"{[k.value for k in BaselineKind]}") from None


def init_baseline(kind, schema: FeatureSchema, model_cfg: ModelConfig, seed: int) -> StudentModel:
    # same stream as the DMTL student so every double tower starts identically
    return StudentModel(schema, model_cfg, np.random.default_rng([seed, 2]), kind=parse_kind(kind).value)


def train_baseline(kind, dataset: Batch, schema: FeatureSchema, model_cfg: ModelConfig,
                   cfg: TrainConfig, log=None):
    """Train one baseline over the shared batch stream; returns (model, history)."""
    kind = parse_kind(kind)
    model = init_baseline(kind, schema, model_cfg, cfg.seed)
    loss_fn = LOSSES[kind]
    opt = model.make_optimizer(cfg)
    order = batch_order_rng(cfg.seed)
    history = History()
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in iter_minibatches(len(dataset), cfg.batch_size, order):
            total += model.loss_and_grad(dataset.subset(idx), loss_fn)
            opt.step(model.grads())
        rec = {"model": kind.value, "epoch": epoch + 1, "loss_mean": total / len(dataset)}
        history.log(**rec)
        if log:
            log(rec)
    return model, history
