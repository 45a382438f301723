"""Double-tower student and teacher-to-student distillation.

The user tower maps user-field embeddings to a vector, the item tower maps
item-field embeddings to a vector of the same width, and the score is their
inner product. The student owns its own embedding tables; nothing is shared
with the teacher.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensorio
from .config import ModelConfig, TrainConfig
from .features import Batch, EmbeddingSet, FeatureSchema, iter_minibatches
from .numerics import DenseNet, ShapeError, clamp_mask, clamp_prob, make_optimizer, sigmoid
from .teacher import TeacherModel, _model_from_meta, _model_meta

# loss_fn(scores, batch) -> (summed loss, dloss/dscores)
ScoreLoss = Callable[[np.ndarray, Batch], tuple[float, np.ndarray]]


class StudentModel:
    def __init__(self, schema: FeatureSchema, model_cfg: ModelConfig | None = None,
                 rng: np.random.Generator | None = None, kind: str = "dmtl"):
        model_cfg = model_cfg or ModelConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.schema = schema
        self.model_cfg = model_cfg
        self.kind = kind
        self.user_emb = EmbeddingSet(schema.user_fields, schema.embedding_dim, rng)
        self.item_emb = EmbeddingSet(schema.item_fields, schema.embedding_dim, rng)
        self.user_tower = DenseNet([schema.user_dim, *model_cfg.tower_sizes], rng)
        self.item_tower = DenseNet([schema.item_dim, *model_cfg.tower_sizes], rng)
        self._cache = None

    @property
    def dim(self) -> int:
        return self.user_tower.out_dim

    def named_params(self):
        return (self.user_emb.named_params("user_emb") + self.item_emb.named_params("item_emb")
                + self.user_tower.named_params("user_tower") + self.item_tower.named_params("item_tower"))

    def params(self):
        return [p for _, p, _ in self.named_params()]

    def grads(self):
        return [g for _, _, g in self.named_params()]

    def zero_grad(self):
        for _, _, g in self.named_params():
            g.fill(0.0)

    def user_vector(self, user_ids):
        """R(u) for one id tuple (F,) or a batch (n, F)."""
        return self.user_tower.predict(self.user_emb.lookup(user_ids, record=False))

    def item_vector(self, item_ids):
        return self.item_tower.predict(self.item_emb.lookup(item_ids, record=False))

    def scores(self, batch: Batch):
        """Raw inner products R(u)^T S(v) without touching backprop caches."""
        return np.sum(self.user_vector(batch.user_ids) * self.item_vector(batch.item_ids), axis=-1)

    def predict(self, batch: Batch):
        return sigmoid(self.scores(batch))

    def forward(self, batch: Batch):
        u = self.user_tower.forward(self.user_emb.lookup(batch.user_ids))
        v = self.item_tower.forward(self.item_emb.lookup(batch.item_ids))
        self._cache = (u, v)
        return np.sum(u * v, axis=1)

    def backward(self, d_scores):
        if self._cache is None:
            raise RuntimeError("student backward requires a recorded forward pass")
        u, v = self._cache
        d = np.asarray(d_scores, dtype=np.float64)[:, None]
        self.user_emb.backward(self.user_tower.backward(d * v))
        self.item_emb.backward(self.item_tower.backward(d * u))

    def loss_and_grad(self, batch: Batch, loss_fn: ScoreLoss) -> float:
        self.zero_grad()
        s = self.forward(batch)
        loss, d_s = loss_fn(s, batch)
        self.backward(d_s)
        return loss

    def make_optimizer(self, cfg: TrainConfig):
        return make_optimizer(cfg.optimizer, self.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def state_dict(self):
        return {name: p for name, p, _ in self.named_params()}

    def load_state_dict(self, state):
        for name, p, _ in self.named_params():
            if name not in state:
                raise KeyError(f"checkpoint lacks tensor {name!r}")
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} vs model {p.shape}")
            p[...] = state[name]

    def save(self, path) -> str:
        meta = {"kind": "student", "model_kind": self.kind, "schema": self.schema.to_dict(),
                "model": _model_meta(self.model_cfg)}
        return tensorio.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "StudentModel":
        tensors, meta = tensorio.load(path)
        if meta.get("kind") != "student":
            raise ValueError(f"{path} is not a student checkpoint (kind={meta.get('kind')!r})")
        model = cls(FeatureSchema.from_dict(meta["schema"]), _model_from_meta(meta["model"]),
                    kind=meta.get("model_kind", "dmtl"))
        model.load_state_dict(tensors)
        return model

    def item_table(self, item_ids: np.ndarray, item_features: np.ndarray):
        """(ids, vectors) for every catalog item; ``item_features`` is (n, F_item)."""
        return np.asarray(item_ids, dtype=np.int64), self.item_vector(item_features)


def student_predict(u_vec, i_vec):
    u_vec = np.asarray(u_vec, dtype=np.float64)
    i_vec = np.asarray(i_vec, dtype=np.float64)
    if u_vec.shape[-1] != i_vec.shape[-1]:
        raise ShapeError(f"user vector dim {u_vec.shape[-1]} != item vector dim {i_vec.shape[-1]}")
    return sigmoid(np.sum(u_vec * i_vec, axis=-1))


def _nonneg_div_term(t):
    # t*ln(t) - t + 1 >= 0 for t > 0; clipping removes rounding below zero near t == 1
    return np.maximum(t * np.log(t) - t + 1.0, 0.0)


def distill_loss(teacher_p, student_q, literal: bool = False):
    """Binary KL(teacher || student), elementwise; both inputs are clamped.

    Written as q*phi(p/q) + (1-q)*phi((1-p)/(1-q)) with phi(t) = t ln t - t + 1,
    which equals p ln(p/q) + (1-p) ln((1-p)/(1-q)) but is nonnegative term by
    term. ``literal=True`` evaluates the log-free expression instead.
    """
    p = clamp_prob(np.asarray(teacher_p, dtype=np.float64))
    q = clamp_prob(np.asarray(student_q, dtype=np.float64))
    if literal:
        return p * (p / q) + (1.0 - p) * ((1.0 - p) / (1.0 - q))
    return q * _nonneg_div_term(p / q) + (1.0 - q) * _nonneg_div_term((1.0 - p) / (1.0 - q))


def distill_grad_prob(teacher_p, student_q, literal: bool = False):
    """d distill_loss / d q (zero where q was clamped)."""
    p = clamp_prob(np.asarray(teacher_p, dtype=np.float64))
    q_raw = np.asarray(student_q, dtype=np.float64)
    q = clamp_prob(q_raw)
    if literal:
        g = -(p * p) / (q * q) + (1.0 - p) ** 2 / (1.0 - q) ** 2
    else:
        g = -p / q + (1.0 - p) / (1.0 - q)
    return g * clamp_mask(q_raw)


def distill_grad_logit(teacher_p, student_logit, literal: bool = False, temperature: float = 1.0):
    """Gradient of the distillation loss w.r.t. the student's raw score."""
    s = np.asarray(student_logit, dtype=np.float64)
    q = sigmoid(s / temperature)
    return distill_grad_prob(teacher_p, q, literal) * q * (1.0 - q) / temperature


def soften(p, temperature: float):
    """Temperature-scale a probability in logit space (identity at T = 1)."""
    if temperature == 1.0:
        return np.asarray(p, dtype=np.float64)
    p = clamp_prob(np.asarray(p, dtype=np.float64))
    return sigmoid((np.log(p) - np.log1p(-p)) / temperature)


def distillation_loss_fn(teacher_pctcvr: np.ndarray, cfg: TrainConfig) -> ScoreLoss:
    """Score loss against fixed teacher targets; the targets are plain arrays, so
    no gradient can reach the teacher."""
    target = soften(np.array(teacher_pctcvr, dtype=np.float64, copy=True), cfg.temperature)

    def fn(scores, batch):
        q = sigmoid(scores / cfg.temperature)
        loss = float(np.sum(distill_loss(target, q, cfg.paper_literal_kl)))
        return loss, distill_grad_logit(target, scores, cfg.paper_literal_kl, cfg.temperature)

    return fn


def check_compatible(teacher: TeacherModel, student: StudentModel):
    ts, ss = teacher.schema, student.schema
    if ts.user_fields != ss.user_fields or ts.item_fields != ss.item_fields:
        raise ShapeError("teacher and student schemas disagree on categorical fields")
    if any(np.shares_memory(a, b) for a in teacher.params() for b in student.params()):
        raise ValueError("teacher and student share parameter storage")


@dataclass
class JointStepResult:
    teacher_loss: float
    l_d: float
    l_c: float
    student_loss: float


def joint_train_step(batch: Batch, teacher: TeacherModel, student: StudentModel, cfg: TrainConfig,
                     teacher_opt, student_opt, check: bool = False) -> JointStepResult:
    """One step on L_teacher + L_student.

    The teacher's pctcvr from this step's forward pass is frozen into the
    student target, so the two gradient sets are disjoint and the step equals
    a student-only step followed by a teacher-only step from the same state.
    """
    if check:
        check_compatible(teacher, student)
    l_t, l_d, l_c = teacher.loss_and_grad(batch, cfg)
    target = teacher._cache[-1].pctcvr
    l_s = student.loss_and_grad(batch, distillation_loss_fn(target, cfg))
    teacher_opt.step(teacher.grads())
    student_opt.step(student.grads())
    return JointStepResult(l_t, l_d, l_c, l_s)


def teacher_only_step(batch, teacher: TeacherModel, cfg: TrainConfig, teacher_opt):
    return teacher.train_step(batch, cfg, teacher_opt)


def student_only_step(batch, teacher: TeacherModel, student: StudentModel, cfg: TrainConfig, student_opt):
    target = teacher.predict(batch).pctcvr
    loss = student.loss_and_grad(batch, distillation_loss_fn(target, cfg))
    student_opt.step(student.grads())
    return loss


def mean_kl(teacher: TeacherModel, student: StudentModel, batch: Batch) -> float:
    return float(np.mean(distill_loss(teacher.predict(batch).pctcvr, student.predict(batch))))


@dataclass
class History:
    records: list[dict] = field(default_factory=list)

    def log(self, **rec):
        self.records.append(rec)


def init_models(schema: FeatureSchema, model_cfg: ModelConfig, seed: int):
    """Teacher and student initialised from independent seeded streams.

    The student stream depends only on ``seed`` so baselines built with the
    same seed start from identical weights.
    """
    teacher = TeacherModel(schema, model_cfg, np.random.default_rng([seed, 1]))
    student = StudentModel(schema, model_cfg, np.random.default_rng([seed, 2]), kind="dmtl")
    return teacher, student


def batch_order_rng(seed: int) -> np.random.Generator:
    """Shuffling stream shared by DMTL and every baseline for a given seed."""
    return np.random.default_rng([seed, 3])


def train_dmtl(dataset: Batch, schema: FeatureSchema, model_cfg: ModelConfig, cfg: TrainConfig,
               log=None):
    """Jointly train teacher and student over ``cfg.epochs`` passes of one batch stream."""
    teacher, student = init_models(schema, model_cfg, cfg.seed)
    check_compatible(teacher, student)
    t_opt = teacher.make_optimizer(cfg)
    s_opt = student.make_optimizer(cfg)
    order = batch_order_rng(cfg.seed)
    history = History()
    for epoch in range(cfg.epochs):
        tot_t = tot_s = 0.0
        for idx in iter_minibatches(len(dataset), cfg.batch_size, order):
            r = joint_train_step(dataset.subset(idx), teacher, student, cfg, t_opt, s_opt)
            tot_t += r.teacher_loss
            tot_s += r.student_loss
        rec = {"model": "dmtl", "epoch": epoch + 1, "teacher_loss_mean": tot_t / len(dataset),
               "student_loss_mean": tot_s / len(dataset)}
        history.log(**rec)
        if log:
            log(rec)
    return teacher, student, history
