"""Multi-gate mixture-of-experts teacher with entire-space CTR x CVR factorization.

Two softmax gates mix K shared experts into a click representation and a
conversion representation. Each goes through its own head to a logit. The
long-read probability is ``pctr * pcvr`` and is fitted on all samples, next to
an auxiliary click loss on ``pctr``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorio
from .config import ModelConfig, TrainConfig
from .features import Batch, EmbeddingSet, FeatureSchema, encode_teacher_input
from .numerics import (
    DenseNet,
    ShapeError,
    bce,
    bce_grad_prob,
    glorot_uniform,
    make_optimizer,
    sigmoid,
    softmax,
    softmax_backward,
)


@dataclass
class TeacherOutput:
    pctr: np.ndarray
    pcvr: np.ndarray
    pctcvr: np.ndarray


def expert_mixture(x, gate_weights, experts):
    """Sum_k softmax(gate_weights @ x)_k * f_k(x) for a vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    gate_weights = np.asarray(gate_weights, dtype=np.float64)
    if gate_weights.shape != (len(experts), x.shape[-1]):
        raise ShapeError(f"gate weights {gate_weights.shape} do not match "
                         f"{len(experts)} experts over input dim {x.shape[-1]}")
    g = softmax(x @ gate_weights.T)
    outs = np.stack([f.predict(x) for f in experts], axis=-2)
    return np.sum(g[..., :, None] * outs, axis=-2)


def teacher_loss_terms(output: TeacherOutput, batch: Batch, cfg: TrainConfig):
    """Summed (L_teacher, L_d, L_c) for precomputed predictions."""
    if len(batch) == 0:
        raise ValueError("teacher loss needs a non-empty batch")
    click_target = batch.z if cfg.paper_literal_click_label else batch.click
    l_d = float(np.sum(bce(batch.z, output.pctcvr)))
    l_c = float(np.sum(bce(click_target, output.pctr)))
    return cfg.w1 * l_d + cfg.w2 * l_c, l_d, l_c


class TeacherModel:
    def __init__(self, schema: FeatureSchema, model_cfg: ModelConfig | None = None,
                 rng: np.random.Generator | None = None):
        model_cfg = model_cfg or ModelConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        if model_cfg.num_experts < 1:
            raise ValueError("need at least one expert")
        self.schema = schema
        self.model_cfg = model_cfg
        d = schema.teacher_dim
        self.user_emb = EmbeddingSet(schema.user_fields, schema.embedding_dim, rng)
        self.item_emb = EmbeddingSet(schema.item_fields, schema.embedding_dim, rng)
        self.experts = [DenseNet([d, *model_cfg.expert_sizes], rng, final_activation="relu")
                        for _ in range(model_cfg.num_experts)]
        k = model_cfg.num_experts
        self.W_c = glorot_uniform(rng, k, d)
        self.W_d = glorot_uniform(rng, k, d)
        self.gW_c = np.zeros_like(self.W_c)
        self.gW_d = np.zeros_like(self.W_d)
        h = model_cfg.expert_sizes[-1]
        self.head_c = DenseNet([h, *model_cfg.head_sizes, 1], rng)
        self.head_d = DenseNet([h, *model_cfg.head_sizes, 1], rng)
        self._cache = None

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def named_params(self):
        out = self.user_emb.named_params("user_emb") + self.item_emb.named_params("item_emb")
        for k, f in enumerate(self.experts):
            out += f.named_params(f"expert{k}")
        out += [("W_c", self.W_c, self.gW_c), ("W_d", self.W_d, self.gW_d)]
        out += self.head_c.named_params("head_c") + self.head_d.named_params("head_d")
        return out

    def params(self):
        return [p for _, p, _ in self.named_params()]

    def grads(self):
        return [g for _, _, g in self.named_params()]

    def zero_grad(self):
        for _, _, g in self.named_params():
            g.fill(0.0)

    def encode(self, batch: Batch, record: bool = False):
        return encode_teacher_input(batch.user_ids, batch.item_ids, batch.dense,
                                    self.user_emb, self.item_emb, record=record)

    def forward(self, batch: Batch, record: bool = True) -> TeacherOutput:
        x = self.encode(batch, record=record)
        if record:
            outs = [f.forward(x) for f in self.experts]
        else:
            outs = [f.predict(x) for f in self.experts]
        F = np.stack(outs, axis=1)  # (n, K, H)
        g_c = softmax(x @ self.W_c.T)
        g_d = softmax(x @ self.W_d.T)
        e_c = np.einsum("nk,nkh->nh", g_c, F)
        e_d = np.einsum("nk,nkh->nh", g_d, F)
        if record:
            s_c = self.head_c.forward(e_c)[:, 0]
            s_d = self.head_d.forward(e_d)[:, 0]
        else:
            s_c = self.head_c.predict(e_c)[:, 0]
            s_d = self.head_d.predict(e_d)[:, 0]
        pctr = sigmoid(s_c)
        pcvr = sigmoid(s_d)
        out = TeacherOutput(pctr, pcvr, pctr * pcvr)
        if record:
            self._cache = (x, F, g_c, g_d, out)
        return out

    def predict(self, batch: Batch) -> TeacherOutput:
        return self.forward(batch, record=False)

    def gate_outputs(self, batch: Batch):
        x = self.encode(batch)
        return softmax(x @ self.W_c.T), softmax(x @ self.W_d.T)

    def loss(self, batch: Batch, cfg: TrainConfig):
        """(L_teacher, L_d, L_c), all summed over the batch."""
        return teacher_loss_terms(self.predict(batch), batch, cfg)

    def backward(self, batch: Batch, cfg: TrainConfig):
        """Accumulate dL_teacher/dtheta for the last recorded forward pass."""
        if self._cache is None:
            raise RuntimeError("teacher backward requires a recorded forward pass")
        x, F, g_c, g_d, out = self._cache
        click_target = batch.z if cfg.paper_literal_click_label else batch.click
        d_ctcvr = cfg.w1 * bce_grad_prob(batch.z, out.pctcvr)
        d_ctr = cfg.w2 * bce_grad_prob(click_target, out.pctr) + d_ctcvr * out.pcvr
        d_cvr = d_ctcvr * out.pctr
        d_sc = d_ctr * out.pctr * (1.0 - out.pctr)
        d_sd = d_cvr * out.pcvr * (1.0 - out.pcvr)
        d_ec = self.head_c.backward(d_sc[:, None])
        d_ed = self.head_d.backward(d_sd[:, None])
        dF = g_c[:, :, None] * d_ec[:, None, :] + g_d[:, :, None] * d_ed[:, None, :]
        dg_c = np.einsum("nkh,nh->nk", F, d_ec)
        dg_d = np.einsum("nkh,nh->nk", F, d_ed)
        dl_c = softmax_backward(g_c, dg_c)
        dl_d = softmax_backward(g_d, dg_d)
        self.gW_c += dl_c.T @ x
        self.gW_d += dl_d.T @ x
        dx = dl_c @ self.W_c + dl_d @ self.W_d
        for k, f in enumerate(self.experts):
            dx += f.backward(dF[:, k, :])
        nu, ni = self.schema.user_dim, self.schema.item_dim
        self.user_emb.backward(dx[:, :nu])
        self.item_emb.backward(dx[:, nu:nu + ni])

    def loss_and_grad(self, batch: Batch, cfg: TrainConfig):
        """Zero the buffers, run forward + backward, return (L, L_d, L_c)."""
        self.zero_grad()
        out = self.forward(batch, record=True)
        terms = teacher_loss_terms(out, batch, cfg)
        self.backward(batch, cfg)
        return terms

    def make_optimizer(self, cfg: TrainConfig):
        return make_optimizer(cfg.optimizer, self.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def train_step(self, batch: Batch, cfg: TrainConfig, optimizer):
        terms = self.loss_and_grad(batch, cfg)
        optimizer.step(self.grads())
        return terms

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p for name, p, _ in self.named_params()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, p, _ in self.named_params():
            if name not in state:
                raise KeyError(f"checkpoint lacks tensor {name!r}")
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} vs model {p.shape}")
            p[...] = state[name]

    def save(self, path) -> str:
        meta = {"kind": "teacher", "schema": self.schema.to_dict(), "model": _model_meta(self.model_cfg)}
        return tensorio.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "TeacherModel":
        tensors, meta = tensorio.load(path)
        if meta.get("kind") != "teacher":
            raise ValueError(f"{path} is not a teacher checkpoint (kind={meta.get('kind')!r})")
        model = cls(FeatureSchema.from_dict(meta["schema"]), _model_from_meta(meta["model"]))
        model.load_state_dict(tensors)
        return model


def _model_meta(cfg: ModelConfig) -> dict:
    return {
        "preset": cfg.preset, "embedding_dim": cfg.embedding_dim, "num_experts": cfg.num_experts,
        "expert_sizes": list(cfg.expert_sizes), "head_sizes": list(cfg.head_sizes),
        "tower_sizes": list(cfg.tower_sizes),
    }


def _model_from_meta(d: dict) -> ModelConfig:
    return ModelConfig(
        preset=d["preset"], embedding_dim=d["embedding_dim"], num_experts=d["num_experts"],
        expert_sizes=tuple(d["expert_sizes"]), head_sizes=tuple(d["head_sizes"]),
        tower_sizes=tuple(d["tower_sizes"]),
    )
