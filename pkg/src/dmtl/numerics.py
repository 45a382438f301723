"""Dense float64 math, hand-derived layer gradients, optimizers and a
finite-difference gradient checker.

Everything works on numpy arrays. A single sample is a 1-D vector; a batch is
a 2-D array of shape (n, dim). Weight matrices follow the ``W @ x + b``
convention, i.e. shape (out_dim, in_dim).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_EPS = 1e-7

ACTIVATIONS = ("relu", "identity")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def clamp_prob(p):
    """Clamp probabilities into [PROB_EPS, 1 - PROB_EPS] before taking logs."""
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def clamp_mask(p):
    """1.0 where ``clamp_prob`` is the identity, 0.0 where it saturates."""
    p = np.asarray(p, dtype=np.float64)
    return ((p >= PROB_EPS) & (p <= 1.0 - PROB_EPS)).astype(np.float64)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softmax(x, axis: int = -1):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def softmax_backward(probs, grad_probs):
    """Gradient w.r.t. the logits given softmax outputs and dL/dprobs (row-wise)."""
    inner = np.sum(probs * grad_probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def activation_forward(x, kind: str):
    """Apply ``relu``, ``sigmoid``, ``softmax`` or ``identity``."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x)
    if kind == "identity":
        return np.asarray(x, dtype=np.float64)
    raise ValueError(f"unknown activation {kind!r}")


def affine_forward(x, W, b):
    """Return ``W x + b`` for a vector or ``x W^T + b`` for a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or b.ndim != 1 or b.shape[0] != W.shape[0]:
        raise ShapeError(f"weight {W.shape} and bias {b.shape} do not form an affine map")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} does not match weight {W.shape} (expects {W.shape[1]})")
    return x @ W.T + b


def bce(labels, probs):
    """Elementwise binary cross entropy on clamped probabilities."""
    p = clamp_prob(probs)
    y = np.asarray(labels, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def bce_grad_prob(labels, probs):
    """dBCE/dp, zero where the probability was clamped."""
    p = clamp_prob(probs)
    y = np.asarray(labels, dtype=np.float64)
    return (-y / p + (1.0 - y) / (1.0 - p)) * clamp_mask(probs)


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class Dense:
    """One affine layer followed by ``relu`` or ``identity``."""

    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"
    gW: np.ndarray = field(init=False, repr=False)
    gb: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown layer activation {self.activation!r}")
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._x = None
        self._out = None

    def forward(self, x):
        out = affine_forward(x, self.W, self.b)
        if self.activation == "relu":
            out = np.maximum(out, 0.0)
        self._x = x
        self._out = out
        return out

    def backward(self, grad):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        if self.activation == "relu":
            grad = grad * (self._out > 0.0)
        self.gW += grad.T @ self._x
        self.gb += grad.sum(axis=0)
        return grad @ self.W


class DenseNet:
    """A stack of Dense layers with cached activations for backprop.

    ``sizes`` lists every width including input and output; hidden layers use
    relu and the last layer uses ``final_activation``.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, final_activation: str = "identity"):
        if len(sizes) < 2:
            raise ValueError("a DenseNet needs at least an input and an output size")
        if any(int(s) < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {list(sizes)}")
        self.sizes = [int(s) for s in sizes]
        self.layers: list[Dense] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            act = final_activation if i == len(self.sizes) - 2 else "relu"
            self.layers.append(Dense(glorot_uniform(rng, fan_out, fan_in), np.zeros(fan_out), act))
        self._forwarded = False

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        for layer in self.layers:
            h = layer.forward(h)
        self._forwarded = True
        self._squeeze = squeeze
        return h[0] if squeeze else h

    def predict(self, x):
        """Forward pass that leaves the backprop cache untouched."""
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            h = affine_forward(h, layer.W, layer.b)
            if layer.activation == "relu":
                h = np.maximum(h, 0.0)
        return h

    def backward(self, upstream_grad):
        """Accumulate parameter gradients and return dLoss/dInput."""
        if not self._forwarded:
            raise RuntimeError("net_backward requires a recorded forward pass")
        g = np.asarray(upstream_grad, dtype=np.float64)
        if self._squeeze:
            g = g[None, :]
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g[0] if self._squeeze else g

    def zero_grad(self):
        for layer in self.layers:
            layer.gW.fill(0.0)
            layer.gb.fill(0.0)

    def named_params(self, prefix: str) -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"{prefix}.{i}.W", layer.W, layer.gW))
            out.append((f"{prefix}.{i}.b", layer.b, layer.gb))
        return out


def net_backward(net: DenseNet, upstream_grad):
    return net.backward(upstream_grad)


class Adam:
    """Bias-corrected Adam over a fixed list of parameter arrays (updated in place)."""

    def __init__(self, params: Sequence[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]):
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: Sequence[np.ndarray], lr=1e-2):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]):
        self.t += 1
        for p, g in zip(self.params, grads):
            p -= self.lr * g


def adam_step(params, grads, state: Adam):
    """Apply one Adam update in place; ``state`` owns the moment buffers."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ShapeError("Adam state was created for a different parameter list")
    state.step(grads)
    return params


def make_optimizer(name: str, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    if name == "adam":
        return Adam(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    if name == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


def relative_error(analytic, numeric, floor: float = 1e-6):
    """|a - n| / max(|n|, floor), elementwise; ``n`` is the finite-difference reference."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.abs(n), floor)


def grad_check(
    loss_fn: Callable[[], float],
    params: Sequence[np.ndarray],
    analytic_grads: Sequence[np.ndarray],
    eps: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    per_entry: bool = False,
) -> float:
    """Worst relative error between analytic gradients and central differences.

    By default each parameter array is one group and its error is
    ``||a - n|| / max(||n||, floor)`` over the checked entries; the worst group
    is returned. ``per_entry=True`` takes the worst single entry instead, which
    is stricter but becomes dominated by round-off when the loss is large and
    some entries are tiny.

    ``loss_fn`` is re-evaluated after perturbing each parameter entry in place;
    the entry is restored afterwards. ``max_entries`` caps the number of
    entries checked per parameter (sampled with ``rng``); by default every
    entry is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = loss_fn()
    if not np.isfinite(base):
        raise FloatingPointError(f"loss is not finite: {base}")
    worst = 0.0
    for p, g in zip(params, analytic_grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(idx.size)
        for pos, j in enumerate(idx):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn()
            flat[j] = orig - eps
            down = loss_fn()
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("loss became non-finite under perturbation")
            numeric[pos] = (up - down) / (2.0 * eps)
        if idx.size == 0:
            continue
        if per_entry:
            err = float(np.max(relative_error(gflat[idx], numeric, floor)))
        else:
            err = float(np.linalg.norm(gflat[idx] - numeric) / max(np.linalg.norm(numeric), floor))
        worst = max(worst, err)
    return worst
