"""Minimal differentiable substrate: layers with explicit reverse-mode gradients,
a decoupled-weight-decay optimizer with cosine annealing, and gradient checking.

All training math runs at 64-bit precision.
"""

from __future__ import annotations

import math
import warnings
from typing import Callable, Sequence

import numpy as np


class Param:
    """A trainable tensor with its gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def he_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)


def glorot_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Layer:
    """Base layer: forward returns (output, cache); backward consumes the cache."""

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, train: bool, rng: np.random.Generator | None = None):
        raise NotImplementedError

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator | None = None,
                 init: str = "he", name: str = "dense"):
        if init == "zeros" or rng is None:
            w = np.zeros((fan_in, fan_out))
        elif init == "glorot":
            w = glorot_init(rng, fan_in, fan_out)
        elif init == "he":
            w = he_init(rng, fan_in, fan_out)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.w = Param(f"{name}.w", w)
        self.b = Param(f"{name}.b", np.zeros(fan_out))

    def params(self) -> list[Param]:
        return [self.w, self.b]

    def forward(self, x, train, rng=None):
        if x.shape[1] != self.w.value.shape[0]:
            raise ValueError(
                f"{self.w.name}: input width {x.shape[1]} does not match "
                f"expected {self.w.value.shape[0]}"
            )
        return x @ self.w.value + self.b.value, x

    def backward(self, cache, dy):
        x = cache
        self.w.grad += x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value.T


class ReLU(Layer):
    def forward(self, x, train, rng=None):
        return np.maximum(x, 0.0), x

    def backward(self, cache, dy):
        return dy * (cache > 0.0)


class Sigmoid(Layer):
    def forward(self, x, train, rng=None):
        y = sigmoid(x)
        return y, y

    def backward(self, cache, dy):
        y = cache
        return dy * y * (1.0 - y)


class Dropout(Layer):
    """Inverted dropout; identity in eval mode."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout p must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x, train, rng=None):
        if not train or self.p == 0.0:
            return x, None
        if rng is None:
            raise ValueError("train-mode dropout requires the run's rng stream")
        mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * mask, mask

    def backward(self, cache, dy):
        if cache is None:
            return dy
        return dy * cache


class BatchNorm(Layer):
    """Per-feature normalization with running statistics.

    mode "batch": train uses batch statistics (and updates the running
    estimates), eval uses running statistics.  mode "plain": both phases
    normalize with the running estimates, which keeps single-row forward
    passes well-defined everywhere; the estimates still track batch
    statistics during training but are treated as constants by backward.
    """

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5,
                 mode: str = "batch", name: str = "norm"):
        if mode not in ("batch", "plain"):
            raise ValueError(f"unknown norm mode {mode!r}")
        self.gamma = Param(f"{name}.gamma", np.ones(dim))
        self.beta = Param(f"{name}.beta", np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps
        self.mode = mode

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]

    def forward(self, x, train, rng=None):
        if train and self.mode == "batch":
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self._update_running(mean, var)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv
            y = self.gamma.value * xhat + self.beta.value
            return y, ("batch", xhat, inv)
        # plain-mode training and all eval passes normalize with the running
        # estimates as of step entry; the update only affects future steps
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        xhat = (x - self.running_mean) * inv
        y = self.gamma.value * xhat + self.beta.value
        if train:
            self._update_running(x.mean(axis=0), x.var(axis=0))
        return y, ("plain", xhat, inv)

    def _update_running(self, mean: np.ndarray, var: np.ndarray) -> None:
        # in place, so externally held references (checkpoint state) stay valid
        self.running_mean *= self.momentum
        self.running_mean += (1 - self.momentum) * mean
        self.running_var *= self.momentum
        self.running_var += (1 - self.momentum) * var

    def backward(self, cache, dy):
        kind, xhat, inv = cache
        self.gamma.grad += (dy * xhat).sum(axis=0)
        self.beta.grad += dy.sum(axis=0)
        dxhat = dy * self.gamma.value
        if kind == "plain":
            return dxhat * inv
        n = dy.shape[0]
        return (inv / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )


class Residual(Layer):
    """y = x + inner(x); the inner path is a layer stack."""

    def __init__(self, inner: Sequence[Layer]):
        self.inner = LayerStack(list(inner))

    def params(self) -> list[Param]:
        return self.inner.params()

    def forward(self, x, train, rng=None):
        y, caches = self.inner.forward(x, train, rng)
        return x + y, caches

    def backward(self, cache, dy):
        return dy + self.inner.backward(cache, dy)


class LayerStack:
    """Ordered composition of layers with cached activations for backward."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def params(self) -> list[Param]:
        out: list[Param] = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x: np.ndarray, train: bool, rng: np.random.Generator | None = None):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train, rng)
            caches.append(cache)
        return x, caches

    def backward(self, caches, dy: np.ndarray) -> np.ndarray:
        if caches is None:
            raise RuntimeError("backward called without a cached forward pass")
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(cache, dy)
        return dy


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy; returns (loss, dlogits, probabilities)."""
    n = logits.shape[0]
    probs = softmax(logits)
    nll = -np.log(np.maximum(probs[np.arange(n), labels], 1e-300))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return float(nll.mean()), dlogits / n, probs


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error; returns (loss, dpred)."""
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class ParamGroup:
    def __init__(self, name: str, params: Sequence[Param], learning_rate: float):
        if learning_rate <= 0:
            raise ValueError(f"learning rate for group {name!r} must be > 0")
        self.name = name
        self.params = list(params)
        self.learning_rate = learning_rate


def cosine_factor(step: int, total_steps: int) -> float:
    """Annealing factor 0.5 * (1 + cos(pi * step / total_steps)), in [0, 1]."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step > total_steps:
        warnings.warn(
            f"schedule step {step} exceeds total_steps {total_steps}; factor clamped to 0",
            RuntimeWarning,
            stacklevel=2,
        )
        return 0.0
    return 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Adam with decoupled weight decay and per-group cosine-annealed rates."""

    def __init__(self, groups: Sequence[ParamGroup], total_steps: int,
                 weight_decay: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.groups = list(groups)
        self.total_steps = total_steps
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}
        for group in self.groups:
            for p in group.params:
                key = id(p)
                self._m[key] = np.zeros_like(p.value)
                self._v[key] = np.zeros_like(p.value)

    def zero_grads(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.zero_grad()

    def step(self, schedule_step: int | None = None) -> float:
        """Apply one update; returns the cosine factor used."""
        self.t += 1
        factor = cosine_factor(self.t - 1 if schedule_step is None else schedule_step,
                               self.total_steps)
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for group in self.groups:
            lr = group.learning_rate * factor
            for p in group.params:
                key = id(p)
                m = self._m[key]
                v = self._v[key]
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * p.grad**2
                if self.weight_decay != 0.0:
                    p.value *= 1.0 - lr * self.weight_decay
                p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return factor


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def pack_values(params: Sequence[Param]) -> np.ndarray:
    return np.concatenate([p.value.ravel() for p in params]) if params else np.empty(0)

def pack_grads(params: Sequence[Param]) -> np.ndarray:
    return np.concatenate([p.grad.ravel() for p in params]) if params else np.empty(0)

def unpack_values(params: Sequence[Param], theta: np.ndarray) -> None:
    offset = 0
    for p in params:
        size = p.value.size
        p.value[...] = theta[offset : offset + size].reshape(p.value.shape)
        offset += size
    if offset != theta.size:
        raise ValueError(f"theta size {theta.size} does not match parameters ({offset})")


def gradient_check(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
                   theta0: np.ndarray, h: float = 1e-4) -> float:
    """Max relative error between analytic and central finite-difference gradients.

    loss_fn(theta) must return (loss, gradient) and be a deterministic
    function of theta alone.  Relative error uses an absolute floor of 1 so
    near-zero coordinates are compared absolutely.
    """
    _, grad = loss_fn(theta0)
    numeric = np.empty_like(theta0)
    for i in range(theta0.size):
        tp = theta0.copy()
        tp[i] += h
        tm = theta0.copy()
        tm[i] -= h
        numeric[i] = (loss_fn(tp)[0] - loss_fn(tm)[0]) / (2.0 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(grad), np.abs(numeric)))
    return float(np.max(np.abs(grad - numeric) / denom)) if theta0.size else 0.0
