"""Dense numerics shared by every model in the package.

Layer forward/backward rules, softmax cross-entropy, a step-decay SGD
optimizer, purpose-labelled random streams and a central-difference
gradient checker. Everything runs in float64.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand dimensions do not line up."""


class NumericError(ArithmeticError):
    """Raised when a computation produces a non-finite value."""


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


@dataclass(frozen=True)
class Rng:
    """Seed holder that hands out independent, purpose-labelled generators.

    ``Rng(7).stream("world")`` always yields the same draws, and no other
    stream's consumption can shift them.
    """

    seed: int
    path: tuple[str, ...] = ()

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self.path + (label,))

    def stream(self, label: str) -> np.random.Generator:
        words = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF]
        for part in self.path + (label,):
            words.extend(_label_words(part))
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def affine_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    """``x @ weights.T + bias`` with weights stored as (out, in)."""
    if weights.shape[1] != x.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} columns, weights expect {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias length {bias.shape} does not match {weights.shape[0]} outputs")
    return x @ weights.T + bias, (x, weights)


def affine_backward(d_out: np.ndarray, cache):
    x, weights = cache
    return d_out @ weights, d_out.T @ x, d_out.sum(axis=0)


def affine_relu_forward(x, weights, bias):
    """Affine map followed by ReLU.

    Returns the activations and a cache holding what ``affine_relu_backward``
    needs. Weights are (out, in), so ``out[i, j] = max(0, x[i] . w[j] + b[j])``.
    """
    x = as_matrix(x, "input")
    weights = as_matrix(weights, "weights")
    bias = np.asarray(bias, dtype=np.float64)
    pre, cache = affine_forward(x, weights, bias)
    return np.maximum(pre, 0.0), (cache, pre)


def affine_relu_backward(d_out: np.ndarray, cache):
    """Returns (d_input, d_weights, d_bias). Subgradient at 0 is 0."""
    affine_cache, pre = cache
    d_pre = d_out * (pre > 0.0)
    return affine_backward(d_pre, affine_cache)


def logsumexp(logits: np.ndarray) -> np.ndarray:
    top = logits.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(logits - top).sum(axis=1, keepdims=True)))[:, 0]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels, reduction: str = "mean"):
    """Multiclass cross-entropy and its gradient with respect to the logits.

    ``reduction`` is ``"mean"`` (divide by the row count) or ``"sum"``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("softmax_cross_entropy needs a non-empty 2-D batch")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {logits.shape[0]} rows")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    rows = np.arange(logits.shape[0])
    per_row = logsumexp(logits) - logits[rows, labels]
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    if reduction == "mean":
        return float(per_row.mean()), grad / logits.shape[0]
    if reduction == "sum":
        return float(per_row.sum()), grad
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.02
    total_iterations: int = 8000
    decay_milestones: tuple[int, ...] = (2000, 6000)
    decay_ratio: float = 0.1

    def __post_init__(self):
        ms = tuple(int(m) for m in self.decay_milestones)
        object.__setattr__(self, "decay_milestones", ms)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("decay milestones must be strictly increasing")
        if ms and ms[-1] >= self.total_iterations:
            raise ValueError("decay milestones must lie below total_iterations")
        if not 0.0 < self.decay_ratio < 1.0:
            raise ValueError("decay_ratio must be in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def lr_at(self, iteration: int) -> float:
        passed = sum(1 for m in self.decay_milestones if m <= iteration)
        return self.learning_rate * self.decay_ratio ** passed


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             iteration: int, config: SgdConfig) -> dict[str, np.ndarray]:
    """Plain SGD: returns new arrays, leaves the inputs untouched."""
    if iteration >= config.total_iterations:
        raise ValueError(f"iteration {iteration} beyond schedule of {config.total_iterations}")
    lr = config.lr_at(iteration)
    out = {}
    for name, value in params.items():
        g = grads.get(name)
        out[name] = value.copy() if g is None else value - lr * g
    return out


def grad_check(loss_fn: Callable[[dict], tuple[float, dict]], params: Mapping[str, np.ndarray],
               epsilon: float = 1e-5, names: Sequence[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` keyed like
    ``params``; missing keys count as zero gradient.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss, analytic = loss_fn(base)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite at the check point")
    worst = 0.0
    for name in names or list(base):
        value = base[name]
        g = np.asarray(analytic.get(name, np.zeros_like(value)), dtype=np.float64)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + epsilon
            up = loss_fn(base)[0]
            value[idx] = orig - epsilon
            down = loss_fn(base)[0]
            value[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}{idx}")
            numeric = (up - down) / (2 * epsilon)
            a = g[idx]
            err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst

