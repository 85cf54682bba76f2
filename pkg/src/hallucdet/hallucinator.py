"""Feature hallucinator.

The generator maps ``[prototype; seed; noise]`` (3d inputs) to a d-dim
feature through an affine-ReLU stack with a linear output layer. The
conservative variant has two layers and runs on classifier-space features;
the aggressive variant has three and runs before the pre-head transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kvformat
from .heads import ClassifierHead, ContractError, PrototypeRegistry, ce_loss_and_grads, logits_and_cache, logits_backward, COSINE
from .numerics import affine_backward, affine_forward, affine_relu_backward, affine_relu_forward, softmax_cross_entropy
from .synthworld import HALLUCINATED, LabeledFeature

CONSERVATIVE = "conservative"
AGGRESSIVE = "aggressive"
_DEPTH = {CONSERVATIVE: 2, AGGRESSIVE: 3}


@dataclass
class Hallucinator:
    variant: str
    params: dict[str, np.ndarray]

    @property
    def depth(self) -> int:
        return _DEPTH[self.variant]

    @property
    def feature_dim(self) -> int:
        return self.params["W1"].shape[0]

    def copy(self) -> "Hallucinator":
        return Hallucinator(self.variant, {k: v.copy() for k, v in self.params.items()})

    def to_fields(self) -> dict:
        return {"variant": self.variant, "d": self.feature_dim, **self.params}

    @classmethod
    def from_fields(cls, data: dict) -> "Hallucinator":
        variant = data["variant"]
        params = {k: v for k, v in data.items() if k[0] in "Wb" and k[1:].isdigit()}
        h = cls(variant, params)
        if h.feature_dim != int(data["d"]):
            raise ValueError("stored feature dimension disagrees with weights")
        return h


def init_hallucinator(d: int, variant: str = CONSERVATIVE, init_noise_std: float = 0.02,
                      gen: np.random.Generator | None = None) -> Hallucinator:
    """Identity on the seed block of ``[mu; x; eps]``, identity deeper layers, plus noise."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if variant not in _DEPTH:
        raise ValueError(f"unknown variant {variant!r}")
    if init_noise_std > 0 and gen is None:
        raise ValueError("a generator is required for noisy initialization")
    params = {}
    first = np.zeros((d, 3 * d))
    first[:, d:2 * d] = np.eye(d)
    shapes = [first] + [np.eye(d) for _ in range(_DEPTH[variant] - 1)]
    for i, w in enumerate(shapes, start=1):
        if init_noise_std > 0:
            w = w + gen.standard_normal(w.shape) * init_noise_std
        params[f"W{i}"] = w
        params[f"b{i}"] = np.zeros(d)
    return Hallucinator(variant, params)


def forward(h: Hallucinator, z: np.ndarray, params: dict | None = None):
    p = h.params if params is None else params
    caches = []
    out = z
    n = h.depth
    for i in range(1, n + 1):
        if i < n:
            out, cache = affine_relu_forward(out, p[f"W{i}"], p[f"b{i}"])
        else:
            out, cache = affine_forward(out, p[f"W{i}"], p[f"b{i}"])
        caches.append(cache)
    return out, caches


def backward(h: Hallucinator, caches, d_out: np.ndarray):
    grads = {}
    n = h.depth
    d = d_out
    for i in range(n, 0, -1):
        if i == n:
            d, dw, db = affine_backward(d, caches[i - 1])
        else:
            d, dw, db = affine_relu_backward(d, caches[i - 1])
        grads[f"W{i}"] = dw
        grads[f"b{i}"] = db
    return grads, d


@dataclass(frozen=True)
class NoiseSpec:
    mean: np.ndarray
    std: np.ndarray

    def sample(self, count: int, gen: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * gen.standard_normal((count, self.mean.size))

    def zero(self) -> "NoiseSpec":
        return NoiseSpec(np.zeros_like(self.mean), np.zeros_like(self.std))


def fit_noise_spec(features) -> NoiseSpec:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two features to fit the noise distribution")
    return NoiseSpec(x.mean(axis=0), x.std(axis=0, ddof=1))


def make_inputs(prototypes: np.ndarray, seeds: np.ndarray, noise: NoiseSpec,
                gen: np.random.Generator) -> np.ndarray:
    seeds = np.atleast_2d(seeds)
    prototypes = np.broadcast_to(np.atleast_2d(prototypes), seeds.shape)
    eps = noise.sample(seeds.shape[0], gen)
    return np.concatenate([prototypes, seeds, eps], axis=1)


def hallucinate_batch(h: Hallucinator, registry: PrototypeRegistry, seeds: np.ndarray,
                      labels: np.ndarray, noise: NoiseSpec, gen: np.random.Generator):
    """Hallucinate one example per seed row; returns (features, generator inputs)."""
    labels = np.asarray(labels, dtype=np.int64)
    missing = [int(c) for c in np.unique(labels) if not registry.has(int(c))]
    if missing:
        raise ContractError(f"no prototype for classes {missing}")
    z = make_inputs(registry.means[labels], seeds, noise, gen)
    return forward(h, z)[0], z


def hallucinate(h: Hallucinator, prototype, seed, label: int, noise: NoiseSpec,
                gen: np.random.Generator) -> LabeledFeature:
    if prototype is None:
        raise ContractError(f"no prototype for class {label}")
    z = make_inputs(np.asarray(prototype, dtype=np.float64), np.asarray(seed, dtype=np.float64), noise, gen)
    return LabeledFeature(forward(h, z)[0][0], int(label), HALLUCINATED)


def hallucination_loss(h: Hallucinator, head: ClassifierHead, z: np.ndarray, labels,
                       params: dict | None = None):
    """Summed cross-entropy of hallucinated examples under a frozen head.

    Returns ``(loss, grads)`` where ``grads`` covers hallucinator parameters
    only; the head is read, never written.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("no hallucinated examples")
    out, caches = forward(h, z, params)
    loss, _, d_out = ce_loss_and_grads(head, out, labels, reduction="sum")
    grads, _ = backward(h, caches, d_out)
    return loss, grads


@dataclass
class PreHead:
    """Single affine-ReLU box-head stand-in between proposals and classifier."""

    weights: np.ndarray
    bias: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return affine_relu_forward(x, self.weights, self.bias)[0]

    def copy(self) -> "PreHead":
        return PreHead(self.weights.copy(), self.bias.copy())

    def to_fields(self) -> dict:
        return {"weights": self.weights, "bias": self.bias}


def aggressive_prototypical_loss(h: Hallucinator, pre: PreHead, z: np.ndarray, gen_labels,
                                 val_x: np.ndarray, val_y, alpha: float = 20.0,
                                 params: dict | None = None, pre_params: dict | None = None):
    """Cosine prototypical loss of held-out features against hallucinated prototypes.

    Hallucinations ``H(z)`` and validation features both pass through ``pre``;
    each class prototype is the mean of its transformed hallucinations.
    Returns ``(loss, grads)`` with hallucinator keys plus ``pre.weights`` and
    ``pre.bias``.
    """
    gen_labels = np.asarray(gen_labels, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    classes = np.unique(gen_labels)
    absent = sorted(set(np.unique(val_y).tolist()) - set(classes.tolist()))
    if absent:
        raise ContractError(f"classes {absent} have no hallucinated examples")
    pw = pre.weights if pre_params is None else pre_params["pre.weights"]
    pb = pre.bias if pre_params is None else pre_params["pre.bias"]

    raw, h_caches = forward(h, z, params)
    gen_t, gen_cache = affine_relu_forward(raw, pw, pb)
    val_t, val_cache = affine_relu_forward(val_x, pw, pb)

    index = np.searchsorted(classes, gen_labels)
    assign = np.zeros((len(classes), len(gen_labels)))
    assign[index, np.arange(len(gen_labels))] = 1.0
    assign /= assign.sum(axis=1, keepdims=True)
    protos = assign @ gen_t

    logits, cache = logits_and_cache(protos, COSINE, alpha, val_t)
    loss, d_logits = softmax_cross_entropy(logits, np.searchsorted(classes, val_y))
    d_protos, d_val_t = logits_backward(d_logits, protos, COSINE, alpha, val_t, cache)
    d_gen_t = assign.T @ d_protos

    d_raw, dw_g, db_g = affine_relu_backward(d_gen_t, gen_cache)
    _, dw_v, db_v = affine_relu_backward(d_val_t, val_cache)
    grads, _ = backward(h, h_caches, d_raw)
    grads["pre.weights"] = dw_g + dw_v
    grads["pre.bias"] = db_g + db_v
    return loss, grads


def save_hallucinator(path, h: Hallucinator) -> None:
    kvformat.save(path, "hallucinator", h.to_fields())


def load_hallucinator(path) -> Hallucinator:
    return Hallucinator.from_fields(kvformat.load(path, "hallucinator")[1])
