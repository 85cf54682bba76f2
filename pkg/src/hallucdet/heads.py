"""Box-classifier heads and the class prototype registry.

A head has one weight row per foreground class plus a final background row.
The cosine head scores ``alpha * cos(x, w_k)``; the fully-connected head
scores ``x . w_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kvformat
from .numerics import ShapeError, softmax, softmax_cross_entropy
from .synthworld import BACKGROUND, Batch

COSINE = "cosine"
FC = "fc"
NORM_FLOOR = 1e-12


class ContractError(RuntimeError):
    """Raised when a frozen object is asked to change, or a precondition on state fails."""


@dataclass
class ClassifierHead:
    kind: str
    weights: np.ndarray              # (num_classes + 1, d); last row is background
    alpha: float = 20.0

    def __post_init__(self):
        if self.kind not in (COSINE, FC):
            raise ValueError(f"unknown head kind {self.kind!r}")

    @property
    def num_rows(self) -> int:
        return self.weights.shape[0]

    @property
    def background_row(self) -> int:
        return self.weights.shape[0] - 1

    def rows_for(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        return np.where(labels == BACKGROUND, self.background_row, labels)

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.kind, self.weights.copy(), self.alpha)

    def to_fields(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "weights": self.weights}

    @classmethod
    def from_fields(cls, data: dict) -> "ClassifierHead":
        return cls(data["kind"], data["weights"], float(data["alpha"]))


def _normalize(v: np.ndarray):
    norms = np.maximum(np.linalg.norm(v, axis=1, keepdims=True), NORM_FLOOR)
    return v / norms, norms


def _normalize_backward(d_unit, unit, norms):
    raw_norms = np.linalg.norm(unit * norms, axis=1, keepdims=True)
    floored = raw_norms < NORM_FLOOR
    radial = (unit * d_unit).sum(axis=1, keepdims=True)
    grad = (d_unit - np.where(floored, 0.0, radial) * unit) / norms
    return grad


def logits_and_cache(weights: np.ndarray, kind: str, alpha: float, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(f"features of shape {x.shape} vs head dimension {weights.shape[1]}")
    if kind == FC:
        return x @ weights.T, None
    xu, xn = _normalize(x)
    wu, wn = _normalize(weights)
    return alpha * (xu @ wu.T), (xu, xn, wu, wn)


def logits_backward(d_logits, weights, kind, alpha, x, cache):
    """Returns (d_weights, d_x) for upstream ``d_logits``."""
    if kind == FC:
        return d_logits.T @ x, d_logits @ weights
    xu, xn, wu, wn = cache
    d_xu = alpha * d_logits @ wu
    d_wu = alpha * d_logits.T @ xu
    return _normalize_backward(d_wu, wu, wn), _normalize_backward(d_xu, xu, xn)


def head_logits(head: ClassifierHead, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    return logits_and_cache(head.weights, head.kind, head.alpha, x)[0]


def predict(head: ClassifierHead, features) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Argmax row, its softmax probability, and the full probability matrix."""
    probs = softmax(head_logits(head, features))
    top = probs.argmax(axis=1)
    return top, probs[np.arange(len(top)), top], probs


def ce_loss_and_grads(head: ClassifierHead, x: np.ndarray, labels: np.ndarray,
                      reduction: str = "mean", weights: np.ndarray | None = None):
    """Cross-entropy of rows ``labels`` (BACKGROUND allowed).

    Returns ``(loss, d_weights, d_x)``; ``weights`` overrides the head's
    weights, which lets callers differentiate alternative parameter values.
    """
    w = head.weights if weights is None else weights
    logits, cache = logits_and_cache(w, head.kind, head.alpha, x)
    loss, d_logits = softmax_cross_entropy(logits, head.rows_for(labels), reduction)
    d_w, d_x = logits_backward(d_logits, w, head.kind, head.alpha, x, cache)
    return loss, d_w, d_x


def head_loss_and_grads(head: ClassifierHead, batch: Batch):
    """Mean cross-entropy over positives, hallucinated examples and negatives.

    Hallucinated examples weigh the same as real ones.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    return ce_loss_and_grads(head, batch.features(), batch.labels())


def init_head(kind: str, num_classes: int, d: int, gen: np.random.Generator,
              std: float = 0.01, alpha: float = 20.0) -> ClassifierHead:
    return ClassifierHead(kind, gen.standard_normal((num_classes + 1, d)) * std, alpha)


@dataclass
class PrototypeRegistry:
    """Running class means; base classes are frozen once computed."""

    means: np.ndarray
    counts: np.ndarray
    frozen: np.ndarray
    _base_frozen: bool = field(default=False, repr=False)

    @classmethod
    def empty(cls, num_classes: int, d: int) -> "PrototypeRegistry":
        return cls(np.zeros((num_classes, d)), np.zeros(num_classes, dtype=np.int64),
                   np.zeros(num_classes, dtype=bool))

    def copy(self) -> "PrototypeRegistry":
        return PrototypeRegistry(self.means.copy(), self.counts.copy(), self.frozen.copy(),
                                 self._base_frozen)

    def has(self, cls: int) -> bool:
        return self.counts[cls] > 0

    def update(self, cls: int, vector) -> "PrototypeRegistry":
        """Fold one vector into the running mean of ``cls`` (in place)."""
        if self.frozen[cls]:
            raise ContractError(f"prototype of class {cls} is frozen")
        n = self.counts[cls]
        self.means[cls] = (n * self.means[cls] + np.asarray(vector, dtype=np.float64)) / (n + 1)
        self.counts[cls] = n + 1
        return self

    def update_many(self, cls: int, vectors) -> "PrototypeRegistry":
        """Same result as calling ``update`` for each row, in one step."""
        vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, self.means.shape[1])
        if not len(vectors):
            return self
        if self.frozen[cls]:
            raise ContractError(f"prototype of class {cls} is frozen")
        n = self.counts[cls]
        total = n + len(vectors)
        self.means[cls] = (n * self.means[cls] + vectors.sum(axis=0)) / total
        self.counts[cls] = total
        return self

    def to_fields(self) -> dict:
        return {"means": self.means, "counts": self.counts,
                "frozen": self.frozen.astype(np.int64)}


def freeze_base_prototypes(registry: PrototypeRegistry, features, labels,
                           base_classes) -> PrototypeRegistry:
    """Set base prototypes to the mean of all base features and freeze them."""
    if registry._base_frozen:
        raise ContractError("base prototypes are already frozen")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    for c in base_classes:
        rows = features[labels == c]
        if not len(rows):
            raise ContractError(f"no base examples for class {c}")
        registry.means[c] = rows.mean(axis=0)
        registry.counts[c] = len(rows)
        registry.frozen[c] = True
    registry._base_frozen = True
    return registry


def save_head(path, head: ClassifierHead) -> None:
    kvformat.save(path, "head", head.to_fields())


def load_head(path) -> ClassifierHead:
    return ClassifierHead.from_fields(kvformat.load(path, "head")[1])
