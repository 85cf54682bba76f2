"""Cooperating objectness scorers (CoRPNs).

``N`` logistic scorers look at every proposal. Per box, only the most
certain scorer (score furthest from 0.5) receives the binary cross-entropy
gradient; a log-determinant term keeps the scorers' outputs decorrelated and
a hinge term keeps every scorer above a floor on foreground boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kvformat
from .numerics import NumericError, SgdConfig, ShapeError


def _sigmoid(s):
    return np.where(s >= 0, 1.0 / (1.0 + np.exp(-np.abs(s))), np.exp(-np.abs(s)) / (1.0 + np.exp(-np.abs(s))))


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    div: float = 1.0
    coop: float = 1.0


@dataclass
class RpnEnsemble:
    weights: np.ndarray                  # (N, d)
    bias: np.ndarray                     # (N,)
    coop_threshold: float = 0.3
    div_epsilon: float = 1e-6
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        n = self.weights.shape[0]
        if n < 2 and self.loss_weights.div != 0:
            raise ValueError("the divergence term needs at least two scorers")
        if not 0.0 < self.coop_threshold < 1.0:
            raise ValueError("coop_threshold must be in (0, 1)")

    @property
    def num_heads(self) -> int:
        return self.weights.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}

    def with_params(self, params: dict) -> "RpnEnsemble":
        return RpnEnsemble(params["weights"], params["bias"], self.coop_threshold,
                           self.div_epsilon, self.loss_weights)

    def copy(self) -> "RpnEnsemble":
        return self.with_params({"weights": self.weights.copy(), "bias": self.bias.copy()})

    def to_fields(self) -> dict:
        return {"coop_threshold": self.coop_threshold, "div_epsilon": self.div_epsilon,
                "w_ce": self.loss_weights.ce, "w_div": self.loss_weights.div,
                "w_coop": self.loss_weights.coop, "weights": self.weights, "bias": self.bias}

    @classmethod
    def from_fields(cls, data: dict) -> "RpnEnsemble":
        lw = LossWeights(float(data["w_ce"]), float(data["w_div"]), float(data["w_coop"]))
        return cls(data["weights"], data["bias"], float(data["coop_threshold"]),
                   float(data["div_epsilon"]), lw)


def init_ensemble(d: int, n_heads: int = 3, gen: np.random.Generator | None = None,
                  std: float = 0.01, **kwargs) -> RpnEnsemble:
    if gen is None:
        weights = np.zeros((n_heads, d))
    else:
        weights = gen.standard_normal((n_heads, d)) * std
    return RpnEnsemble(weights, np.zeros(n_heads), **kwargs)


def head_logits(ensemble: RpnEnsemble, proposals) -> np.ndarray:
    x = np.asarray(proposals, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] == 0:
        raise ValueError("no proposals")
    if x.shape[1] != ensemble.weights.shape[1]:
        raise ShapeError(f"proposal dimension {x.shape[1]} vs scorer dimension {ensemble.weights.shape[1]}")
    return ensemble.weights @ x.T + ensemble.bias[:, None]


def head_scores(ensemble: RpnEnsemble, proposals) -> np.ndarray:
    """(N, B) matrix of sigmoid objectness scores."""
    return _sigmoid(head_logits(ensemble, proposals))


def select_head(scores) -> int:
    """Index of the most certain score; the lowest index wins ties."""
    scores = np.asarray(scores, dtype=np.float64)
    return int(np.argmax(np.abs(scores - 0.5)))


def select_heads(F: np.ndarray) -> np.ndarray:
    return np.argmax(np.abs(F - 0.5), axis=0)


def selected_scores(ensemble: RpnEnsemble, proposals) -> np.ndarray:
    F = head_scores(ensemble, proposals)
    return F[select_heads(F), np.arange(F.shape[1])]


def divergence_loss(F, div_epsilon: float = 1e-6):
    """``-log det`` of the (N, N) covariance of scorer outputs over boxes.

    Covariance uses the population (1/B) normalization plus ``div_epsilon * I``.
    Returns ``(loss, d_F)``.
    """
    F = np.asarray(F, dtype=np.float64)
    n, b = F.shape
    if b < 2:
        raise ValueError("need at least two boxes for a covariance")
    centered = F - F.mean(axis=1, keepdims=True)
    sigma = centered @ centered.T / b + div_epsilon * np.eye(n)
    try:
        chol = scipy.linalg.cho_factor(sigma, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericError("score covariance is not positive definite") from exc
    logdet = 2.0 * np.log(np.diag(chol[0])).sum()
    if not np.isfinite(logdet):
        raise NumericError("non-finite log-determinant")
    inv = scipy.linalg.cho_solve(chol, np.eye(n))
    d_centered = -(2.0 / b) * inv @ centered
    d_F = d_centered - d_centered.mean(axis=1, keepdims=True)
    return float(-logdet), d_F


def cooperation_loss(F_fg, threshold: float):
    """Mean hinge ``max(0, threshold - f)`` over scorers and foreground boxes."""
    F_fg = np.asarray(F_fg, dtype=np.float64)
    if F_fg.size == 0:
        return 0.0, np.zeros_like(F_fg)
    gap = threshold - F_fg
    active = gap > 0
    return float(np.where(active, gap, 0.0).mean()), -active.astype(np.float64) / F_fg.size


def corpns_total_loss(ensemble: RpnEnsemble, proposals, labels, params: dict | None = None):
    """Selected-scorer BCE + divergence + cooperation; returns ``(loss, grads, parts)``.

    ``labels`` are 1 for foreground and 0 for background.
    """
    ens = ensemble if params is None else ensemble.with_params(params)
    x = np.asarray(proposals, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    s = head_logits(ens, x)
    F = _sigmoid(s)
    n, b = F.shape
    cols = np.arange(b)
    chosen = select_heads(F)
    s_sel = s[chosen, cols]
    # softplus(s) - y s, evaluated stably
    bce = np.maximum(s_sel, 0) + np.log1p(np.exp(-np.abs(s_sel))) - y * s_sel
    ce = float(bce.mean())
    d_s = np.zeros_like(s)
    d_s[chosen, cols] = ens.loss_weights.ce * (F[chosen, cols] - y) / b

    lw = ens.loss_weights
    d_F = np.zeros_like(F)
    div = 0.0
    if lw.div:
        div, g = divergence_loss(F, ens.div_epsilon)
        d_F += lw.div * g
    coop = 0.0
    fg = y > 0.5
    if lw.coop and fg.any():
        coop, g = cooperation_loss(F[:, fg], ens.coop_threshold)
        d_F[:, fg] += lw.coop * g
    d_s += d_F * F * (1.0 - F)
    grads = {"weights": d_s @ x, "bias": d_s.sum(axis=1)}
    total = lw.ce * ce + lw.div * div + lw.coop * coop
    return total, grads, {"ce": ce, "div": div, "coop": coop}


def train_ensemble(ensemble: RpnEnsemble, proposals, labels, sgd: SgdConfig,
                   gen: np.random.Generator, batch_size: int = 256) -> RpnEnsemble:
    """Minibatch SGD on the composite loss; returns a new ensemble."""
    x = np.asarray(proposals, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    params = {k: v.copy() for k, v in ensemble.params().items()}
    for it in range(sgd.total_iterations):
        idx = gen.choice(len(y), size=min(batch_size, len(y)), replace=False)
        loss, grads, _ = corpns_total_loss(ensemble, x[idx], y[idx], params)
        if not np.isfinite(loss):
            raise NumericError(f"objectness loss diverged at iteration {it}")
        lr = sgd.lr_at(it)
        for k in params:
            params[k] -= lr * grads[k]
    return ensemble.with_params(params)


def proposal_filter(ensemble: RpnEnsemble, proposals, threshold: float = 0.5) -> np.ndarray:
    """Boolean mask of proposals whose selected scorer reaches ``threshold``."""
    return selected_scores(ensemble, proposals) >= threshold


def mean_pairwise_correlation(F: np.ndarray) -> float:
    c = np.corrcoef(F)
    iu = np.triu_indices(F.shape[0], k=1)
    return float(np.nanmean(c[iu]))


def save_ensemble(path, ensemble: RpnEnsemble) -> None:
    kvformat.save(path, "corpns", ensemble.to_fields())


def load_ensemble(path) -> RpnEnsemble:
    return RpnEnsemble.from_fields(kvformat.load(path, "corpns")[1])
