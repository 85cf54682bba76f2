"""Two-stage training protocol with hallucination.

Stage 1 trains the pre-head transform, the base classifier and (optionally)
the CoRPNs ensemble on abundant base data, then trains the hallucinator
against the frozen base classifier. Stage 2 fine-tunes the classifier on a
balanced K-shot set, alternating with hallucinator updates (EM-style) or
updating both at once (joint).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import corpns, hallucinator as hal
from .heads import (ClassifierHead, PrototypeRegistry, ce_loss_and_grads, freeze_base_prototypes,
                    init_head, predict)
from .hallucinator import AGGRESSIVE, CONSERVATIVE, Hallucinator, NoiseSpec, PreHead
from .metrics import average_precision, mean_and_half_width
from .numerics import Rng, SgdConfig, affine_relu_backward, affine_relu_forward
from .synthworld import (BACKGROUND, Episode, PoolSizes, SyntheticWorld, WorldConfig, build_episode,
                         compose_batch, generate_world, sample_background, sample_instances,
                         sample_proposals)

log = logging.getLogger(__name__)

NONE = "none"
SINGLE = "single"
CORPNS = "corpns"
VOC_RANDOM = "voc_random"
COCO_PRETRAIN = "coco_novel_pretrain"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # fine-tuning protocol
    shot: int = 1
    m: int = 20
    em_iterations: int = 2
    procedure: str = "em"                 # "em" or "joint"
    proposal_mode: str = CORPNS
    head_kind: str = "cosine"
    variant: str = CONSERVATIVE
    init_mode: str = VOC_RANDOM
    alpha: float = 20.0
    proposals_per_instance: int = 20
    examples_per_class: int = 20
    background_ratio: int = 3
    base_classes_per_batch: int = 5
    novel_init_std: float = 0.01
    finetune: SgdConfig = SgdConfig(0.1, 1500, (400, 1100), 0.1)
    # hallucinator
    halluc_sgd: SgdConfig = SgdConfig(0.002, 200, (), 0.1)
    halluc_ft_sgd: SgdConfig = SgdConfig(0.0005, 1500, (400, 1100), 0.1)
    halluc_classes_per_batch: int = 8
    init_noise_std: float = 0.02
    # base stage
    base_instances_per_class: int = 40
    base_proposals_per_instance: int = 5
    base_sgd: SgdConfig = SgdConfig(0.5, 3000, (2000,), 0.1)
    base_batch_size: int = 256
    pre_lr_scale: float = 0.1
    rpn_sgd: SgdConfig = SgdConfig(0.5, 1500, (1000,), 0.1)
    rpn_heads: int = 3
    coop_threshold: float = 0.1
    div_epsilon: float = 1e-6
    rpn_weights: corpns.LossWeights = corpns.LossWeights(1.0, 0.03, 1.0)
    coco_sgd: SgdConfig = SgdConfig(0.1, 300, (200,), 0.1)
    # evaluation
    tau: float = 0.5
    pools: PoolSizes = PoolSizes()

    def validate(self) -> None:
        if self.m < 0:
            raise ValueError("m must be >= 0")
        if self.em_iterations not in (1, 2):
            raise ValueError("em_iterations must be 1 or 2")
        if self.procedure not in ("em", "joint"):
            raise ValueError(f"unknown procedure {self.procedure!r}")
        if self.proposal_mode not in (SINGLE, CORPNS):
            raise ValueError(f"unknown proposal mode {self.proposal_mode!r}")
        if self.variant not in (CONSERVATIVE, AGGRESSIVE, NONE):
            raise ValueError(f"unknown hallucinator variant {self.variant!r}")
        if self.init_mode not in (VOC_RANDOM, COCO_PRETRAIN):
            raise ValueError(f"unknown init mode {self.init_mode!r}")
        if self.shot < 1:
            raise ValueError("shot must be >= 1")

    @property
    def hallucinating(self) -> bool:
        return self.variant != NONE and self.m > 0


_FINETUNE_ONLY = ("shot", "procedure", "em_iterations", "halluc_ft_sgd", "finetune",
                  "examples_per_class", "background_ratio", "base_classes_per_batch", "novel_init_std", "init_mode", "coco_sgd", "tau",
                  "pools", "proposals_per_instance")


def base_stage_key(config: TrainConfig) -> TrainConfig:
    """``config`` with every fine-tuning-only field reset to its default.

    Two configs with equal keys produce identical stage-1 results for a seed.
    """
    default = TrainConfig()
    return replace(config, **{name: getattr(default, name) for name in _FINETUNE_ONLY})


@dataclass
class BaseState:
    """Everything stage 1 produces; frozen for the rest of the run."""

    pre: PreHead
    head: ClassifierHead                 # base rows + background row
    registry: PrototypeRegistry          # base prototypes frozen (post-transform space)
    noise: NoiseSpec                     # fitted on post-transform base features
    raw_noise: NoiseSpec                 # fitted on raw base features (aggressive variant)
    ensemble: corpns.RpnEnsemble | None
    hallucinator: Hallucinator | None
    base_x: np.ndarray                   # raw base training features
    base_y: np.ndarray
    halluc_losses: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    mean_novel_ap: float
    tp_count: int
    fp_count: int
    base_accuracy: float = float("nan")

    def row(self) -> dict:
        return {"mean_novel_ap": self.mean_novel_ap, "tp_count": self.tp_count,
                "fp_count": self.fp_count,
                **{f"ap_{c}": v for c, v in sorted(self.per_class_ap.items())}}


@dataclass
class AggregateReport:
    per_seed: dict[int, EvalReport]
    mean_novel_ap: float
    ap_half_width: float
    mean_tp: float
    mean_fp: float
    per_class_ap: dict[int, float]


# ---------------------------------------------------------------- stage 1

def _sample_base_data(world: SyntheticWorld, config: TrainConfig, rng: Rng):
    gen = rng.stream("base/data")
    xs, ys = [], []
    for c in world.base_ids:
        inst = sample_instances(world, int(c), config.base_instances_per_class, gen)
        for x in inst:
            xs.append(sample_proposals(world, x, config.base_proposals_per_instance, gen))
            ys.append(np.full(config.base_proposals_per_instance, c, dtype=np.int64))
    fg_x = np.concatenate(xs)
    fg_y = np.concatenate(ys)
    bg_x = sample_background(world, config.background_ratio * len(fg_y), rng.stream("base/background"))
    return fg_x, fg_y, bg_x


def _train_base_classifier(world, fg_x, fg_y, bg_x, config: TrainConfig, rng: Rng):
    d = world.feature_dim
    gen = rng.stream("base/init")
    pre = PreHead(gen.standard_normal((d, d)) * np.sqrt(2.0 / d), np.zeros(d))
    head = init_head(config.head_kind, world.base_classes, d, gen, std=0.01, alpha=config.alpha)
    x = np.concatenate([fg_x, bg_x])
    y = np.concatenate([fg_y, np.full(len(bg_x), BACKGROUND, dtype=np.int64)])
    order = rng.stream("base/batches")
    sgd = config.base_sgd
    for it in range(sgd.total_iterations):
        idx = order.choice(len(y), size=min(config.base_batch_size, len(y)), replace=False)
        feats, cache = affine_relu_forward(x[idx], pre.weights, pre.bias)
        loss, d_w, d_feats = ce_loss_and_grads(head, feats, y[idx])
        if not np.isfinite(loss):
            raise TrainingError(f"base classifier loss diverged at iteration {it}")
        _, d_pw, d_pb = affine_relu_backward(d_feats, cache)
        lr = sgd.lr_at(it)
        head.weights = head.weights - lr * d_w
        plr = lr * config.pre_lr_scale
        pre = PreHead(pre.weights - plr * d_pw, pre.bias - plr * d_pb)
    return pre, head


def _train_rpn(world, fg_x, bg_x, config: TrainConfig, rng: Rng) -> corpns.RpnEnsemble:
    x = np.concatenate([fg_x, bg_x])
    y = np.concatenate([np.ones(len(fg_x)), np.zeros(len(bg_x))])
    if config.proposal_mode == SINGLE:
        ens = corpns.init_ensemble(world.feature_dim, 1, rng.stream("rpn/init"),
                                   coop_threshold=config.coop_threshold,
                                   loss_weights=corpns.LossWeights(1.0, 0.0, 0.0))
    else:
        ens = corpns.init_ensemble(world.feature_dim, config.rpn_heads, rng.stream("rpn/init"),
                                   coop_threshold=config.coop_threshold,
                                   div_epsilon=config.div_epsilon,
                                   loss_weights=config.rpn_weights)
    return corpns.train_ensemble(ens, x, y, config.rpn_sgd, rng.stream("rpn/batches"))


def train_base_stage(world: SyntheticWorld, config: TrainConfig, rng: Rng,
                     with_hallucinator: bool = True) -> BaseState:
    """Stage 1: plain detector on base classes, then the hallucinator on top."""
    config.validate()
    fg_x, fg_y, bg_x = _sample_base_data(world, config, rng)
    pre, head = _train_base_classifier(world, fg_x, fg_y, bg_x, config, rng)
    ensemble = _train_rpn(world, fg_x, bg_x, config, rng)

    feats = pre(fg_x)
    registry = PrototypeRegistry.empty(world.num_classes, world.feature_dim)
    freeze_base_prototypes(registry, feats, fg_y, world.base_ids)
    state = BaseState(pre=pre, head=head, registry=registry, noise=hal.fit_noise_spec(feats),
                      raw_noise=hal.fit_noise_spec(fg_x), ensemble=ensemble, hallucinator=None,
                      base_x=fg_x, base_y=fg_y)
    if with_hallucinator and config.variant != NONE:
        h = hal.init_hallucinator(world.feature_dim, config.variant, config.init_noise_std,
                                  rng.stream("halluc/init"))
        state.hallucinator, state.halluc_losses = train_hallucinator_base(h, state, config, rng)
    return state


def _halluc_space(state: BaseState, variant: str, x_raw: np.ndarray) -> np.ndarray:
    return x_raw if variant == AGGRESSIVE else state.pre(x_raw)


def _to_classifier_space(state: BaseState, variant: str, x: np.ndarray, pre: PreHead | None = None):
    if variant == AGGRESSIVE:
        return (pre or state.pre)(x)
    return x


def train_hallucinator_base(h: Hallucinator, state: BaseState, config: TrainConfig, rng: Rng):
    """Fit the hallucinator with the frozen base classifier guiding it.

    Each batch picks ``halluc_classes_per_batch`` base classes and hallucinates
    ``m`` (at least one) examples per class from randomly sampled seed
    proposals. Returns the trained copy and its per-iteration loss trace.
    """
    h = h.copy()
    gen = rng.stream("halluc/base")
    variant = h.variant
    space = _halluc_space(state, variant, state.base_x)
    protos = state.registry if variant == CONSERVATIVE else _raw_registry(state)
    noise = state.noise if variant == CONSERVATIVE else state.raw_noise
    by_class = {int(c): np.flatnonzero(state.base_y == c) for c in np.unique(state.base_y)}
    classes = np.array(sorted(by_class))
    per_class = max(config.m, 1)
    sgd = config.halluc_sgd
    losses = []
    for it in range(sgd.total_iterations):
        chosen = gen.choice(classes, size=min(config.halluc_classes_per_batch, len(classes)), replace=False)
        idx = np.concatenate([gen.choice(by_class[int(c)], size=per_class) for c in chosen])
        labels = state.base_y[idx]
        z = hal.make_inputs(protos.means[labels], space[idx], noise, gen)
        loss, grads = _halluc_objective(h, state, z, labels, variant)
        if not np.isfinite(loss):
            raise TrainingError(f"hallucinator loss diverged at iteration {it}")
        losses.append(loss / len(labels))
        lr = sgd.lr_at(it) / len(labels)
        for k in h.params:
            h.params[k] = h.params[k] - lr * grads[k]
    return h, losses


def _raw_registry(state: BaseState) -> PrototypeRegistry:
    reg = PrototypeRegistry.empty(*state.registry.means.shape)
    freeze_base_prototypes(reg, state.base_x, state.base_y, np.unique(state.base_y))
    return reg


def _halluc_objective(h: Hallucinator, state: BaseState, z, labels, variant, head=None, pre=None):
    head = head or state.head
    if variant == CONSERVATIVE:
        return hal.hallucination_loss(h, head, z, labels)
    pre = pre or state.pre
    out, caches = hal.forward(h, z)
    feats, pcache = affine_relu_forward(out, pre.weights, pre.bias)
    loss, _, d_feats = ce_loss_and_grads(head, feats, labels, reduction="sum")
    d_out, _, _ = affine_relu_backward(d_feats, pcache)
    grads, _ = hal.backward(h, caches, d_out)
    return loss, grads


# ---------------------------------------------------------------- stage 2

def expand_head(base_head: ClassifierHead, novel_rows: np.ndarray) -> ClassifierHead:
    w = base_head.weights
    return ClassifierHead(base_head.kind, np.concatenate([w[:-1], novel_rows, w[-1:]]), base_head.alpha)


def coco_style_novel_init(state: BaseState, world: SyntheticWorld, train_feats: np.ndarray,
                          train_y: np.ndarray, config: TrainConfig, rng: Rng) -> np.ndarray:
    """Train a |C_n|-way head on novel features and return its rows."""
    if config.init_mode != COCO_PRETRAIN:
        raise ValueError("coco-style init requested under a different init mode")
    novel = world.novel_ids
    mask = np.isin(train_y, novel)
    x, y = train_feats[mask], train_y[mask] - world.base_classes
    gen = rng.stream("ft/coco")
    w = gen.standard_normal((len(novel), x.shape[1])) * config.novel_init_std
    head = ClassifierHead(config.head_kind, w, config.alpha)
    sgd = config.coco_sgd
    for it in range(sgd.total_iterations):
        # a |C_n|-way head has no background row; reuse the row-mapping by labels < rows
        loss, d_w, _ = ce_loss_and_grads(head, x, y)
        head.weights = head.weights - sgd.lr_at(it) * d_w
    return head.weights


def novel_pretrain_accuracy(rows: np.ndarray, kind: str, alpha: float, x, y) -> float:
    head = ClassifierHead(kind, rows, alpha)
    return float((predict(head, x)[0] == y).mean())


@dataclass
class FinetuneResult:
    head: ClassifierHead
    hallucinator: Hallucinator | None
    report: EvalReport
    pre: PreHead
    registry: PrototypeRegistry
    batch_sizes: list[int] = field(default_factory=list)


class _Finetuner:
    """Shared machinery of the EM and joint fine-tuning procedures."""

    def __init__(self, state: BaseState, world: SyntheticWorld, episode: Episode,
                 config: TrainConfig, rng: Rng):
        self.state, self.world, self.episode, self.config = state, world, episode, config
        self.variant = config.variant if config.hallucinating else NONE
        self.pre = state.pre.copy()
        self.registry = state.registry.copy()
        self.h = state.hallucinator.copy() if (self.variant != NONE and state.hallucinator) else None
        if self.variant != NONE and self.h is None:
            raise TrainingError("hallucination requested but no hallucinator was trained")
        self.batch_gen = rng.stream("ft/batch")
        self.halluc_gen = rng.stream("ft/halluc")
        self.replace_gen = rng.stream("ft/replace")
        self.hstep_gen = rng.stream("ft/halluc-step")

        raw_x, raw_y = self._filtered_training_set(episode)
        self.raw_x, self.train_y = raw_x, raw_y
        self.bg_raw = episode.background_x
        self.classes = {int(c): np.flatnonzero(raw_y == c) for c in range(world.num_classes)}
        self.batch_sizes: list[int] = []

        feats = state.pre(raw_x)
        head_gen = rng.stream("ft/head-init")
        if config.init_mode == COCO_PRETRAIN:
            rows = coco_style_novel_init(state, world, feats, raw_y, config, rng)
        else:
            rows = head_gen.standard_normal((world.novel_classes, world.feature_dim)) * config.novel_init_std
        self.head = expand_head(state.head, rows)
        self._cache_features()

    def _filtered_training_set(self, episode: Episode):
        ens = self.state.ensemble
        if ens is None:
            return episode.train_x, episode.train_y
        scores = corpns.selected_scores(ens, episode.train_x)
        keep = scores >= 0.5
        # an instance whose proposals are all rejected keeps its best-scoring one
        for inst in np.unique(episode.train_instance):
            rows = np.flatnonzero(episode.train_instance == inst)
            if not keep[rows].any():
                keep[rows[np.argmax(scores[rows])]] = True
        return episode.train_x[keep], episode.train_y[keep]

    def _cache_features(self):
        self.feats = self.pre(self.raw_x)
        self.bg_feats = self.pre(self.bg_raw)

    # -- batches
    def sample_batch(self):
        cfg, world = self.config, self.world
        base = self.batch_gen.choice(world.base_ids, size=min(cfg.base_classes_per_batch, world.base_classes),
                                     replace=False)
        classes = np.concatenate([world.novel_ids, np.sort(base)])
        idx = np.concatenate([self.batch_gen.choice(self.classes[int(c)], size=cfg.examples_per_class)
                              for c in classes])
        neg = self.batch_gen.choice(len(self.bg_raw), size=cfg.background_ratio * len(idx), replace=False)
        return idx, neg

    def hallucinate_for(self, idx: np.ndarray, classes, gen: np.random.Generator, update: bool):
        """``m`` hallucinations per class in ``classes`` from seeds within ``idx``."""
        m = self.config.m
        seeds, labels = [], []
        for c in classes:
            pool = idx[self.train_y[idx] == c]
            if not len(pool):
                continue
            seeds.append(gen.choice(pool, size=m))
            labels.append(np.full(m, c, dtype=np.int64))
        seeds = np.concatenate(seeds)
        labels = np.concatenate(labels)
        space = self.feats if self.variant == CONSERVATIVE else self.raw_x
        registry = self.registry if self.variant == CONSERVATIVE else self._raw_registry
        z = hal.make_inputs(registry.means[labels], space[seeds], self.noise, gen)
        out = hal.forward(self.h, z)[0]
        if update:
            for c in np.unique(labels):
                if not registry.frozen[c]:
                    registry.update_many(int(c), out[labels == c])
        return z, out, labels

    @property
    def noise(self) -> NoiseSpec:
        return self.state.noise if self.variant == CONSERVATIVE else self.state.raw_noise

    def init_prototypes(self):
        if self.variant == AGGRESSIVE:
            self._raw_registry = _raw_registry(self.state)

    def observe_real(self, idx):
        registry = self.registry if self.variant != AGGRESSIVE else self._raw_registry
        space = self.feats if self.variant != AGGRESSIVE else self.raw_x
        for c in self.world.novel_ids:
            rows = idx[self.train_y[idx] == c]
            registry.update_many(int(c), space[rows])

    # -- one classifier step
    def classifier_step(self, it: int, joint: bool = False):
        cfg = self.config
        idx, neg = self.sample_batch()
        gen_x = gen_y = z = None
        if self.variant != NONE:
            self.observe_real(idx)
            z, out, gen_y = self.hallucinate_for(idx, self.world.novel_ids, self.halluc_gen, update=True)
            gen_x = out
        pos_x, neg_x = self.feats[idx], self.bg_feats[neg]
        if self.variant == AGGRESSIVE and gen_x is not None:
            gen_x = self.pre(gen_x)
        batch = compose_batch(pos_x, self.train_y[idx], neg_x, gen_x, gen_y, self.replace_gen)
        self.batch_sizes.append(len(batch))
        loss, d_w, d_x = ce_loss_and_grads(self.head, batch.features(), batch.labels())
        if not np.isfinite(loss):
            raise TrainingError(f"classifier loss diverged at fine-tuning iteration {it}")
        lr = cfg.finetune.lr_at(it)
        if joint and self.variant != NONE and len(batch.gen_y):
            self._joint_halluc_update(idx, z, batch, lr)
        self.head.weights = self.head.weights - lr * d_w
        if self.variant == AGGRESSIVE and joint:
            self._cache_features()

    def _joint_halluc_update(self, idx, z, batch, lr):
        cfg = self.config
        n_gen = len(batch.gen_y)
        z = z[:n_gen]
        labels = batch.gen_y
        hlr = cfg.halluc_ft_sgd.lr_at(min(self._hstep, cfg.halluc_ft_sgd.total_iterations - 1)) / len(labels)
        self._hstep += 1
        if self.variant == CONSERVATIVE:
            _, grads = hal.hallucination_loss(self.h, self.head, z, labels)
            for k in self.h.params:
                self.h.params[k] = self.h.params[k] - hlr * grads[k]
            return
        # aggressive: classifier CE on hallucinations through the pre-head plus the prototypical loss
        loss, grads = _halluc_objective(self.h, self.state, z, labels, AGGRESSIVE, self.head, self.pre)
        val_idx = idx[np.isin(self.train_y[idx], np.unique(labels))]
        val_x, val_y = self.raw_x[val_idx], self.train_y[val_idx]
        _, pgrads = hal.aggressive_prototypical_loss(self.h, self.pre, z, labels, val_x, val_y, cfg.alpha)
        for k in self.h.params:
            self.h.params[k] = self.h.params[k] - hlr * (grads[k] + pgrads[k])
        # joint training of the aggressive variant also moves the (working copy of the) pre-head transform
        self.pre = PreHead(self.pre.weights - lr * pgrads["pre.weights"],
                           self.pre.bias - lr * pgrads["pre.bias"])

    # -- hallucinator half-step of EM
    def hallucinator_phase(self, iterations: int):
        cfg = self.config
        gen = self.hstep_gen
        for _ in range(iterations):
            idx = self.sample_batch_for_halluc(gen)
            classes = np.unique(self.train_y[idx])
            z, _, labels = self.hallucinate_for(idx, classes, gen, update=False)
            loss, grads = _halluc_objective(self.h, self.state, z, labels, self.variant, self.head, self.pre)
            if not np.isfinite(loss):
                raise TrainingError("hallucinator loss diverged during fine-tuning")
            hlr = cfg.halluc_ft_sgd.lr_at(min(self._hstep, cfg.halluc_ft_sgd.total_iterations - 1)) / len(labels)
            self._hstep += 1
            for k in self.h.params:
                self.h.params[k] = self.h.params[k] - hlr * grads[k]

    def sample_batch_for_halluc(self, gen):
        cfg, world = self.config, self.world
        base = gen.choice(world.base_ids, size=min(cfg.base_classes_per_batch, world.base_classes), replace=False)
        classes = np.concatenate([world.novel_ids, np.sort(base)])
        idx = np.concatenate([gen.choice(self.classes[int(c)], size=cfg.examples_per_class) for c in classes])
        return idx

    def run(self, procedure: str) -> FinetuneResult:
        cfg = self.config
        total = cfg.finetune.total_iterations
        self._hstep = 0
        self.init_prototypes()
        if procedure == "joint":
            for it in range(total):
                self.classifier_step(it, joint=True)
        else:
            rounds = cfg.em_iterations if self.variant != NONE else 1
            bounds = np.linspace(0, total, rounds + 1).astype(int)
            for r in range(rounds):
                for it in range(bounds[r], bounds[r + 1]):
                    self.classifier_step(it)
                if r + 1 < rounds:
                    self.hallucinator_phase(bounds[r + 1] - bounds[r])
        report = evaluate(self.head, self.episode, self.world, cfg.tau, self.pre)
        return FinetuneResult(self.head, self.h, report, self.pre, self.registry, self.batch_sizes)


def finetune_em(state: BaseState, world: SyntheticWorld, episode: Episode, config: TrainConfig,
                rng: Rng) -> FinetuneResult:
    """Alternate classifier fine-tuning (hallucinator frozen) and hallucinator fine-tuning
    (classifier frozen); the classifier is trained ``em_iterations`` times within one
    shared iteration budget and learning-rate schedule."""
    config.validate()
    return _Finetuner(state, world, episode, config, rng).run("em")


def finetune_joint(state: BaseState, world: SyntheticWorld, episode: Episode, config: TrainConfig,
                   rng: Rng) -> FinetuneResult:
    """Update classifier and hallucinator together at every step, same budget as EM."""
    config.validate()
    return _Finetuner(state, world, episode, config, rng).run("joint")


# ---------------------------------------------------------------- evaluation

def evaluate(head: ClassifierHead, episode: Episode, world: SyntheticWorld, tau: float = 0.5,
             pre: PreHead | None = None) -> EvalReport:
    """Score the test pool: per-novel-class AP-analog and thresholded TP/FP counts.

    A detection is any non-background prediction scoring at least ``tau``;
    it is a true positive when the predicted class is the true class.
    """
    x = episode.test_x if pre is None else pre(episode.test_x)
    if not len(x):
        raise ValueError("empty test pool")
    rows, scores, _ = predict(head, x)
    truth = head.rows_for(episode.test_y)
    aps = {}
    for c in world.novel_ids:
        mine = rows == c
        aps[int(c)] = average_precision(scores[mine], truth[mine] == c, int((truth == c).sum()))
    det = (rows != head.background_row) & (scores >= tau)
    tp = int((det & (rows == truth)).sum())
    fp = int((det & (rows != truth)).sum())
    base_mask = np.isin(truth, world.base_ids)
    base_acc = float((rows[base_mask] == truth[base_mask]).mean()) if base_mask.any() else float("nan")
    return EvalReport(aps, float(np.mean(list(aps.values()))), tp, fp, base_acc)


# ---------------------------------------------------------------- multi-seed

def run_single(config: TrainConfig, seed: int, world_config: WorldConfig = WorldConfig(),
               state: BaseState | None = None) -> FinetuneResult:
    rng = Rng(seed)
    world = generate_world(world_config, rng.child("world"))
    if state is None:
        state = train_base_stage(world, config, rng.child("base"))
    episode = build_episode(world, config.shot, config.proposals_per_instance, config.pools,
                            rng.child(f"episode/{config.shot}"))
    fn = finetune_joint if config.procedure == "joint" else finetune_em
    return fn(state, world, episode, config, rng.child("finetune"))


def aggregate(reports: dict[int, EvalReport]) -> AggregateReport:
    if len(reports) < 2:
        raise ValueError("aggregation needs at least two seeds")
    seeds = sorted(reports)
    aps = np.array([reports[s].mean_novel_ap for s in seeds])
    mean, half = mean_and_half_width(aps)
    classes = sorted(reports[seeds[0]].per_class_ap)
    per_class = {c: float(np.mean([reports[s].per_class_ap[c] for s in seeds])) for c in classes}
    return AggregateReport(
        per_seed={s: reports[s] for s in seeds},
        mean_novel_ap=mean,
        ap_half_width=half,
        mean_tp=float(np.mean([reports[s].tp_count for s in seeds])),
        mean_fp=float(np.mean([reports[s].fp_count for s in seeds])),
        per_class_ap=per_class,
    )


def run_multiseed(config: TrainConfig, seeds: Sequence[int],
                  world_config: WorldConfig = WorldConfig()) -> AggregateReport:
    if len(seeds) < 2:
        raise ValueError("run_multiseed needs at least two seeds")
    reports = {int(s): run_single(config, int(s), world_config).report for s in seeds}
    return aggregate(reports)
