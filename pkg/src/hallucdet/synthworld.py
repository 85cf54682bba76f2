"""Synthetic RoI-feature world.

Every class (base or novel) draws instances as ``mu_c + V a + eta`` where the
mode frame ``V`` and its scales are shared by all classes. Region proposals
are tight isotropic jitter around one instance, so a single annotated
instance exposes far less variation than the class really has. Background
features come from a separate Gaussian mixture.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import kvformat
from .numerics import Rng

log = logging.getLogger(__name__)

BACKGROUND = -1
REAL = "real"
HALLUCINATED = "hallucinated"


@dataclass(frozen=True)
class WorldConfig:
    feature_dim: int = 32
    base_classes: int = 15
    novel_classes: int = 5
    num_modes: int = 6
    mode_scale: float = 1.0
    iso_noise: float = 0.1
    proposal_jitter: float = 0.15
    mean_spread: float = 4.0
    background_components: int = 8
    background_scale: float = 1.0
    background_mean_spread: float = 4.0
    sibling_distance: float = 1.5        # > 0 puts each novel mean this far from a base mean

    def validate(self) -> None:
        if self.num_modes > self.feature_dim:
            raise ValueError(f"num_modes={self.num_modes} exceeds feature_dim={self.feature_dim}")
        for name in ("feature_dim", "base_classes", "novel_classes", "num_modes", "background_components"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("mode_scale", "iso_noise", "proposal_jitter", "mean_spread",
                     "background_scale", "background_mean_spread"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.sibling_distance < 0:
            raise ValueError("sibling_distance must be >= 0")
        if self.proposal_jitter >= self.mode_scale:
            raise ValueError("proposal_jitter must be narrower than mode_scale")


@dataclass(frozen=True)
class SyntheticWorld:
    class_means: np.ndarray          # (C_b + C_n, d); base classes first
    modes: np.ndarray                # (d, M), orthonormal columns
    mode_scales: np.ndarray          # (M,)
    iso_noise: float
    proposal_jitter: float
    base_classes: int
    novel_classes: int
    background_means: np.ndarray     # (G, d)
    background_scale: float
    background_weights: np.ndarray   # (G,)

    @property
    def feature_dim(self) -> int:
        return self.class_means.shape[1]

    @property
    def num_classes(self) -> int:
        return self.base_classes + self.novel_classes

    @property
    def base_ids(self) -> np.ndarray:
        return np.arange(self.base_classes)

    @property
    def novel_ids(self) -> np.ndarray:
        return np.arange(self.base_classes, self.num_classes)

    def orthonormality_error(self) -> float:
        gram = self.modes.T @ self.modes
        return float(np.abs(gram - np.eye(gram.shape[0])).max())

    def instance_covariance(self) -> np.ndarray:
        v = self.modes * self.mode_scales
        return v @ v.T + self.iso_noise ** 2 * np.eye(self.feature_dim)

    def to_fields(self) -> dict:
        out = {}
        for f in dc_fields(self):
            value = getattr(self, f.name)
            out[f.name] = value
        return out

    @classmethod
    def from_fields(cls, data: dict) -> "SyntheticWorld":
        kwargs = {}
        for f in dc_fields(cls):
            raw = data[f.name]
            if f.name in ("base_classes", "novel_classes"):
                kwargs[f.name] = int(raw)
            elif isinstance(raw, np.ndarray):
                kwargs[f.name] = raw
            else:
                kwargs[f.name] = float(raw)
        return cls(**kwargs)


def generate_world(config: WorldConfig = WorldConfig(), rng: Rng = Rng(0)) -> SyntheticWorld:
    """Draw a world: random orthonormal mode frame, class means, background mixture.

    Class means are isotropic with per-coordinate std ``mean_spread / sqrt(d)``
    so their typical norm is ``mean_spread``.
    """
    config.validate()
    d, m = config.feature_dim, config.num_modes
    gen = rng.stream("world")
    q, r = np.linalg.qr(gen.standard_normal((d, m)))
    # sign-fix so the frame is a deterministic function of the draw
    q = q * np.sign(np.diag(r))
    n_cls = config.base_classes + config.novel_classes
    means = gen.standard_normal((n_cls, d)) * (config.mean_spread / np.sqrt(d))
    if config.sibling_distance > 0:
        # novel class k becomes a near relative of base class k mod |C_b|
        nb = config.base_classes
        raw = means[nb:]
        direction = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        sib = np.arange(config.novel_classes) % nb
        means[nb:] = means[sib] + config.sibling_distance * direction
    bg_means = gen.standard_normal((config.background_components, d)) * (
        config.background_mean_spread / np.sqrt(d))
    weights = np.full(config.background_components, 1.0 / config.background_components)
    return SyntheticWorld(
        class_means=means,
        modes=q,
        mode_scales=np.full(m, float(config.mode_scale)),
        iso_noise=float(config.iso_noise),
        proposal_jitter=float(config.proposal_jitter),
        base_classes=config.base_classes,
        novel_classes=config.novel_classes,
        background_means=bg_means,
        background_scale=float(config.background_scale),
        background_weights=weights,
    )


def sample_instances(world: SyntheticWorld, cls: int, count: int, gen: np.random.Generator) -> np.ndarray:
    if not 0 <= cls < world.num_classes:
        raise ValueError(f"class {cls} out of range")
    coeffs = gen.standard_normal((count, world.mode_scales.size)) * world.mode_scales
    noise = gen.standard_normal((count, world.feature_dim)) * world.iso_noise
    return world.class_means[cls] + coeffs @ world.modes.T + noise


def sample_instance(world: SyntheticWorld, cls: int, gen: np.random.Generator) -> np.ndarray:
    return sample_instances(world, cls, 1, gen)[0]


def sample_proposals(world: SyntheticWorld, instance: np.ndarray, count: int,
                     gen: np.random.Generator) -> np.ndarray:
    """``count`` jittered copies of ``instance``; all share its label."""
    if count < 1:
        raise ValueError("need at least one proposal")
    jitter = gen.standard_normal((count, instance.shape[-1])) * world.proposal_jitter
    return instance[None, :] + jitter


def sample_background(world: SyntheticWorld, count: int, gen: np.random.Generator,
                      return_components: bool = False):
    comp = gen.choice(world.background_means.shape[0], size=count, p=world.background_weights)
    x = world.background_means[comp] + gen.standard_normal((count, world.feature_dim)) * world.background_scale
    if return_components:
        return x, comp
    return x


@dataclass(frozen=True)
class LabeledFeature:
    vector: np.ndarray
    label: int
    origin: str = REAL

    def __post_init__(self):
        if self.origin == HALLUCINATED and self.label == BACKGROUND:
            raise ValueError("hallucinated features cannot be background")


@dataclass
class Batch:
    """Classifier batch held as arrays: positives, hallucinated, negatives."""

    pos_x: np.ndarray
    pos_y: np.ndarray
    neg_x: np.ndarray
    gen_x: np.ndarray
    gen_y: np.ndarray

    def __len__(self) -> int:
        return len(self.pos_y) + len(self.gen_y) + self.neg_x.shape[0]

    def features(self) -> np.ndarray:
        return np.concatenate([self.pos_x, self.gen_x, self.neg_x], axis=0)

    def labels(self) -> np.ndarray:
        """Labels in ``features()`` order; background stays as ``BACKGROUND``."""
        return np.concatenate([self.pos_y, self.gen_y,
                               np.full(self.neg_x.shape[0], BACKGROUND, dtype=np.int64)])

    def items(self) -> list[LabeledFeature]:
        out = [LabeledFeature(x, int(y)) for x, y in zip(self.pos_x, self.pos_y)]
        out += [LabeledFeature(x, int(y), HALLUCINATED) for x, y in zip(self.gen_x, self.gen_y)]
        out += [LabeledFeature(x, BACKGROUND) for x in self.neg_x]
        return out


def _empty(d: int) -> np.ndarray:
    return np.zeros((0, d))


def compose_batch(pos_x, pos_y, neg_x, gen_x=None, gen_y=None, gen: np.random.Generator | None = None) -> Batch:
    """Swap ``len(gen_x)`` randomly chosen negatives for hallucinated examples.

    Total size is preserved. If there are more hallucinated examples than
    negatives, the surplus is dropped with a warning.
    """
    pos_x = np.asarray(pos_x, dtype=np.float64)
    d = pos_x.shape[1] if pos_x.ndim == 2 else np.asarray(neg_x).shape[1]
    pos_y = np.asarray(pos_y, dtype=np.int64)
    neg_x = np.asarray(neg_x, dtype=np.float64).reshape(-1, d)
    gen_x = _empty(d) if gen_x is None else np.asarray(gen_x, dtype=np.float64).reshape(-1, d)
    gen_y = np.zeros(0, dtype=np.int64) if gen_y is None else np.asarray(gen_y, dtype=np.int64)
    if np.any(gen_y == BACKGROUND):
        raise ValueError("hallucinated examples must carry a foreground label")
    n_gen = gen_x.shape[0]
    if n_gen > neg_x.shape[0]:
        log.warning("truncating %d hallucinated examples to %d available negatives",
                    n_gen, neg_x.shape[0])
        n_gen = neg_x.shape[0]
        gen_x, gen_y = gen_x[:n_gen], gen_y[:n_gen]
    if n_gen:
        if gen is None:
            raise ValueError("a generator is required to pick negatives to replace")
        drop = gen.choice(neg_x.shape[0], size=n_gen, replace=False)
        keep = np.ones(neg_x.shape[0], dtype=bool)
        keep[drop] = False
        neg_x = neg_x[keep]
    return Batch(pos_x.reshape(-1, d), pos_y, neg_x, gen_x, gen_y)


@dataclass
class Episode:
    """One K-shot fine-tuning set plus its held-out test pool.

    ``train_x``/``train_y``/``train_instance`` list every proposal of every
    annotated instance (novel and base, K instances per class).
    """

    shot: int
    proposals_per_instance: int
    seeds: np.ndarray                # (C, K, d) annotated instances, class-major
    train_x: np.ndarray              # (C*K*P, d)
    train_y: np.ndarray
    train_instance: np.ndarray       # flat instance index = cls * K + k
    background_x: np.ndarray         # background pool for fine-tuning batches
    test_x: np.ndarray
    test_y: np.ndarray               # BACKGROUND for background entries

    def class_examples(self, cls: int) -> np.ndarray:
        return self.train_x[self.train_y == cls]

    def to_fields(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    @classmethod
    def from_fields(cls, data: dict) -> "Episode":
        kwargs = {}
        for f in dc_fields(cls):
            raw = data[f.name]
            kwargs[f.name] = raw if isinstance(raw, np.ndarray) else int(raw)
        return cls(**kwargs)


@dataclass(frozen=True)
class PoolSizes:
    test_per_class: int = 50
    test_base_per_class: int = 10
    test_background: int = 500
    train_background: int = 2000


def build_episode(world: SyntheticWorld, shot: int, proposals: int = 20,
                  pools: PoolSizes = PoolSizes(), rng: Rng = Rng(0)) -> Episode:
    """Balanced K-shot set over all classes plus a fresh-stream test pool."""
    if shot < 1:
        raise ValueError("shot must be >= 1")
    d = world.feature_dim
    seed_gen = rng.stream("episode/seeds")
    prop_gen = rng.stream("episode/proposals")
    n_cls = world.num_classes
    seeds = np.stack([sample_instances(world, c, shot, seed_gen) for c in range(n_cls)])
    xs, ys, inst = [], [], []
    for c in range(n_cls):
        for k in range(shot):
            xs.append(sample_proposals(world, seeds[c, k], proposals, prop_gen))
            ys.append(np.full(proposals, c, dtype=np.int64))
            inst.append(np.full(proposals, c * shot + k, dtype=np.int64))
    bg = sample_background(world, pools.train_background, rng.stream("episode/background"))

    test_gen = rng.stream("episode/test")
    tx, ty = [], []
    for c in world.novel_ids:
        tx.append(sample_instances(world, int(c), pools.test_per_class, test_gen))
        ty.append(np.full(pools.test_per_class, c, dtype=np.int64))
    if pools.test_base_per_class:
        for c in world.base_ids:
            tx.append(sample_instances(world, int(c), pools.test_base_per_class, test_gen))
            ty.append(np.full(pools.test_base_per_class, c, dtype=np.int64))
    if pools.test_background:
        tx.append(sample_background(world, pools.test_background, test_gen))
        ty.append(np.full(pools.test_background, BACKGROUND, dtype=np.int64))
    return Episode(
        shot=shot,
        proposals_per_instance=proposals,
        seeds=seeds,
        train_x=np.concatenate(xs).reshape(-1, d),
        train_y=np.concatenate(ys),
        train_instance=np.concatenate(inst),
        background_x=bg,
        test_x=np.concatenate(tx),
        test_y=np.concatenate(ty),
    )


def save_world(path, world: SyntheticWorld) -> None:
    kvformat.save(path, "world", world.to_fields())


def load_world(path) -> SyntheticWorld:
    return SyntheticWorld.from_fields(kvformat.load(path, "world")[1])


def save_episode(path, episode: Episode) -> None:
    kvformat.save(path, "episode", episode.to_fields())


def load_episode(path) -> Episode:
    return Episode.from_fields(kvformat.load(path, "episode")[1])
