import logging
from dataclasses import replace

import numpy as np
import pytest

from hallucdet.numerics import Rng
from hallucdet.synthworld import (BACKGROUND, HALLUCINATED, LabeledFeature, PoolSizes, WorldConfig,
                                  build_episode, compose_batch, generate_world, load_episode,
                                  load_world, sample_background, sample_instance, sample_instances,
                                  sample_proposals, save_episode, save_world)


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig(), Rng(0))


def test_small_world_single_mode_is_unit_vector():
    w = generate_world(WorldConfig(feature_dim=2, num_modes=1), Rng(3))
    assert w.modes.shape == (2, 1)
    assert abs(w.modes[:, 0] @ w.modes[:, 0] - 1.0) < 1e-12


def test_default_world_modes_orthonormal(world):
    assert world.modes.shape == (32, 6)
    assert world.orthonormality_error() < 1e-9
    gram = world.modes.T @ world.modes
    off = gram[~np.eye(6, dtype=bool)]
    assert np.abs(off).max() < 1e-9


def test_default_world_shape(world):
    assert world.class_means.shape == (20, 32)
    assert world.base_classes == 15 and world.novel_classes == 5
    assert world.proposal_jitter < world.mode_scales.min()


def test_same_seed_same_world():
    a = generate_world(WorldConfig(), Rng(9))
    b = generate_world(WorldConfig(), Rng(9))
    for name in ("class_means", "modes", "mode_scales", "background_means", "background_weights"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(feature_dim=4, num_modes=5).validate()
    with pytest.raises(ValueError):
        WorldConfig(proposal_jitter=1.0, mode_scale=1.0).validate()
    with pytest.raises(ValueError):
        WorldConfig(iso_noise=0.0).validate()
    with pytest.raises(ValueError):
        WorldConfig(sibling_distance=-1.0).validate()


def test_novel_classes_sit_at_sibling_distance():
    cfg = WorldConfig(sibling_distance=1.5)
    w = generate_world(cfg, Rng(2))
    gaps = np.linalg.norm(w.class_means[15:] - w.class_means[:5], axis=1)
    assert np.allclose(gaps, 1.5, atol=1e-12)


def test_sibling_distance_zero_keeps_independent_means():
    w = generate_world(WorldConfig(sibling_distance=0.0), Rng(2))
    gaps = np.linalg.norm(w.class_means[15:] - w.class_means[:5], axis=1)
    assert gaps.min() > 1.5


def test_zero_noise_instance_is_class_mean(world):
    quiet = replace(world, mode_scales=np.zeros(6), iso_noise=0.0)
    x = sample_instance(quiet, 4, np.random.default_rng(0))
    assert np.array_equal(x, quiet.class_means[4])


def test_instance_covariance_monte_carlo(world):
    x = sample_instances(world, 2, 10_000, np.random.default_rng(1))
    emp = np.cov(x, rowvar=False)
    true = world.instance_covariance()
    assert np.linalg.norm(emp - true) / np.linalg.norm(true) < 0.05


def test_instance_mean_monte_carlo(world):
    n = 10_000
    x = sample_instances(world, 7, n, np.random.default_rng(2))
    se = np.sqrt(np.diag(world.instance_covariance()) / n)
    assert np.all(np.abs(x.mean(axis=0) - world.class_means[7]) < 3 * se)


def test_sample_instance_rejects_bad_class(world):
    with pytest.raises(ValueError):
        sample_instance(world, 20, np.random.default_rng(0))


def test_zero_jitter_copies_instance(world):
    still = replace(world, proposal_jitter=0.0)
    inst = world.class_means[0]
    props = sample_proposals(still, inst, 20, np.random.default_rng(0))
    assert props.shape == (20, 32)
    assert np.all(props == inst)


def test_proposal_variance_monte_carlo(world):
    props = sample_proposals(world, world.class_means[1], 10_000, np.random.default_rng(3))
    var = props.var(axis=0, ddof=1)
    assert np.all(np.abs(var / world.proposal_jitter ** 2 - 1) < 0.05)


def test_background_count_zero(world):
    assert sample_background(world, 0, np.random.default_rng(0)).shape == (0, 32)


def test_background_mixture_weights(world):
    n = 10_000
    _, comp = sample_background(world, n, np.random.default_rng(4), return_components=True)
    freq = np.bincount(comp, minlength=len(world.background_weights)) / n
    sigma = np.sqrt(world.background_weights * (1 - world.background_weights) / n)
    assert np.all(np.abs(freq - world.background_weights) < 3 * sigma)


def test_labeled_feature_background_cannot_be_hallucinated():
    with pytest.raises(ValueError):
        LabeledFeature(np.zeros(2), BACKGROUND, HALLUCINATED)


def _parts(n_pos, n_neg, n_gen, d=3):
    gen = np.random.default_rng(0)
    return (gen.standard_normal((n_pos, d)), np.arange(n_pos) % 2, gen.standard_normal((n_neg, d)),
            gen.standard_normal((n_gen, d)), np.zeros(n_gen, dtype=np.int64))


def test_compose_batch_conserves_size():
    px, py, nx, gx, gy = _parts(4, 12, 5)
    batch = compose_batch(px, py, nx, gx, gy, np.random.default_rng(1))
    assert len(batch) == 16
    assert (len(batch.pos_y), len(batch.gen_y), batch.neg_x.shape[0]) == (4, 5, 7)
    # remaining negatives are a subset of the originals
    assert all(any(np.array_equal(r, o) for o in nx) for r in batch.neg_x)
    kinds = [f.origin for f in batch.items()]
    assert kinds.count(HALLUCINATED) == 5


def test_compose_batch_without_generated_is_identity():
    px, py, nx, _, _ = _parts(4, 12, 0)
    batch = compose_batch(px, py, nx)
    assert np.array_equal(batch.features(), np.concatenate([px, nx]))
    assert list(batch.labels()) == list(py) + [BACKGROUND] * 12


def test_compose_batch_boundary_removes_all_negatives():
    px, py, nx, gx, gy = _parts(2, 5, 5)
    batch = compose_batch(px, py, nx, gx, gy, np.random.default_rng(0))
    assert batch.neg_x.shape[0] == 0 and len(batch) == 7


def test_compose_batch_truncates_with_warning(caplog):
    px, py, nx, gx, gy = _parts(2, 3, 6)
    with caplog.at_level(logging.WARNING):
        batch = compose_batch(px, py, nx, gx, gy, np.random.default_rng(0))
    assert len(batch) == 5 and len(batch.gen_y) == 3
    assert "truncating" in caplog.text


def test_compose_batch_rejects_background_hallucinations():
    px, py, nx, gx, _ = _parts(2, 3, 1)
    with pytest.raises(ValueError):
        compose_batch(px, py, nx, gx, [BACKGROUND], np.random.default_rng(0))


def test_episode_counts(world):
    pools = PoolSizes(test_per_class=30, test_base_per_class=4, test_background=100, train_background=50)
    ep = build_episode(world, 1, 20, pools, Rng(5))
    assert ep.seeds.shape == (20, 1, 32)
    assert len(ep.train_y) == 20 * 20
    assert np.all(np.bincount(ep.train_y) == 20)
    assert np.all(np.bincount(ep.test_y[ep.test_y >= 15] - 15) == 30)
    assert (ep.test_y == BACKGROUND).sum() == 100


def test_episode_two_shot(world):
    ep = build_episode(world, 2, 20, PoolSizes(10, 2, 10, 10), Rng(5))
    novel = np.isin(ep.train_y, world.novel_ids)
    assert len(np.unique(ep.train_instance[novel])) == 10


def test_episode_test_pool_uses_fresh_stream(world):
    pools = PoolSizes(10, 2, 10, 10)
    one = build_episode(world, 1, 20, pools, Rng(5))
    two = build_episode(world, 2, 20, pools, Rng(5))
    assert np.array_equal(one.test_x, two.test_x)
    assert not np.isin(one.test_x, one.train_x).all()


def test_episode_requires_a_shot(world):
    with pytest.raises(ValueError):
        build_episode(world, 0)


def test_world_and_episode_round_trip(world, tmp_path):
    save_world(tmp_path / "w.kv", world)
    back = load_world(tmp_path / "w.kv")
    assert np.array_equal(back.class_means, world.class_means)
    assert back.iso_noise == world.iso_noise and back.base_classes == world.base_classes
    save_world(tmp_path / "w2.kv", back)
    assert (tmp_path / "w.kv").read_bytes() == (tmp_path / "w2.kv").read_bytes()
    ep = build_episode(world, 1, 5, PoolSizes(3, 1, 3, 3), Rng(1))
    save_episode(tmp_path / "e.kv", ep)
    ep2 = load_episode(tmp_path / "e.kv")
    assert np.array_equal(ep2.train_x, ep.train_x) and ep2.shot == 1
