"""Embedding classifier, Gaussian moments, Fréchet distance, perturbations."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repaintlab.metrics import (
    EmbedderConfig,
    EmbeddingModel,
    GaussianStats,
    MetricsError,
    PerturbationSpec,
    _build_embedder,
    alien_images,
    embed_stats,
    fcd,
    frechet_distance,
    perturb,
    perturbation_battery,
    train_embedder,
)
from repaintlab.synthlab import Corpus, TextureSpec, generate_patch
from repaintlab.rng import substream


def _random_embedder(n_classes=4, seed=0):
    config = EmbedderConfig(input_size=64, n_classes=n_classes)
    params = _build_embedder(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for k in params:  # randomize the zero-init pieces so features are rich
        params[k] = params[k] + rng.standard_normal(params[k].shape).astype(np.float32) * 0.1
    return EmbeddingModel(config, params, eval_accuracy=float("nan"))


def _two_class_corpus(n_per_class=40, seed=0):
    """Trivially separable: blank background vs dense texture."""
    blank = TextureSpec(0, (), (0.0,), (2.0,), (0.2,), ((0.8, 0.9),), 0.0, 16.0,
                        0.85)
    dense = TextureSpec(1, (), (0.02,), (2.4,), (0.2,), ((0.8, 0.9),), 0.0, 16.0,
                        0.55, cell_intensity=-0.9)
    patches, labels, gts = [], [], []
    seeder = substream(seed, "twoclass")
    for cid, spec in enumerate((blank, dense)):
        for _ in range(n_per_class):
            from dataclasses import replace
            p, gt = generate_patch(replace(spec, seed=int(seeder.integers(2**31))), 64)
            patches.append(p)
            labels.append(cid)
            gts.append(gt)
    patches = np.stack(patches)
    labels = np.asarray(labels)
    n_train = int(0.85 * n_per_class)
    train_idx = np.concatenate([np.arange(n_train),
                                n_per_class + np.arange(n_train)])
    eval_idx = np.setdiff1d(np.arange(2 * n_per_class), train_idx)
    return Corpus(size=64, seed=seed, n_per_class=n_per_class,
                  classes=[blank, dense], patches=patches, labels=labels,
                  gts=gts, train_idx=train_idx, eval_idx=eval_idx)


# ---------------------------------------------------------------------------
# Fréchet distance


def _stats(mu, sigma, n=100):
    return GaussianStats(np.asarray(mu, float), np.asarray(sigma, float), n)


def test_frechet_identical_stats_zero():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((100, 6))
    sigma = np.cov(a, rowvar=False)
    s = _stats(a.mean(axis=0), sigma)
    assert frechet_distance(s, s) < 1e-8


def test_frechet_1d_closed_form():
    # (mu, var) = (0,1) vs (1,4): d^2 = 1 + 1 + 4 - 2*2 = 2
    a = _stats([0.0], [[1.0]])
    b = _stats([1.0], [[4.0]])
    assert abs(frechet_distance(a, b) - 2.0) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_frechet_diagonal_closed_form(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 12))
    mu_a, mu_b = rng.standard_normal(d), rng.standard_normal(d)
    lam = rng.uniform(0.1, 3.0, d)
    nu = rng.uniform(0.1, 3.0, d)
    got = frechet_distance(_stats(mu_a, np.diag(lam)), _stats(mu_b, np.diag(nu)))
    want = float(np.sum((mu_a - mu_b) ** 2) + np.sum((np.sqrt(lam) - np.sqrt(nu)) ** 2))
    assert abs(got - want) < 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 10))
def test_frechet_symmetric_and_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    a_mat = rng.standard_normal((d, d))
    b_mat = rng.standard_normal((d, d))
    a = _stats(rng.standard_normal(d), a_mat @ a_mat.T + 1e-6 * np.eye(d))
    b = _stats(rng.standard_normal(d), b_mat @ b_mat.T + 1e-6 * np.eye(d))
    dab = frechet_distance(a, b)
    dba = frechet_distance(b, a)
    assert abs(dab - dba) < 1e-8 * max(1.0, dab)
    assert dab >= 0.0


def test_frechet_rejects_dimension_mismatch():
    with pytest.raises(MetricsError, match="dimension"):
        frechet_distance(_stats([0.0], [[1.0]]), _stats([0.0, 0.0], np.eye(2)))


def test_gaussian_stats_rejects_asymmetric_covariance():
    with pytest.raises(MetricsError, match="symmetric"):
        _stats([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


# ---------------------------------------------------------------------------
# embed_stats


def test_embed_stats_duplicated_image_zero_covariance():
    model = _random_embedder()
    img = np.random.default_rng(0).uniform(-1, 1, (1, 1, 64, 64)).astype(np.float32)
    stats = embed_stats(model, np.repeat(img, 64, axis=0))
    assert np.abs(stats.sigma).max() < 1e-10
    assert stats.n == 64


def test_embed_stats_permutation_invariant():
    model = _random_embedder()
    imgs = np.random.default_rng(1).uniform(-1, 1, (70, 1, 64, 64)).astype(np.float32)
    a = embed_stats(model, imgs)
    b = embed_stats(model, imgs[::-1].copy())
    np.testing.assert_allclose(a.mu, b.mu, atol=1e-8)
    np.testing.assert_allclose(a.sigma, b.sigma, atol=1e-8)


def test_embed_stats_matches_two_sample_closed_form():
    model = _random_embedder()
    rng = np.random.default_rng(2)
    imgs = rng.uniform(-1, 1, (2, 1, 64, 64)).astype(np.float32)
    # 64-image set: 32 copies of each of the two images
    batch = np.concatenate([np.repeat(imgs[:1], 32, 0), np.repeat(imgs[1:], 32, 0)])
    stats = embed_stats(model, batch)
    f = model.features(imgs).astype(np.float64)
    mu = f.mean(axis=0)
    centered = np.concatenate([np.repeat(f[:1], 32, 0), np.repeat(f[1:], 32, 0)]) - mu
    sigma = centered.T @ centered / 63
    np.testing.assert_allclose(stats.mu, mu, atol=1e-6)
    np.testing.assert_allclose(stats.sigma, sigma, atol=1e-6)


def test_embed_stats_enforces_floor():
    model = _random_embedder()
    imgs = np.zeros((63, 1, 64, 64), dtype=np.float32)
    with pytest.raises(MetricsError, match="at least 64"):
        embed_stats(model, imgs)


# ---------------------------------------------------------------------------
# embedder training


def test_train_embedder_trivial_two_class_perfect():
    corpus = _two_class_corpus()
    model = train_embedder(corpus, seed=3, steps=300)
    assert model.eval_accuracy == 1.0


def test_train_embedder_deterministic():
    corpus = _two_class_corpus(n_per_class=30, seed=5)
    a = train_embedder(corpus, seed=9, steps=120)
    b = train_embedder(corpus, seed=9, steps=120)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_train_embedder_fails_loudly_below_floor():
    corpus = _two_class_corpus(n_per_class=20, seed=6)
    with pytest.raises(MetricsError, match="below the 0.95 floor"):
        train_embedder(corpus, seed=1, steps=1)


def test_embedder_save_load_roundtrip(tmp_path):
    model = _random_embedder()
    model.save(tmp_path / "emb")
    back = EmbeddingModel.load(tmp_path / "emb")
    assert back.config == model.config
    assert all(np.array_equal(back.params[k], model.params[k]) for k in model.params)
    x = np.random.default_rng(0).uniform(-1, 1, (2, 1, 64, 64)).astype(np.float32)
    np.testing.assert_array_equal(back.features(x), model.features(x))


# ---------------------------------------------------------------------------
# perturbations


def test_perturbation_spec_validation():
    with pytest.raises(MetricsError, match="increasing"):
        PerturbationSpec("gaussian_noise", (0.0, 0.2, 0.1))
    with pytest.raises(MetricsError, match="identity"):
        PerturbationSpec("gaussian_noise", (0.1, 0.2))
    with pytest.raises(MetricsError, match="kind"):
        PerturbationSpec("sharpen", (0.0, 1.0))


def test_perturb_level_zero_is_identity():
    rng = np.random.default_rng(0)
    imgs = rng.uniform(-1, 1, (4, 1, 64, 64)).astype(np.float32)
    for kind in ("gaussian_noise", "gaussian_blur", "salt_pepper", "dataset_mix"):
        out = perturb(imgs, kind, 0.0, rng, aliens=imgs)
        np.testing.assert_array_equal(out, imgs)


def test_perturb_mechanics():
    rng = np.random.default_rng(1)
    imgs = rng.uniform(-0.5, 0.5, (6, 1, 64, 64)).astype(np.float32)
    noisy = perturb(imgs, "gaussian_noise", 0.3, np.random.default_rng(2))
    assert noisy.min() >= -1.0 and noisy.max() <= 1.0
    assert not np.array_equal(noisy, imgs)
    blurred = perturb(imgs, "gaussian_blur", 2.0, np.random.default_rng(2))
    assert blurred.var() < imgs.var()
    sp = perturb(imgs, "salt_pepper", 0.1, np.random.default_rng(2))
    flipped = (np.abs(sp) == 1.0).mean()
    assert 0.05 < flipped < 0.15
    aliens = alien_images(np.random.default_rng(3), 6, 64)
    mixed = perturb(imgs, "dataset_mix", 0.5, np.random.default_rng(2), aliens)
    np.testing.assert_array_equal(mixed[:3], aliens[:3])
    np.testing.assert_array_equal(mixed[3:], imgs[3:])


def test_battery_identity_level_is_exact_zero():
    model = _random_embedder()
    imgs = np.random.default_rng(4).uniform(-1, 1, (80, 1, 64, 64)).astype(np.float32)
    curve = perturbation_battery(
        model, imgs, PerturbationSpec("gaussian_noise", (0.0, 0.5)),
        np.random.default_rng(0),
    )
    assert curve[0]["level"] == 0.0
    assert curve[0]["fcd"] == 0.0
    assert curve[1]["fcd"] > 0.0


def test_battery_full_mix_equals_alien_fcd_exactly():
    model = _random_embedder()
    rng = np.random.default_rng(5)
    imgs = rng.uniform(-1, 1, (80, 1, 64, 64)).astype(np.float32)
    aliens = alien_images(np.random.default_rng(6), 80, 64)
    curve = perturbation_battery(
        model, imgs, PerturbationSpec("dataset_mix", (0.0, 1.0)),
        np.random.default_rng(7), aliens=aliens,
    )
    direct = fcd(model, imgs, aliens)
    assert curve[1]["fcd"] == direct


def test_alien_images_in_range():
    imgs = alien_images(np.random.default_rng(0), 10, 64)
    assert imgs.shape == (10, 1, 64, 64)
    assert imgs.min() >= -1.0 and imgs.max() <= 1.0
    assert imgs.std() > 0.05
