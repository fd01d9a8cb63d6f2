import hashlib
import math

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from graphca._rng import pair_uniform, stream
from graphca.synthdata import (GraphDataset, LatentConfig, LinkModel, MixingNetwork,
                               build_link_model, build_mixing, correlated_gauss_cov,
                               generate_dataset, link_prob, load_dataset, sample_latents,
                               save_dataset)

from oracles import softmax_direct


def test_empty_latents():
    assert sample_latents(LatentConfig("laplace", 3, 0), 1).shape == (0, 3)
    assert sample_latents(LatentConfig("gauss", 3, 0), 1).shape == (0, 3)


def test_latent_config_validation():
    with pytest.raises(ValueError):
        LatentConfig("cauchy", 2, 10)
    with pytest.raises(ValueError):
        LatentConfig("laplace", 0, 10)


def test_laplace_unit_variance():
    # density ~ exp(-sqrt(2)|s|) is Laplace with scale 1/sqrt(2): variance 2 * 1/2 = 1
    s = sample_latents(LatentConfig("laplace", 3, 100_000), 5)
    np.testing.assert_allclose(s.var(axis=0), 1.0, atol=0.02)
    np.testing.assert_allclose(np.abs(s).mean(axis=0), 1 / math.sqrt(2), atol=0.01)


def test_gauss_covariance():
    s = sample_latents(LatentConfig("gauss", 2, 100_000), 5)
    np.testing.assert_allclose(np.cov(s.T), [[1.0, 0.3], [0.3, 1.0]], atol=0.02)


def test_gauss_covariance_structure_and_cholesky():
    for d in (1, 2, 4, 6, 10):
        C = correlated_gauss_cov(d)
        L = np.linalg.cholesky(C)
        np.testing.assert_allclose(L @ L.T, C, atol=1e-12, rtol=0)
        for i in range(d):
            for j in range(d):
                expected = 1.0 if i == j else (0.3 if abs(i - j) == 1 else 0.0)
                assert C[i, j] == expected


def test_latents_deterministic_per_seed():
    cfg = LatentConfig("gauss", 3, 50)
    assert np.array_equal(sample_latents(cfg, 9), sample_latents(cfg, 9))
    assert not np.array_equal(sample_latents(cfg, 9), sample_latents(cfg, 10))


# ---------------------------------------------------------------- link model


def test_alpha_construction_ranges():
    lm = build_link_model(3, 5, seed=2)
    assert lm.alpha.shape == (5, 3)
    for k in range(5):
        for i in range(3):
            lo, hi = (1.0, 1.1) if k == i else (0.0, 0.1)
            assert lo <= lm.alpha[k, i] <= hi


def test_alpha_seeded_and_shape_when_k_below_d():
    assert build_link_model(3, 5, seed=4) == build_link_model(3, 5, seed=4)
    lm = build_link_model(4, 2, seed=0)
    assert lm.alpha.shape == (2, 4)
    assert list(lm.support) == [1, 2]


def test_link_prob_uniform_at_zero():
    lm = build_link_model(3, 4, 0)
    np.testing.assert_allclose(link_prob(lm, np.zeros(3), np.ones(3)), 0.25, rtol=1e-15)


def test_link_prob_direct_softmax():
    lm = LinkModel(np.array([[1.0], [2.0]]))
    p = link_prob(lm, np.array([1.0]), np.array([1.0]))
    np.testing.assert_allclose(p, softmax_direct([1.0, 2.0]), rtol=1e-14)
    np.testing.assert_allclose(p, [math.e / (math.e + math.e ** 2), math.e ** 2 / (math.e + math.e ** 2)])


def test_link_prob_normalized_and_finite():
    rng = np.random.default_rng(0)
    lm = build_link_model(5, 7, 1)
    s, s2 = 30 * rng.standard_normal((10_000, 5)), 30 * rng.standard_normal((10_000, 5))
    p = link_prob(lm, s, s2)
    assert np.isfinite(p).all()
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) <= 1e-12


# ---------------------------------------------------------------- link weights


def _star_dataset(s_center, s_leaf, n_leaves, lm, link_seed=123):
    s = np.vstack([s_center[None], np.tile(s_leaf, (n_leaves, 1))])
    return GraphDataset(s.copy(), s, link_seed, lm)


def test_link_frequencies_within_three_sigma():
    lm = build_link_model(2, 4, seed=3)
    s, s2 = np.array([0.8, -0.5]), np.array([1.2, -1.1])
    n = 100_000
    ds = _star_dataset(s, s2, n, lm)
    w = ds.link_weights(np.zeros(n, dtype=int), np.arange(1, n + 1))
    counts = np.bincount(w, minlength=5)[1:]
    p = link_prob(lm, s, s2)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma), (counts, n * p, sigma)


def test_link_weight_symmetric_stable_in_support():
    lm = build_link_model(3, 5, 0)
    ds = generate_dataset(LatentConfig("laplace", 3, 200), MixingNetwork.identity(3), lm, 8)
    W1, W2 = ds.dense_weights(), ds.dense_weights()
    assert np.array_equal(W1, W1.T)
    iu = np.triu_indices(200, 1)
    h1 = hashlib.sha256(W1[iu].tobytes()).hexdigest()
    h2 = hashlib.sha256(W2[iu].tobytes()).hexdigest()
    assert h1 == h2
    assert W1[iu].min() >= 1 and W1[iu].max() <= 5
    # scalar queries agree with the vectorized path and with the swapped order
    for i, j in [(0, 1), (5, 199), (42, 17)]:
        assert ds.link_weight(i, j) == ds.link_weight(j, i) == W1[i, j]


def test_single_state_always_one():
    lm = build_link_model(2, 1, 0)
    ds = generate_dataset(LatentConfig("gauss", 2, 30), MixingNetwork.identity(2), lm, 1)
    W = ds.dense_weights()
    assert np.all(W[np.triu_indices(30, 1)] == 1)


def test_self_link_rejected():
    ds = generate_dataset(LatentConfig("gauss", 2, 5), MixingNetwork.identity(2),
                          build_link_model(2, 3, 0), 1)
    with pytest.raises(ValueError):
        ds.link_weight(2, 2)
    with pytest.raises(IndexError):
        ds.link_weight(0, 5)


def test_pair_uniform_is_order_free_and_uniform():
    i = np.arange(50_000)
    j = i + 1
    u = pair_uniform(7, i, j)
    assert np.array_equal(u, pair_uniform(7, j, i))
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.005
    assert not np.array_equal(u, pair_uniform(8, i, j))


# ---------------------------------------------------------------- mixing + dataset


def test_identity_mixing_gives_x_equal_s():
    lm = build_link_model(3, 3, 0)
    cfg = LatentConfig("laplace", 3, 100)
    ds = generate_dataset(cfg, MixingNetwork.identity(3), lm, 2)
    pos = np.all(ds.s_true >= 0, axis=1)
    np.testing.assert_array_equal(ds.x[pos], ds.s_true[pos])


def test_mixing_conditioning_guard_and_shape():
    mix = build_mixing(4, 6, seed=1)
    assert mix.spec.layer_widths == (4, 6, 6, 6)
    assert mix.spec.activation == "leaky_relu" and mix.spec.slope == 0.2
    for name, w in mix.params.items():
        if name.startswith("W"):
            assert np.linalg.svd(w, compute_uv=False).min() > 1e-3
    with pytest.raises(ValueError):
        build_mixing(5, 4, seed=1)
    assert build_mixing(5, 4, seed=1, allow_noninjective=True).d_s == 5


def test_mixing_injective_probe():
    mix = build_mixing(4, 4, seed=0)
    s = sample_latents(LatentConfig("laplace", 4, 2000), 0)
    assert pdist(mix(s)).min() > 0.0


def test_dataset_deterministic_and_dimension_checks():
    lm = build_link_model(2, 3, 0)
    mix = build_mixing(2, 3, seed=0)
    cfg = LatentConfig("gauss", 2, 40)
    assert generate_dataset(cfg, mix, lm, 5) == generate_dataset(cfg, mix, lm, 5)
    with pytest.raises(ValueError):
        generate_dataset(LatentConfig("gauss", 3, 40), mix, lm, 5)


def test_dataset_file_roundtrip(tmp_path):
    lm = build_link_model(2, 3, 0)
    ds = generate_dataset(LatentConfig("gauss", 2, 25), build_mixing(2, 3, seed=0), lm, 5)
    path = tmp_path / "d.gca"
    save_dataset(path, ds)
    raw = path.read_bytes()
    assert raw[:4] == b"GCA1"
    back = load_dataset(path)
    assert back == ds
    assert np.array_equal(back.dense_weights(), ds.dense_weights())
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="bytes"):
        load_dataset(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_dataset(path)


def test_named_streams_are_independent():
    a = stream(1, "latents").standard_normal(5)
    b = stream(1, "batches").standard_normal(5)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, stream(1, "latents").standard_normal(5))
