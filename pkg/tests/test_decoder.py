import numpy as np
import pytest

from helpers import fd_check
from voxsplat.decoder import (GeometryHeads, build_covariance, decode_backward,
                              decode_geometry, decode_offsets,
                              decode_opacity_covariance, knn_scale_init)
from voxsplat.volume import FeatureVolume


def dense_volume(rng, side=16, channels=4, voxel=0.1):
    keys = np.arange(side ** 3, dtype=np.int64)
    feats = rng.normal(0, 0.5, size=(side ** 3, channels))
    return FeatureVolume(keys, feats, np.array([side] * 3), np.zeros(3), voxel)


def zero_heads(channels=4):
    heads = GeometryHeads(channels, seed=0)
    for mlp in (heads.opacity, heads.covariance, heads.position):
        for w in mlp.weights:
            w[:] = 0.0
        for b in mlp.biases[:-1]:
            b[:] = 0.0
    heads.opacity.biases[-1][:] = 0.0
    heads.position.biases[-1][:] = 0.0
    heads.covariance.biases[-1][:] = np.array([0, 0, 0, 1, 0, 0, 0.0])
    return heads


def test_knn_scale_init_collinear():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    s = knn_scale_init(pts, k=2)
    assert s[1] == pytest.approx(1.0)
    assert s[0] == pytest.approx(1.5)


def test_knn_scale_init_lattice_interior():
    h = 0.25
    g = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), -1).reshape(-1, 3) * h
    s = knn_scale_init(g, k=6)
    interior = np.all((g > h / 2) & (g < 4 * h - h / 2), axis=1)
    assert np.allclose(s[interior], h)


def test_knn_scale_init_duplicate_floor():
    pts = np.zeros((10, 3))
    s = knn_scale_init(pts, k=3)
    assert np.all(s == 1e-4)


def test_knn_grid_matches_bruteforce(rng):
    pts = rng.uniform(0, 3, (5000, 3))
    s = knn_scale_init(pts, k=3)
    d2 = None
    oracle = np.empty(5000)
    for i in range(0, 5000, 500):
        d2 = ((pts[i:i + 500, None, :] - pts[None, :, :]) ** 2).sum(-1)
        part = np.sort(np.partition(d2, 3, axis=1)[:, :4], axis=1)[:, 1:]
        oracle[i:i + 500] = np.sqrt(part).mean(axis=1)
    assert np.abs(s - np.maximum(oracle, 1e-4)).max() < 1e-12


def test_zero_position_head_returns_initial_means(rng):
    vol = dense_volume(rng)
    heads = zero_heads()
    mu = rng.uniform(0.3, 1.2, (50, 3))
    means, state = decode_offsets(vol, heads, mu, recursions=2)
    assert np.array_equal(means, mu)
    assert np.all(state == 0.0)


def test_offsets_bounded_by_voxel_size(rng):
    vol = dense_volume(rng)
    heads = GeometryHeads(4, seed=7)
    for mlp in (heads.position,):
        for w in mlp.weights:
            w[:] = rng.normal(0, 5.0, w.shape)  # adversarially large weights
    mu = rng.uniform(0.2, 1.4, (200, 3))
    means, state = decode_offsets(vol, heads, mu, recursions=3)
    # tanh < 1 strictly, but float64 saturates to exactly 1 for huge inputs
    assert np.abs(state).max() <= vol.voxel_size
    assert np.abs(means - mu).max() <= vol.voxel_size + 1e-12
    moderate = GeometryHeads(4, seed=8)
    _, state2 = decode_offsets(vol, moderate, mu, recursions=2)
    assert np.abs(state2).max() < vol.voxel_size


def test_zero_heads_give_default_attributes(rng):
    vol = dense_volume(rng)
    heads = zero_heads()
    mu = rng.uniform(0.3, 1.2, (20, 3))
    s_init = np.full(20, 0.07)
    alphas, quats, scales = decode_opacity_covariance(vol, heads, mu, s_init)
    assert np.allclose(alphas, 0.5)
    assert np.allclose(quats, [[1, 0, 0, 0]] * 20)
    assert np.allclose(scales, s_init[:, None])


def test_decoded_ranges(rng):
    vol = dense_volume(rng)
    heads = GeometryHeads(4, seed=3)
    mu = rng.uniform(0.3, 1.2, (100, 3))
    s_init = rng.uniform(0.02, 0.2, 100)
    alphas, quats, scales = decode_opacity_covariance(vol, heads, mu, s_init)
    assert np.all((alphas > 0) & (alphas < 1))
    assert np.abs(np.linalg.norm(quats, axis=1) - 1).max() < 1e-6
    assert np.all(scales > 0)


def test_decode_gradients_match_finite_differences(rng):
    vol = dense_volume(rng, side=8)
    heads = GeometryHeads(4, seed=5)
    mu = rng.uniform(0.2, 0.6, (30, 3))
    s_init = rng.uniform(0.05, 0.15, 30)
    prev = np.zeros_like(mu)
    d_means = rng.normal(size=(30, 3))
    d_alphas = rng.normal(size=30)
    d_quats = rng.normal(size=(30, 4))
    d_scales = rng.normal(size=(30, 3))

    def loss():
        dec, _ = decode_geometry(vol, heads, mu, prev, s_init)
        return float((dec.means * d_means).sum() + (dec.alphas * d_alphas).sum()
                     + (dec.quaternions * d_quats).sum() + (dec.scales * d_scales).sum())

    decoded, ctx = decode_geometry(vol, heads, mu, prev, s_init)
    grads = {}
    for prefix, mlp in (("pos", heads.position), ("opa", heads.opacity),
                        ("cov", heads.covariance)):
        grads.update(mlp.zero_like_grads(prefix))
    df = decode_backward(heads, ctx, d_means, d_alphas, d_quats, d_scales, grads)
    for name, arr in heads.param_items():
        fails = fd_check(loss, arr, grads[name], rng, samples=8, eps=1e-4)
        assert not fails, f"{name}: {fails[:3]}"
    # feature gradient via the volume features themselves
    fails = fd_check(loss, vol.features,
                     vol.query_adjoint(mu + prev, df), rng, samples=20, eps=1e-4)
    assert not fails


def test_recursion_uses_buffer_location(rng):
    # crafted volume: feature value depends on position along x, so a nonzero
    # buffered offset must change the decoded offset
    vol = dense_volume(rng, side=8)
    heads = GeometryHeads(4, seed=9)
    mu = np.array([[0.35, 0.35, 0.35]])
    m1, s1 = decode_offsets(vol, heads, mu, state=None, recursions=1)
    m2, s2 = decode_offsets(vol, heads, mu, state=None, recursions=2)
    assert not np.allclose(s1, s2)


def test_build_covariance_identity_rotation():
    sigma = build_covariance(np.array([[1.0, 0, 0, 0]]), np.array([[0.2, 0.3, 0.4]]))
    assert np.allclose(sigma[0], np.diag([0.04, 0.09, 0.16]))


def test_build_covariance_z_rotation_swaps_axes():
    q = np.array([[np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]])
    sigma = build_covariance(q, np.array([[0.2, 0.3, 0.4]]))
    assert np.allclose(sigma[0], np.diag([0.09, 0.04, 0.16]), atol=1e-12)


def test_build_covariance_eigenvalues_match_scales(rng):
    for _ in range(50):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        s = rng.uniform(0.05, 0.8, 3)
        sigma = build_covariance(q[None], s[None])[0]
        assert np.allclose(sigma, sigma.T, atol=1e-12)
        ev = np.sort(np.linalg.eigvalsh(sigma))
        assert np.allclose(ev, np.sort(s ** 2), atol=1e-6)
        np.linalg.cholesky(sigma + 1e-15 * np.eye(3))  # PSD
