import numpy as np
import pytest

from helpers import fd_check, make_corridor
from voxsplat.background import (UP, BackgroundHead, background_backward,
                                 build_shell, decode_background)
from voxsplat.cameras import RigidPose
from voxsplat.gaussians import RenderBundle
from voxsplat.ibr import SH_C0
from voxsplat.rasterizer import render


def test_shell_points_at_radius():
    shell = build_shell(2048, 100.0, center=np.array([0.0, 0.0, 5.0]))
    means = shell.place(shell.anchor)
    d = np.linalg.norm(means - shell.center, axis=1)
    assert np.abs(d - 100.0).max() < 1e-6


def test_shell_directions_upper_hemisphere():
    shell = build_shell(512, 100.0, center=np.zeros(3))
    elev = shell.directions @ UP
    assert np.all(elev >= 0.0)
    assert np.abs(np.linalg.norm(shell.directions, axis=1) - 1).max() < 1e-12


def test_shell_spacing_uniformity():
    # nearest-neighbor spacing stays tight for a low-discrepancy pattern
    for n in (256, 1024):
        shell = build_shell(n, 100.0, center=np.zeros(3))
        pts = shell.place(np.zeros(3))
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        nn = np.sqrt(d2.min(axis=1))
        assert nn.std() / nn.mean() < 0.35


def test_shell_minimum_points():
    with pytest.raises(ValueError, match="at least 64"):
        build_shell(32, 100.0, center=np.zeros(3))


def test_shell_deterministic():
    a = build_shell(256, 100.0, center=np.zeros(3))
    b = build_shell(256, 100.0, center=np.zeros(3))
    assert np.array_equal(a.directions, b.directions)
    assert np.array_equal(a.s_init, b.s_init)


def test_shell_follows_camera_exactly():
    shell = build_shell(256, 100.0, center=np.array([0.0, 0.0, 5.0]),
                        anchor=np.zeros(3))
    base = shell.place(shell.anchor)
    step = np.array([0.0, 0.0, 5.0])
    moved = shell.place(shell.anchor + step)
    assert np.array_equal(moved, base + step)


def _bg_setup(tmp_path, n_points=128):
    spec, manifest, frames = make_corridor(tmp_path, n_train=4)
    box = manifest.foreground_box
    shell = build_shell(n_points, 100.0, center=0.5 * (box[0] + box[1]),
                        anchor=frames[0].pose.center)
    head = BackgroundHead(k_refs=3, seed=0)
    return spec, frames, shell, head


def test_background_opacity_exactly_one(tmp_path):
    _, frames, shell, head = _bg_setup(tmp_path)
    bundle, _ = decode_background(shell, frames, head, frames[0].pose.center)
    assert np.all(bundle.alphas == 1.0)
    assert np.all(bundle.quaternions == np.array([1.0, 0, 0, 0]))
    assert not bundle.foreground.any()


def test_background_zero_weight_head_defaults(tmp_path):
    _, frames, shell, head = _bg_setup(tmp_path)
    for w in head.mlp.weights:
        w[:] = 0.0
    bundle, _ = decode_background(shell, frames, head, frames[0].pose.center)
    # zero raw outputs: color = logistic(0) = 0.5, scale residual = 0
    dc = bundle.sh.reshape(-1, 4, 3)[:, 0]
    assert np.allclose(dc * SH_C0 + 0.5, 0.5)
    assert np.allclose(bundle.scales, shell.s_init[:, None])


def test_background_render_translation_invariant(tmp_path):
    # decode once, then rigidly translate both shell output and camera: the
    # rendered background must be unchanged (FP association noise only)
    _, frames, shell, head = _bg_setup(tmp_path)
    f = frames[0]
    bundle, _ = decode_background(shell, frames, head, f.pose.center)
    out_a, _ = render(bundle, f.camera, f.pose)
    t = np.array([0.0, 0.0, 5.0])
    moved = RenderBundle(bundle.means + t, bundle.quaternions, bundle.scales,
                         bundle.alphas, bundle.sh, bundle.foreground)
    pose_b = RigidPose(f.pose.rotation, f.pose.translation + t)
    out_b, _ = render(moved, f.camera, pose_b)
    assert np.abs(out_a.color - out_b.color).max() < 1e-9
    assert np.abs(out_a.final_t - out_b.final_t).max() < 1e-9


def test_background_gradients(tmp_path, rng):
    _, frames, shell, head = _bg_setup(tmp_path)
    d_color = rng.normal(size=(len(shell.s_init), 3))
    d_scales = rng.normal(size=(len(shell.s_init), 3))

    def forward():
        bundle, ctx = decode_background(shell, frames, head, frames[0].pose.center)
        color = ctx["color"]
        return float((color * d_color).sum() + (bundle.scales * d_scales).sum())

    _, ctx = decode_background(shell, frames, head, frames[0].pose.center)
    grads = head.mlp.zero_like_grads("bg")
    background_backward(head, ctx, d_color, d_scales, grads)

    def loss():
        return forward()

    for name, arr in head.param_items():
        fails = fd_check(loss, arr, grads[name], rng, samples=10, eps=1e-4)
        assert not fails, f"{name}: {fails[:3]}"
