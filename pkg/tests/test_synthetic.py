import numpy as np
import pytest

from voxsplat.cameras import RigidPose
from voxsplat.scene import SceneError, load_scene
from voxsplat.synthetic import (SyntheticSpec, box, cast_rays, corridor_spec,
                                make_synthetic_scene, render_view,
                                surface_distance)


def unit_box_spec(**overrides):
    fg = np.array([[-2.0, -2.0, 0.0], [2.0, 2.0, 8.0]])
    defaults = dict(primitives=[box((-0.5, -0.5, 4.5), (0.5, 0.5, 5.5), (0.8, 0.2, 0.2))],
                    foreground_box=fg, width=48, height=48, n_train=2, n_holdout=1,
                    path_start=np.array([0.0, 0.0, 0.0]),
                    path_end=np.array([0.0, 0.0, 0.5]), lateral_amplitude=0.0)
    defaults.update(overrides)
    return SyntheticSpec(**defaults)


def test_center_pixel_depth_unit_box():
    # unit box centered 5 m ahead: near face at 4.5 m from the camera
    spec = unit_box_spec()
    cam = spec.camera()
    _, depth = render_view(spec, cam, RigidPose(np.eye(3), np.array([0.0, 0.0, 0.0])))
    assert depth[24, 24] == pytest.approx(4.5, abs=1e-9)


def test_zero_noise_depth_matches_raycast_oracle(tmp_path):
    spec = corridor_spec(width=32, height=32, n_train=3, noise_std=0.0)
    make_synthetic_scene(spec, 5, tmp_path)
    _, frames = load_scene(tmp_path / "scene.json")
    cam = spec.camera()
    for f in frames:
        us, vs = np.meshgrid(np.arange(32, dtype=np.float64),
                             np.arange(32, dtype=np.float64))
        dirs_cam = np.stack([(us.ravel() - cam.cx) / cam.fx,
                             (vs.ravel() - cam.cy) / cam.fy,
                             np.ones(us.size)], axis=1)
        dirs = dirs_cam @ f.pose.rotation.T
        t, _ = cast_rays(spec.primitives,
                         np.broadcast_to(f.pose.center, dirs.shape), dirs)
        expected = np.where(np.isfinite(t), t, np.nan).reshape(32, 32)
        got = f.depth
        both = np.isfinite(expected) & np.isfinite(got)
        assert (np.isfinite(expected) == np.isfinite(got)).mean() > 0.999
        assert np.abs(expected[both] - got[both]).max() < 1e-5


def test_generation_deterministic_for_fixed_seed(tmp_path):
    spec = corridor_spec(width=32, height=32, n_train=3, noise_std=0.05)
    make_synthetic_scene(spec, 9, tmp_path / "a")
    make_synthetic_scene(spec, 9, tmp_path / "b")
    _, fa = load_scene(tmp_path / "a" / "scene.json")
    _, fb = load_scene(tmp_path / "b" / "scene.json")
    for x, y in zip(fa, fb):
        assert np.array_equal(x.image, y.image)
        assert np.array_equal(np.nan_to_num(x.depth), np.nan_to_num(y.depth))


def test_noise_statistics_half_normal(tmp_path):
    # mean |depth - analytic| for additive N(0, 0.05) is 0.05*sqrt(2/pi) = 0.0399
    spec = unit_box_spec(width=128, height=128, noise_std=0.05,
                         primitives=[box((-8.0, -8.0, 4.0), (8.0, 8.0, 4.6), (0.5, 0.5, 0.5))])
    make_synthetic_scene(spec, 3, tmp_path)
    _, frames = load_scene(tmp_path / "scene.json")
    spec0 = unit_box_spec(width=128, height=128, noise_std=0.0,
                          primitives=spec.primitives)
    cam = spec0.camera()
    errs = []
    for f in frames:
        _, exact = render_view(spec0, cam, f.pose)
        both = np.isfinite(exact) & np.isfinite(f.depth)
        errs.append(np.abs(f.depth[both] - exact[both]))
    errs = np.concatenate(errs)
    assert errs.size >= 10_000
    assert 0.03 <= errs.mean() <= 0.05


def test_camera_path_through_geometry_rejected(tmp_path):
    spec = unit_box_spec(path_start=np.array([0.0, 0.0, 4.0]),
                         path_end=np.array([0.0, 0.0, 6.0]))
    with pytest.raises(SceneError, match="intersects"):
        make_synthetic_scene(spec, 0, tmp_path)


def test_primitive_count_bounds():
    with pytest.raises(SceneError, match="between 1 and 16"):
        SyntheticSpec(primitives=[], foreground_box=np.zeros((2, 3)))


def test_surface_distance_box_and_sphere():
    from voxsplat.synthetic import sphere
    prims = [box((0, 0, 0), (1, 1, 1), (1, 1, 1)), sphere((5, 0, 0), 1.0, (1, 1, 1))]
    pts = np.array([[0.5, 0.5, 0.5],   # inside box, 0.5 from every face
                    [2.0, 0.5, 0.5],   # 1.0 outside box face
                    [5.0, 0.0, 2.0]])  # 1.0 outside sphere
    d = surface_distance(prims, pts)
    assert d[0] == pytest.approx(0.5)
    assert d[1] == pytest.approx(1.0)
    assert d[2] == pytest.approx(1.0)


def test_holdout_views_have_exact_depth(tmp_path):
    spec = corridor_spec(width=32, height=32, n_train=3, noise_std=0.1)
    make_synthetic_scene(spec, 4, tmp_path)
    _, holdout = load_scene(tmp_path / "holdout.json")
    spec0 = corridor_spec(width=32, height=32, n_train=3, noise_std=0.0)
    cam = spec0.camera()
    for f in holdout:
        _, exact = render_view(spec0, cam, f.pose)
        both = np.isfinite(exact) & np.isfinite(f.depth)
        assert np.abs(exact[both] - f.depth[both]).max() < 1e-5
