import json

import numpy as np
import pytest

from voxsplat.gaussians import GaussianSet
from voxsplat.scene import (SceneError, SceneManifest, SnapshotError,
                            load_manifest, load_point_cloud, load_scene,
                            load_snapshot, save_depth, save_manifest,
                            save_point_cloud, save_snapshot)


def test_empty_scene_rejected():
    with pytest.raises(SceneError, match="empty scene"):
        SceneManifest(frames=[], foreground_box=np.array([[0, 0, 0], [1, 1, 1]]),
                      voxel_size=0.1)


def test_missing_manifest():
    with pytest.raises(SceneError, match="not found"):
        load_scene("/nonexistent/scene.json")


def test_resolution_mismatch_reports_frame(corridor, tmp_path):
    doc = json.loads((corridor["dir"] / "scene.json").read_text())
    doc["frames"][1]["width"] = 96
    doc["frames"][1]["height"] = 96
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    # point rasters at the real files
    for fr in doc["frames"]:
        fr["image"] = str(corridor["dir"] / fr["image"])
        fr["depth"] = str(corridor["dir"] / fr["depth"])
    bad.write_text(json.dumps(doc))
    with pytest.raises(SceneError, match="frame 1"):
        load_scene(bad)


def test_non_orthonormal_rotation_reports_frame(corridor, tmp_path):
    doc = json.loads((corridor["dir"] / "scene.json").read_text())
    mat = np.array(doc["frames"][2]["camera_to_world"]).reshape(4, 4)
    mat[0, 0] = 2.0
    doc["frames"][2]["camera_to_world"] = mat.reshape(16).tolist()
    for fr in doc["frames"]:
        fr["image"] = str(corridor["dir"] / fr["image"])
        fr["depth"] = str(corridor["dir"] / fr["depth"])
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(SceneError, match="frame 2"):
        load_scene(bad)


def test_manifest_round_trip(corridor, tmp_path):
    manifest = corridor["manifest"]
    path = tmp_path / "copy.json"
    save_manifest(manifest, path)
    again = load_manifest(path)
    assert len(again.frames) == len(manifest.frames)
    assert np.array_equal(again.foreground_box, manifest.foreground_box)
    assert again.voxel_size == manifest.voxel_size
    for a, b in zip(again.frames, manifest.frames):
        assert a.image_path == b.image_path
        assert np.array_equal(a.camera_to_world, b.camera_to_world)
        assert a.intrinsics == tuple(b.intrinsics)


def test_scene_loads_with_finite_depth_on_objects(corridor):
    frames = corridor["frames"]
    assert len(frames) == 6
    for f in frames:
        assert f.image.shape == (48, 48, 3)
        valid = f.valid_depth
        assert valid.any()
        assert np.isfinite(f.depth[valid]).all()


def test_depth_loader_marks_nonpositive_invalid(tmp_path):
    from voxsplat.scene import load_depth
    raw = np.array([[1.0, 0.0], [-2.0, np.nan]], dtype=np.float32)
    save_depth(tmp_path / "d.npy", raw)
    d = load_depth(tmp_path / "d.npy")
    assert d[0, 0] == 1.0
    assert np.isnan(d[0, 1]) and np.isnan(d[1, 0]) and np.isnan(d[1, 1])


def _random_set(rng, n):
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianSet(rng.normal(size=(n, 3)), quats, rng.normal(size=(n, 3)),
                       rng.normal(size=n), rng.normal(size=(n, 12)),
                       rng.random(n) < 0.5)


def test_snapshot_round_trip_bit_exact(tmp_path, rng):
    g = _random_set(rng, 1000)
    path = tmp_path / "g.gauss"
    save_snapshot(g, path)
    h = load_snapshot(path)
    for name in ("means", "quaternions", "log_scales", "opacity_logits", "sh"):
        assert np.array_equal(getattr(g, name), getattr(h, name))
    assert np.array_equal(g.foreground, h.foreground)


def test_snapshot_empty_round_trip(tmp_path):
    path = tmp_path / "empty.gauss"
    save_snapshot(GaussianSet.empty(), path)
    h = load_snapshot(path)
    assert len(h) == 0


def test_snapshot_corrupted_header(tmp_path, rng):
    path = tmp_path / "g.gauss"
    save_snapshot(_random_set(rng, 10), path)
    data = bytearray(path.read_bytes())
    data[3] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(SnapshotError, match="magic"):
        load_snapshot(path)


def test_snapshot_version_mismatch(tmp_path, rng):
    path = tmp_path / "g.gauss"
    save_snapshot(_random_set(rng, 10), path)
    data = bytearray(path.read_bytes())
    data[8] = 99
    path.write_bytes(bytes(data))
    with pytest.raises(SnapshotError, match="version"):
        load_snapshot(path)


def test_snapshot_truncated(tmp_path, rng):
    path = tmp_path / "g.gauss"
    save_snapshot(_random_set(rng, 10), path)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) - 7])
    with pytest.raises(SnapshotError, match="truncated"):
        load_snapshot(path)


def test_snapshot_rejects_nonfinite(tmp_path, rng):
    g = _random_set(rng, 4)
    g.means[2, 1] = np.nan
    with pytest.raises(ValueError, match="primitive 2"):
        save_snapshot(g, tmp_path / "bad.gauss")


def test_snapshot_rejects_denormalized_quaternion(tmp_path, rng):
    g = _random_set(rng, 4)
    g.quaternions[1] *= 1.5
    path = tmp_path / "g.gauss"
    save_snapshot(g, path)
    with pytest.raises(SnapshotError, match="unit"):
        load_snapshot(path)


def test_point_cloud_round_trip(tmp_path, rng):
    pos = rng.normal(size=(77, 3)).astype(np.float32).astype(np.float64)
    col = rng.random((77, 3)).astype(np.float32).astype(np.float64)
    path = tmp_path / "cloud.pts"
    save_point_cloud(path, pos, col)
    pos2, col2 = load_point_cloud(path)
    assert np.array_equal(pos, pos2)
    assert np.array_equal(col, col2)
