import numpy as np
import pytest

from voxsplat.cameras import (Pinhole, RigidPose, project, reproject_depth,
                              sample_bilinear, unproject)

CAM = Pinhole(50.0, 50.0, 32.0, 32.0, 64, 64)


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def test_principal_ray_unprojects_on_axis():
    w = unproject([CAM.cx, CAM.cy], 7.5, CAM, RigidPose.identity())
    assert np.allclose(w, [0, 0, 7.5], atol=1e-12)


def test_project_on_axis_point():
    px, depth, in_front = project(np.array([0.0, 0.0, 5.0]), CAM, RigidPose.identity())
    assert np.allclose(px, [CAM.cx, CAM.cy])
    assert depth == pytest.approx(5.0)
    assert in_front


def test_point_behind_camera_flagged():
    _, depth, in_front = project(np.array([0.0, 0.0, -1.0]), CAM, RigidPose.identity())
    assert not in_front
    assert depth < 0


def test_unproject_rejects_nonpositive_depth():
    with pytest.raises(ValueError):
        unproject([10.0, 10.0], 0.0, CAM, RigidPose.identity())


def test_project_unproject_round_trip():
    rng = np.random.default_rng(0)
    pose = RigidPose(rot_z(0.3) @ np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0.0]]),
                     np.array([0.4, -1.2, 2.0]))
    px = np.stack([rng.uniform(0, 63, 1000), rng.uniform(0, 63, 1000)], axis=1)
    depth = rng.uniform(0.5, 30.0, 1000)
    world = unproject(px, depth, CAM, pose)
    px2, depth2, in_front = project(world, CAM, pose)
    assert np.all(in_front)
    assert np.abs(px2 - px).max() < 1e-5
    assert np.abs(depth2 - depth).max() < 1e-5


def test_translation_equivariance():
    shifted = RigidPose(np.eye(3), np.array([1.0, 0.0, 0.0]))
    a = unproject([10.0, 20.0], 3.0, CAM, RigidPose.identity())
    b = unproject([10.0, 20.0], 3.0, CAM, shifted)
    assert np.allclose(b - a, [1.0, 0.0, 0.0], atol=1e-12)


def test_project_matches_homogeneous_matrix_oracle():
    rng = np.random.default_rng(1)
    pose = RigidPose(rot_z(-0.7), np.array([2.0, 0.3, -1.0]))
    k = np.array([[CAM.fx, 0, CAM.cx], [0, CAM.fy, CAM.cy], [0, 0, 1.0]])
    p_mat = k @ np.linalg.inv(pose.matrix())[:3]  # 3x4 projection matrix
    pts = rng.uniform(-4, 4, (200, 3)) + np.array([0, 0, 8.0])
    px, depth, in_front = project(pts, CAM, pose)
    hom = np.concatenate([pts, np.ones((200, 1))], axis=1) @ p_mat.T
    keep = in_front
    oracle = hom[keep, :2] / hom[keep, 2:3]
    assert np.abs(px[keep] - oracle).max() < 1e-6
    assert np.abs(depth[keep] - hom[keep, 2]).max() < 1e-9


def test_pose_compose_inverse_identity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        r = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])
        pose = RigidPose(r, rng.normal(size=3))
        ident = pose.compose(pose.inverse())
        assert np.abs(ident.rotation - np.eye(3)).max() < 1e-6
        assert np.abs(ident.translation).max() < 1e-6


def test_pose_composition_associative():
    rng = np.random.default_rng(3)
    poses = [RigidPose(rot_z(rng.uniform(-1, 1)), rng.normal(size=3)) for _ in range(3)]
    a, b, c = poses
    lhs = a.compose(b).compose(c)
    rhs = a.compose(b.compose(c))
    assert np.abs(lhs.matrix() - rhs.matrix()).max() < 1e-12


def test_rejects_non_orthonormal_rotation():
    bad = np.eye(3)
    bad[0, 0] = 1.1
    with pytest.raises(ValueError):
        RigidPose(bad, np.zeros(3))


def test_reproject_identity_view(corridor):
    f = corridor["frames"][0]
    src_idx, uv, depth = reproject_depth(f.depth, f.camera, f.pose, f.camera, f.pose)
    vs, us = np.unravel_index(src_idx, f.depth.shape)
    assert np.abs(uv[:, 0] - us).max() < 1e-6
    assert np.abs(uv[:, 1] - vs).max() < 1e-6
    assert np.abs(depth - f.depth.reshape(-1)[src_idx]).max() < 1e-6


def test_reproject_two_cameras_plane_oracle():
    # fronto-parallel plane at z = 10 seen by two cameras 0.5 m apart
    h = w = 64
    plane_z = 10.0
    depth_i = np.full((h, w), plane_z)
    pose_i = RigidPose.identity()
    pose_j = RigidPose(np.eye(3), np.array([0.5, 0.0, 0.0]))
    src_idx, uv, depth_j = reproject_depth(depth_i, CAM, pose_i, CAM, pose_j)
    assert src_idx.size > 0
    assert np.abs(depth_j - plane_z).max() < 1e-4


def test_reproject_drops_points_behind_target():
    depth_i = np.full((8, 8), 2.0)
    cam = Pinhole(10.0, 10.0, 4.0, 4.0, 8, 8)
    pose_i = RigidPose.identity()
    # target camera 5 m ahead looking the same way: the plane is behind it
    pose_j = RigidPose(np.eye(3), np.array([0.0, 0.0, 5.0]))
    src_idx, _, _ = reproject_depth(depth_i, cam, pose_i, cam, pose_j)
    assert src_idx.size == 0


def test_bilinear_matches_exact_lattice_and_midpoint():
    img = np.arange(16, dtype=np.float64).reshape(4, 4)
    assert sample_bilinear(img, [2.0, 1.0]) == pytest.approx(img[1, 2])
    assert sample_bilinear(img, [1.5, 2.0]) == pytest.approx(0.5 * (img[2, 1] + img[2, 2]))
