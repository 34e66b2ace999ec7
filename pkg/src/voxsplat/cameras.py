"""Pinhole projection, rigid poses, and cross-view depth reprojection.

Conventions used throughout the package (asserted once in the test suite):
camera x points right, y down, z forward; poses are camera-to-world; pixel
(row r, col c) has continuous image coordinates (u=c, v=r), so bilinear reads
use integer-centered samples.  Depth rasters store camera-space z in meters.
"""

from dataclasses import dataclass

import numpy as np

ROT_TOL = 1e-5


@dataclass(frozen=True)
class Pinhole:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def intrinsics(self):
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass(frozen=True)
class RigidPose:
    """Camera-to-world transform: x_world = rotation @ x_cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(r @ r.T, np.eye(3), atol=ROT_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ROT_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("pose matrix must be 4x4")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        return RigidPose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other):
        """Apply ``other`` first, then ``self``."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def transform(self, pts):
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    @property
    def center(self):
        return self.translation


def unproject(pixels, depths, cam, pose):
    """Lift pixels with camera-space depth to world points."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    d = np.atleast_1d(np.asarray(depths, dtype=np.float64))
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    x = (px[:, 0] - cam.cx) / cam.fx * d
    y = (px[:, 1] - cam.cy) / cam.fy * d
    pts_cam = np.stack([x, y, d], axis=1)
    out = pose.transform(pts_cam)
    return out[0] if np.asarray(pixels).ndim == 1 else out


def project(points, cam, pose):
    """World points to (pixel, camera depth, in-front flag).

    Pixels may fall outside the image; callers clip.  Points with camera
    depth <= 1e-6 are flagged behind the camera (their pixels are invalid).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    inv = pose.inverse()
    cam_pts = inv.transform(pts)
    z = cam_pts[:, 2]
    in_front = z > 1e-6
    safe_z = np.where(in_front, z, 1.0)
    u = cam.fx * cam_pts[:, 0] / safe_z + cam.cx
    v = cam.fy * cam_pts[:, 1] / safe_z + cam.cy
    px = np.stack([u, v], axis=1)
    if np.asarray(points).ndim == 1:
        return px[0], z[0], bool(in_front[0])
    return px, z, in_front


def valid_depth_mask(depth):
    return np.isfinite(depth) & (depth > 0)


def reproject_depth(depth_i, cam_i, pose_i, cam_j, pose_j):
    """Project frame i's depth raster into frame j.

    Returns (src_idx, target_uv, depth_in_j): the flat indices of valid
    source pixels whose reprojection lands in front of camera j and inside
    its image, their continuous target pixels, and their z-depth in j.
    """
    h, w = depth_i.shape
    valid = valid_depth_mask(depth_i)
    src_idx = np.flatnonzero(valid)
    if src_idx.size == 0:
        return src_idx, np.zeros((0, 2)), np.zeros(0)
    vs, us = np.unravel_index(src_idx, (h, w))
    px = np.stack([us, vs], axis=1).astype(np.float64)
    world = unproject(px, depth_i.reshape(-1)[src_idx], cam_i, pose_i)
    uv, z, in_front = project(world, cam_j, pose_j)
    inside = (in_front & (uv[:, 0] >= 0) & (uv[:, 0] <= cam_j.width - 1)
              & (uv[:, 1] >= 0) & (uv[:, 1] <= cam_j.height - 1))
    return src_idx[inside], uv[inside], z[inside]


def sample_bilinear(raster, uv):
    """Bilinear read of an (H,W) or (H,W,C) raster at continuous (u,v).

    Coordinates clamp to the image border (integer-centered convention).
    """
    r = np.asarray(raster, dtype=np.float64)
    single = np.asarray(uv).ndim == 1
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    h, w = r.shape[:2]
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = u - u0
    fv = v - v0
    # NaN/inf raster entries (invalid depth) propagate into the sample
    with np.errstate(invalid="ignore"):
        if r.ndim == 2:
            out = (r[v0, u0] * (1 - fu) * (1 - fv) + r[v0, u1] * fu * (1 - fv)
                   + r[v1, u0] * (1 - fu) * fv + r[v1, u1] * fu * fv)
        else:
            wu = ((1 - fu) * (1 - fv))[:, None]
            out = (r[v0, u0] * wu + r[v0, u1] * (fu * (1 - fv))[:, None]
                   + r[v1, u0] * ((1 - fu) * fv)[:, None] + r[v1, u1] * (fu * fv)[:, None])
    return out[0] if single else out
