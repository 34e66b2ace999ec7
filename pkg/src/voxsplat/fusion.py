"""Global point-cloud initialization from per-frame depth.

Per-frame depths are screened with a cross-view consistency check, fused by
unprojection into world space, cleaned with a statistical k-NN filter, and
reduced with a uniform voxel downsample (one centroid per occupied voxel).
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .cameras import reproject_depth, sample_bilinear, unproject

CONSISTENCY_SIGMA = 0.2  # meters


class FusionError(Exception):
    pass


@dataclass
class FusedCloud:
    positions: np.ndarray     # (N, 3) meters, world
    colors: np.ndarray        # (N, 3) in [0, 1]
    source_frame: np.ndarray  # (N,) int

    def __len__(self):
        return self.positions.shape[0]


def consistency_mask(frame_i, frame_j, sigma=CONSISTENCY_SIGMA):
    """Depth agreement of frame i's pixels reprojected into frame j.

    Returns (keep, decided): ``decided`` is False where the pixel is invalid
    or its reprojection leaves frame j (no verdict from this neighbor).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = frame_i.depth.shape
    keep = np.zeros(h * w, dtype=bool)
    decided = np.zeros(h * w, dtype=bool)
    src_idx, uv, proj_depth = reproject_depth(frame_i.depth, frame_i.camera,
                                              frame_i.pose, frame_j.camera,
                                              frame_j.pose)
    if src_idx.size == 0:
        return keep.reshape(h, w), decided.reshape(h, w)
    stored = sample_bilinear(np.nan_to_num(frame_j.depth, nan=np.inf), uv)
    ok = np.isfinite(stored)
    agree = np.abs(proj_depth - stored) < sigma
    decided[src_idx[ok]] = True
    keep[src_idx[ok & agree]] = True
    return keep.reshape(h, w), decided.reshape(h, w)


def frame_masks(frames, sigma=CONSISTENCY_SIGMA, max_neighbors=2):
    """Per-frame keep masks from the nearest distinct-pose neighbors.

    Pixels left undecided by every checked neighbor are kept (conservative).
    """
    centers = np.stack([f.pose.center for f in frames])
    masks = []
    for i, frame in enumerate(frames):
        valid = frame.valid_depth
        if len(frames) == 1:
            masks.append(valid)
            continue
        dists = np.linalg.norm(centers - centers[i], axis=1)
        order = np.argsort(dists, kind="stable")
        neighbors = [j for j in order if j != i and dists[j] > 1e-9][:max_neighbors]
        if not neighbors:
            masks.append(valid)
            continue
        keep = np.zeros_like(valid)
        undecided = valid.copy()
        for j in neighbors:
            k, d = consistency_mask(frame, frames[j], sigma)
            newly = undecided & d
            keep |= newly & k
            undecided &= ~d
        masks.append(keep | undecided)
    return masks


def fuse(frames, masks, foreground_box):
    """Union of unprojected masked pixels with their colors.

    Points outside the foreground box are returned separately as background
    candidates rather than silently dropped.
    """
    box = np.asarray(foreground_box, dtype=np.float64).reshape(2, 3)
    pos, col, src = [], [], []
    for frame, mask in zip(frames, masks):
        take = mask & frame.valid_depth
        idx = np.flatnonzero(take)
        if idx.size == 0:
            continue
        vs, us = np.unravel_index(idx, frame.depth.shape)
        px = np.stack([us, vs], axis=1).astype(np.float64)
        world = unproject(px, frame.depth.reshape(-1)[idx], frame.camera, frame.pose)
        pos.append(world)
        col.append(frame.image.reshape(-1, 3)[idx])
        src.append(np.full(idx.size, frame.index, dtype=np.int64))
    if not pos:
        raise FusionError("no valid geometry after masking")
    positions = np.concatenate(pos)
    colors = np.concatenate(col)
    source = np.concatenate(src)
    inside = np.all((positions >= box[0]) & (positions <= box[1]), axis=1)
    cloud = FusedCloud(positions[inside], colors[inside], source[inside])
    outside = FusedCloud(positions[~inside], colors[~inside], source[~inside])
    if len(cloud) == 0:
        raise FusionError("no valid geometry inside the foreground box")
    return cloud, outside


def statistical_outlier_filter(cloud, k_neighbors=20, std_ratio=2.0):
    """Drop points whose mean k-NN distance exceeds mean + ratio * std."""
    n = len(cloud)
    if n <= k_neighbors:
        raise FusionError(f"cloud of {n} points is too small for k={k_neighbors}")
    mean_d = kernels.mean_knn_distance(cloud.positions, k_neighbors)
    std = float(mean_d.std())
    if std == 0.0:
        return cloud
    cutoff = float(mean_d.mean()) + std_ratio * std
    keep = mean_d <= cutoff
    return FusedCloud(cloud.positions[keep], cloud.colors[keep],
                      cloud.source_frame[keep])


def uniform_voxel_downsample(cloud, voxel=0.1):
    """One point per occupied voxel: member centroid with averaged color."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    # lexicographic voxel key; offsets keep the packed key non-negative
    mins = keys.min(axis=0)
    rel = keys - mins
    spans = rel.max(axis=0) + 1
    lin = (rel[:, 0] * spans[1] + rel[:, 1]) * spans[2] + rel[:, 2]
    order = np.argsort(lin, kind="stable")
    lin_sorted = lin[order]
    uniq, starts = np.unique(lin_sorted, return_index=True)
    bounds = np.append(starts, len(cloud))
    pos = np.add.reduceat(cloud.positions[order], starts) / np.diff(bounds)[:, None]
    col = np.add.reduceat(cloud.colors[order], starts) / np.diff(bounds)[:, None]
    src = cloud.source_frame[order][starts]
    return FusedCloud(pos, col, src)


def build_cloud(frames, foreground_box, sigma=CONSISTENCY_SIGMA, voxel=0.1,
                k_neighbors=20, std_ratio=2.0):
    """Full fusion pipeline: masks, union, statistical filter, downsample."""
    masks = frame_masks(frames, sigma)
    cloud, background = fuse(frames, masks, foreground_box)
    if len(cloud) > k_neighbors:
        cloud = statistical_outlier_filter(cloud, k_neighbors, std_ratio)
    cloud = uniform_voxel_downsample(cloud, voxel)
    return cloud, background
