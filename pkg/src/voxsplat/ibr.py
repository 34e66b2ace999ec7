"""Occlusion-aware image-based color prediction.

Each Gaussian samples WxW color and depth windows from its K nearest
reference frames (bilinear, centered on the projection), turns depth into a
per-cell visibility value (zero on-surface, positive when occluded), and an
aggregation MLP maps the concatenated windows, visibilities, distances, and
directions to degree-1 SH coefficients.  Window contents are treated as
constants in the backward pass; gradients reach the aggregation head and,
through the rasterizer, the Gaussian positions.
"""

from dataclasses import dataclass

import numpy as np

from .cameras import project, sample_bilinear
from .nn import MLP

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

# visibility values are clamped so invalid (sky) reference depth maps to -1
VIS_CLIP = 1.0
PAD_SENTINEL = 1.0


@dataclass
class ReferenceSamples:
    colors: np.ndarray        # (N, K, W*W, 3)
    visibility: np.ndarray    # (N, K, W*W)
    distances: np.ndarray     # (N, K)
    directions: np.ndarray    # (N, K, 3)
    no_reference: np.ndarray  # (N,) true when zero frames saw the point
    padded: np.ndarray        # (N, K) slots repeating the nearest reference


def _ray_scale(cam, uv):
    """Per-pixel factor converting stored z-depth to distance along the ray."""
    x = (uv[:, 0] - cam.cx) / cam.fx
    y = (uv[:, 1] - cam.cy) / cam.fy
    return np.sqrt(x * x + y * y + 1.0)


def gather_reference_samples(means, frames, k_refs=3, window=3):
    """Sample reference windows for each Gaussian center.

    References are the k nearest frames (camera-center distance, ties by
    frame index) that see the point in front of the camera and inside the
    image.  Under-observed points repeat their nearest reference with the
    visibility window set to the padding sentinel.
    """
    if window % 2 != 1:
        raise ValueError("window must be odd")
    means = np.atleast_2d(means)
    n = means.shape[0]
    n_frames = len(frames)
    w2 = window * window
    dists = np.full((n_frames, n), np.inf)
    uvs = np.zeros((n_frames, n, 2))
    for fi, frame in enumerate(frames):
        uv, z, in_front = project(means, frame.camera, frame.pose)
        ok = (in_front & (uv[:, 0] >= 0) & (uv[:, 0] <= frame.camera.width - 1)
              & (uv[:, 1] >= 0) & (uv[:, 1] <= frame.camera.height - 1))
        d = np.linalg.norm(means - frame.pose.center, axis=1)
        dists[fi, ok] = d[ok]
        uvs[fi] = uv
    # nearest-first selection with frame-index tie-break
    order = np.lexsort((np.arange(n_frames)[:, None].repeat(n, 1), dists), axis=0)
    n_avail = np.isfinite(dists).sum(axis=0)
    no_ref = n_avail == 0
    take = min(k_refs, n_frames)
    chosen = np.empty((n, k_refs), dtype=np.int64)
    chosen[:, :take] = order[:take].T
    chosen[:, take:] = chosen[:, :1]
    # repeat the nearest reference where fewer than K frames qualify
    for slot in range(1, k_refs):
        short = n_avail <= slot
        chosen[short, slot] = chosen[short, 0]
    padded = np.arange(k_refs)[None, :] >= np.maximum(n_avail, 1)[:, None]

    half = window // 2
    off_v, off_u = np.mgrid[-half:half + 1, -half:half + 1]
    offsets = np.stack([off_u.ravel(), off_v.ravel()], axis=1).astype(np.float64)

    colors = np.zeros((n, k_refs, w2, 3))
    vis = np.zeros((n, k_refs, w2))
    out_dists = np.zeros((n, k_refs))
    out_dirs = np.zeros((n, k_refs, 3))
    for fi, frame in enumerate(frames):
        pts_idx, slots = np.nonzero(chosen == fi)
        usable = ~no_ref[pts_idx]
        pts_idx, slots = pts_idx[usable], slots[usable]
        if pts_idx.size == 0:
            continue
        center_uv = uvs[fi, pts_idx]
        sample_uv = (center_uv[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
        col = sample_bilinear(frame.image, sample_uv).reshape(-1, w2, 3)
        # sample stored z-depth, then convert to distance along the exact ray
        # of the sample coordinate (so on-surface points get v = 0 exactly)
        d_z = sample_bilinear(frame.depth, sample_uv)
        d = (d_z * _ray_scale(frame.camera, sample_uv)).reshape(-1, w2)
        delta = np.linalg.norm(means[pts_idx] - frame.pose.center, axis=1)
        with np.errstate(invalid="ignore"):
            v = (delta[:, None] - d) / delta[:, None]
        v = np.clip(np.nan_to_num(v, nan=-VIS_CLIP, neginf=-VIS_CLIP), -VIS_CLIP, VIS_CLIP)
        theta = (means[pts_idx] - frame.pose.center) / delta[:, None]
        colors[pts_idx, slots] = col
        vis[pts_idx, slots] = v
        out_dists[pts_idx, slots] = delta
        out_dirs[pts_idx, slots] = theta
    vis[padded & ~no_ref[:, None]] = PAD_SENTINEL
    vis[no_ref] = PAD_SENTINEL
    return ReferenceSamples(colors, vis, out_dists, out_dirs, no_ref, padded)


class ColorHead:
    """Aggregation MLP from reference windows to 12 SH coefficients."""

    def __init__(self, k_refs=3, window=3, hidden=64, seed=0):
        self.k_refs = k_refs
        self.window = window
        per_ref = window * window * 3 + window * window + 1 + 3
        self.mlp = MLP((k_refs * per_ref, hidden, hidden, 12),
                       np.random.default_rng(seed))

    def pack(self, samples: ReferenceSamples):
        n, k = samples.distances.shape
        parts = [samples.colors.reshape(n, k, -1), samples.visibility,
                 samples.distances[:, :, None], samples.directions]
        return np.concatenate(parts, axis=2).reshape(n, -1)

    def forward(self, samples: ReferenceSamples):
        x = self.pack(samples)
        coeffs, hs = self.mlp.forward(x)
        return coeffs, hs

    def backward(self, hs, d_coeffs, grads):
        return self.mlp.backward(hs, d_coeffs, "color", grads)

    def param_items(self):
        return self.mlp.param_items("color")


def eval_sh(coeffs, dirs):
    """Degree-1 SH color for unit view directions, clamped to [0, 1].

    Coefficient layout per channel: (dc, c1, c2, c3) with the conventional
    +0.5 offset on the DC term before clamping.
    """
    rgb, _ = eval_sh_with_ctx(coeffs, dirs)
    return rgb


def eval_sh_with_ctx(coeffs, dirs):
    c = np.atleast_2d(coeffs).reshape(-1, 4, 3)
    d = np.atleast_2d(dirs)
    x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
    raw = (0.5 + SH_C0 * c[:, 0] - SH_C1 * y * c[:, 1]
           + SH_C1 * z * c[:, 2] - SH_C1 * x * c[:, 3])
    rgb = np.clip(raw, 0.0, 1.0)
    ctx = {"mask": (raw > 0.0) & (raw < 1.0), "c": c, "d": d}
    return rgb, ctx


def eval_sh_backward(ctx, d_rgb):
    """Returns (d_coeffs (N,12), d_dirs (N,3))."""
    g = d_rgb * ctx["mask"]
    c, d = ctx["c"], ctx["d"]
    x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
    d_c = np.empty_like(c)
    d_c[:, 0] = SH_C0 * g
    d_c[:, 1] = -SH_C1 * y * g
    d_c[:, 2] = SH_C1 * z * g
    d_c[:, 3] = -SH_C1 * x * g
    d_dirs = np.stack([
        (-SH_C1 * c[:, 3] * g).sum(axis=1),
        (-SH_C1 * c[:, 1] * g).sum(axis=1),
        (SH_C1 * c[:, 2] * g).sum(axis=1),
    ], axis=1)
    return d_c.reshape(-1, 12), d_dirs


def dc_coeffs_from_color(rgb):
    """DC-only coefficients that make eval_sh reproduce a fixed color."""
    n = np.atleast_2d(rgb).shape[0]
    coeffs = np.zeros((n, 4, 3))
    coeffs[:, 0] = (np.atleast_2d(rgb) - 0.5) / SH_C0
    return coeffs.reshape(n, 12)
