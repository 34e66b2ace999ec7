"""Hemisphere background: fixed Gaussian shell that follows the camera.

Shell geometry is fixed (Fibonacci directions at radius r_bg around the
foreground-volume midpoint, translated rigidly with the camera); a small MLP
predicts each point's color and a bounded scale residual from single-pixel
reference samples.  Opacity is pinned to 1 and rotation to the identity.
"""

from dataclasses import dataclass

import numpy as np

from .cameras import project, sample_bilinear
from .decoder import SCALE_FLOOR, knn_scale_init
from .gaussians import RenderBundle
from .ibr import dc_coeffs_from_color
from .nn import MLP, d_sigmoid, sigmoid

UP = np.array([0.0, -1.0, 0.0])
DEFAULT_RADIUS = 100.0
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass
class HemisphereShell:
    directions: np.ndarray  # (M, 3) unit, non-negative elevation along UP
    radius: float
    center: np.ndarray      # midpoint of the foreground volume
    anchor: np.ndarray      # camera position the shell was centered for
    base_means: np.ndarray  # center + radius * directions, precomputed
    s_init: np.ndarray      # (M,) KNN scale seed on the canonical shell

    def place(self, camera_position):
        """Shell means for a render: rigid translation with the camera.

        Built from the precomputed canonical means so a camera step of t
        shifts every mean by exactly (camera_position - anchor).
        """
        shift = np.asarray(camera_position, dtype=np.float64) - self.anchor
        return self.base_means + shift


def build_shell(n_points, r_bg, center, anchor=None, knn=3):
    """Deterministic Fibonacci hemisphere of n_points directions."""
    if n_points < 64:
        raise ValueError("hemisphere needs at least 64 points")
    i = np.arange(n_points, dtype=np.float64)
    elev = (i + 0.5) / n_points          # component along UP, in (0, 1)
    ring = np.sqrt(1.0 - elev * elev)
    phi = i * GOLDEN_ANGLE
    east = np.array([1.0, 0.0, 0.0])
    north = np.array([0.0, 0.0, 1.0])
    dirs = (ring[:, None] * np.cos(phi)[:, None] * east
            + ring[:, None] * np.sin(phi)[:, None] * north
            + elev[:, None] * UP)
    center = np.asarray(center, dtype=np.float64)
    anchor = center.copy() if anchor is None else np.asarray(anchor, dtype=np.float64)
    pts = center + r_bg * dirs
    s_init = knn_scale_init(pts, k=knn)
    return HemisphereShell(dirs, float(r_bg), center, anchor, pts, s_init)


class BackgroundHead:
    """Two-layer MLP: K single-pixel colors -> RGB + scale residual."""

    def __init__(self, k_refs=3, hidden=64, seed=0):
        self.k_refs = k_refs
        self.mlp = MLP((3 * k_refs, hidden, 6), np.random.default_rng(seed))

    def param_items(self):
        return self.mlp.param_items("bg")


def gather_shell_colors(points, frames, k_refs):
    """Single-pixel reference colors for shell points (W = 1 windows)."""
    n = points.shape[0]
    n_frames = len(frames)
    dists = np.full((n_frames, n), np.inf)
    uvs = np.zeros((n_frames, n, 2))
    for fi, frame in enumerate(frames):
        uv, z, in_front = project(points, frame.camera, frame.pose)
        ok = (in_front & (uv[:, 0] >= 0) & (uv[:, 0] <= frame.camera.width - 1)
              & (uv[:, 1] >= 0) & (uv[:, 1] <= frame.camera.height - 1))
        dists[fi, ok] = np.linalg.norm(points[ok] - frame.pose.center, axis=1)
        uvs[fi] = uv
    order = np.lexsort((np.arange(n_frames)[:, None].repeat(n, 1), dists), axis=0)
    n_avail = np.isfinite(dists).sum(axis=0)
    take = min(k_refs, n_frames)
    chosen = np.empty((n, k_refs), dtype=np.int64)
    chosen[:, :take] = order[:take].T
    chosen[:, take:] = chosen[:, :1]
    for slot in range(1, k_refs):
        chosen[n_avail <= slot, slot] = chosen[n_avail <= slot, 0]
    colors = np.zeros((n, k_refs, 3))
    seen = n_avail > 0
    for fi, frame in enumerate(frames):
        pts_idx, slots = np.nonzero(chosen == fi)
        usable = seen[pts_idx]
        pts_idx, slots = pts_idx[usable], slots[usable]
        if pts_idx.size == 0:
            continue
        colors[pts_idx, slots] = sample_bilinear(frame.image, uvs[fi, pts_idx])
    return colors, seen


def decode_background(shell, frames, head, camera_position, k_refs=None):
    """Background primitives for a render from ``camera_position``.

    Returns (RenderBundle, ctx); ctx feeds ``background_backward`` during
    training.  Colors are view-independent (DC-only SH), opacity is exactly
    one, rotations are identity.
    """
    k = head.k_refs if k_refs is None else k_refs
    means = shell.place(camera_position)
    ref_colors, seen = gather_shell_colors(means, frames, k)
    x = ref_colors.reshape(means.shape[0], -1)
    raw, hs = head.mlp.forward(x)
    color = sigmoid(raw[:, :3])
    tan_s = np.tanh(raw[:, 3:])
    scales_raw = shell.s_init[:, None] * (1.0 + tan_s)
    scales = np.maximum(scales_raw, SCALE_FLOOR)
    n = means.shape[0]
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    bundle = RenderBundle(means, quats, scales, np.ones(n),
                          dc_coeffs_from_color(color), np.zeros(n, dtype=bool))
    ctx = {"hs": hs, "color": color, "tan_s": tan_s, "s_init": shell.s_init,
           "floored": scales_raw < SCALE_FLOOR}
    return bundle, ctx


def background_backward(head, ctx, d_color, d_scales, grads):
    d_raw = np.empty((d_color.shape[0], 6))
    d_raw[:, :3] = d_color * d_sigmoid(ctx["color"])
    d_s = np.where(ctx["floored"], 0.0, d_scales)
    d_raw[:, 3:] = d_s * ctx["s_init"][:, None] * (1.0 - ctx["tan_s"] ** 2)
    head.mlp.backward(ctx["hs"], d_raw, "bg", grads)
