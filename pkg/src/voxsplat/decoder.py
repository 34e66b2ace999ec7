"""Gaussian geometry decoding from the feature volume.

Three MLP heads share one trilinearly-queried feature per point: opacity,
covariance (scale residual plus quaternion), and a position offset bounded
to the voxel size by tanh.  The offset is recursive: each pass re-queries
the volume at the previously offset location, and the prior offset is held
as a constant buffer so the per-step computation stays a pure function of
the parameters.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .gaussians import quat_to_rotation
from .nn import MLP, d_normalize_rows, d_sigmoid, normalize_rows, sigmoid

SCALE_FLOOR = 1e-4


class GeometryHeads:
    """Independent opacity / covariance / position MLPs over volume features."""

    def __init__(self, feature_dim, hidden=64, depth=2, seed=0):
        rng = np.random.default_rng(seed)
        dims = (feature_dim,) + (hidden,) * depth
        self.opacity = MLP(dims + (1,), rng)
        self.covariance = MLP(dims + (7,), rng)
        self.position = MLP(dims + (3,), rng)
        # identity rotation when the covariance head outputs its bias
        self.covariance.biases[-1][3] = 1.0

    def param_items(self):
        return (self.opacity.param_items("opa") + self.covariance.param_items("cov")
                + self.position.param_items("pos"))


def knn_scale_init(positions, k=3):
    """Isotropic scale seed: mean distance to the k nearest neighbors."""
    n = positions.shape[0]
    if n <= k:
        raise ValueError(f"need more than {k} points for scale init")
    return np.maximum(kernels.mean_knn_distance(positions, k), SCALE_FLOOR)


@dataclass
class DecodedGeometry:
    means: np.ndarray
    alphas: np.ndarray
    quaternions: np.ndarray
    scales: np.ndarray
    offsets: np.ndarray
    features: np.ndarray


def decode_geometry(volume, heads, mu_init, delta_prev, s_init):
    """One decode pass: query at mu_init + delta_prev, run all three heads.

    Returns the decoded attributes plus a context for ``decode_backward``.
    The query location is a constant for the pass, so gradients flow into
    the heads and the volume features only.
    """
    pts = mu_init + delta_prev
    f = volume.query(pts)
    raw_pos, hs_pos = heads.position.forward(f)
    tan_pos = np.tanh(raw_pos)
    offsets = tan_pos * volume.voxel_size
    means = mu_init + offsets
    raw_opa, hs_opa = heads.opacity.forward(f)
    alphas = sigmoid(raw_opa[:, 0])
    raw_cov, hs_cov = heads.covariance.forward(f)
    tan_s = np.tanh(raw_cov[:, :3])
    scales_raw = s_init[:, None] * (1.0 + tan_s)
    scales = np.maximum(scales_raw, SCALE_FLOOR)
    quats, qnorm = normalize_rows(raw_cov[:, 3:])
    decoded = DecodedGeometry(means, alphas, quats, scales, offsets, f)
    ctx = {
        "pts": pts, "f": f, "hs_pos": hs_pos, "hs_opa": hs_opa, "hs_cov": hs_cov,
        "tan_pos": tan_pos, "tan_s": tan_s, "s_init": s_init, "alphas": alphas,
        "raw_q": raw_cov[:, 3:], "qnorm": qnorm, "floored": scales_raw < SCALE_FLOOR,
        "voxel_size": volume.voxel_size,
    }
    return decoded, ctx


def decode_backward(heads, ctx, d_means, d_alphas, d_quats, d_scales, grads):
    """Adjoint of decode_geometry; returns gradient wrt the queried features."""
    d_raw_pos = d_means * ctx["voxel_size"] * (1.0 - ctx["tan_pos"] ** 2)
    d_raw_opa = (d_alphas * d_sigmoid(ctx["alphas"]))[:, None]
    d_scales = np.where(ctx["floored"], 0.0, d_scales)
    d_raw_cov = np.empty((d_means.shape[0], 7))
    d_raw_cov[:, :3] = d_scales * ctx["s_init"][:, None] * (1.0 - ctx["tan_s"] ** 2)
    d_raw_cov[:, 3:] = d_normalize_rows(ctx["raw_q"], ctx["qnorm"], d_quats)
    df = heads.position.backward(ctx["hs_pos"], d_raw_pos, "pos", grads)
    df = df + heads.opacity.backward(ctx["hs_opa"], d_raw_opa, "opa", grads)
    df = df + heads.covariance.backward(ctx["hs_cov"], d_raw_cov, "cov", grads)
    return df


def decode_offsets(volume, heads, mu_init, state=None, recursions=2):
    """Run the offset recursion; returns (means, final offset state).

    The state starts at zero when not supplied.  Every component of the
    returned offsets is strictly inside one voxel by construction.
    """
    if recursions < 1:
        raise ValueError("recursions must be >= 1")
    state = np.zeros_like(mu_init) if state is None else state
    for _ in range(recursions):
        f = volume.query(mu_init + state)
        raw, _ = heads.position.forward(f)
        state = np.tanh(raw) * volume.voxel_size
    return mu_init + state, state


def decode_opacity_covariance(volume, heads, query_pts, s_init):
    """Opacity, unit quaternion, and scales queried at the given locations."""
    f = volume.query(query_pts)
    raw_opa, _ = heads.opacity.forward(f)
    alphas = sigmoid(raw_opa[:, 0])
    raw_cov, _ = heads.covariance.forward(f)
    scales = np.maximum(s_init[:, None] * (1.0 + np.tanh(raw_cov[:, :3])), SCALE_FLOOR)
    quats, _ = normalize_rows(raw_cov[:, 3:])
    return alphas, quats, scales


def build_covariance(quaternions, scales):
    """World covariance R diag(s^2) R^T from unit quaternions and scales."""
    r = quat_to_rotation(np.atleast_2d(quaternions))
    s2 = np.atleast_2d(scales) ** 2
    return np.einsum("nij,nj,nkj->nik", r, s2, r)
