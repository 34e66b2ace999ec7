"""Primitive container shared by the decoder, rasterizer, and persistence."""

from dataclasses import dataclass

import numpy as np

# degree-1 spherical harmonics: 4 basis functions x 3 channels
SH_COEFFS = 12


def quat_to_rotation(q):
    """Unit quaternions (w, x, y, z) to rotation matrices, vectorized (N,4)->(N,3,3)."""
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotation_quat_jacobian(q):
    """dR/dq as a (N, 4, 3, 3) tensor for unit quaternions (w, x, y, z)."""
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    jac = np.zeros((n, 4, 3, 3))
    zero = np.zeros(n)
    # dR/dw
    jac[:, 0] = 2 * np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1)], axis=1)
    # dR/dx
    jac[:, 1] = 2 * np.stack([
        np.stack([zero, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1)], axis=1)
    # dR/dy
    jac[:, 2] = 2 * np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zero, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1)], axis=1)
    # dR/dz
    jac[:, 3] = 2 * np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zero], axis=-1)], axis=1)
    return jac


@dataclass
class RenderBundle:
    """Rendering-space attributes: positive scales, opacities in (0, 1]."""

    means: np.ndarray
    quaternions: np.ndarray
    scales: np.ndarray
    alphas: np.ndarray
    sh: np.ndarray
    foreground: np.ndarray

    def __len__(self):
        return self.means.shape[0]

    @classmethod
    def from_set(cls, g):
        return cls(g.means, g.quaternions, g.scales, g.opacities, g.sh, g.foreground)

    def to_set(self):
        return GaussianSet.from_attributes(self.means, self.quaternions,
                                           self.scales, self.alphas, self.sh,
                                           self.foreground)

    def concat(self, other):
        return RenderBundle(
            np.concatenate([self.means, other.means]),
            np.concatenate([self.quaternions, other.quaternions]),
            np.concatenate([self.scales, other.scales]),
            np.concatenate([self.alphas, other.alphas]),
            np.concatenate([self.sh, other.sh]),
            np.concatenate([self.foreground, other.foreground]))


@dataclass
class GaussianSet:
    """Structure-of-arrays Gaussian primitives in the snapshot parameterization.

    Scales are stored as logs and opacities as logits so that direct
    per-primitive optimization stays unconstrained; ``foreground`` marks
    primitives whose compositing weight feeds the accumulated-alpha output.
    """

    means: np.ndarray          # (N, 3) meters
    quaternions: np.ndarray    # (N, 4) unit, (w, x, y, z)
    log_scales: np.ndarray     # (N, 3)
    opacity_logits: np.ndarray # (N,)
    sh: np.ndarray             # (N, 12)
    foreground: np.ndarray     # (N,) bool

    def __post_init__(self):
        n = self.means.shape[0]
        for name, arr, shape in (("means", self.means, (n, 3)),
                                 ("quaternions", self.quaternions, (n, 4)),
                                 ("log_scales", self.log_scales, (n, 3)),
                                 ("opacity_logits", self.opacity_logits, (n,)),
                                 ("sh", self.sh, (n, SH_COEFFS)),
                                 ("foreground", self.foreground, (n,))):
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")

    def __len__(self):
        return self.means.shape[0]

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros((0, SH_COEFFS)), np.zeros(0, dtype=bool))

    @classmethod
    def from_attributes(cls, means, quaternions, scales, opacities, sh, foreground):
        """Build from rendering-space attributes (positive scales, (0,1) alpha)."""
        scales = np.maximum(np.asarray(scales, dtype=np.float64), 1e-12)
        op = np.clip(np.asarray(opacities, dtype=np.float64), 1e-12, 1 - 1e-12)
        return cls(np.asarray(means, dtype=np.float64),
                   np.asarray(quaternions, dtype=np.float64),
                   np.log(scales), np.log(op / (1.0 - op)),
                   np.asarray(sh, dtype=np.float64),
                   np.asarray(foreground, dtype=bool))

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def validate_finite(self):
        if len(self) == 0:
            return
        for name in ("means", "quaternions", "log_scales", "opacity_logits", "sh"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                bad = int(np.flatnonzero(~np.isfinite(arr).reshape(len(self), -1).all(axis=1))[0])
                raise ValueError(f"non-finite {name} at primitive {bad}")

    def concat(self, other):
        return GaussianSet(
            np.concatenate([self.means, other.means]),
            np.concatenate([self.quaternions, other.quaternions]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.sh, other.sh]),
            np.concatenate([self.foreground, other.foreground]))

    def select(self, mask):
        return GaussianSet(self.means[mask], self.quaternions[mask],
                           self.log_scales[mask], self.opacity_logits[mask],
                           self.sh[mask], self.foreground[mask])
