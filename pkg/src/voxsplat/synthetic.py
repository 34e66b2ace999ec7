"""Synthetic corridor scenes with analytic depth and ray-cast ground truth.

Stands in for learned metric-depth inputs: every frame gets an exact
ray-cast depth raster (optionally perturbed with Gaussian noise) plus a
rendered RGB image that doubles as the supervision/evaluation target.
World axes follow the camera convention (y down), so "up" is -y.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import Pinhole, RigidPose
from .scene import (FrameEntry, PosedFrame, SceneError, SceneManifest,
                    save_depth, save_image, save_manifest)

UP = np.array([0.0, -1.0, 0.0])


@dataclass(frozen=True)
class Primitive:
    kind: str                      # "box" or "sphere"
    a: np.ndarray                  # box min corner / sphere center
    b: np.ndarray                  # box max corner / (radius, 0, 0)
    color_a: np.ndarray
    color_b: np.ndarray = None
    checker: float = 0.0           # checker cell size in meters; 0 = flat

    def color_at(self, pts):
        pts = np.atleast_2d(pts)
        base = np.broadcast_to(self.color_a, (pts.shape[0], 3)).copy()
        if self.checker > 0 and self.color_b is not None:
            parity = np.floor(pts / self.checker).sum(axis=1).astype(np.int64) % 2
            base[parity == 1] = self.color_b
        return base


def box(minimum, maximum, color_a, color_b=None, checker=0.0):
    return Primitive("box", np.asarray(minimum, dtype=np.float64),
                     np.asarray(maximum, dtype=np.float64),
                     np.asarray(color_a, dtype=np.float64),
                     None if color_b is None else np.asarray(color_b, dtype=np.float64),
                     checker)


def sphere(center, radius, color_a, color_b=None, checker=0.0):
    return Primitive("sphere", np.asarray(center, dtype=np.float64),
                     np.array([float(radius), 0.0, 0.0]),
                     np.asarray(color_a, dtype=np.float64),
                     None if color_b is None else np.asarray(color_b, dtype=np.float64),
                     checker)


@dataclass
class SyntheticSpec:
    primitives: list
    foreground_box: np.ndarray
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0
    n_train: int = 8
    n_holdout: int = 2
    path_start: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.5]))
    path_end: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 3.5]))
    lateral_amplitude: float = 0.25
    noise_std: float = 0.0
    noise_mult: float = 0.0
    voxel_size: float = 0.2
    sky_horizon: np.ndarray = field(default_factory=lambda: np.array([0.82, 0.86, 0.95]))
    sky_zenith: np.ndarray = field(default_factory=lambda: np.array([0.35, 0.5, 0.85]))

    def __post_init__(self):
        if not (1 <= len(self.primitives) <= 16):
            raise SceneError("spec must contain between 1 and 16 primitives")
        self.foreground_box = np.asarray(self.foreground_box, dtype=np.float64).reshape(2, 3)

    def camera(self):
        f = 0.5 * self.width / np.tan(np.radians(self.fov_deg) / 2.0)
        return Pinhole(f, f, self.width / 2.0, self.height / 2.0,
                       self.width, self.height)


def _ray_box(origins, dirs, lo, hi):
    """Slab intersection; returns smallest positive t (inf on miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tnear = np.nanmax(np.minimum(t0, t1), axis=-1)
    tfar = np.nanmin(np.maximum(t0, t1), axis=-1)
    hit = (tfar >= tnear) & (tfar > 0)
    t = np.where(tnear > 0, tnear, tfar)
    return np.where(hit & (t > 0), t, np.inf)


def _ray_sphere(origins, dirs, center, radius):
    oc = origins - center
    a = (dirs * dirs).sum(axis=-1)
    b = 2.0 * (dirs * oc).sum(axis=-1)
    c = (oc * oc).sum(axis=-1) - radius * radius
    disc = b * b - 4 * a * c
    t = np.full(a.shape, np.inf)
    ok = disc >= 0
    if np.any(ok):
        sq = np.sqrt(disc[ok])
        t0 = (-b[ok] - sq) / (2 * a[ok])
        t1 = (-b[ok] + sq) / (2 * a[ok])
        tt = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
        t[ok] = tt
    return t


def cast_rays(primitives, origins, dirs):
    """Nearest positive hit along each ray: (t, primitive index or -1)."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    best = np.full(dirs.shape[0], np.inf)
    which = np.full(dirs.shape[0], -1, dtype=np.int64)
    for i, p in enumerate(primitives):
        if p.kind == "box":
            t = _ray_box(origins, dirs, p.a, p.b)
        else:
            t = _ray_sphere(origins, dirs, p.a, p.b[0])
        closer = t < best
        best[closer] = t[closer]
        which[closer] = i
    return best, which


def surface_distance(primitives, pts):
    """Distance from each point to the nearest primitive surface."""
    pts = np.atleast_2d(pts)
    best = np.full(pts.shape[0], np.inf)
    for p in primitives:
        if p.kind == "box":
            lo, hi = p.a, p.b
            outside = np.maximum(np.maximum(lo - pts, 0.0), pts - hi)
            d_out = np.linalg.norm(outside, axis=1)
            inner = np.minimum(pts - lo, hi - pts).min(axis=1)
            d = np.where(d_out > 0, d_out, np.abs(inner))
        else:
            d = np.abs(np.linalg.norm(pts - p.a, axis=1) - p.b[0])
        best = np.minimum(best, d)
    return best


def sky_color(spec, dirs):
    d = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    elev = np.clip(d @ UP, 0.0, 1.0)[:, None]
    return spec.sky_horizon * (1 - elev) + spec.sky_zenith * elev


def render_view(spec, cam, pose):
    """Analytic render: (rgb image, z-depth with NaN sky)."""
    us, vs = np.meshgrid(np.arange(cam.width, dtype=np.float64),
                         np.arange(cam.height, dtype=np.float64))
    dirs_cam = np.stack([(us.ravel() - cam.cx) / cam.fx,
                         (vs.ravel() - cam.cy) / cam.fy,
                         np.ones(us.size)], axis=1)
    dirs = dirs_cam @ pose.rotation.T
    origin = np.broadcast_to(pose.center, dirs.shape)
    t, which = cast_rays(spec.primitives, origin, dirs)
    img = sky_color(spec, dirs)
    hit = which >= 0
    if np.any(hit):
        hit_pts = pose.center + t[hit, None] * dirs[hit]
        for i, p in enumerate(spec.primitives):
            sel = which[hit] == i
            if np.any(sel):
                img[np.flatnonzero(hit)[sel]] = p.color_at(hit_pts[sel])
    # camera-space z equals t because the camera-space direction has z = 1
    depth = np.where(hit, t, np.nan).reshape(cam.height, cam.width)
    return img.reshape(cam.height, cam.width, 3), depth


def _path_position(spec, frac):
    pos = spec.path_start + frac * (spec.path_end - spec.path_start)
    return pos + np.array([spec.lateral_amplitude * np.sin(2 * np.pi * frac), 0.0, 0.0])


def camera_path(spec):
    """Train poses plus holdout poses midway between consecutive train ones."""
    train_fracs = np.linspace(0.0, 1.0, spec.n_train)
    hold_fracs = np.linspace(0.0, 1.0, spec.n_holdout + 2)[1:-1] + 0.5 / max(spec.n_train - 1, 1)
    return ([RigidPose(np.eye(3), _path_position(spec, f)) for f in train_fracs],
            [RigidPose(np.eye(3), _path_position(spec, f)) for f in np.clip(hold_fracs, 0, 1)])


def make_synthetic_scene(spec: SyntheticSpec, seed: int, out_dir):
    """Generate and persist a scene; returns the train and holdout manifests.

    Deterministic for a fixed seed.  Train depths carry the configured noise;
    holdout frames keep exact depth (they exist for evaluation only).
    """
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depths").mkdir(parents=True, exist_ok=True)
    cam = spec.camera()
    train_poses, hold_poses = camera_path(spec)
    # clearance checked densely along the path, not just at the sampled poses
    dense = np.stack([_path_position(spec, f) for f in np.linspace(0.0, 1.0, 128)])
    clearance = surface_distance(spec.primitives, dense).min()
    if clearance < 0.2:
        raise SceneError(f"camera path intersects geometry (clearance {clearance:.3f} m)")

    def emit(tag, poses, noisy):
        entries = []
        for i, pose in enumerate(poses):
            img, depth = render_view(spec, cam, pose)
            if noisy and (spec.noise_std > 0 or spec.noise_mult > 0):
                valid = np.isfinite(depth)
                noise = rng.normal(0.0, 1.0, depth.shape)
                depth = depth + spec.noise_std * noise
                if spec.noise_mult > 0:
                    depth = depth * (1.0 + spec.noise_mult * rng.normal(0.0, 1.0, depth.shape))
                depth[~valid] = np.nan
                depth[valid & (depth <= 0)] = np.nan
            image_rel = f"images/{tag}_{i:03d}.png"
            depth_rel = f"depths/{tag}_{i:03d}.npy"
            save_image(out / image_rel, img)
            save_depth(out / depth_rel, depth)
            entries.append(FrameEntry(image_rel, depth_rel,
                                      (cam.fx, cam.fy, cam.cx, cam.cy),
                                      pose.matrix(), cam.width, cam.height))
        return entries

    train_entries = emit("train", train_poses, noisy=True)
    hold_entries = emit("holdout", hold_poses, noisy=False)
    train_manifest = SceneManifest(train_entries, spec.foreground_box, spec.voxel_size)
    hold_manifest = SceneManifest(hold_entries, spec.foreground_box, spec.voxel_size)
    save_manifest(train_manifest, out / "scene.json")
    save_manifest(hold_manifest, out / "holdout.json")
    return train_manifest, hold_manifest


def corridor_spec(n_boxes=3, **overrides):
    """The toy corridor: floor, two side walls, and up to three objects."""
    prims = [
        box((-3.0, 1.2, 0.0), (3.0, 1.5, 10.0), (0.52, 0.5, 0.46),
            (0.38, 0.36, 0.33), checker=2.0),
        box((-3.3, -2.2, 0.0), (-3.0, 1.5, 10.0), (0.62, 0.55, 0.45),
            (0.5, 0.44, 0.36), checker=2.0),
        box((3.0, -2.2, 0.0), (3.3, 1.5, 10.0), (0.45, 0.52, 0.6),
            (0.36, 0.42, 0.5), checker=2.0),
    ]
    objects = [
        box((-1.8, 0.0, 5.0), (-0.8, 1.2, 6.0), (0.7, 0.25, 0.2)),
        box((0.9, 0.3, 6.8), (1.9, 1.2, 7.8), (0.2, 0.55, 0.25)),
        sphere((0.1, 0.6, 8.6), 0.6, (0.25, 0.3, 0.7)),
    ]
    prims.extend(objects[:n_boxes])
    fg_box = np.array([[-3.4, -2.4, -0.2], [3.4, 1.6, 10.2]])
    spec = SyntheticSpec(primitives=prims, foreground_box=fg_box, **overrides)
    return spec
