"""Scene manifests, frame loading, and binary persistence.

Manifest: JSON with keys `frames` (list of `image`, `depth`, `intrinsics`
(fx, fy, cx, cy), `camera_to_world` (16 reals, row-major), `width`,
`height`), plus `meters_per_unit`, `foreground_box` (min/max xyz) and
`voxel_size`.  Images are 8-bit RGB PNGs decoded to [0,1]; depth rasters are
row-major little-endian float32 meters (.npy), invalid marked NaN or <= 0.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import Pinhole, RigidPose
from .gaussians import SH_COEFFS, GaussianSet


class SceneError(Exception):
    pass


class SnapshotError(Exception):
    pass


@dataclass(frozen=True)
class FrameEntry:
    image_path: str
    depth_path: str
    intrinsics: tuple  # (fx, fy, cx, cy)
    camera_to_world: np.ndarray
    width: int
    height: int

    def camera(self):
        fx, fy, cx, cy = self.intrinsics
        return Pinhole(fx, fy, cx, cy, self.width, self.height)

    def pose(self):
        return RigidPose.from_matrix(self.camera_to_world)


@dataclass
class SceneManifest:
    frames: list
    foreground_box: np.ndarray  # (2, 3) min/max corners, meters
    voxel_size: float
    meters_per_unit: float = 1.0

    def __post_init__(self):
        if len(self.frames) == 0:
            raise SceneError("empty scene: manifest declares no frames")
        box = np.asarray(self.foreground_box, dtype=np.float64).reshape(2, 3)
        if not np.all(box[1] > box[0]):
            raise SceneError("foreground_box must have positive extent on all axes")
        if self.voxel_size <= 0:
            raise SceneError("voxel_size must be positive")
        self.foreground_box = box
        for i, f in enumerate(self.frames):
            if f.width <= 0 or f.height <= 0:
                raise SceneError(f"frame {i}: non-positive resolution")


@dataclass
class PosedFrame:
    image: np.ndarray  # (H, W, 3) float in [0,1]
    depth: np.ndarray  # (H, W) float meters, NaN where invalid
    camera: Pinhole
    pose: RigidPose
    index: int = 0

    @property
    def valid_depth(self):
        return np.isfinite(self.depth) & (self.depth > 0)


def _frame_to_json(f: FrameEntry):
    return {
        "image": f.image_path,
        "depth": f.depth_path,
        "intrinsics": list(map(float, f.intrinsics)),
        "camera_to_world": [float(x) for x in np.asarray(f.camera_to_world).reshape(16)],
        "width": int(f.width),
        "height": int(f.height),
    }


def save_manifest(manifest: SceneManifest, path):
    doc = {
        "meters_per_unit": manifest.meters_per_unit,
        "voxel_size": manifest.voxel_size,
        "foreground_box": {
            "min": [float(x) for x in manifest.foreground_box[0]],
            "max": [float(x) for x in manifest.foreground_box[1]],
        },
        "frames": [_frame_to_json(f) for f in manifest.frames],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    if not path.exists():
        raise SceneError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    frames = []
    for i, fr in enumerate(doc.get("frames", [])):
        try:
            entry = FrameEntry(
                image_path=fr["image"],
                depth_path=fr["depth"],
                intrinsics=tuple(fr["intrinsics"]),
                camera_to_world=np.array(fr["camera_to_world"], dtype=np.float64).reshape(4, 4),
                width=int(fr["width"]),
                height=int(fr["height"]),
            )
        except (KeyError, ValueError) as e:
            raise SceneError(f"frame {i}: malformed entry ({e})") from e
        frames.append(entry)
    box = doc.get("foreground_box", {})
    return SceneManifest(
        frames=frames,
        foreground_box=np.array([box.get("min"), box.get("max")], dtype=np.float64),
        voxel_size=float(doc.get("voxel_size", 0.0)),
        meters_per_unit=float(doc.get("meters_per_unit", 1.0)),
    )


def load_image(path):
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def save_image(path, rgb):
    arr = np.clip(np.asarray(rgb), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_depth(path):
    arr = np.load(path)
    if arr.dtype != np.float32:
        raise SceneError(f"depth raster {path} must be float32")
    depth = arr.astype(np.float64)
    depth[~np.isfinite(depth) | (depth <= 0)] = np.nan
    return depth


def save_depth(path, depth):
    np.save(path, np.asarray(depth, dtype=np.float32))


def load_scene(manifest_path):
    """Load the manifest and decode every referenced frame.

    Raises SceneError (with the frame index) on missing rasters, resolution
    mismatches, or non-orthonormal rotations.
    """
    manifest = load_manifest(manifest_path)
    root = Path(manifest_path).parent
    frames = []
    for i, entry in enumerate(manifest.frames):
        img_path = root / entry.image_path
        depth_path = root / entry.depth_path
        if not img_path.exists():
            raise SceneError(f"frame {i}: image missing: {img_path}")
        if not depth_path.exists():
            raise SceneError(f"frame {i}: depth missing: {depth_path}")
        image = load_image(img_path)
        depth = load_depth(depth_path)
        if image.shape[:2] != (entry.height, entry.width):
            raise SceneError(
                f"frame {i}: image is {image.shape[1]}x{image.shape[0]}, "
                f"manifest declares {entry.width}x{entry.height}")
        if depth.shape != (entry.height, entry.width):
            raise SceneError(
                f"frame {i}: depth is {depth.shape[1]}x{depth.shape[0]}, "
                f"manifest declares {entry.width}x{entry.height}")
        try:
            pose = entry.pose()
        except ValueError as e:
            raise SceneError(f"frame {i}: {e}") from e
        frames.append(PosedFrame(image, depth, entry.camera(), pose, index=i))
    return manifest, frames


# --- Gaussian snapshot: fixed-order little-endian binary -------------------

SNAPSHOT_MAGIC = b"VSPGAUS1"
SNAPSHOT_VERSION = 1


def save_snapshot(gaussians: GaussianSet, path):
    gaussians.validate_finite()
    n = len(gaussians)
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<II", SNAPSHOT_VERSION, 0))
        fh.write(struct.pack("<Q", n))
        for arr in (gaussians.means, gaussians.quaternions, gaussians.log_scales,
                    gaussians.opacity_logits, gaussians.sh):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(gaussians.foreground, dtype=np.uint8).tobytes())


def load_snapshot(path) -> GaussianSet:
    data = Path(path).read_bytes()
    if len(data) < 24:
        raise SnapshotError("truncated snapshot header")
    if data[:8] != SNAPSHOT_MAGIC:
        raise SnapshotError("bad snapshot magic")
    version, _ = struct.unpack("<II", data[8:16])
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    (n,) = struct.unpack("<Q", data[16:24])
    counts = [(n, 3), (n, 4), (n, 3), (n,), (n, SH_COEFFS)]
    need = 24 + sum(int(np.prod(s)) for s in counts) * 8 + n
    if len(data) != need:
        raise SnapshotError("truncated or oversized snapshot payload")
    off = 24
    arrays = []
    for shape in counts:
        size = int(np.prod(shape)) * 8
        arrays.append(np.frombuffer(data[off:off + size], dtype="<f8").reshape(shape).copy())
        off += size
    fg = np.frombuffer(data[off:off + n], dtype=np.uint8).astype(bool)
    g = GaussianSet(arrays[0], arrays[1], arrays[2], arrays[3], arrays[4], fg)
    if n and np.any(np.abs(np.linalg.norm(g.quaternions, axis=1) - 1.0) > 1e-4):
        raise SnapshotError("quaternions are not unit length")
    return g


# --- Fused point cloud file: count, then xyz rgb float32 LE per point ------

POINTS_MAGIC = b"VSPPNTS1"


def save_point_cloud(path, positions, colors):
    n = positions.shape[0]
    with open(path, "wb") as fh:
        fh.write(POINTS_MAGIC)
        fh.write(struct.pack("<Q", n))
        inter = np.concatenate([positions, colors], axis=1).astype("<f4")
        fh.write(np.ascontiguousarray(inter).tobytes())


def load_point_cloud(path):
    data = Path(path).read_bytes()
    if data[:8] != POINTS_MAGIC:
        raise SnapshotError("bad point-cloud magic")
    (n,) = struct.unpack("<Q", data[8:16])
    flat = np.frombuffer(data[16:], dtype="<f4")
    if flat.size != n * 6:
        raise SnapshotError("truncated point-cloud payload")
    inter = flat.reshape(n, 6).astype(np.float64)
    return inter[:, :3], inter[:, 3:]
