"""Feed-forward Gaussian-splatting reconstruction at desk scale.

Pipeline: fuse posed RGB-D frames into a global point cloud, encode it into
a sparse voxel feature volume, decode 3D Gaussian primitives (geometry from
the volume, color from reference-image aggregation, sky from a hemisphere
shell), and render with a tile-based CPU rasterizer.  Training and per-scene
fine-tuning run on hand-written adjoints end to end.
"""

__version__ = "0.1.0"

from .gaussians import GaussianSet  # noqa: F401
