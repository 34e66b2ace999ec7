"""Hot numeric kernels with two interchangeable backends.

The default backend compiles the inner loops with numba's ``@njit``.  Setting
the environment variable ``VOXSPLAT_NO_NUMBA=1`` (before import) selects the
pure-numpy fallback instead; both backends implement the same contracts and
are compared by ``benchmarks/bench_kernels.py``.
"""

import os

_DISABLE = os.environ.get("VOXSPLAT_NO_NUMBA", "0") not in ("", "0", "false", "False")

if not _DISABLE:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:
        from . import numpy_impl as _impl

        BACKEND = "numpy"
else:
    from . import numpy_impl as _impl

    BACKEND = "numpy"

raster_forward = _impl.raster_forward
raster_hitlist = _impl.raster_hitlist
raster_backward = _impl.raster_backward
mean_knn_distance = _impl.mean_knn_distance
trilinear_gather = _impl.trilinear_gather
trilinear_scatter = _impl.trilinear_scatter

__all__ = [
    "BACKEND",
    "raster_forward",
    "raster_hitlist",
    "raster_backward",
    "mean_knn_distance",
    "trilinear_gather",
    "trilinear_scatter",
]
