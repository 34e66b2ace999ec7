"""Timing comparison of the numba kernels against the numpy fallbacks.

Run:  python3 benchmarks/bench_kernels.py [--repeat N]
The backend split is the one selected by VOXSPLAT_NO_NUMBA; this script
imports both implementations directly so a single run covers the pair.
"""

import argparse
import time

import numpy as np

from voxsplat.cameras import Pinhole, RigidPose
from voxsplat.gaussians import RenderBundle
from voxsplat.kernels import numba_impl, numpy_impl
from voxsplat.rasterizer import _bin_tiles, project_splats


def timeit(fn, repeat):
    fn()  # warm-up (JIT compile / cache load)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_raster(rng, repeat, n=2000, side=128):
    cam = Pinhole(110.0, 110.0, side / 2, side / 2, side, side)
    means = np.stack([rng.uniform(-4, 4, n), rng.uniform(-4, 4, n),
                      rng.uniform(2, 12, n)], axis=1)
    bundle = RenderBundle(means, rng.normal(size=(n, 4)),
                          rng.uniform(0.05, 0.4, (n, 3)),
                          rng.uniform(0.2, 0.9, n), rng.normal(0, 0.3, (n, 12)),
                          rng.random(n) < 0.7)
    ctx = project_splats(bundle, cam, RigidPose.identity())
    ts, tsp, tiles_x = _bin_tiles(ctx, side, side, 16)
    conic = np.ascontiguousarray(np.stack(
        [ctx["conic"][:, 0, 0], ctx["conic"][:, 0, 1], ctx["conic"][:, 1, 1]], 1))
    args = (ts, tsp, np.ascontiguousarray(ctx["mean2d"]), conic,
            np.ascontiguousarray(bundle.alphas[ctx["idx"]]),
            np.ascontiguousarray(ctx["rgb"]), np.ascontiguousarray(ctx["depth"]),
            np.ascontiguousarray(ctx["is_fg"]), side, side, 16, tiles_x, 9.0, 1e-4)
    rows = [("raster_forward", timeit(lambda: numba_impl.raster_forward(*args), repeat),
             timeit(lambda: numpy_impl.raster_forward(*args), repeat))]
    hl_args = (ts, tsp, args[2], conic, args[4], side, side, 16, tiles_x, 9.0, 1e-4)
    off, hits = numba_impl.raster_hitlist(*hl_args)
    rows.append(("raster_hitlist", timeit(lambda: numba_impl.raster_hitlist(*hl_args), repeat),
                 timeit(lambda: numpy_impl.raster_hitlist(*hl_args), repeat)))
    d_img = rng.normal(size=(side, side, 3))
    d_ofg = rng.normal(size=(side, side))
    bw = (off, hits, args[2], conic, args[4], args[5], args[7], d_img, d_ofg, side, side)
    rows.append(("raster_backward", timeit(lambda: numba_impl.raster_backward(*bw), repeat),
                 timeit(lambda: numpy_impl.raster_backward(*bw), repeat)))
    return rows


def bench_knn(rng, repeat, n=8000):
    pts = rng.uniform(0, 8, (n, 3))
    return [("mean_knn_distance", timeit(lambda: numba_impl.mean_knn_distance(pts, 20), repeat),
             timeit(lambda: numpy_impl.mean_knn_distance(pts, 20), repeat))]


def bench_trilinear(rng, repeat, n_keys=20000, n_pts=50000):
    dims = np.array([64, 64, 64], dtype=np.int64)
    keys = np.sort(rng.choice(64 ** 3, n_keys, replace=False)).astype(np.int64)
    feats = rng.normal(size=(n_keys, 16))
    pts = rng.uniform(-1, 65, (n_pts, 3))
    grads = rng.normal(size=(n_pts, 16))
    return [
        ("trilinear_gather", timeit(lambda: numba_impl.trilinear_gather(keys, feats, dims, pts), repeat),
         timeit(lambda: numpy_impl.trilinear_gather(keys, feats, dims, pts), repeat)),
        ("trilinear_scatter", timeit(lambda: numba_impl.trilinear_scatter(keys, n_keys, dims, pts, grads), repeat),
         timeit(lambda: numpy_impl.trilinear_scatter(keys, n_keys, dims, pts, grads), repeat)),
    ]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    rows = []
    rows += bench_raster(rng, args.repeat)
    rows += bench_knn(rng, args.repeat)
    rows += bench_trilinear(rng, args.repeat)
    print(f"{'kernel':<20} {'numba':>10} {'numpy':>10} {'speedup':>8}")
    for name, tn, tp in rows:
        print(f"{name:<20} {tn * 1e3:>8.2f}ms {tp * 1e3:>8.2f}ms {tp / tn:>7.1f}x")


if __name__ == "__main__":
    main()
