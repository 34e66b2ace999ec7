"""Numba-compiled kernels: tile compositing, kNN queries, trilinear access.

All kernels run serially over tiles/points so results are deterministic and
bit-reproducible; at desk scale the JIT speedup over interpreted loops is
what matters, not threading.
"""

import numpy as np
from numba import njit

# Compositing contract shared with numpy_impl and the reference oracle:
# a Gaussian is skipped when its Mahalanobis form q exceeds Q_MAX (the 3-sigma
# footprint used for tiling), the effective alpha is clamped just below 1 so
# the backward pass never divides by zero, and a pixel stops compositing once
# transmittance drops below the termination threshold.
ALPHA_CEIL = 1.0 - 1e-6


@njit(cache=True)
def raster_forward(tile_starts, tile_splats, mean2d, conic, alpha, rgb, depth,
                   is_fg, height, width, tile, tiles_x, q_max, term_eps):
    img = np.zeros((height, width, 3))
    ofg = np.zeros((height, width))
    dep = np.zeros((height, width))
    final_t = np.ones((height, width))
    n_tiles = tile_starts.shape[0] - 1
    for t in range(n_tiles):
        s0 = tile_starts[t]
        s1 = tile_starts[t + 1]
        if s1 == s0:
            continue
        ty = t // tiles_x
        tx = t - ty * tiles_x
        y0 = ty * tile
        x0 = tx * tile
        y1 = min(y0 + tile, height)
        x1 = min(x0 + tile, width)
        for py in range(y0, y1):
            for px in range(x0, x1):
                trans = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                o = 0.0
                d_acc = 0.0
                for s in range(s0, s1):
                    i = tile_splats[s]
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    q = (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                         + conic[i, 2] * dy * dy)
                    if q > q_max:
                        continue
                    a = alpha[i] * np.exp(-0.5 * q)
                    if a > ALPHA_CEIL:
                        a = ALPHA_CEIL
                    w = a * trans
                    r += rgb[i, 0] * w
                    g += rgb[i, 1] * w
                    b += rgb[i, 2] * w
                    d_acc += depth[i] * w
                    if is_fg[i]:
                        o += w
                    trans *= 1.0 - a
                    if trans < term_eps:
                        break
                img[py, px, 0] = r
                img[py, px, 1] = g
                img[py, px, 2] = b
                ofg[py, px] = o
                dep[py, px] = d_acc
                final_t[py, px] = trans
    return img, ofg, dep, final_t


@njit(cache=True)
def raster_hitlist(tile_starts, tile_splats, mean2d, conic, alpha, height,
                   width, tile, tiles_x, q_max, term_eps):
    """Per-pixel CSR list of the splats that actually contributed."""
    n_pix = height * width
    counts = np.zeros(n_pix, dtype=np.int64)
    n_tiles = tile_starts.shape[0] - 1
    for phase in range(2):
        if phase == 1:
            offsets = np.zeros(n_pix + 1, dtype=np.int64)
            for p in range(n_pix):
                offsets[p + 1] = offsets[p] + counts[p]
            hits = np.empty(offsets[n_pix], dtype=np.int64)
            cursor = offsets[:-1].copy()
        for t in range(n_tiles):
            s0 = tile_starts[t]
            s1 = tile_starts[t + 1]
            if s1 == s0:
                continue
            ty = t // tiles_x
            tx = t - ty * tiles_x
            y0 = ty * tile
            x0 = tx * tile
            y1 = min(y0 + tile, height)
            x1 = min(x0 + tile, width)
            for py in range(y0, y1):
                for px in range(x0, x1):
                    pid = py * width + px
                    trans = 1.0
                    for s in range(s0, s1):
                        i = tile_splats[s]
                        dx = px - mean2d[i, 0]
                        dy = py - mean2d[i, 1]
                        q = (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                             + conic[i, 2] * dy * dy)
                        if q > q_max:
                            continue
                        a = alpha[i] * np.exp(-0.5 * q)
                        if a > ALPHA_CEIL:
                            a = ALPHA_CEIL
                        if phase == 0:
                            counts[pid] += 1
                        else:
                            hits[cursor[pid]] = i
                            cursor[pid] += 1
                        trans *= 1.0 - a
                        if trans < term_eps:
                            break
    return offsets, hits


@njit(cache=True)
def raster_backward(offsets, hits, mean2d, conic, alpha, rgb, is_fg, d_img,
                    d_ofg, height, width):
    """Adjoint of the compositing loop over recorded per-pixel hit lists.

    Returns gradients wrt 2D means, the conic (free-entry convention for the
    off-diagonal), alphas, and per-splat colors.
    """
    n = mean2d.shape[0]
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_alpha = np.zeros(n)
    d_rgb = np.zeros((n, 3))
    max_hits = 0
    n_pix = height * width
    for p in range(n_pix):
        h = offsets[p + 1] - offsets[p]
        if h > max_hits:
            max_hits = h
    a_buf = np.empty(max_hits)
    t_buf = np.empty(max_hits)
    for p in range(n_pix):
        h0 = offsets[p]
        h1 = offsets[p + 1]
        if h1 == h0:
            continue
        py = p // width
        px = p - py * width
        trans = 1.0
        for s in range(h0, h1):
            i = hits[s]
            dx = px - mean2d[i, 0]
            dy = py - mean2d[i, 1]
            q = (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                 + conic[i, 2] * dy * dy)
            a = alpha[i] * np.exp(-0.5 * q)
            if a > ALPHA_CEIL:
                a = ALPHA_CEIL
            a_buf[s - h0] = a
            t_buf[s - h0] = trans
            trans *= 1.0 - a
        sc0 = 0.0
        sc1 = 0.0
        sc2 = 0.0
        so = 0.0
        g_img0 = d_img[py, px, 0]
        g_img1 = d_img[py, px, 1]
        g_img2 = d_img[py, px, 2]
        g_ofg = d_ofg[py, px]
        for s in range(h1 - 1, h0 - 1, -1):
            i = hits[s]
            a = a_buf[s - h0]
            t_pre = t_buf[s - h0]
            w = a * t_pre
            d_rgb[i, 0] += w * g_img0
            d_rgb[i, 1] += w * g_img1
            d_rgb[i, 2] += w * g_img2
            inv_om = 1.0 / (1.0 - a)
            dc_da0 = rgb[i, 0] * t_pre - sc0 * inv_om
            dc_da1 = rgb[i, 1] * t_pre - sc1 * inv_om
            dc_da2 = rgb[i, 2] * t_pre - sc2 * inv_om
            g_a = g_img0 * dc_da0 + g_img1 * dc_da1 + g_img2 * dc_da2
            if is_fg[i]:
                g_a += g_ofg * (t_pre - so * inv_om)
            else:
                g_a += g_ofg * (-so * inv_om)
            d_alpha[i] += g_a * a / alpha[i]
            g_q = g_a * (-0.5 * a)
            dx = px - mean2d[i, 0]
            dy = py - mean2d[i, 1]
            d_mean2d[i, 0] += g_q * (-2.0 * (conic[i, 0] * dx + conic[i, 1] * dy))
            d_mean2d[i, 1] += g_q * (-2.0 * (conic[i, 1] * dx + conic[i, 2] * dy))
            d_conic[i, 0] += g_q * dx * dx
            d_conic[i, 1] += g_q * dx * dy
            d_conic[i, 2] += g_q * dy * dy
            sc0 += rgb[i, 0] * w
            sc1 += rgb[i, 1] * w
            sc2 += rgb[i, 2] * w
            if is_fg[i]:
                so += w
    return d_mean2d, d_conic, d_alpha, d_rgb


@njit(cache=True)
def _knn_query(sorted_pts, cell_of_sorted, cell_ids, cell_starts, nx, ny, nz,
               inv_cell, ox, oy, oz, cell_size, k, out):
    n = sorted_pts.shape[0]
    best = np.empty(k)
    max_ring = max(nx, max(ny, nz))
    for qi in range(n):
        qx = sorted_pts[qi, 0]
        qy = sorted_pts[qi, 1]
        qz = sorted_pts[qi, 2]
        cx = int((qx - ox) * inv_cell)
        cy = int((qy - oy) * inv_cell)
        cz = int((qz - oz) * inv_cell)
        if cx > nx - 1:
            cx = nx - 1
        if cy > ny - 1:
            cy = ny - 1
        if cz > nz - 1:
            cz = nz - 1
        for j in range(k):
            best[j] = np.inf
        found = 0
        for ring in range(max_ring + 1):
            lo_x = max(cx - ring, 0)
            hi_x = min(cx + ring, nx - 1)
            for ix in range(lo_x, hi_x + 1):
                lo_y = max(cy - ring, 0)
                hi_y = min(cy + ring, ny - 1)
                for iy in range(lo_y, hi_y + 1):
                    lo_z = max(cz - ring, 0)
                    hi_z = min(cz + ring, nz - 1)
                    for iz in range(lo_z, hi_z + 1):
                        cheb = max(abs(ix - cx), max(abs(iy - cy), abs(iz - cz)))
                        if cheb != ring:
                            continue
                        cid = (ix * ny + iy) * nz + iz
                        lo = np.searchsorted(cell_ids, cid)
                        if lo >= cell_ids.shape[0] or cell_ids[lo] != cid:
                            continue
                        for j in range(cell_starts[lo], cell_starts[lo + 1]):
                            if j == qi:
                                continue
                            ddx = sorted_pts[j, 0] - qx
                            ddy = sorted_pts[j, 1] - qy
                            ddz = sorted_pts[j, 2] - qz
                            d2 = ddx * ddx + ddy * ddy + ddz * ddz
                            if d2 < best[k - 1]:
                                pos = k - 1
                                while pos > 0 and best[pos - 1] > d2:
                                    best[pos] = best[pos - 1]
                                    pos -= 1
                                best[pos] = d2
                                if found < k:
                                    found += 1
            if found == k and np.sqrt(best[k - 1]) <= ring * cell_size:
                break
        acc = 0.0
        for j in range(k):
            acc += np.sqrt(best[j])
        out[qi] = acc / k
    return out


def mean_knn_distance(points, k):
    """Exact mean distance from each point to its k nearest neighbors."""
    n = points.shape[0]
    if n <= k:
        raise ValueError("need more points than neighbors")
    pts = np.ascontiguousarray(points, dtype=np.float64)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = hi - lo
    # cell size tied to the largest axis keeps the grid bounded by ~n cells
    # even for degenerate (planar/collinear/duplicate) clouds
    cell = max(float(span.max()) / max(np.ceil(n ** (1.0 / 3.0)), 1.0), 1e-9)
    dims = np.maximum((span / cell).astype(np.int64) + 1, 1)
    nx, ny, nz = int(dims[0]), int(dims[1]), int(dims[2])
    ci = np.minimum(((pts - lo) / cell).astype(np.int64), dims - 1)
    lin = (ci[:, 0] * ny + ci[:, 1]) * nz + ci[:, 2]
    order = np.argsort(lin, kind="stable")
    lin_sorted = lin[order]
    cell_ids, starts = np.unique(lin_sorted, return_index=True)
    cell_starts = np.append(starts, n).astype(np.int64)
    out = np.empty(n)
    _knn_query(pts[order], lin_sorted, cell_ids, cell_starts, nx, ny, nz,
               1.0 / cell, lo[0], lo[1], lo[2], cell, k, out)
    result = np.empty(n)
    result[order] = out
    return result


@njit(cache=True)
def _binsearch(keys, key):
    lo = 0
    hi = keys.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    if lo < keys.shape[0] and keys[lo] == key:
        return lo
    return -1


@njit(cache=True)
def trilinear_gather(sorted_keys, feats, dims, pts):
    """Interpolate sparse voxel features at continuous grid coordinates.

    ``pts`` are already in corner-lattice units (voxel centers at integers);
    unoccupied or out-of-range corners contribute zero.
    """
    n = pts.shape[0]
    c = feats.shape[1]
    out = np.zeros((n, c))
    d0, d1, d2 = dims[0], dims[1], dims[2]
    for p in range(n):
        gx = pts[p, 0]
        gy = pts[p, 1]
        gz = pts[p, 2]
        bx = int(np.floor(gx))
        by = int(np.floor(gy))
        bz = int(np.floor(gz))
        fx = gx - bx
        fy = gy - by
        fz = gz - bz
        for cx in range(2):
            ix = bx + cx
            if ix < 0 or ix >= d0:
                continue
            wx = fx if cx == 1 else 1.0 - fx
            for cy in range(2):
                iy = by + cy
                if iy < 0 or iy >= d1:
                    continue
                wy = fy if cy == 1 else 1.0 - fy
                for cz in range(2):
                    iz = bz + cz
                    if iz < 0 or iz >= d2:
                        continue
                    wz = fz if cz == 1 else 1.0 - fz
                    w = wx * wy * wz
                    if w == 0.0:
                        continue
                    key = (ix * d1 + iy) * d2 + iz
                    idx = _binsearch(sorted_keys, key)
                    if idx < 0:
                        continue
                    for ch in range(c):
                        out[p, ch] += w * feats[idx, ch]
    return out


@njit(cache=True)
def trilinear_scatter(sorted_keys, n_feats, dims, pts, grads):
    """Adjoint of trilinear_gather: scatter gradients onto occupied voxels."""
    n = pts.shape[0]
    c = grads.shape[1]
    out = np.zeros((n_feats, c))
    d0, d1, d2 = dims[0], dims[1], dims[2]
    for p in range(n):
        gx = pts[p, 0]
        gy = pts[p, 1]
        gz = pts[p, 2]
        bx = int(np.floor(gx))
        by = int(np.floor(gy))
        bz = int(np.floor(gz))
        fx = gx - bx
        fy = gy - by
        fz = gz - bz
        for cx in range(2):
            ix = bx + cx
            if ix < 0 or ix >= d0:
                continue
            wx = fx if cx == 1 else 1.0 - fx
            for cy in range(2):
                iy = by + cy
                if iy < 0 or iy >= d1:
                    continue
                wy = fy if cy == 1 else 1.0 - fy
                for cz in range(2):
                    iz = bz + cz
                    if iz < 0 or iz >= d2:
                        continue
                    wz = fz if cz == 1 else 1.0 - fz
                    w = wx * wy * wz
                    if w == 0.0:
                        continue
                    key = (ix * d1 + iy) * d2 + iz
                    idx = _binsearch(sorted_keys, key)
                    if idx < 0:
                        continue
                    for ch in range(c):
                        out[idx, ch] += w * grads[p, ch]
    return out
