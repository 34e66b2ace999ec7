"""Vectorized numpy fallbacks for the numba kernels.

Selected by ``VOXSPLAT_NO_NUMBA=1``.  Same contracts, same numerical
conventions (alpha ceiling, q cutoff, termination rule); tile batches are
processed with dense (pixel x splat) arrays instead of compiled loops.
"""

import numpy as np

ALPHA_CEIL = 1.0 - 1e-6


def _tile_pixels(t, tiles_x, tile, height, width):
    ty, tx = divmod(t, tiles_x)
    y0, x0 = ty * tile, tx * tile
    y1, x1 = min(y0 + tile, height), min(x0 + tile, width)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return ys.ravel(), xs.ravel()


def _tile_weights(ids, xs, ys, mean2d, conic, alpha, q_max, term_eps):
    """Per-pixel contribution weights for one tile's splat list.

    Returns (a, t_pre, w) where rows are pixels and columns follow the
    depth-sorted splat order; entries past pixel termination carry zero w.
    """
    dx = xs[:, None] - mean2d[ids, 0][None, :]
    dy = ys[:, None] - mean2d[ids, 1][None, :]
    q = (conic[ids, 0] * dx * dx + 2.0 * conic[ids, 1] * dx * dy
         + conic[ids, 2] * dy * dy)
    a = np.where(q <= q_max, alpha[ids] * np.exp(-0.5 * np.minimum(q, q_max)), 0.0)
    np.minimum(a, ALPHA_CEIL, out=a)
    t_pre = np.cumprod(1.0 - a, axis=1)
    t_pre = np.concatenate([np.ones((a.shape[0], 1)), t_pre[:, :-1]], axis=1)
    live = t_pre >= term_eps
    w = a * t_pre * live
    return q, a, t_pre, live, w


def raster_forward(tile_starts, tile_splats, mean2d, conic, alpha, rgb, depth,
                   is_fg, height, width, tile, tiles_x, q_max, term_eps):
    img = np.zeros((height, width, 3))
    ofg = np.zeros((height, width))
    dep = np.zeros((height, width))
    final_t = np.ones((height, width))
    fg = is_fg.astype(np.float64)
    for t in range(tile_starts.shape[0] - 1):
        s0, s1 = tile_starts[t], tile_starts[t + 1]
        if s1 == s0:
            continue
        ids = tile_splats[s0:s1]
        ys, xs = _tile_pixels(t, tiles_x, tile, height, width)
        _, a, _, live, w = _tile_weights(ids, xs, ys, mean2d, conic, alpha,
                                         q_max, term_eps)
        img[ys, xs] = w @ rgb[ids]
        ofg[ys, xs] = w @ fg[ids]
        dep[ys, xs] = w @ depth[ids]
        final_t[ys, xs] = np.prod(1.0 - a * live, axis=1)
    return img, ofg, dep, final_t


def raster_hitlist(tile_starts, tile_splats, mean2d, conic, alpha, height,
                   width, tile, tiles_x, q_max, term_eps):
    n_pix = height * width
    counts = np.zeros(n_pix, dtype=np.int64)
    per_tile = []
    for t in range(tile_starts.shape[0] - 1):
        s0, s1 = tile_starts[t], tile_starts[t + 1]
        if s1 == s0:
            continue
        ids = tile_splats[s0:s1]
        ys, xs = _tile_pixels(t, tiles_x, tile, height, width)
        q, _, _, live, _ = _tile_weights(ids, xs, ys, mean2d, conic, alpha,
                                         q_max, term_eps)
        mask = (q <= q_max) & live
        pix = ys * width + xs
        counts[pix] = mask.sum(axis=1)
        rows, cols = np.nonzero(mask)
        per_tile.append((pix[rows], ids[cols]))
    offsets = np.zeros(n_pix + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    hits = np.empty(offsets[-1], dtype=np.int64)
    for pix, splat in per_tile:
        # rows from nonzero are already grouped per pixel in composite order
        idx = offsets[pix] + _running_rank(pix)
        hits[idx] = splat
    return offsets, hits


def _running_rank(grouped):
    """Rank of each element within its (already contiguous) group."""
    if grouped.size == 0:
        return grouped
    change = np.ones(grouped.size, dtype=np.int64)
    change[1:] = grouped[1:] != grouped[:-1]
    group_start = np.maximum.accumulate(np.where(change, np.arange(grouped.size), 0))
    return np.arange(grouped.size) - group_start


def raster_backward(offsets, hits, mean2d, conic, alpha, rgb, is_fg, d_img,
                    d_ofg, height, width):
    n = mean2d.shape[0]
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_alpha = np.zeros(n)
    d_rgb = np.zeros((n, 3))
    counts = np.diff(offsets)
    pix_ids = np.repeat(np.arange(height * width), counts)
    if hits.size == 0:
        return d_mean2d, d_conic, d_alpha, d_rgb
    py = pix_ids // width
    px = pix_ids - py * width
    dx = px - mean2d[hits, 0]
    dy = py - mean2d[hits, 1]
    q = (conic[hits, 0] * dx * dx + 2.0 * conic[hits, 1] * dx * dy
         + conic[hits, 2] * dy * dy)
    a = np.minimum(alpha[hits] * np.exp(-0.5 * q), ALPHA_CEIL)
    # per-pixel exclusive prefix product of (1 - a), segment-reset
    t_pre = np.empty_like(a)
    w = np.empty_like(a)
    sc = np.empty((a.size, 3))
    so = np.empty_like(a)
    fg = is_fg.astype(np.float64)[hits]
    col = rgb[hits]
    for p in range(height * width):
        h0, h1 = offsets[p], offsets[p + 1]
        if h1 == h0:
            continue
        seg = slice(h0, h1)
        cp = np.cumprod(1.0 - a[seg])
        t_pre[h0] = 1.0
        t_pre[h0 + 1:h1] = cp[:-1]
        w[seg] = a[seg] * t_pre[seg]
        contrib = col[seg] * w[seg, None]
        sc[seg] = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib
        contrib_o = fg[seg] * w[seg]
        so[seg] = np.cumsum(contrib_o[::-1])[::-1] - contrib_o
    g_img = d_img.reshape(-1, 3)[pix_ids]
    g_ofg = d_ofg.reshape(-1)[pix_ids]
    np.add.at(d_rgb, hits, w[:, None] * g_img)
    inv_om = 1.0 / (1.0 - a)
    dc_da = col * t_pre[:, None] - sc * inv_om[:, None]
    dofg_da = fg * t_pre - so * inv_om
    g_a = (g_img * dc_da).sum(axis=1) + g_ofg * dofg_da
    np.add.at(d_alpha, hits, g_a * a / alpha[hits])
    g_q = g_a * (-0.5 * a)
    np.add.at(d_mean2d, (hits, 0), g_q * (-2.0 * (conic[hits, 0] * dx + conic[hits, 1] * dy)))
    np.add.at(d_mean2d, (hits, 1), g_q * (-2.0 * (conic[hits, 1] * dx + conic[hits, 2] * dy)))
    np.add.at(d_conic, (hits, 0), g_q * dx * dx)
    np.add.at(d_conic, (hits, 1), g_q * dx * dy)
    np.add.at(d_conic, (hits, 2), g_q * dy * dy)
    return d_mean2d, d_conic, d_alpha, d_rgb


def mean_knn_distance(points, k, block=512):
    n = points.shape[0]
    if n <= k:
        raise ValueError("need more points than neighbors")
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty(n)
    for s in range(0, n, block):
        q = pts[s:s + block]
        d2 = ((q[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        # k+1 smallest include the query itself at distance zero
        part = np.partition(d2, k, axis=1)[:, :k + 1]
        part.sort(axis=1)
        out[s:s + block] = np.sqrt(part[:, 1:]).mean(axis=1)
    return out


def _corner_terms(dims, pts):
    base = np.floor(pts).astype(np.int64)
    frac = pts - base
    corners = []
    for cx in range(2):
        for cy in range(2):
            for cz in range(2):
                ijk = base + np.array([cx, cy, cz])
                wx = frac[:, 0] if cx else 1.0 - frac[:, 0]
                wy = frac[:, 1] if cy else 1.0 - frac[:, 1]
                wz = frac[:, 2] if cz else 1.0 - frac[:, 2]
                w = wx * wy * wz
                inside = np.all((ijk >= 0) & (ijk < dims), axis=1)
                key = (ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2]
                corners.append((key, w, inside))
    return corners


def trilinear_gather(sorted_keys, feats, dims, pts):
    out = np.zeros((pts.shape[0], feats.shape[1]))
    for key, w, inside in _corner_terms(np.asarray(dims), pts):
        idx = np.searchsorted(sorted_keys, key)
        idx = np.clip(idx, 0, max(sorted_keys.shape[0] - 1, 0))
        found = inside & (sorted_keys.shape[0] > 0)
        if sorted_keys.shape[0] > 0:
            found &= sorted_keys[idx] == key
        sel = found & (w != 0.0)
        out[sel] += w[sel, None] * feats[idx[sel]]
    return out


def trilinear_scatter(sorted_keys, n_feats, dims, pts, grads):
    out = np.zeros((n_feats, grads.shape[1]))
    for key, w, inside in _corner_terms(np.asarray(dims), pts):
        idx = np.searchsorted(sorted_keys, key)
        idx = np.clip(idx, 0, max(sorted_keys.shape[0] - 1, 0))
        found = inside & (sorted_keys.shape[0] > 0)
        if sorted_keys.shape[0] > 0:
            found &= sorted_keys[idx] == key
        sel = found & (w != 0.0)
        np.add.at(out, idx[sel], w[sel, None] * grads[sel])
    return out
