"""Tile-based Gaussian splatting on the CPU, forward and backward.

Projection follows the EWA recipe: world covariance R S S^T R^T mapped
through the world-to-camera rotation and the perspective Jacobian at the
mean, with a small isotropic dilation in pixel space.  Compositing is
front-to-back per 16x16 tile with early termination; the backward pass
replays recorded per-pixel hit lists and chains analytic adjoints all the
way to means, quaternions, scales, opacities, and SH coefficients.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .gaussians import quat_to_rotation, rotation_quat_jacobian
from .ibr import eval_sh_backward, eval_sh_with_ctx
from .nn import d_normalize_rows, normalize_rows

TILE = 16
Q_MAX = 9.0            # 3-sigma footprint cutoff
TERMINATION = 1e-4     # transmittance early-out
DILATION = 0.3         # px^2 added to the projected covariance diagonal
NEAR_PLANE = 0.01


class RasterError(Exception):
    pass


@dataclass
class RenderOutput:
    color: np.ndarray     # (H, W, 3)
    fg_alpha: np.ndarray  # (H, W) accumulated foreground compositing weight
    depth: np.ndarray     # (H, W) alpha-blended view depth (diagnostic)
    final_t: np.ndarray   # (H, W) remaining transmittance


@dataclass
class RasterGrads:
    means: np.ndarray
    quaternions: np.ndarray
    scales: np.ndarray
    alphas: np.ndarray
    sh: np.ndarray


def _check_finite(bundle):
    if len(bundle) == 0:
        return
    for name in ("means", "quaternions", "scales", "alphas", "sh"):
        arr = getattr(bundle, name)
        bad = ~np.isfinite(arr).reshape(len(bundle), -1).all(axis=1)
        if np.any(bad):
            raise RasterError(f"non-finite {name} at primitive {int(np.flatnonzero(bad)[0])}")


def project_splats(bundle, cam, pose, near=NEAR_PLANE):
    """EWA projection of all primitives; returns a context with kept splats."""
    _check_finite(bundle)
    n = len(bundle)
    rot_wc = pose.rotation.T
    p_cam = (bundle.means - pose.center) @ rot_wc.T
    z = p_cam[:, 2]
    in_front = z > near
    safe_z = np.where(in_front, z, 1.0)
    px = cam.fx * p_cam[:, 0] / safe_z + cam.cx
    py = cam.fy * p_cam[:, 1] / safe_z + cam.cy
    q_hat, q_norm = normalize_rows(bundle.quaternions)
    rot = quat_to_rotation(q_hat)
    ns = rot * bundle.scales[:, None, :]          # R diag(s)
    cov3 = ns @ ns.transpose(0, 2, 1)
    # evaluate the Jacobian at frustum-clamped coordinates so far-off-axis
    # splats keep bounded footprints (their tails then fail the q cutoff)
    lim_x = 1.3 * (0.5 * cam.width / cam.fx)
    lim_y = 1.3 * (0.5 * cam.height / cam.fy)
    ratio_x = p_cam[:, 0] / safe_z
    ratio_y = p_cam[:, 1] / safe_z
    clamped_x = np.abs(ratio_x) > lim_x
    clamped_y = np.abs(ratio_y) > lim_y
    tx = np.clip(ratio_x, -lim_x, lim_x) * safe_z
    ty = np.clip(ratio_y, -lim_y, lim_y) * safe_z
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / safe_z
    jac[:, 0, 2] = -cam.fx * tx / safe_z ** 2
    jac[:, 1, 1] = cam.fy / safe_z
    jac[:, 1, 2] = -cam.fy * ty / safe_z ** 2
    m = jac @ rot_wc
    cov2 = m @ cov3 @ m.transpose(0, 2, 1)
    cov2[:, 0, 0] += DILATION
    cov2[:, 1, 1] += DILATION
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] * cov2[:, 1, 0]
    mid = 0.5 * (cov2[:, 0, 0] + cov2[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
    on_image = ((px + radius >= 0) & (px - radius <= cam.width - 1)
                & (py + radius >= 0) & (py - radius <= cam.height - 1))
    keep = in_front & on_image & (det > 0)
    idx = np.flatnonzero(keep)
    conic = np.empty((idx.size, 2, 2))
    d = det[idx]
    conic[:, 0, 0] = cov2[idx, 1, 1] / d
    conic[:, 1, 1] = cov2[idx, 0, 0] / d
    conic[:, 0, 1] = -cov2[idx, 0, 1] / d
    conic[:, 1, 0] = conic[:, 0, 1]
    view = bundle.means[idx] - pose.center
    dist = np.linalg.norm(view, axis=1, keepdims=True)
    dirs = view / np.maximum(dist, 1e-12)
    rgb, sh_ctx = eval_sh_with_ctx(bundle.sh[idx], dirs)
    return {
        "bundle": bundle, "cam": cam, "pose": pose, "idx": idx,
        "mean2d": np.stack([px[idx], py[idx]], axis=1),
        "cov2": cov2[idx], "conic": conic, "depth": z[idx],
        "radius": radius[idx], "rgb": rgb, "sh_ctx": sh_ctx,
        "p_cam": p_cam[idx], "jac": jac[idx], "m": m[idx], "rot_wc": rot_wc,
        "tx": tx[idx], "ty": ty[idx],
        "clamped_x": clamped_x[idx], "clamped_y": clamped_y[idx],
        "cov3": cov3[idx], "ns": ns[idx], "rot": rot[idx],
        "q_hat": q_hat[idx], "q_norm": q_norm[idx],
        "dirs": dirs, "dist": dist,
        "is_fg": bundle.foreground[idx].astype(np.uint8),
    }


def splat2d_covariance(bundle, cam, pose, near=NEAR_PLANE):
    """Projected 2D covariances and screen means (diagnostic/test surface)."""
    ctx = project_splats(bundle, cam, pose, near)
    return ctx["idx"], ctx["mean2d"], ctx["cov2"], ctx["depth"]


def _bin_tiles(ctx, width, height, tile):
    mean2d, radius, depth = ctx["mean2d"], ctx["radius"], ctx["depth"]
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    if mean2d.shape[0] == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), tiles_x
    tx0 = np.clip(np.floor((mean2d[:, 0] - radius) / tile).astype(np.int64), 0, tiles_x - 1)
    tx1 = np.clip(np.floor((mean2d[:, 0] + radius) / tile).astype(np.int64), 0, tiles_x - 1)
    ty0 = np.clip(np.floor((mean2d[:, 1] - radius) / tile).astype(np.int64), 0, tiles_y - 1)
    ty1 = np.clip(np.floor((mean2d[:, 1] + radius) / tile).astype(np.int64), 0, tiles_y - 1)
    counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    splat_ids = np.repeat(np.arange(mean2d.shape[0]), counts)
    tile_ids = np.empty(splat_ids.size, dtype=np.int64)
    pos = 0
    for i in range(mean2d.shape[0]):
        xs = np.arange(tx0[i], tx1[i] + 1)
        ys = np.arange(ty0[i], ty1[i] + 1)
        block = (ys[:, None] * tiles_x + xs[None, :]).ravel()
        tile_ids[pos:pos + block.size] = block
        pos += block.size
    order = np.lexsort((splat_ids, depth[splat_ids], tile_ids))
    tile_ids = tile_ids[order]
    tile_splats = splat_ids[order]
    tile_starts = np.searchsorted(tile_ids, np.arange(n_tiles + 1))
    return tile_starts.astype(np.int64), tile_splats.astype(np.int64), tiles_x


def render(bundle, cam, pose, tile=TILE, record=False, near=NEAR_PLANE):
    """Rasterize primitives; returns (RenderOutput, ctx or None)."""
    ctx = project_splats(bundle, cam, pose, near)
    tile_starts, tile_splats, tiles_x = _bin_tiles(ctx, cam.width, cam.height, tile)
    args = (np.ascontiguousarray(tile_starts), np.ascontiguousarray(tile_splats),
            np.ascontiguousarray(ctx["mean2d"]),
            np.ascontiguousarray(np.stack([ctx["conic"][:, 0, 0], ctx["conic"][:, 0, 1],
                                           ctx["conic"][:, 1, 1]], axis=1)),
            np.ascontiguousarray(ctx["bundle"].alphas[ctx["idx"]]))
    img, ofg, dep, final_t = kernels.raster_forward(
        *args, np.ascontiguousarray(ctx["rgb"]), np.ascontiguousarray(ctx["depth"]),
        np.ascontiguousarray(ctx["is_fg"]), cam.height, cam.width, tile, tiles_x,
        Q_MAX, TERMINATION)
    out = RenderOutput(img, ofg, dep, final_t)
    if not record:
        return out, None
    offsets, hits = kernels.raster_hitlist(*args, cam.height, cam.width, tile,
                                           tiles_x, Q_MAX, TERMINATION)
    ctx["offsets"] = offsets
    ctx["hits"] = hits
    return out, ctx


def render_reference(bundle, cam, pose, near=NEAR_PLANE):
    """Brute-force per-pixel compositing oracle (independent of the kernels).

    Every projected splat is composited at every pixel in global depth
    order under the same alpha/cutoff/termination contract.
    """
    ctx = project_splats(bundle, cam, pose, near)
    h, w = cam.height, cam.width
    img = np.zeros((h, w, 3))
    ofg = np.zeros((h, w))
    dep = np.zeros((h, w))
    final_t = np.ones((h, w))
    order = np.lexsort((np.arange(ctx["depth"].size), ctx["depth"]))
    mean2d = ctx["mean2d"][order]
    conic = ctx["conic"][order]
    alpha = ctx["bundle"].alphas[ctx["idx"]][order]
    rgb = ctx["rgb"][order]
    depth = ctx["depth"][order]
    fg = ctx["is_fg"][order].astype(bool)
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    trans = np.ones(h * w)
    img_f = img.reshape(-1, 3)
    ofg_f = ofg.reshape(-1)
    dep_f = dep.reshape(-1)
    for i in range(mean2d.shape[0]):
        d = pix - mean2d[i]
        q = (conic[i, 0, 0] * d[:, 0] ** 2 + 2 * conic[i, 0, 1] * d[:, 0] * d[:, 1]
             + conic[i, 1, 1] * d[:, 1] ** 2)
        a = np.where(q <= Q_MAX, alpha[i] * np.exp(-0.5 * np.minimum(q, Q_MAX)), 0.0)
        np.minimum(a, 1.0 - 1e-6, out=a)
        live = trans >= TERMINATION
        wgt = a * trans * live
        img_f += wgt[:, None] * rgb[i]
        dep_f += wgt * depth[i]
        if fg[i]:
            ofg_f += wgt
        trans = trans * (1.0 - a * live)
    final_t[:] = trans.reshape(h, w)
    return RenderOutput(img, ofg, dep, final_t)


def render_backward(ctx, d_img, d_ofg):
    """Gradients of the render wrt all primitive attributes.

    Requires a context from ``render(..., record=True)``.  Primitives culled
    during projection receive zero gradient, as do splats behind an opaque
    surface (they never entered a hit list).
    """
    if ctx is None or "offsets" not in ctx:
        raise RasterError("render_backward needs a context recorded by render()")
    bundle, cam, pose, idx = ctx["bundle"], ctx["cam"], ctx["pose"], ctx["idx"]
    n_total = len(bundle)
    conic_packed = np.ascontiguousarray(
        np.stack([ctx["conic"][:, 0, 0], ctx["conic"][:, 0, 1], ctx["conic"][:, 1, 1]], axis=1))
    d_mean2d, d_conic_packed, d_alpha_k, d_rgb_k = kernels.raster_backward(
        ctx["offsets"], ctx["hits"], np.ascontiguousarray(ctx["mean2d"]),
        conic_packed, np.ascontiguousarray(bundle.alphas[idx]),
        np.ascontiguousarray(ctx["rgb"]), np.ascontiguousarray(ctx["is_fg"]),
        np.ascontiguousarray(d_img), np.ascontiguousarray(d_ofg),
        cam.height, cam.width)

    # color path: SH coefficients plus the view-direction dependence on means
    d_sh_k, d_dirs = eval_sh_backward(ctx["sh_ctx"], d_rgb_k)
    dist = ctx["dist"]
    dirs = ctx["dirs"]
    d_view = (d_dirs - dirs * (d_dirs * dirs).sum(axis=1, keepdims=True)) / np.maximum(dist, 1e-12)

    # conic -> projected covariance
    g = np.empty((idx.size, 2, 2))
    g[:, 0, 0] = d_conic_packed[:, 0]
    g[:, 0, 1] = d_conic_packed[:, 1]
    g[:, 1, 0] = d_conic_packed[:, 1]
    g[:, 1, 1] = d_conic_packed[:, 2]
    conic = ctx["conic"]
    d_cov2 = -conic @ g @ conic

    # cov2 = M cov3 M^T (+ dilation); M = J R_wc
    m = ctx["m"]
    cov3 = ctx["cov3"]
    sym2 = d_cov2 + d_cov2.transpose(0, 2, 1)
    d_m = sym2 @ m @ cov3
    d_cov3 = m.transpose(0, 2, 1) @ d_cov2 @ m
    d_jac = d_m @ ctx["rot_wc"].T

    # perspective Jacobian terms and the pixel-position path, to camera space.
    # Where the evaluation point was frustum-clamped, the clamped coordinate
    # is c*z (c constant), which changes its z-derivative and detaches x/y.
    p_cam = ctx["p_cam"]
    z = p_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    tx, ty = ctx["tx"], ctx["ty"]
    cx_mask, cy_mask = ctx["clamped_x"], ctx["clamped_y"]
    d_pcam = np.zeros_like(p_cam)
    d_pcam[:, 0] = d_jac[:, 0, 2] * (-fx / z ** 2) * ~cx_mask
    d_pcam[:, 1] = d_jac[:, 1, 2] * (-fy / z ** 2) * ~cy_mask
    d_pcam[:, 2] = (d_jac[:, 0, 0] * (-fx / z ** 2)
                    + d_jac[:, 0, 2] * np.where(cx_mask, fx * tx / z ** 3, 2 * fx * tx / z ** 3)
                    + d_jac[:, 1, 1] * (-fy / z ** 2)
                    + d_jac[:, 1, 2] * np.where(cy_mask, fy * ty / z ** 3, 2 * fy * ty / z ** 3))
    d_pcam += np.einsum("nij,ni->nj", ctx["jac"], d_mean2d)
    d_means_k = d_pcam @ ctx["rot_wc"] + d_view

    # cov3 = N N^T with N = R diag(s)
    sym3 = d_cov3 + d_cov3.transpose(0, 2, 1)
    d_ns = sym3 @ ctx["ns"]
    d_rot = d_ns * ctx["bundle"].scales[idx][:, None, :]
    d_scales_k = np.einsum("nik,nik->nk", ctx["rot"], d_ns)
    jac_q = rotation_quat_jacobian(ctx["q_hat"])
    d_qhat = np.einsum("naij,nij->na", jac_q, d_rot)
    d_q_k = d_normalize_rows(bundle.quaternions[idx], ctx["q_norm"], d_qhat)

    grads = RasterGrads(np.zeros((n_total, 3)), np.zeros((n_total, 4)),
                        np.zeros((n_total, 3)), np.zeros(n_total),
                        np.zeros((n_total, 12)))
    grads.means[idx] = d_means_k
    grads.quaternions[idx] = d_q_k
    grads.scales[idx] = d_scales_k
    grads.alphas[idx] = d_alpha_k
    grads.sh[idx] = d_sh_k
    return grads
