"""Photometric losses, the opacity-entropy regularizer, and image metrics.

SSIM uses the conventional 11x11 Gaussian window (sigma 1.5) with stability
constants C1 = 0.01^2 and C2 = 0.03^2 on unit dynamic range, evaluated over
the window-valid interior.  All loss terms ship with hand-written adjoints.
"""

import numpy as np

LAMBDA_RGB = 0.2       # SSIM weight inside the photometric loss
LAMBDA_ENTROPY = 0.1
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
ENTROPY_EPS = 1e-6


def _gaussian_kernel(size=11, sigma=1.5):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()

_KERNEL = _gaussian_kernel()


def _window_filter(img, kernel=_KERNEL):
    """Valid-mode correlation of an (H, W[, C]) image with the window."""
    kh, kw = kernel.shape
    h, w = img.shape[0] - kh + 1, img.shape[1] - kw + 1
    out = np.zeros((h, w) + img.shape[2:])
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * img[i:i + h, j:j + w]
    return out


def _window_filter_adjoint(grad, full_shape, kernel=_KERNEL):
    kh, kw = kernel.shape
    h, w = grad.shape[0], grad.shape[1]
    out = np.zeros(full_shape)
    for i in range(kh):
        for j in range(kw):
            out[i:i + h, j:j + w] += kernel[i, j] * grad
    return out


def _ssim_terms(x, y):
    u1 = _window_filter(x)
    u2 = _window_filter(y)
    v1 = _window_filter(x * x)
    v2 = _window_filter(y * y)
    v12 = _window_filter(x * y)
    s1 = v1 - u1 * u1
    s2 = v2 - u2 * u2
    s12 = v12 - u1 * u2
    a1 = 2 * u1 * u2 + SSIM_C1
    a2 = 2 * s12 + SSIM_C2
    b1 = u1 * u1 + u2 * u2 + SSIM_C1
    b2 = s1 + s2 + SSIM_C2
    return u1, u2, a1, a2, b1, b2


def ssim(x, y):
    """Mean SSIM over the window-valid region (and channels)."""
    _check_pair(x, y)
    if min(x.shape[0], x.shape[1]) < _KERNEL.shape[0]:
        raise ValueError("image smaller than the SSIM window")
    _, _, a1, a2, b1, b2 = _ssim_terms(np.asarray(x, dtype=np.float64),
                                       np.asarray(y, dtype=np.float64))
    return float((a1 * a2 / (b1 * b2)).mean())


def ssim_with_grad(x, y):
    """(mean SSIM, d(mean SSIM)/dx)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    u1, u2, a1, a2, b1, b2 = _ssim_terms(x, y)
    denom = b1 * b2
    smap = a1 * a2 / denom
    g = np.full(smap.shape, 1.0 / smap.size)
    d_a1 = g * a2 / denom
    d_a2 = g * a1 / denom
    d_b1 = -g * smap / b1
    d_b2 = -g * smap / b2
    d_s12 = 2 * d_a2
    d_s1 = d_b2
    d_u1 = 2 * u2 * d_a1 + 2 * u1 * d_b1 - 2 * u1 * d_s1 - u2 * d_s12
    d_v1 = d_s1
    d_v12 = d_s12
    dx = (_window_filter_adjoint(d_u1, x.shape)
          + 2 * x * _window_filter_adjoint(d_v1, x.shape)
          + y * _window_filter_adjoint(d_v12, x.shape))
    return float(smap.mean()), dx


def _check_pair(x, y):
    if np.asarray(x).shape != np.asarray(y).shape:
        raise ValueError(f"shape mismatch: {np.asarray(x).shape} vs {np.asarray(y).shape}")


def l1_with_grad(x, y):
    _check_pair(x, y)
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def loss_rgb(render, target, lambda_rgb=LAMBDA_RGB):
    """(1 - lambda) L1 + lambda (1 - SSIM); returns (value, d_render)."""
    l1, d_l1 = l1_with_grad(render, target)
    s, d_s = ssim_with_grad(render, target)
    value = (1.0 - lambda_rgb) * l1 + lambda_rgb * (1.0 - s)
    grad = (1.0 - lambda_rgb) * d_l1 - lambda_rgb * d_s
    return value, grad


def loss_entropy(fg_alpha):
    """Binary entropy of the accumulated foreground alpha, mean per pixel."""
    o = np.clip(np.asarray(fg_alpha, dtype=np.float64), ENTROPY_EPS, 1.0 - ENTROPY_EPS)
    value = float(-(o * np.log(o) + (1 - o) * np.log1p(-o)).mean())
    inner = np.asarray(fg_alpha) > ENTROPY_EPS
    inner &= np.asarray(fg_alpha) < 1.0 - ENTROPY_EPS
    grad = np.where(inner, -np.log(o / (1.0 - o)), 0.0) / o.size
    return value, grad


def total_loss(render, fg_alpha, target, lambda_rgb=LAMBDA_RGB,
               lambda_entropy=LAMBDA_ENTROPY):
    """Full objective; returns (value, d_render, d_fg_alpha, term dict)."""
    l1, d_l1 = l1_with_grad(render, target)
    s, d_s = ssim_with_grad(render, target)
    ent, d_ent = loss_entropy(fg_alpha)
    value = (1.0 - lambda_rgb) * l1 + lambda_rgb * (1.0 - s) + lambda_entropy * ent
    d_render = (1.0 - lambda_rgb) * d_l1 - lambda_rgb * d_s
    d_fg = lambda_entropy * d_ent
    terms = {"l1": l1, "ssim": s, "entropy": ent, "total": value}
    return value, d_render, d_fg, terms


def psnr(a, b):
    """-10 log10(MSE) on unit range; +inf for identical images."""
    _check_pair(a, b)
    mse = float(((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2).mean())
    if mse == 0.0:
        return np.inf
    return -10.0 * np.log10(mse)
