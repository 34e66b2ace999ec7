"""Shared test utilities: finite-difference checks and scene factories."""

import numpy as np

from voxsplat.scene import load_scene
from voxsplat.synthetic import corridor_spec, make_synthetic_scene


def fd_check(loss_fn, arr, grad, rng, samples=20, eps=1e-5, rtol=1e-3, atol=1e-6):
    """Central-difference validation of an analytic gradient.

    ``loss_fn`` re-evaluates the scalar loss from current array contents;
    ``arr`` is perturbed in place.  Entries pass when the difference is
    within rtol of the larger magnitude or both are below atol.  Samples
    where halving the step changes the estimate are straddling a kink
    (ReLU/clamp/cutoff) and are skipped: the function is not differentiable
    there at this step size, so there is nothing to compare against.
    """
    def central(i, h):
        old = flat[i]
        flat[i] = old + h
        lp = loss_fn()
        flat[i] = old - h
        lm = loss_fn()
        flat[i] = old
        return (lp - lm) / (2 * h)

    flat = arr.reshape(-1)
    gflat = np.asarray(grad).reshape(-1)
    idxs = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
    failures = []
    compared = 0
    for i in idxs:
        fd = central(i, eps)
        fd_half = central(i, eps / 2)
        if abs(fd - fd_half) > 1e-2 * max(abs(fd), abs(fd_half)) + atol:
            continue
        compared += 1
        an = gflat[i]
        if abs(fd - an) > max(rtol * max(abs(fd), abs(an)), atol):
            failures.append((int(i), fd, an))
    assert compared >= max(1, len(idxs) // 2), "too many kink-straddling samples"
    return failures


def make_corridor(tmp_path, seed=11, **overrides):
    defaults = dict(n_boxes=3, width=48, height=48, n_train=6, noise_std=0.0)
    defaults.update(overrides)
    spec = corridor_spec(**defaults)
    make_synthetic_scene(spec, seed, tmp_path)
    manifest, frames = load_scene(tmp_path / "scene.json")
    return spec, manifest, frames


def random_bundle(rng, n, image_side=64, fg_fraction=0.7, depth_range=(2.0, 10.0)):
    from voxsplat.gaussians import RenderBundle

    means = np.stack([rng.uniform(-3, 3, n), rng.uniform(-3, 3, n),
                      rng.uniform(*depth_range, n)], axis=1)
    quats = rng.normal(size=(n, 4))
    scales = rng.uniform(0.05, 0.5, (n, 3))
    alphas = rng.uniform(0.1, 0.95, n)
    sh = rng.normal(0.0, 0.3, (n, 12))
    fg = rng.random(n) < fg_fraction
    return RenderBundle(means, quats, scales, alphas, sh, fg)
