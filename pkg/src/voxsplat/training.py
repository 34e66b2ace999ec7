"""End-to-end training, feed-forward inference, and per-scene fine-tuning.

One training step renders a single random view of a random scene through
the full pipeline (feature volume, geometry heads, reference-color
aggregation, hemisphere background, rasterizer) and chains the hand-written
adjoints back to every parameter.  Fine-tuning detaches a decoded Gaussian
set from the networks and optimizes its attributes directly, with periodic
pruning and gradient-driven splitting.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .background import BackgroundHead, background_backward, build_shell, decode_background
from .decoder import GeometryHeads, decode_backward, decode_geometry, decode_offsets, \
    decode_opacity_covariance, knn_scale_init
from .fusion import build_cloud
from .gaussians import GaussianSet, RenderBundle, quat_to_rotation
from .ibr import SH_C0, ColorHead, gather_reference_samples
from .losses import LAMBDA_ENTROPY, LAMBDA_RGB, psnr, total_loss
from .nn import Adam, d_sigmoid, sigmoid
from .rasterizer import render, render_backward
from .volume import FeatureNet, quantize


class TrainingDivergence(Exception):
    pass


@dataclass
class PipelineConfig:
    base_channels: int = 8
    head_hidden: int = 64
    head_depth: int = 2
    k_refs: int = 3
    window: int = 3
    knn_k: int = 3
    recursions: int = 2
    bg_points: int = 2048
    bg_radius: float = 100.0
    seed: int = 0


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_rgb: float = LAMBDA_RGB
    lambda_entropy: float = LAMBDA_ENTROPY
    seed: int = 0
    psnr_every: int = 50


class Model:
    """All trainable components plus the architecture configuration."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        c = config.base_channels
        self.featnet = FeatureNet(c, seed=config.seed)
        self.heads = GeometryHeads(c, config.head_hidden, config.head_depth,
                                   seed=config.seed + 1)
        self.color_head = ColorHead(config.k_refs, config.window,
                                    config.head_hidden, seed=config.seed + 2)
        self.bg_head = BackgroundHead(config.k_refs, config.head_hidden,
                                      seed=config.seed + 3)

    def param_items(self):
        return (self.featnet.param_items() + self.heads.param_items()
                + self.color_head.param_items() + self.bg_head.param_items())

    def state_items(self):
        return self.featnet.state_items()

    def params(self):
        return dict(self.param_items())

    def zero_grads(self):
        return {name: np.zeros_like(arr) for name, arr in self.param_items()}


CHECKPOINT_MAGIC = b"VSPCKPT1"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path):
    entries = model.param_items() + model.state_items()
    header = {
        "config": asdict(model.config),
        "arrays": [[name, list(arr.shape)] for name, arr in entries],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("bad checkpoint magic")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        model = Model(PipelineConfig(**header["config"]))
        entries = dict(model.param_items() + model.state_items())
        for name, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(n * 8), dtype="<f8").reshape(shape)
            target = entries[name]
            target[...] = data
    return model


@dataclass
class SceneBundle:
    """Per-scene constants prepared once: cloud, voxel tensor, shell, buffers."""

    manifest: object
    frames: list
    cloud: object
    tensor: object
    mu_init: np.ndarray
    s_init: np.ndarray
    delta_prev: np.ndarray
    shell: object
    plan: list = None
    holdout: list = field(default_factory=list)


def prepare_scene(manifest, frames, model: Model, holdout_frames=None):
    cloud, _ = build_cloud(frames, manifest.foreground_box,
                           voxel=manifest.voxel_size)
    tensor = quantize(cloud, manifest.foreground_box, manifest.voxel_size)
    mu_init = cloud.positions
    s_init = knn_scale_init(mu_init, k=model.config.knn_k)
    box = manifest.foreground_box
    shell = build_shell(model.config.bg_points, model.config.bg_radius,
                        center=0.5 * (box[0] + box[1]),
                        anchor=frames[0].pose.center)
    plan = model.featnet.build_plan(tensor)
    return SceneBundle(manifest, frames, cloud, tensor, mu_init, s_init,
                       np.zeros_like(mu_init), shell, plan,
                       holdout=holdout_frames or [])


def forward_scene(model: Model, scene: SceneBundle, target_frame, train=False):
    """Pipeline forward for one target view; returns render output and ctx."""
    volume, conv_ctx = model.featnet.forward(scene.tensor, train=train,
                                             plan=scene.plan)
    decoded, dec_ctx = decode_geometry(volume, model.heads, scene.mu_init,
                                       scene.delta_prev, scene.s_init)
    samples = gather_reference_samples(decoded.means, scene.frames,
                                       model.config.k_refs, model.config.window)
    coeffs, hs_color = model.color_head.forward(samples)
    n_fg = decoded.means.shape[0]
    fg = RenderBundle(decoded.means, decoded.quaternions, decoded.scales,
                      decoded.alphas, coeffs, np.ones(n_fg, dtype=bool))
    bg, bg_ctx = decode_background(scene.shell, scene.frames, model.bg_head,
                                   target_frame.pose.center)
    bundle = fg.concat(bg)
    out, raster_ctx = render(bundle, target_frame.camera, target_frame.pose,
                             record=train)
    ctx = {"volume": volume, "conv_ctx": conv_ctx, "decoded": decoded,
           "dec_ctx": dec_ctx, "hs_color": hs_color, "bg_ctx": bg_ctx,
           "raster_ctx": raster_ctx, "n_fg": n_fg}
    return out, ctx


def backward_scene(model: Model, scene: SceneBundle, ctx, d_img, d_ofg, grads):
    rg = render_backward(ctx["raster_ctx"], d_img, d_ofg)
    n_fg = ctx["n_fg"]
    model.color_head.backward(ctx["hs_color"], rg.sh[:n_fg], grads)
    df = decode_backward(model.heads, ctx["dec_ctx"], rg.means[:n_fg],
                         rg.alphas[:n_fg], rg.quaternions[:n_fg],
                         rg.scales[:n_fg], grads)
    d_feats = ctx["volume"].query_adjoint(ctx["dec_ctx"]["pts"], df)
    model.featnet.grads = grads
    model.featnet.backward(ctx["conv_ctx"], d_feats)
    d_sh_bg = rg.sh[n_fg:].reshape(-1, 4, 3)
    background_backward(model.bg_head, ctx["bg_ctx"], d_sh_bg[:, 0] / SH_C0,
                        rg.scales[n_fg:], grads)


def train_feed_forward(scenes, model: Model, cfg: TrainConfig, log=None):
    """Multi-scene training: one random view of one random scene per step."""
    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    adam = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    history = []
    for step in range(cfg.steps):
        scene = scenes[rng.integers(len(scenes))]
        view = int(rng.integers(len(scene.frames)))
        target = scene.frames[view]
        out, ctx = forward_scene(model, scene, target, train=True)
        loss, d_img, d_ofg, terms = total_loss(out.color, out.fg_alpha,
                                               target.image, cfg.lambda_rgb,
                                               cfg.lambda_entropy)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss at step {step}")
        grads = model.zero_grads()
        backward_scene(model, scene, ctx, d_img, d_ofg, grads)
        scene.delta_prev = ctx["decoded"].offsets.copy()
        adam.step(grads)
        record = dict(step=step, **terms)
        if cfg.psnr_every and (step % cfg.psnr_every == 0 or step == cfg.steps - 1):
            record["psnr"] = psnr(out.color, target.image)
        history.append(record)
        if log is not None:
            log(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                         for k, v in record.items()))
    return history


def infer_gaussians(model: Model, scene: SceneBundle) -> GaussianSet:
    """Feed-forward reconstruction baked into a snapshot-ready GaussianSet.

    Runs the offset recursion (inference mode), queries opacity/covariance at
    the converged location, aggregates reference colors at the final means,
    and appends the hemisphere background placed for the scene anchor.
    """
    volume, _ = model.featnet.forward(scene.tensor, train=False, plan=scene.plan)
    state = np.zeros_like(scene.mu_init)
    for _ in range(max(model.config.recursions - 1, 0)):
        _, state = decode_offsets(volume, model.heads, scene.mu_init, state,
                                  recursions=1)
    query_pts = scene.mu_init + state
    means, state = decode_offsets(volume, model.heads, scene.mu_init, state,
                                  recursions=1)
    alphas, quats, scales = decode_opacity_covariance(volume, model.heads,
                                                      query_pts, scene.s_init)
    samples = gather_reference_samples(means, scene.frames, model.config.k_refs,
                                       model.config.window)
    coeffs, _ = model.color_head.forward(samples)
    fg = RenderBundle(means, quats, scales, alphas, coeffs,
                      np.ones(means.shape[0], dtype=bool))
    bg, _ = decode_background(scene.shell, scene.frames, model.bg_head,
                              scene.frames[0].pose.center)
    return fg.concat(bg).to_set()


def evaluate(gaussians: GaussianSet, frames):
    """Mean PSNR/SSIM of rendered views against their stored images."""
    from .losses import ssim as ssim_metric
    bundle = RenderBundle.from_set(gaussians)
    ps, ss = [], []
    for frame in frames:
        out, _ = render(bundle, frame.camera, frame.pose)
        ps.append(psnr(out.color, frame.image))
        ss.append(ssim_metric(out.color, frame.image))
    return float(np.mean(ps)), float(np.mean(ss))


# --- per-scene fine-tuning ---------------------------------------------------

@dataclass
class FinetuneConfig:
    steps: int = 1000
    lr: float = 1e-3
    lambda_rgb: float = LAMBDA_RGB
    lambda_entropy: float = LAMBDA_ENTROPY
    prune_every: int = 500
    prune_alpha: float = 0.005
    grow_percentile: float = 85.0
    split_scale_shrink: float = 1.6
    seed: int = 0
    grow: bool = True


def random_init_gaussians(n, box, rng, scale=0.15):
    """Uniform random primitives inside the box (optimize-from-scratch baseline)."""
    box = np.asarray(box, dtype=np.float64).reshape(2, 3)
    means = rng.uniform(box[0], box[1], size=(n, 3))
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    sh = np.zeros((n, 12))
    sh[:, :3] = rng.uniform(-0.5, 0.5, size=(n, 3))
    return GaussianSet(means, quats, np.full((n, 3), np.log(scale)),
                       np.zeros(n), sh, np.ones(n, dtype=bool))


class FinetuneState:
    """Per-primitive attribute optimization with prune/grow bookkeeping."""

    def __init__(self, gaussians: GaussianSet, cfg: FinetuneConfig):
        self.cfg = cfg
        self.params = {
            "means": gaussians.means.copy(),
            "quats": gaussians.quaternions.copy(),
            "log_scales": gaussians.log_scales.copy(),
            "logits": gaussians.opacity_logits.copy(),
            "sh": gaussians.sh.copy(),
        }
        self.foreground = gaussians.foreground.copy()
        self.adam = Adam(self.params, lr=cfg.lr)
        self.grad_norm_sum = np.zeros(len(gaussians))
        self.grad_norm_count = 0

    def __len__(self):
        return self.params["means"].shape[0]

    def bundle(self):
        p = self.params
        return RenderBundle(p["means"], p["quats"], np.exp(p["log_scales"]),
                            sigmoid(p["logits"]), p["sh"], self.foreground)

    def to_set(self):
        p = self.params
        qn = p["quats"] / np.maximum(np.linalg.norm(p["quats"], axis=1, keepdims=True), 1e-12)
        return GaussianSet(p["means"].copy(), qn, p["log_scales"].copy(),
                           p["logits"].copy(), p["sh"].copy(), self.foreground.copy())

    def step(self, frame, lambda_rgb=None, lambda_entropy=None):
        bundle = self.bundle()
        out, ctx = render(bundle, frame.camera, frame.pose, record=True)
        loss, d_img, d_ofg, terms = total_loss(
            out.color, out.fg_alpha, frame.image,
            self.cfg.lambda_rgb if lambda_rgb is None else lambda_rgb,
            self.cfg.lambda_entropy if lambda_entropy is None else lambda_entropy)
        if not np.isfinite(loss):
            raise TrainingDivergence("non-finite loss during fine-tuning")
        rg = render_backward(ctx, d_img, d_ofg)
        alphas = bundle.alphas
        grads = {
            "means": rg.means,
            "quats": rg.quaternions,
            "log_scales": rg.scales * bundle.scales,
            "logits": rg.alphas * d_sigmoid(alphas),
            "sh": rg.sh,
        }
        self.adam.step(grads)
        self.grad_norm_sum += np.linalg.norm(rg.means, axis=1)
        self.grad_norm_count += 1
        return loss, terms

    def _rebuild(self, keep_mask=None, extra=None):
        """Apply a keep mask and/or append rows, resetting optimizer moments."""
        for name in self.params:
            arr = self.params[name]
            if keep_mask is not None:
                arr = arr[keep_mask]
                self.adam.m[name] = self.adam.m[name][keep_mask]
                self.adam.v[name] = self.adam.v[name][keep_mask]
            if extra is not None and name in extra:
                arr = np.concatenate([arr, extra[name]])
                pad = np.zeros_like(extra[name])
                self.adam.m[name] = np.concatenate([self.adam.m[name], pad])
                self.adam.v[name] = np.concatenate([self.adam.v[name], pad])
            self.params[name] = arr
        self.adam.params = self.params
        if keep_mask is not None:
            self.foreground = self.foreground[keep_mask]
            self.grad_norm_sum = self.grad_norm_sum[keep_mask]
        if extra is not None:
            n_new = extra["means"].shape[0]
            self.foreground = np.concatenate(
                [self.foreground, np.ones(n_new, dtype=bool)])
            self.grad_norm_sum = np.concatenate([self.grad_norm_sum, np.zeros(n_new)])

    def prune_and_grow(self):
        """Drop transparent primitives; split the highest-gradient ones."""
        alphas = sigmoid(self.params["logits"])
        keep = alphas >= self.cfg.prune_alpha
        if not np.any(keep):
            raise TrainingDivergence("all primitives pruned")
        extra = None
        if self.cfg.grow and self.grad_norm_count > 0:
            mean_norm = self.grad_norm_sum / self.grad_norm_count
            threshold = np.percentile(mean_norm[keep], self.cfg.grow_percentile)
            split = keep & (mean_norm > threshold) & self.foreground
            if np.any(split):
                idx = np.flatnonzero(split)
                p = self.params
                qn = p["quats"][idx] / np.maximum(
                    np.linalg.norm(p["quats"][idx], axis=1, keepdims=True), 1e-12)
                rot = quat_to_rotation(qn)
                scales = np.exp(p["log_scales"][idx])
                axis = np.argmax(scales, axis=1)
                direction = rot[np.arange(idx.size), :, axis]
                offset = 0.5 * scales[np.arange(idx.size), axis][:, None] * direction
                shrink = np.log(self.cfg.split_scale_shrink)
                children = {
                    "means": np.concatenate([p["means"][idx] + offset,
                                             p["means"][idx] - offset]),
                    "quats": np.concatenate([p["quats"][idx]] * 2),
                    "log_scales": np.concatenate([p["log_scales"][idx] - shrink] * 2),
                    "logits": np.concatenate([p["logits"][idx]] * 2),
                    "sh": np.concatenate([p["sh"][idx]] * 2),
                }
                keep = keep & ~split
                extra = children
        self._rebuild(keep_mask=keep, extra=extra)
        self.grad_norm_sum = np.zeros(len(self))
        self.grad_norm_count = 0


def finetune(gaussians: GaussianSet, frames, cfg: FinetuneConfig, log=None):
    """Direct attribute optimization on the training views; returns the set."""
    rng = np.random.default_rng(cfg.seed)
    state = FinetuneState(gaussians, cfg)
    for step in range(cfg.steps):
        frame = frames[int(rng.integers(len(frames)))]
        loss, terms = state.step(frame)
        if log is not None and step % 50 == 0:
            log(f"step={step} loss={loss:.6g} count={len(state)}")
        if cfg.prune_every and (step + 1) % cfg.prune_every == 0:
            state.prune_and_grow()
            if log is not None:
                log(f"step={step} count={len(state)} (after prune/grow)")
    return state.to_set()
