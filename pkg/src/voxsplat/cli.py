"""Command-line driver for every pipeline stage.

Subcommands: synth, fuse, infer, render, train, finetune, eval, selftest.
Common flags: --scene, --out, --seed, --threads.
"""

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .fusion import build_cloud
from .losses import LAMBDA_ENTROPY, LAMBDA_RGB
from .scene import (load_scene, load_snapshot, save_image, save_point_cloud,
                    save_snapshot)
from .synthetic import corridor_spec, make_synthetic_scene
from .training import (FinetuneConfig, Model, PipelineConfig, TrainConfig,
                       evaluate, finetune, infer_gaussians, load_checkpoint,
                       prepare_scene, save_checkpoint, train_feed_forward)


def _set_threads(n):
    if n is None:
        return
    if kernels.BACKEND == "numba":
        import numba
        numba.set_num_threads(max(1, n))


def _load_bundle(scene_path, model, holdout_path=None):
    manifest, frames = load_scene(scene_path)
    holdout = []
    if holdout_path:
        _, holdout = load_scene(holdout_path)
    return prepare_scene(manifest, frames, model, holdout_frames=holdout)


def cmd_synth(args):
    spec = corridor_spec(n_boxes=args.boxes, width=args.size, height=args.size,
                         n_train=args.views, noise_std=args.noise)
    make_synthetic_scene(spec, args.seed, args.out)
    print(f"scene written to {args.out}/scene.json (holdout.json alongside)")


def cmd_fuse(args):
    manifest, frames = load_scene(args.scene)
    cloud, _ = build_cloud(frames, manifest.foreground_box,
                           sigma=args.sigma, voxel=manifest.voxel_size)
    save_point_cloud(args.out, cloud.positions, cloud.colors)
    print(f"fused {len(cloud)} points -> {args.out}")


def cmd_train(args):
    model = Model(PipelineConfig(base_channels=args.channels, seed=args.seed))
    scenes = [_load_bundle(path, model) for path in args.scene]
    cfg = TrainConfig(steps=args.steps, lr=args.lr, lambda_rgb=args.lambda_r,
                      lambda_entropy=args.lambda_e, seed=args.seed)
    if args.deterministic:
        _set_threads(1)
    log = print if not args.quiet else None
    train_feed_forward(scenes, model, cfg, log=log)
    save_checkpoint(model, args.out)
    print(f"checkpoint -> {args.out}")


def cmd_infer(args):
    model = load_checkpoint(args.checkpoint)
    bundle = _load_bundle(args.scene, model)
    gaussians = infer_gaussians(model, bundle)
    save_snapshot(gaussians, args.out)
    print(f"{len(gaussians)} gaussians -> {args.out}")


def cmd_render(args):
    from .gaussians import RenderBundle
    from .rasterizer import render
    gaussians = load_snapshot(args.snapshot)
    manifest, frames = load_scene(args.scene)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = RenderBundle.from_set(gaussians)
    for i, frame in enumerate(frames):
        out, _ = render(bundle, frame.camera, frame.pose)
        save_image(out_dir / f"render_{i:03d}.png", out.color)
        if args.save_ofg:
            np.save(out_dir / f"ofg_{i:03d}.npy", out.fg_alpha.astype(np.float32))
    print(f"{len(frames)} renders -> {out_dir}")


def cmd_finetune(args):
    model = load_checkpoint(args.checkpoint)
    bundle = _load_bundle(args.scene, model)
    gaussians = infer_gaussians(model, bundle)
    cfg = FinetuneConfig(steps=args.steps, lr=args.lr, seed=args.seed)
    log = print if not args.quiet else None
    tuned = finetune(gaussians, bundle.frames, cfg, log=log)
    save_snapshot(tuned, args.out)
    print(f"{len(tuned)} gaussians -> {args.out}")


def cmd_eval(args):
    if not args.checkpoint and not args.snapshot:
        raise SystemExit("eval needs --checkpoint or --snapshot")
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        bundle = _load_bundle(args.scene, model, args.holdout)
        gaussians = infer_gaussians(model, bundle)
        frames = bundle.holdout or bundle.frames
    else:
        gaussians = load_snapshot(args.snapshot)
        _, frames = load_scene(args.holdout or args.scene)
    p, s = evaluate(gaussians, frames)
    print(f"psnr={p:.3f} ssim={s:.4f} views={len(frames)}")


def cmd_selftest(args):
    if args.deterministic:
        _set_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = corridor_spec(n_boxes=2, width=48, height=48, n_train=4, noise_std=0.0)
    make_synthetic_scene(spec, args.seed, out / "scene")
    model = Model(PipelineConfig(base_channels=4, bg_points=256, seed=args.seed))
    bundle = _load_bundle(out / "scene" / "scene.json", model)
    cfg = TrainConfig(steps=args.steps, seed=args.seed, psnr_every=0)
    train_feed_forward([bundle], model, cfg, log=None)
    ckpt = out / "selftest.ckpt"
    save_checkpoint(model, ckpt)
    gaussians = infer_gaussians(model, bundle)
    snap = out / "selftest.gauss"
    save_snapshot(gaussians, snap)
    from .gaussians import RenderBundle
    from .rasterizer import render
    rb = RenderBundle.from_set(gaussians)
    frame = bundle.frames[0]
    rout, _ = render(rb, frame.camera, frame.pose)
    np.save(out / "selftest_render.npy", rout.color)
    save_image(out / "selftest_render.png", rout.color)
    for name in ("selftest.ckpt", "selftest.gauss", "selftest_render.npy"):
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
        print(f"{name} sha256={digest}")


def build_parser():
    parser = argparse.ArgumentParser(prog="voxsplat",
                                     description="feed-forward Gaussian-splatting pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scene=True, out=True):
        if scene:
            p.add_argument("--scene", required=True, help="scene manifest JSON")
        if out:
            p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None)
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic corridor scene"),
               scene=False)
    p.add_argument("--boxes", type=int, default=3)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.01)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("fuse", help="fuse depth frames into a point cloud"))
    p.add_argument("--sigma", type=float, default=0.2)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", help="feed-forward training over one or more scenes")
    p.add_argument("--scene", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lambda-r", type=float, default=LAMBDA_RGB, dest="lambda_r")
    p.add_argument("--lambda-e", type=float, default=LAMBDA_ENTROPY, dest="lambda_e")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("infer", help="feed-forward snapshot from a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_infer)

    p = common(sub.add_parser("render", help="render snapshot gaussians at scene poses"))
    p.add_argument("--snapshot", required=True)
    p.add_argument("--save-ofg", action="store_true")
    p.set_defaults(func=cmd_render)

    p = common(sub.add_parser("finetune", help="per-scene attribute optimization"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = common(sub.add_parser("eval", help="PSNR/SSIM against stored views"), out=False)
    p.add_argument("--holdout", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--snapshot", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="miniature end-to-end determinism probe")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    _set_threads(getattr(args, "threads", None))
    try:
        args.func(args)
    except Exception as e:  # surface clean one-line errors from pipeline stages
        if type(e).__module__.startswith("voxsplat"):
            print(f"error: {e}", file=sys.stderr)
            return 2
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
