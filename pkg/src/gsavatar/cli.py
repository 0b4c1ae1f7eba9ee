"""Command-line entry point: ``gsavatar <command> [--config PATH] [--seed S] [--out DIR] [--deterministic]``."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import Config, load_config
from .errors import AvatarError, InvalidConfig
from .tensorfile import atomic_write_text, save_tensors

log = logging.getLogger("gsavatar")


# --------------------------------------------------------------------------- helpers

def _vec3(text: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise InvalidConfig(f"expected x,y,z, got {text!r}") from None
    if v.shape != (3,):
        raise InvalidConfig(f"expected three comma-separated numbers, got {text!r}")
    return v


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


def _dataset(args):
    from .dataset import load_dataset

    if not args.data:
        raise InvalidConfig(f"{args.command} needs --data MANIFEST")
    return load_dataset(args.data)


def _bundle(args, cfg: Config):
    from .diffuse import DenoiserConfig, init_bundle, load_bundle

    if getattr(args, "bundle", None):
        return load_bundle(args.bundle)
    log.warning("no --bundle given; using an untrained denoiser")
    return init_bundle(DenoiserConfig(native=cfg.native, pose_dim=4 * cfg.n_joints + 3), cfg.n_identities,
                       np.random.default_rng(cfg.seed))


# --------------------------------------------------------------------------- commands

def cmd_synth(args, cfg: Config) -> None:
    from .dataset import save_dataset
    from .pipeline import backview_frames, ground_truth_generator
    from .synth import synth_scene

    out = _out(args)
    scene = synth_scene(cfg.seed, cfg.n_joints, cfg.image_size, cfg.n_frames, cfg.azimuth_list(),
                        (cfg.map_height, cfg.map_width))
    frames = list(scene.frames)
    cameras = list(scene.cameras)
    if args.pseudo:
        captured = [f for f in frames if f.view == "input"]
        gen = ground_truth_generator(scene, cfg.pseudo_downsample)
        for fr in backview_frames(captured, scene.template, gen, cfg.pseudo_frames):
            cameras.append(fr.camera)
            frames.append(replace(fr, camera_index=len(cameras) - 1))
    path = save_dataset(out, frames, scene.template, scene.layout_resolution, cameras=cameras, poses=scene.poses,
                        meta={"seed": scene.seed, "azimuths": scene.azimuths, **scene.meta}, ground_truth=scene.gt)
    print(f"wrote {len(frames)} frames to {path}")


def cmd_train(args, cfg: Config) -> None:
    from .decoder import save_decoder
    from .optim import save_adam
    from .train import train, write_log

    ds = _dataset(args)
    frames = ds.frames if args.all_views else [f for f in ds.frames if f.view in ("input", "pseudo")]
    out = _out(args)
    every = max(1, cfg.iterations // 10)

    def progress(rec):
        if rec.iteration % every == 0:
            log.info("iter %d  l_rgb %.5f  total %.5f", rec.iteration, rec.l_rgb, rec.total)

    res = train(cfg, ds.template, ds.layouts, frames, progress=progress)
    save_decoder(out / "decoder.gsav", res.params)
    save_adam(out / "adam.gsav", res.adam)
    write_log(out / "loss_log.csv", res.log)
    atomic_write_text(out / "config.txt", cfg.to_text())
    print(f"trained {cfg.iterations} iterations on {len(frames)} frames in {res.seconds:.1f}s -> {out}")


def cmd_render(args, cfg: Config) -> None:
    from .dataset import write_png
    from .decoder import load_decoder
    from .tensorfile import dump_float_image
    from .train import render_avatar

    params = load_decoder(args.decoder)
    ds = _dataset(args)
    out = _out(args)
    (out / "renders").mkdir(exist_ok=True)
    for i, fr in enumerate(ds.frames):
        img = render_avatar(params, ds.template, ds.layouts, fr.pose, fr.camera, workers=cfg.workers).color
        write_png(out / "renders" / f"{i:06d}.png", img)
        if args.float:
            dump_float_image(out / "renders" / f"{i:06d}.gsav", img)
    print(f"rendered {len(ds.frames)} frames -> {out / 'renders'}")


def cmd_backview_cam(args, cfg: Config) -> None:
    from .geometry import Camera, derive_backview_camera
    from .synth import root_frame

    if args.camera:
        cam = Camera.from_json(json.loads(Path(args.camera).read_text()))
        root, axis = None, None
    else:
        ds = _dataset(args)
        fr = ds.frames[args.frame]
        cam = fr.camera
        root, axis = root_frame(ds.template, fr.pose)
    root = _vec3(args.root) if args.root else root
    axis = _vec3(args.axis) if args.axis else axis
    if root is None or axis is None:
        raise InvalidConfig("--camera needs --root and --axis")
    back = derive_backview_camera(cam, root, axis)
    out = _out(args)
    _write_json(out / "backview_camera.json", back.to_json())
    print(json.dumps(back.to_json()))


def _identity_corpus(cfg: Config, count: int):
    from .diffuse import identity_corpus

    return identity_corpus(count, cfg.identity_frames, seed=cfg.seed, native=cfg.native)


def cmd_train_denoiser(args, cfg: Config) -> None:
    from .diffuse import DenoiserConfig, init_bundle, make_schedule, save_bundle, seed_identity_rows, train_denoiser

    out = _out(args)
    videos = _identity_corpus(cfg, cfg.n_identities)
    bundle = init_bundle(DenoiserConfig(native=cfg.native, pose_dim=videos[0].conds.shape[1]), len(videos),
                         np.random.default_rng(cfg.seed))
    bundle = seed_identity_rows(bundle, videos)
    res = train_denoiser(bundle, videos, make_schedule(cfg.diffusion_T), cfg.denoiser_steps,
                         np.random.default_rng(cfg.seed + 1), batch_size=cfg.diffusion_batch, lr=cfg.diffusion_lr)
    save_bundle(out / "bundle.gsav", res.bundle)
    atomic_write_text(out / "denoiser_loss.csv", "step,loss\n" + "".join(f"{i},{l!r}\n" for i, l in enumerate(res.losses)))
    print(f"denoiser trained on {len(videos)} identities; final loss {np.mean(res.losses[-50:]):.4f}")


def cmd_tile_denoise(args, cfg: Config) -> None:
    from .dataset import write_png
    from .diffuse import TileCond, make_tile_layout, tiled_denoise_step

    bundle = _bundle(args, cfg)
    layout = make_tile_layout(bundle.config.native, cfg.factor)
    rng = np.random.default_rng(cfg.seed)
    latent = rng.standard_normal((layout.canvas, layout.canvas, bundle.config.channels))
    cond = TileCond(np.zeros(bundle.config.pose_dim), bundle.tensors["identity_table"][args.identity])
    pred = tiled_denoise_step(latent, bundle, args.t, layout, cond, workers=cfg.workers)
    out = _out(args)
    save_tensors(out / "tile_step.gsav", {"latent": latent, "noise_pred": pred}, kind="tile_step",
                 meta={"t": args.t, "native": layout.native, "factor": layout.factor,
                       "patches": [list(p) for p in layout.patches]})
    write_png(out / "noise_pred.png", 0.5 + 0.25 * pred)
    print(f"{len(layout.patches)} patches of {layout.native}^2 on a {layout.canvas}^2 canvas -> {out}")


def _target_video(args, cfg: Config):
    """Target video from a dataset manifest (resized to the native size) or a held-out procedural subject."""
    from .diffuse import IdentityVideo, pose_condition
    from .pipeline import _resize

    if not args.data:
        return _identity_corpus(cfg, cfg.n_identities + 1)[-1]
    ds = _dataset(args)
    frames = [f for f in ds.frames if f.view in ("input",)] or ds.frames
    imgs = np.stack([_resize(f.image, (cfg.native, cfg.native)) for f in frames])
    return IdentityVideo(np.clip(imgs, 0, 1), [f.pose for f in frames], [f.camera for f in frames],
                         np.stack([pose_condition(f.pose, f.camera) for f in frames]))


def cmd_finetune_id(args, cfg: Config) -> None:
    from .diffuse import PriorSet, finetune_identity, make_schedule, save_bundle

    base = _bundle(args, cfg)
    prior_videos = _identity_corpus(cfg, base.n_identities)
    target = _target_video(args, cfg)
    tuned, new_id, losses = finetune_identity(base, target, PriorSet(prior_videos, list(range(len(prior_videos)))),
                                              cfg.finetune_steps, np.random.default_rng(cfg.seed),
                                              sched=make_schedule(cfg.diffusion_T), batch_size=cfg.diffusion_batch,
                                              lr=cfg.finetune_lr)
    out = _out(args)
    save_bundle(out / "bundle.gsav", tuned)
    _write_json(out / "identity.json", {"identity_row": new_id, "steps": cfg.finetune_steps,
                                        "final_loss": float(np.mean(losses[-50:])) if losses else None})
    print(f"identity row {new_id} tuned for {cfg.finetune_steps} steps -> {out}")


def cmd_gen_video(args, cfg: Config) -> None:
    from .dataset import write_png
    from .diffuse import make_schedule, make_tile_layout, pose_condition, sample_video
    from .geometry import derive_backview_camera
    from .synth import root_frame

    bundle = _bundle(args, cfg)
    ds = _dataset(args)
    frames = [f for f in ds.frames if f.view == "input"] or ds.frames
    frames = frames[:args.frames] if args.frames else frames
    root, axis = root_frame(ds.template, frames[0].pose)
    cam = derive_backview_camera(frames[0].camera, root, axis)
    conds = [pose_condition(f.pose, cam) for f in frames]
    layout = make_tile_layout(bundle.config.native, cfg.factor)
    video = sample_video(bundle, make_schedule(cfg.diffusion_T), layout, bundle.tensors["identity_table"][args.identity],
                         conds, seed=cfg.seed, workers=cfg.workers)
    out = _out(args)
    (out / "frames").mkdir(exist_ok=True)
    for i, img in enumerate(video):
        write_png(out / "frames" / f"{i:06d}.png", img)
    _write_json(out / "camera.json", cam.to_json())
    print(f"sampled {len(video)} frames at {layout.canvas}x{layout.canvas} -> {out / 'frames'}")


def cmd_eval(args, cfg: Config) -> None:
    from .decoder import load_decoder
    from .metrics import evaluate

    params = load_decoder(args.decoder)
    ds = _dataset(args)
    rep = evaluate(params, ds.template, ds.layouts, ds.frames, workers=cfg.workers)
    out = _out(args)
    atomic_write_text(out / "metrics.json", rep.to_json() + "\n")
    for view, m in rep.summary().items():
        print(f"{view:>7}: PSNR {m['psnr']:.2f} dB  SSIM {m['ssim']:.4f}  ({m['count']} frames)")


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "render": cmd_render, "backview-cam": cmd_backview_cam,
    "train-denoiser": cmd_train_denoiser, "tile-denoise": cmd_tile_denoise, "finetune-id": cmd_finetune_id,
    "gen-video": cmd_gen_video, "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="run", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gsavatar", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="render a procedural capsule-person dataset")
    s.add_argument("--pseudo", action="store_true", help="append back-view pseudo frames (tagged generated)")
    s = sub.add_parser("train", parents=[common], help="fit an avatar decoder to a dataset")
    s.add_argument("--data", help="dataset manifest")
    s.add_argument("--all-views", action="store_true", help="also train on frames labelled novel")
    s = sub.add_parser("render", parents=[common], help="render a trained avatar at the dataset's frames")
    s.add_argument("--decoder", required=True)
    s.add_argument("--data")
    s.add_argument("--float", action="store_true", help="also dump lossless float images")
    s = sub.add_parser("backview-cam", parents=[common], help="half-turn a camera about the subject's axis")
    s.add_argument("--camera", help="camera JSON file")
    s.add_argument("--data")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--root", help="x,y,z")
    s.add_argument("--axis", help="x,y,z unit vector")
    sub.add_parser("train-denoiser", parents=[common], help="train the toy denoiser on procedural identities")
    s = sub.add_parser("tile-denoise", parents=[common], help="one merged patch-wise noise prediction")
    s.add_argument("--bundle")
    s.add_argument("--t", type=int, default=50)
    s.add_argument("--identity", type=int, default=0)
    s = sub.add_parser("finetune-id", parents=[common], help="invert a new identity into a trained denoiser")
    s.add_argument("--bundle")
    s.add_argument("--data", help="target video manifest (default: a held-out procedural subject)")
    s = sub.add_parser("gen-video", parents=[common], help="sample back-view frames with tiled denoising")
    s.add_argument("--bundle")
    s.add_argument("--data")
    s.add_argument("--identity", type=int, default=0)
    s.add_argument("--frames", type=int, default=0, help="limit the number of frames (0 = all)")
    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of a trained avatar per view label")
    s.add_argument("--decoder", required=True)
    s.add_argument("--data")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.deterministic:
            cfg = replace(cfg, workers=1)
        ctx = contextlib.nullcontext()
        if args.deterministic:
            from threadpoolctl import threadpool_limits

            ctx = threadpool_limits(limits=1)
        with ctx:
            COMMANDS[args.command](args, cfg)
    except AvatarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
