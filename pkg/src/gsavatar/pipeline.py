"""End-to-end compositions: back-view pseudo frames and the pseudo-supervision ablation."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .config import Config
from .geometry import Camera, derive_backview_camera
from .metrics import MetricsReport, evaluate
from .synth import FrameSample, SynthScene, quantize, render_attributes, root_frame, synth_scene
from .train import TrainResult, train

# generator(pose, camera) -> (image, mask) at the camera's resolution
BackviewGenerator = Callable[[object, Camera], tuple[np.ndarray, np.ndarray]]


def _resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a float image through Pillow's 32-bit float mode, per channel."""
    h, w = size
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
             for c in range(img.shape[2])]
    return np.stack(chans, axis=-1).astype(np.float64)


def ground_truth_generator(scene: SynthScene, downsample: int = 1) -> BackviewGenerator:
    """A back-view generator backed by the scene's ground-truth avatar.

    With ``downsample > 1`` the view is rendered at reduced resolution and
    upsampled bilinearly, mimicking a generator that works at a lower native
    resolution followed by super-resolution.
    """
    def gen(pose, cam: Camera):
        small = cam.scaled(1.0 / downsample) if downsample > 1 else cam
        out = render_attributes(scene.gt, scene.layouts, scene.template, pose, small, oracle=True)
        img, alpha = out.color, out.alpha
        if downsample > 1:
            img = np.clip(_resize(img, (cam.height, cam.width)), 0.0, 1.0)
            alpha = _resize(alpha[..., None], (cam.height, cam.width))[..., 0]
        return quantize(img), alpha > 0.5
    return gen


def backview_frames(frames: Sequence[FrameSample], template, generator: BackviewGenerator,
                    count: int) -> list[FrameSample]:
    """Pseudo frames from the half-turned camera at ``count`` evenly spaced input frames.

    The half-turn axis passes through the frame's root joint along the root
    joint's rotated +Y (the template's up axis).
    """
    if count <= 0 or not frames:
        return []
    picks = np.linspace(0, len(frames), num=count, endpoint=False).astype(int)
    out = []
    for i in picks:
        fr = frames[i]
        root, axis = root_frame(template, fr.pose)
        cam = derive_backview_camera(fr.camera, root, axis)
        img, mask = generator(fr.pose, cam)
        out.append(FrameSample(img, mask, fr.pose, cam, "generated", "pseudo", fr.pose_index, -1))
    return out


@dataclass
class AblationResult:
    mono: TrainResult
    pseudo: TrainResult
    mono_report: MetricsReport
    pseudo_report: MetricsReport
    novel_gain_db: float
    input_drop_db: float
    seconds: float


def novel_mean(report: MetricsReport) -> float:
    return report.mean("novel", "psnr")


def run_ablation(cfg: Config, *, novel_azimuths: Sequence[float] = (135.0, 180.0, 225.0),
                 log: Callable[[str], None] | None = None) -> AblationResult:
    """Train with and without back-view pseudo frames from identical seeds and compare."""
    t0 = time.perf_counter()
    azimuths = [cfg.azimuth_list()[0]] + [float(a) for a in novel_azimuths]
    scene = synth_scene(cfg.seed, cfg.n_joints, cfg.image_size, cfg.n_frames, azimuths,
                        (cfg.map_height, cfg.map_width))
    captured = [f for f in scene.frames if f.view == "input"]
    novel = [f for f in scene.frames if f.view == "novel"]
    pseudo = backview_frames(captured, scene.template, ground_truth_generator(scene, cfg.pseudo_downsample),
                             cfg.pseudo_frames)
    runs = {}
    for name, data in (("mono", captured), ("pseudo", captured + pseudo)):
        res = train(cfg, scene.template, scene.layouts, data)
        rep = evaluate(res.params, scene.template, scene.layouts, captured + novel)
        runs[name] = (res, rep)
        if log:
            log(f"{name}: {res.seconds:.0f}s input {rep.mean('input'):.2f} dB novel {novel_mean(rep):.2f} dB")
    (m, mr), (p, pr) = runs["mono"], runs["pseudo"]
    return AblationResult(m, p, mr, pr, novel_mean(pr) - novel_mean(mr), mr.mean("input") - pr.mean("input"),
                          time.perf_counter() - t0)


ABLATION_CONFIG = replace(Config(), iterations=1000, lr=1e-3, n_frames=24, image_size=64, pseudo_frames=8,
                          pseudo_downsample=1)
