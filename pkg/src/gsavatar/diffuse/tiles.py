"""Overlapping-patch denoising at k times the native resolution, and the deterministic sampler."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import EmptyVideo, LayoutMismatch, OddNative
from .denoiser import Conditioning, DenoiserBundle, predict_noise
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class TileLayout:
    native: int
    factor: int
    patches: tuple[tuple[int, int], ...]   # (row0, col0) origins of R x R patches
    weights: np.ndarray                    # (n_patches, R, R), normalized

    @property
    def canvas(self) -> int:
        return self.native * self.factor

    def boxes(self) -> list[tuple[int, int, int, int]]:
        """(row0, col0, row1, col1) with exclusive ends."""
        r = self.native
        return [(y, x, y + r, x + r) for y, x in self.patches]


def _ramp_1d(native: int, start_interior: bool, end_interior: bool) -> np.ndarray:
    half = native // 2
    w = np.ones(native)
    u = (np.arange(half) + 0.5) / half
    if start_interior:
        w[:half] = np.sin(0.5 * np.pi * u) ** 2
    if end_interior:
        w[native - half:] = np.cos(0.5 * np.pi * u) ** 2
    return w


def make_tile_layout(native: int, factor: int = 2) -> TileLayout:
    """Patches at multiples of R/2 over a kR canvas with raised-cosine blend windows.

    Each interior patch edge ramps over R/2 pixels (sin^2 up, cos^2 down), so the
    two patches covering any overlap pixel sum to one per axis; canvas-boundary
    edges stay flat. Windows are divided by the accumulated coverage anyway,
    which absorbs floating-point drift.
    """
    if native < 2 or native % 2:
        raise OddNative(f"native patch side must be even and >= 2, got {native}")
    if factor < 1:
        raise LayoutMismatch(f"upscale factor must be >= 1, got {factor}")
    half = native // 2
    n = 2 * factor - 1
    origins = [m * half for m in range(n)]
    canvas = native * factor
    ramps = [_ramp_1d(native, o > 0, o + native < canvas) for o in origins]
    patches, windows = [], []
    for iy, oy in enumerate(origins):
        for ix, ox in enumerate(origins):
            patches.append((oy, ox))
            windows.append(np.outer(ramps[iy], ramps[ix]))
    windows = np.stack(windows)
    cover = np.zeros((canvas, canvas))
    for (oy, ox), w in zip(patches, windows):
        cover[oy:oy + native, ox:ox + native] += w
    windows = np.stack([w / cover[oy:oy + native, ox:ox + native] for (oy, ox), w in zip(patches, windows)])
    return TileLayout(native, factor, tuple(patches), windows)


def coverage(layout: TileLayout) -> np.ndarray:
    """Per-pixel sum of blend weights over the canvas."""
    out = np.zeros((layout.canvas, layout.canvas))
    for (y0, x0, y1, x1), w in zip(layout.boxes(), layout.weights):
        out[y0:y1, x0:x1] += w
    return out


# --------------------------------------------------------------------------- tiled step

# denoiser(z_patch (1, R, R, C), t, cond, box) -> noise prediction of the same shape
PatchDenoiser = Callable[[np.ndarray, int, object, tuple[int, int, int, int]], np.ndarray]


@dataclass
class TileCond:
    pose: np.ndarray   # (pose_dim,)
    c_id: np.ndarray   # (id_dim,)


def bundle_denoiser(bundle: DenoiserBundle) -> PatchDenoiser:
    """Wrap a bundle as a patch denoiser (it ignores the patch position)."""
    def run(z, t, cond: TileCond, box):
        c = Conditioning(cond.pose[None], cond.c_id[None], np.array([t]))
        return predict_noise(bundle, z, c)
    return run


def tiled_denoise_step(latent: np.ndarray, denoiser, t: int, layout: TileLayout, cond,
                       *, workers: int = 1) -> np.ndarray:
    """Noise prediction for a kR x kR latent, merged from per-patch predictions by weighted sum.

    ``denoiser`` is a DenoiserBundle or a PatchDenoiser callable; callables
    receive the patch box so position-aware test hooks can be used.
    Accumulation runs in patch order regardless of ``workers``.
    """
    lat = np.asarray(latent, dtype=np.float64)
    squeeze = lat.ndim == 2
    if squeeze:
        lat = lat[..., None]
    if lat.shape[:2] != (layout.canvas, layout.canvas):
        raise LayoutMismatch(f"latent {lat.shape[:2]} does not match the {layout.canvas}^2 canvas")
    fn = bundle_denoiser(denoiser) if isinstance(denoiser, DenoiserBundle) else denoiser
    boxes = layout.boxes()

    def one(box):
        y0, x0, y1, x1 = box
        return np.asarray(fn(lat[None, y0:y1, x0:x1], t, cond, box), dtype=np.float64).reshape(y1 - y0, x1 - x0, -1)

    if workers > 1 and len(boxes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(one, boxes))
    else:
        preds = [one(b) for b in boxes]
    out = np.zeros(lat.shape[:2] + (preds[0].shape[-1],))
    for (y0, x0, y1, x1), w, p in zip(boxes, layout.weights, preds):
        out[y0:y1, x0:x1] += w[..., None] * p
    return out[..., 0] if squeeze else out


# --------------------------------------------------------------------------- sampler

def ddim_update(x: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic step t -> t-1: re-noise the implied clean image with the predicted noise."""
    ab_t = sched.abar(t)
    ab_prev = sched.abar(t - 1)
    x0_hat = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def sample_image(denoiser, sched: NoiseSchedule, layout: TileLayout, cond, x_T: np.ndarray,
                 *, workers: int = 1, clamp: bool = True) -> np.ndarray:
    x = np.asarray(x_T, dtype=np.float64)
    for t in range(sched.T, 0, -1):
        x = ddim_update(x, tiled_denoise_step(x, denoiser, t, layout, cond, workers=workers), t, sched)
    return np.clip(x, 0.0, 1.0) if clamp else x


def sample_video(bundle, sched: NoiseSchedule, layout: TileLayout, c_id: np.ndarray,
                 pose_sequence: Sequence[np.ndarray], camera=None, *, seed: int = 0,
                 workers: int = 1, channels: int | None = None) -> list[np.ndarray]:
    """One kR x kR frame per pose, each from its own fixed-seed starting noise.

    ``pose_sequence`` holds Pose objects (combined with ``camera`` into the
    pose condition) or ready-made condition vectors.
    """
    from .corpus import pose_condition

    if len(pose_sequence) == 0:
        raise EmptyVideo("pose sequence is empty")
    if channels is None:
        channels = bundle.config.channels if isinstance(bundle, DenoiserBundle) else 3
    rng = np.random.default_rng(seed)
    frames = []
    for pose in pose_sequence:
        cvec = pose_condition(pose, camera) if hasattr(pose, "joint_rotation") else np.asarray(pose, float)
        x_T = rng.standard_normal((layout.canvas, layout.canvas, channels))
        frames.append(sample_image(bundle, sched, layout, TileCond(cvec, np.asarray(c_id, float)), x_T,
                                   workers=workers))
    return frames
