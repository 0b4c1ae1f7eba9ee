"""PSNR / SSIM and per-view evaluation reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ImageTooSmall, ShapeMismatch

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(img, ref) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(img, ref) -> float:
    """Peak signal-to-noise ratio for data range 1, capped at 100 dB."""
    a, b = _pair(img, ref)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x**2 / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(img, ref) -> float:
    """Single-scale SSIM on luma, Gaussian 11x11 window, valid positions only, averaged."""
    a, b = _pair(img, ref)
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ImageTooSmall(f"SSIM needs images of at least {SSIM_WINDOW} px per side, got {x.shape}")
    win = gaussian_window()

    def filt(z):
        return np.einsum("ijkl,kl->ij", sliding_window_view(z, win.shape), win)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1, c2 = K1**2, K2**2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


# --------------------------------------------------------------------------- reports

@dataclass
class FrameMetrics:
    index: int
    view: str
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    frames: list[FrameMetrics] = field(default_factory=list)

    def views(self) -> list[str]:
        return sorted({f.view for f in self.frames})

    def mean(self, view: str | None = None, metric: str = "psnr") -> float:
        vals = [getattr(f, metric) for f in self.frames if view is None or f.view == view]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict[str, dict[str, float]]:
        out = {v: {"psnr": self.mean(v, "psnr"), "ssim": self.mean(v, "ssim"),
                   "count": sum(f.view == v for f in self.frames)} for v in self.views()}
        out["all"] = {"psnr": self.mean(None, "psnr"), "ssim": self.mean(None, "ssim"), "count": len(self.frames)}
        return out

    def to_json(self) -> str:
        return json.dumps({"frames": [asdict(f) for f in self.frames], "means": self.summary()}, indent=2)


def evaluate_images(rendered: Sequence[np.ndarray], frames) -> MetricsReport:
    """Score already-rendered images (white background) against the frames' images."""
    rep = MetricsReport()
    for i, (img, fr) in enumerate(zip(rendered, frames)):
        rep.frames.append(FrameMetrics(i, fr.view, psnr(img, fr.image), ssim(img, fr.image)))
    return rep


def evaluate(params, template, layouts, eval_frames, *, workers: int = 1,
             renderer: Callable | None = None) -> MetricsReport:
    """Render every frame with the avatar on white and score it against the stored image.

    ``renderer(frame) -> image`` overrides the decoder path (used to score
    ground-truth attribute maps).
    """
    if renderer is None:
        from .train import render_avatar

        def renderer(fr):
            return render_avatar(params, template, layouts, fr.pose, fr.camera, workers=workers).color

    return evaluate_images([renderer(fr) for fr in eval_frames], eval_frames)
