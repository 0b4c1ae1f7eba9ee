"""Photometric + regularizer losses and the avatar training loop."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import Config, load_config, parse_config  # noqa: F401  (re-exported)
from .decoder import DecoderConfig, DecoderParams, decode, decoder_backward, init_decoder
from .errors import EmptyDataset, EmptyInput, InvalidConfig, JointCountMismatch, ShapeMismatch, TrainingDiverged
from .geometry import AnchorLayout
from .gsplat import WHITE, build_cloud, build_cloud_backward, project_gaussians, rasterize, rasterize_backward, scatter_channels
from .optim import AdamState, adam_step
from .skeleton import SkeletonTemplate, build_position_maps
from .tensorfile import atomic_write_text


# --------------------------------------------------------------------------- losses

@dataclass(frozen=True)
class LossWeights:
    lambda_lpips: float = 0.0
    lambda_offset: float = 0.01
    lambda_scale: float = 1.0

    def __post_init__(self):
        if min(self.lambda_lpips, self.lambda_offset, self.lambda_scale) < 0:
            raise InvalidConfig("loss weights must be nonnegative")
        if self.lambda_lpips != 0.0:
            raise InvalidConfig("the LPIPS term has no backend here; lambda_lpips must stay 0")


def _white_outside(target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask, dtype=bool)[..., None], target, 1.0)


def l1_loss(render: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean |render - target| over all pixels and channels; target is white outside ``mask``."""
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if render.shape != target.shape or np.shape(mask) != render.shape[:2]:
        raise ShapeMismatch(f"render {render.shape}, target {target.shape}, mask {np.shape(mask)}")
    return float(np.abs(render - _white_outside(target, mask)).mean())


def _as_rows(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise EmptyInput(f"{name} needs at least one Gaussian")
    return a


def offset_reg(offsets) -> float:
    return float(np.linalg.norm(_as_rows(offsets, "offset_reg"), axis=1).mean())


def scale_reg(scales) -> float:
    """Mean over Gaussians of the per-Gaussian mean absolute deviation of the 3 scales."""
    s = _as_rows(scales, "scale_reg")
    return float(np.abs(s - s.mean(axis=1, keepdims=True)).mean(axis=1).mean())


@dataclass
class LossTerms:
    l_rgb: float
    l_offset: float
    l_scale: float
    total: float
    d_render: np.ndarray
    d_offsets: np.ndarray
    d_scales: np.ndarray


def total_loss(render, target, mask, offsets, scales, w: LossWeights = LossWeights()) -> LossTerms:
    """Weighted loss with gradients w.r.t. the render, the offsets and the scales.

    Subgradient conventions at kinks: sign(0) = 0 for L1 and the scale
    deviations, and a zero offset contributes zero gradient.
    """
    render = np.asarray(render, dtype=np.float64)
    l_rgb = l1_loss(render, target, mask)
    off = _as_rows(offsets, "offset_reg")
    sc = _as_rows(scales, "scale_reg")
    n = len(off)
    l_off = offset_reg(off)
    l_sc = scale_reg(sc)

    d_render = np.sign(render - _white_outside(np.asarray(target, dtype=np.float64), mask)) / render.size
    norms = np.linalg.norm(off, axis=1, keepdims=True)
    d_off = np.divide(off, norms, out=np.zeros_like(off), where=norms > 0) / n
    r = np.sign(sc - sc.mean(axis=1, keepdims=True))
    d_sc = (r - r.mean(axis=1, keepdims=True)) / (3.0 * len(sc))

    total = l_rgb + w.lambda_offset * l_off + w.lambda_scale * l_sc
    return LossTerms(l_rgb, l_off, l_sc, total, d_render, w.lambda_offset * d_off, w.lambda_scale * d_sc)


# --------------------------------------------------------------------------- config

TrainConfig = Config


# --------------------------------------------------------------------------- loop

@dataclass
class LossRecord:
    iteration: int
    l_rgb: float
    l_offset: float
    l_scale: float
    total: float


@dataclass
class TrainResult:
    params: DecoderParams
    log: list[LossRecord] = field(default_factory=list)
    adam: AdamState | None = None
    seconds: float = 0.0


def log_to_csv(log: Sequence[LossRecord]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["iteration", "l_rgb", "l_offset", "l_scale", "total"])
    for r in log:
        wr.writerow([r.iteration, repr(r.l_rgb), repr(r.l_offset), repr(r.l_scale), repr(r.total)])
    return buf.getvalue()


def write_log(path: str | Path, log: Sequence[LossRecord]) -> None:
    atomic_write_text(path, log_to_csv(log))


def frame_loss_and_grads(params: DecoderParams, template: SkeletonTemplate, layouts, frame,
                         weights: LossWeights, workers: int = 1):
    """Forward chain for one frame and the parameter gradients of its loss."""
    maps = build_position_maps(template, frame.pose, layouts)
    attrs = decode(params, maps)
    cloud = build_cloud(attrs, layouts, template, frame.pose)
    splats = project_gaussians(cloud, frame.camera)
    out = rasterize(splats, frame.camera, WHITE, workers=workers)
    terms = total_loss(out.color, frame.image, frame.mask, _offsets(attrs), cloud.scale, weights)
    cg = rasterize_backward(splats, frame.camera, WHITE, terms.d_render, out, workers=workers)
    per_g = build_cloud_backward(cg, cloud)
    per_g[:, 0:3] += terms.d_offsets
    per_g[:, 7:10] += terms.d_scales
    grads = decoder_backward(params, maps, scatter_channels(per_g, layouts))
    return terms, grads


def _offsets(attrs) -> np.ndarray:
    return np.concatenate([a.offset[a.mask] for a in attrs], axis=0)


def _check_dataset(template: SkeletonTemplate, dataset) -> None:
    if not len(dataset):
        raise EmptyDataset("training needs at least one frame")
    for i, fr in enumerate(dataset):
        if fr.pose.n_joints != template.n_joints:
            raise JointCountMismatch(f"frame {i}: pose has {fr.pose.n_joints} joints, template {template.n_joints}")


def train(config: Config, template: SkeletonTemplate, layouts: Sequence[AnchorLayout], dataset,
          *, init: DecoderParams | None = None,
          progress: Callable[[LossRecord], None] | None = None) -> TrainResult:
    """Fit a decoder to (captured and generated) frames.

    Each iteration draws one frame uniformly with a seeded generator. Frames
    tagged ``generated`` scale their gradient by ``config.w_gen``; the log holds
    the unweighted loss terms.
    """
    _check_dataset(template, dataset)
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    if init is None:
        dcfg = DecoderConfig.for_template(config.backend, (config.map_height, config.map_width),
                                          template.n_joints, template.height)
        params = init_decoder(dcfg, rng)
    else:
        params = init.copy()
    if tuple(params.config.resolution) != tuple(layouts[0].resolution):
        raise ShapeMismatch("decoder resolution differs from the anchor layouts")
    adam = AdamState.for_params(params.tensors, lr=config.lr, beta1=config.beta1,
                                beta2=config.beta2, eps=config.adam_eps)
    weights = config.weights
    log: list[LossRecord] = []
    for it in range(config.iterations):
        frame = dataset[int(rng.integers(len(dataset)))]
        terms, grads = frame_loss_and_grads(params, template, layouts, frame, weights, config.workers)
        if not np.isfinite(terms.total):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        if frame.source == "generated" and config.w_gen != 1.0:
            grads = {k: config.w_gen * g for k, g in grads.items()}
        tensors, adam = adam_step(params.tensors, grads, adam)
        params = params.replace_tensors(tensors)
        rec = LossRecord(it, terms.l_rgb, terms.l_offset, terms.l_scale, terms.total)
        log.append(rec)
        if progress is not None:
            progress(rec)
    return TrainResult(params, log, adam, time.perf_counter() - t0)


def render_avatar(params: DecoderParams, template, layouts, pose, camera, *, workers: int = 1):
    maps = build_position_maps(template, pose, layouts)
    attrs = decode(params, maps)
    cloud = build_cloud(attrs, layouts, template, pose)
    return rasterize(project_gaussians(cloud, camera), camera, WHITE, workers=workers)
