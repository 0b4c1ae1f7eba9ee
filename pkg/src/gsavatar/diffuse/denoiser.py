"""Toy conditional noise predictor, its frozen reference encoder, and the noise-prediction loss.

Network (channels-last, pixel space)::

    h1 = relu(conv1(z) + temb_proj(emb(t)) + pose_proj(c_pose) + id_proj(c_id))
    h2 = relu(conv2(h1));  h3 = relu(conv3(h2));  eps_hat = conv4(h3)

The three projections are linear maps to the hidden width, broadcast over
pixels. ``id_proj`` is the identity-conditioning injection that fine-tuning
is allowed to touch; ``ref.*`` tensors form a frozen, seed-fixed encoder
(two 3x3 convs + global mean pool) that turns a reference image into an
identity vector.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .. import nn
from ..errors import EmptyBatch, FrozenViolation, SchemaViolation, ShapeMismatch
from ..tensorfile import load_tensors, save_tensors
from .schedule import NoiseSchedule, q_sample

REF_SEED = 20240607
TRUNK = ("conv1", "conv2", "conv3", "conv4")
PROJECTIONS = ("temb_proj", "pose_proj", "id_proj")
IDENTITY_TRAINABLE = ("id_proj.w", "id_proj.b")


@dataclass(frozen=True)
class DenoiserConfig:
    native: int = 32        # R, training resolution
    channels: int = 3
    hidden: int = 16
    id_dim: int = 16
    pose_dim: int = 27
    temb_dim: int = 16
    ref_hidden: int = 8


@dataclass
class DenoiserBundle:
    config: DenoiserConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: frozenset[str] = frozenset()

    @property
    def n_identities(self) -> int:
        return len(self.tensors["identity_table"])

    def trainable(self) -> list[str]:
        return [k for k in self.tensors if k not in self.frozen]

    def replace_tensors(self, tensors: dict[str, np.ndarray]) -> "DenoiserBundle":
        return replace(self, tensors=dict(tensors))

    def copy(self) -> "DenoiserBundle":
        return self.replace_tensors({k: v.copy() for k, v in self.tensors.items()})


def _ref_tensors(cfg: DenoiserConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(REF_SEED)
    c, h, d = cfg.channels, cfg.ref_hidden, cfg.id_dim
    return {"ref.conv1.w": nn.uniform_init(rng, (3, 3, c, h), 9 * c), "ref.conv1.b": np.zeros(h),
            "ref.conv2.w": nn.uniform_init(rng, (3, 3, h, d), 9 * h), "ref.conv2.b": np.zeros(d)}


def init_bundle(config: DenoiserConfig, n_identities: int, rng: np.random.Generator) -> DenoiserBundle:
    """Fresh bundle; identity rows start at zero (callers seed them from reference images)."""
    c, h = config.channels, config.hidden
    t: dict[str, np.ndarray] = {}
    for name, cin, cout in (("conv1", c, h), ("conv2", h, h), ("conv3", h, h), ("conv4", h, c)):
        t[f"{name}.w"] = nn.uniform_init(rng, (3, 3, cin, cout), 9 * cin)
        t[f"{name}.b"] = np.zeros(cout)
    for name, din in (("temb_proj", config.temb_dim), ("pose_proj", config.pose_dim), ("id_proj", config.id_dim)):
        t[f"{name}.w"] = nn.uniform_init(rng, (din, h), din)
        t[f"{name}.b"] = np.zeros(h)
    t["identity_table"] = np.zeros((n_identities, config.id_dim))
    ref = _ref_tensors(config)
    t.update(ref)
    return DenoiserBundle(config, t, frozenset(ref))


# --------------------------------------------------------------------------- encoders

def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def reference_embedding(bundle: DenoiserBundle, images: np.ndarray) -> np.ndarray:
    """Frozen mean-pooled conv features of one or more images, (B, id_dim)."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    t = bundle.tensors
    h, _ = nn.conv3x3_forward(x, t["ref.conv1.w"], t["ref.conv1.b"])
    h = np.maximum(h, 0.0)
    if h.shape[1] % 2 == 0 and h.shape[2] % 2 == 0:
        h, _ = nn.avgpool2_forward(h)
    h, _ = nn.conv3x3_forward(h, t["ref.conv2.w"], t["ref.conv2.b"])
    return np.maximum(h, 0.0).mean(axis=(1, 2))


# --------------------------------------------------------------------------- network

@dataclass
class Conditioning:
    """Per-sample conditioning: pose vector, identity vector and timestep."""
    pose: np.ndarray   # (B, pose_dim)
    c_id: np.ndarray   # (B, id_dim)
    t: np.ndarray      # (B,) ints in [1, T]


def predict_noise(bundle: DenoiserBundle, z: np.ndarray, cond: Conditioning, *, keep_cache: bool = False):
    p = bundle.tensors
    cfg = bundle.config
    temb = timestep_embedding(cond.t, cfg.temb_dim)
    inj = (temb @ p["temb_proj.w"] + p["temb_proj.b"] + cond.pose @ p["pose_proj.w"] + p["pose_proj.b"]
           + cond.c_id @ p["id_proj.w"] + p["id_proj.b"])
    a1, c1 = nn.conv3x3_forward(z, p["conv1.w"], p["conv1.b"])
    h1, m1 = nn.relu_forward(a1 + inj[:, None, None, :])
    a2, c2 = nn.conv3x3_forward(h1, p["conv2.w"], p["conv2.b"])
    h2, m2 = nn.relu_forward(a2)
    a3, c3 = nn.conv3x3_forward(h2, p["conv3.w"], p["conv3.b"])
    h3, m3 = nn.relu_forward(a3)
    out, c4 = nn.conv3x3_forward(h3, p["conv4.w"], p["conv4.b"])
    if keep_cache:
        return out, (temb, c1, m1, c2, m2, c3, m3, c4)
    return out


def predict_noise_backward(bundle: DenoiserBundle, cond: Conditioning, cache, d_out: np.ndarray):
    """Gradients of ``sum(d_out * eps_hat)`` w.r.t. the network tensors and the identity vectors."""
    p = bundle.tensors
    temb, c1, m1, c2, m2, c3, m3, c4 = cache
    g: dict[str, np.ndarray] = {}
    d, g["conv4.w"], g["conv4.b"] = nn.conv3x3_backward(d_out, c4, p["conv4.w"])
    d, g["conv3.w"], g["conv3.b"] = nn.conv3x3_backward(nn.relu_backward(d, m3), c3, p["conv3.w"])
    d, g["conv2.w"], g["conv2.b"] = nn.conv3x3_backward(nn.relu_backward(d, m2), c2, p["conv2.w"])
    d = nn.relu_backward(d, m1)
    d_inj = d.sum(axis=(1, 2))
    _, g["conv1.w"], g["conv1.b"] = nn.conv3x3_backward(d, c1, p["conv1.w"])
    for name, x in (("temb_proj", temb), ("pose_proj", cond.pose), ("id_proj", cond.c_id)):
        g[f"{name}.w"] = x.T @ d_inj
        g[f"{name}.b"] = d_inj.sum(axis=0)
    d_cid = d_inj @ p["id_proj.w"].T
    return g, d_cid


# --------------------------------------------------------------------------- loss

@dataclass
class DiffusionBatch:
    x0: np.ndarray           # (B, R, R, C)
    pose: np.ndarray         # (B, pose_dim)
    identity: np.ndarray     # (B,) rows of the identity table

    def __len__(self) -> int:
        return len(self.x0)


NoiseHook = Callable[[np.ndarray, Conditioning, np.ndarray], np.ndarray]


def diffusion_loss(bundle: DenoiserBundle, batch: DiffusionBatch, sched: NoiseSchedule,
                   rng: np.random.Generator, *, hook: NoiseHook | None = None,
                   need_grads: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error between injected and predicted noise.

    Draws ``t`` uniformly from [1, T] per sample, then ``eps`` from a standard
    normal. ``hook(z_t, cond, eps)`` replaces the network (no gradients) for
    analytic checks. Gradients cover every non-frozen tensor; the identity
    table receives scatter-added row gradients.
    """
    if len(batch) == 0:
        raise EmptyBatch("diffusion_loss needs at least one sample")
    x0 = np.asarray(batch.x0, dtype=np.float64)
    if x0.shape[1:] != (bundle.config.native, bundle.config.native, bundle.config.channels):
        raise ShapeMismatch(f"batch images {x0.shape[1:]} do not match the denoiser's native size")
    b = len(x0)
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    z = q_sample(x0, t, eps, sched)
    ids = np.asarray(batch.identity, dtype=np.int64)
    cond = Conditioning(np.asarray(batch.pose, dtype=np.float64), bundle.tensors["identity_table"][ids], t)
    if hook is not None:
        pred = hook(z, cond, eps)
        return float(np.mean((pred - eps) ** 2)), {}
    pred, cache = predict_noise(bundle, z, cond, keep_cache=True)
    diff = pred - eps
    loss = float(np.mean(diff * diff))
    if not need_grads:
        return loss, {}
    g, d_cid = predict_noise_backward(bundle, cond, cache, 2.0 * diff / diff.size)
    table = np.zeros_like(bundle.tensors["identity_table"])
    np.add.at(table, ids, d_cid)
    g["identity_table"] = table
    return loss, {k: g[k] for k in bundle.tensors if k not in bundle.frozen}


def expected_loss(bundle: DenoiserBundle, batch: DiffusionBatch, sched: NoiseSchedule,
                  draws: int = 8, seed: int = 0) -> float:
    """Average of ``diffusion_loss`` over ``draws`` fixed-seed (t, eps) samplings."""
    rng = np.random.default_rng(seed)
    return float(np.mean([diffusion_loss(bundle, batch, sched, rng, need_grads=False)[0] for _ in range(draws)]))


def assert_frozen(before: DenoiserBundle, after: DenoiserBundle, allowed: Sequence[str]) -> None:
    """Raise FrozenViolation unless every tensor outside ``allowed`` is bit-identical."""
    for k, v in before.tensors.items():
        if k in allowed:
            continue
        w = after.tensors.get(k)
        if k == "identity_table" and w is not None:
            w = w[:len(v)]
        if w is None or w.shape != v.shape or w.dtype != v.dtype or w.tobytes() != v.tobytes():
            raise FrozenViolation(f"tensor {k!r} changed but is frozen")


# --------------------------------------------------------------------------- serialization

def save_bundle(path: str | Path, bundle: DenoiserBundle) -> None:
    meta: dict[str, Any] = {"config": asdict(bundle.config), "frozen": sorted(bundle.frozen)}
    save_tensors(path, bundle.tensors, kind="denoiser_bundle", meta=meta)


def load_bundle(path: str | Path) -> DenoiserBundle:
    tensors, meta = load_tensors(path, expect_kind="denoiser_bundle")
    try:
        cfg = DenoiserConfig(**meta["config"])
        frozen = frozenset(meta["frozen"])
    except (KeyError, TypeError) as exc:
        raise SchemaViolation(f"bad denoiser header: {exc}") from None
    expected = init_bundle(cfg, len(tensors.get("identity_table", ())), np.random.default_rng(0))
    if set(expected.tensors) != set(tensors) or any(expected.tensors[k].shape != tensors[k].shape
                                                    for k in expected.tensors):
        raise SchemaViolation("bundle tensors do not match the declared architecture")
    ref = expected.tensors
    for k in ref:
        if k.startswith("ref.") and tensors[k].tobytes() != ref[k].tobytes():
            raise FrozenViolation(f"frozen reference tensor {k!r} differs from its fixed-seed value")
    return DenoiserBundle(cfg, {k: tensors[k] for k in expected.tensors}, frozen)
