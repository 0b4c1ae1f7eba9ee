"""Pose-conditioned decoder from posed position maps to Gaussian attribute maps.

Two backends share the constraint head:

* ``texel_mlp``: shared per-texel MLP over ``[posed position, canonical anchor,
  flattened joint quaternions]``, hidden 2x64 ReLU, linear head of 14.
* ``conv_unet``: 3-level UNet (16/32/64 channels, 3x3 convs, average-pool down,
  nearest up, skip concatenation) over the stacked front/back maps, with one
  14-channel head per plane.

Raw channels are ``[offset(3), quat(4), scale(3), opacity(1), color(3)]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import nn
from .errors import NonFiniteActivation, ResolutionMismatch, SchemaViolation, ShapeMismatch
from .skeleton import PosedPositionMaps
from .tensorfile import load_tensors, save_tensors

N_CHANNELS = 14
BACKENDS = ("texel_mlp", "conv_unet")
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
MLP_HIDDEN = 64
UNET_BASE = 16


@dataclass
class GaussianAttributeMap:
    offset: np.ndarray   # (H, W, 3)
    quat: np.ndarray     # (H, W, 4)
    scale: np.ndarray    # (H, W, 3)
    opacity: np.ndarray  # (H, W)
    color: np.ndarray    # (H, W, 3)
    mask: np.ndarray     # (H, W) bool

    def channels(self) -> np.ndarray:
        return np.concatenate([self.offset, self.quat, self.scale, self.opacity[..., None], self.color],
                              axis=-1)

    @classmethod
    def from_channels(cls, ch: np.ndarray, mask: np.ndarray) -> "GaussianAttributeMap":
        return cls(ch[..., 0:3].copy(), ch[..., 3:7].copy(), ch[..., 7:10].copy(), ch[..., 10].copy(),
                   ch[..., 11:14].copy(), np.asarray(mask, dtype=bool).copy())

    @classmethod
    def constant(cls, mask: np.ndarray, *, scale, opacity: float, color=None) -> "GaussianAttributeMap":
        h, w = mask.shape
        col = np.full((h, w, 3), 0.5) if color is None else np.broadcast_to(color, (h, w, 3)).copy()
        q = np.zeros((h, w, 4))
        q[..., 0] = 1.0
        return cls(np.zeros((h, w, 3)), q, np.broadcast_to(np.asarray(scale, float), (h, w, 3)).copy(),
                   np.full((h, w), float(opacity)), col, mask.copy())


@dataclass(frozen=True)
class DecoderConfig:
    backend: str
    resolution: tuple[int, int]
    n_joints: int
    delta_max: float
    s_min: float
    s_max: float

    @classmethod
    def for_template(cls, backend: str, resolution, n_joints: int, template_height: float) -> "DecoderConfig":
        return cls(backend, (int(resolution[0]), int(resolution[1])), int(n_joints),
                   0.05 * template_height, 1e-4, 0.1 * template_height)


@dataclass
class DecoderParams:
    config: DecoderConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def backend(self) -> str:
        return self.config.backend

    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def replace_tensors(self, tensors: dict[str, np.ndarray]) -> "DecoderParams":
        return replace(self, tensors=dict(tensors))

    def copy(self) -> "DecoderParams":
        return self.replace_tensors({k: v.copy() for k, v in self.tensors.items()})


# --------------------------------------------------------------------------- init

def _unet_layers(in_ch: int = 6):
    b = UNET_BASE
    return [("enc1", in_ch, b), ("enc2", b, 2 * b), ("mid", 2 * b, 4 * b),
            ("dec2", 4 * b + 2 * b, 2 * b), ("dec1", 2 * b + b, b),
            ("head_front", b, N_CHANNELS), ("head_back", b, N_CHANNELS)]


def init_decoder(config: DecoderConfig, rng: np.random.Generator) -> DecoderParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, zero final layers."""
    if config.backend not in BACKENDS:
        raise ValueError(f"unknown decoder backend {config.backend!r}")
    t: dict[str, np.ndarray] = {}
    if config.backend == "texel_mlp":
        d_in = 6 + 4 * config.n_joints
        dims = [(d_in, MLP_HIDDEN), (MLP_HIDDEN, MLP_HIDDEN), (MLP_HIDDEN, N_CHANNELS)]
        for i, (a, b) in enumerate(dims):
            last = i == len(dims) - 1
            t[f"w{i}"] = np.zeros((a, b)) if last else nn.uniform_init(rng, (a, b), a)
            t[f"b{i}"] = np.zeros(b)
    else:
        h, w = config.resolution
        if h % 4 or w % 4:
            raise ResolutionMismatch("conv_unet needs map sides divisible by 4")
        for name, cin, cout in _unet_layers():
            head = name.startswith("head")
            t[f"{name}.w"] = np.zeros((3, 3, cin, cout)) if head else nn.uniform_init(rng, (3, 3, cin, cout), 9 * cin)
            t[f"{name}.b"] = np.zeros(cout)
    return DecoderParams(config, t)


# --------------------------------------------------------------------------- networks

def _check_maps(params: DecoderParams, maps: PosedPositionMaps) -> None:
    if tuple(maps.resolution) != tuple(params.config.resolution):
        raise ResolutionMismatch(f"maps are {maps.resolution}, decoder expects {params.config.resolution}")
    if maps.pose.n_joints != params.config.n_joints:
        raise ShapeMismatch(f"pose has {maps.pose.n_joints} joints, decoder expects {params.config.n_joints}")


def _mlp_features(maps: PosedPositionMaps) -> np.ndarray:
    rel_f, rel_b = maps.root_relative()
    pose = maps.pose.flat()
    rows = []
    for rel, anchor, mask in ((rel_f, maps.front_anchor, maps.front_mask),
                              (rel_b, maps.back_anchor, maps.back_mask)):
        n = int(mask.sum())
        rows.append(np.concatenate([rel[mask], anchor[mask], np.broadcast_to(pose, (n, len(pose)))], axis=1))
    return np.concatenate(rows, axis=0)


def _mlp_forward(t, maps):
    x = _mlp_features(maps)
    h0, c0 = nn.linear_forward(x, t["w0"], t["b0"])
    a0, m0 = nn.relu_forward(h0)
    h1, c1 = nn.linear_forward(a0, t["w1"], t["b1"])
    a1, m1 = nn.relu_forward(h1)
    out, c2 = nn.linear_forward(a1, t["w2"], t["b2"])
    hh, ww = maps.resolution
    raw_f = np.zeros((hh, ww, N_CHANNELS))
    raw_b = np.zeros((hh, ww, N_CHANNELS))
    nf = int(maps.front_mask.sum())
    raw_f[maps.front_mask] = out[:nf]
    raw_b[maps.back_mask] = out[nf:]
    return raw_f, raw_b, (c0, m0, c1, m1, c2)


def _mlp_backward(t, cache, maps, d_f, d_b):
    c0, m0, c1, m1, c2 = cache
    dout = np.concatenate([d_f[maps.front_mask], d_b[maps.back_mask]], axis=0)
    g = {}
    da1, g["w2"], g["b2"] = nn.linear_backward(dout, c2, t["w2"])
    dh1 = nn.relu_backward(da1, m1)
    da0, g["w1"], g["b1"] = nn.linear_backward(dh1, c1, t["w1"])
    dh0 = nn.relu_backward(da0, m0)
    _, g["w0"], g["b0"] = nn.linear_backward(dh0, c0, t["w0"])
    return g


def _conv_relu(t, name, x):
    y, c = nn.conv3x3_forward(x, t[f"{name}.w"], t[f"{name}.b"])
    a, m = nn.relu_forward(y)
    return a, (c, m)


def _conv_relu_back(t, name, da, cache, g):
    c, m = cache
    dx, g[f"{name}.w"], g[f"{name}.b"] = nn.conv3x3_backward(nn.relu_backward(da, m), c, t[f"{name}.w"])
    return dx


def _unet_forward(t, maps):
    rel_f, rel_b = maps.root_relative()
    x = np.concatenate([rel_f, rel_b], axis=-1)[None]
    e1, ce1 = _conv_relu(t, "enc1", x)
    p1, sp1 = nn.avgpool2_forward(e1)
    e2, ce2 = _conv_relu(t, "enc2", p1)
    p2, sp2 = nn.avgpool2_forward(e2)
    mid, cmid = _conv_relu(t, "mid", p2)
    u2, su2 = nn.upsample2_forward(mid)
    d2, cd2 = _conv_relu(t, "dec2", np.concatenate([u2, e2], axis=-1))
    u1, su1 = nn.upsample2_forward(d2)
    d1, cd1 = _conv_relu(t, "dec1", np.concatenate([u1, e1], axis=-1))
    rf, chf = nn.conv3x3_forward(d1, t["head_front.w"], t["head_front.b"])
    rb, chb = nn.conv3x3_forward(d1, t["head_back.w"], t["head_back.b"])
    cache = (ce1, sp1, ce2, sp2, cmid, su2, cd2, su1, cd1, chf, chb, mid.shape[-1], e2.shape[-1])
    return rf[0], rb[0], cache


def _unet_backward(t, cache, maps, d_f, d_b):
    ce1, sp1, ce2, sp2, cmid, su2, cd2, su1, cd1, chf, chb, c_mid, c_e2 = cache
    g = {}
    dd1a, g["head_front.w"], g["head_front.b"] = nn.conv3x3_backward(d_f[None], chf, t["head_front.w"])
    dd1b, g["head_back.w"], g["head_back.b"] = nn.conv3x3_backward(d_b[None], chb, t["head_back.w"])
    dcat1 = _conv_relu_back(t, "dec1", dd1a + dd1b, cd1, g)
    c_d2 = dcat1.shape[-1] - UNET_BASE
    du1, de1 = dcat1[..., :c_d2], dcat1[..., c_d2:]
    dd2 = nn.upsample2_backward(du1, su1)
    dcat2 = _conv_relu_back(t, "dec2", dd2, cd2, g)
    du2, de2 = dcat2[..., :c_mid], dcat2[..., c_mid:]
    dmid = nn.upsample2_backward(du2, su2)
    dp2 = _conv_relu_back(t, "mid", dmid, cmid, g)
    de2 = de2 + nn.avgpool2_backward(dp2, sp2)
    dp1 = _conv_relu_back(t, "enc2", de2, ce2, g)
    de1 = de1 + nn.avgpool2_backward(dp1, sp1)
    _conv_relu_back(t, "enc1", de1, ce1, g)
    return g


_NETS = {"texel_mlp": (_mlp_forward, _mlp_backward), "conv_unet": (_unet_forward, _unet_backward)}


# --------------------------------------------------------------------------- constraint head

def _constrain(raw: np.ndarray, cfg: DecoderConfig) -> np.ndarray:
    out = np.empty_like(raw)
    out[..., 0:3] = cfg.delta_max * np.tanh(raw[..., 0:3])
    u = raw[..., 3:7] + IDENTITY_QUAT
    out[..., 3:7] = u / np.linalg.norm(u, axis=-1, keepdims=True)
    out[..., 7:10] = cfg.s_min + (cfg.s_max - cfg.s_min) * nn.sigmoid(raw[..., 7:10])
    out[..., 10:14] = nn.sigmoid(raw[..., 10:14])
    return out


def _constrain_backward(raw: np.ndarray, up: np.ndarray, cfg: DecoderConfig) -> np.ndarray:
    d = np.empty_like(raw)
    th = np.tanh(raw[..., 0:3])
    d[..., 0:3] = up[..., 0:3] * cfg.delta_max * (1.0 - th * th)
    u = raw[..., 3:7] + IDENTITY_QUAT
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    q = u / norm
    gq = up[..., 3:7]
    d[..., 3:7] = (gq - q * (gq * q).sum(axis=-1, keepdims=True)) / norm
    sg = nn.sigmoid(raw[..., 7:10])
    d[..., 7:10] = up[..., 7:10] * (cfg.s_max - cfg.s_min) * sg * (1.0 - sg)
    sg = nn.sigmoid(raw[..., 10:14])
    d[..., 10:14] = up[..., 10:14] * sg * (1.0 - sg)
    return d


def _raw(params: DecoderParams, maps: PosedPositionMaps):
    _check_maps(params, maps)
    fwd, _ = _NETS[params.backend]
    raw_f, raw_b, cache = fwd(params.tensors, maps)
    if not (np.all(np.isfinite(raw_f)) and np.all(np.isfinite(raw_b))):
        raise NonFiniteActivation("decoder produced non-finite activations")
    return raw_f, raw_b, cache


def decode(params: DecoderParams, maps: PosedPositionMaps) -> tuple[GaussianAttributeMap, GaussianAttributeMap]:
    raw_f, raw_b, _ = _raw(params, maps)
    out = []
    for raw, mask in ((raw_f, maps.front_mask), (raw_b, maps.back_mask)):
        ch = np.where(mask[..., None], _constrain(raw, params.config), 0.0)
        out.append(GaussianAttributeMap.from_channels(ch, mask))
    return out[0], out[1]


def decoder_backward(params: DecoderParams, maps: PosedPositionMaps, upstream) -> dict[str, np.ndarray]:
    """Parameter gradients of ``sum(upstream_f * G_f) + sum(upstream_b * G_b)``.

    ``upstream`` is a pair of (H, W, 14) arrays over the constrained channels;
    entries on inactive texels are ignored.
    """
    up_f, up_b = (np.asarray(u, dtype=np.float64) for u in upstream)
    shape = tuple(params.config.resolution) + (N_CHANNELS,)
    if up_f.shape != shape or up_b.shape != shape:
        raise ShapeMismatch(f"upstream must be two {shape} arrays, got {up_f.shape}, {up_b.shape}")
    raw_f, raw_b, cache = _raw(params, maps)
    cfg = params.config
    d_f = np.where(maps.front_mask[..., None], _constrain_backward(raw_f, up_f, cfg), 0.0)
    d_b = np.where(maps.back_mask[..., None], _constrain_backward(raw_b, up_b, cfg), 0.0)
    _, bwd = _NETS[params.backend]
    grads = bwd(params.tensors, cache, maps, d_f, d_b)
    return {k: grads[k] for k in params.tensors}


# --------------------------------------------------------------------------- serialization

def save_decoder(path: str | Path, params: DecoderParams) -> None:
    c = params.config
    meta: dict[str, Any] = {"backend": c.backend, "resolution": list(c.resolution), "n_joints": c.n_joints,
                            "delta_max": c.delta_max, "s_min": c.s_min, "s_max": c.s_max}
    save_tensors(path, params.tensors, kind="decoder_params", meta=meta)


def load_decoder(path: str | Path) -> DecoderParams:
    tensors, meta = load_tensors(path, expect_kind="decoder_params")
    try:
        cfg = DecoderConfig(meta["backend"], tuple(meta["resolution"]), int(meta["n_joints"]),
                            float(meta["delta_max"]), float(meta["s_min"]), float(meta["s_max"]))
    except KeyError as exc:
        raise SchemaViolation(f"decoder header missing {exc}") from None
    expected = init_decoder(cfg, np.random.default_rng(0)).tensors
    if set(expected) != set(tensors) or any(expected[k].shape != tensors[k].shape for k in expected):
        raise SchemaViolation("decoder tensors do not match the declared backend architecture")
    return DecoderParams(cfg, {k: tensors[k] for k in expected})
