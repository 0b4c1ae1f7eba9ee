"""3D Gaussian primitives, EWA projection and alpha-composited rasterization.

``rasterize`` is the tile-based production path (16x16 tiles, depth-sorted
per tile, early termination) with an exact reverse-mode ``rasterize_backward``.
``oracle_render`` is an independent reference: one global depth order, every
splat evaluated at every pixel, no early exit.

Tile culling differs from a fixed 3-sigma box: by default each splat's screen
box is grown until the density left outside it is below ``contribution_eps``
(never smaller than 3 sigma), so the only divergence from the oracle is bounded
by ``n_splats * contribution_eps + min_transmittance``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ForwardStateMissing, NonPositiveScale, PointBehindCamera, ShapeMismatch
from .geometry import NEAR_EPS, Camera, check_unit_quat, quat_to_matrix, quat_to_matrix_backward

DILATION = 0.3
TILE_SIZE = 16
MIN_TRANSMITTANCE = 1e-6
CONTRIBUTION_EPS = 1e-8
WHITE = np.ones(3)


def covariance_from_qs(q, s) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    check_unit_quat(q)
    if np.any(s <= 0):
        raise NonPositiveScale(f"scales must be positive, got {s}")
    r = quat_to_matrix(q)
    return (r * s**2) @ r.T


@dataclass
class Gaussian3D:
    mean: np.ndarray
    quat: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    linear: np.ndarray = field(default_factory=lambda: np.eye(3))

    @property
    def covariance(self) -> np.ndarray:
        a = np.asarray(self.linear) @ quat_to_matrix(self.quat) * np.asarray(self.scale)
        return a @ a.T


@dataclass
class GaussianCloud:
    """Struct-of-arrays Gaussian set. ``linear`` is the blended skinning matrix
    applied on top of the canonical rotation/scale (identity when unposed)."""
    mean: np.ndarray      # (N, 3)
    quat: np.ndarray      # (N, 4)
    scale: np.ndarray     # (N, 3)
    opacity: np.ndarray   # (N,)
    color: np.ndarray     # (N, 3)
    linear: np.ndarray | None = None  # (N, 3, 3)

    def __post_init__(self):
        n = len(self.mean)
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(n, 3)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(n, 4)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(n, 3)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(n)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)
        if self.linear is None:
            self.linear = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        self.linear = np.asarray(self.linear, dtype=np.float64).reshape(n, 3, 3)

    def __len__(self) -> int:
        return len(self.mean)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.mean[i], self.quat[i], self.scale[i], float(self.opacity[i]),
                          self.color[i], self.linear[i])

    @classmethod
    def from_list(cls, gaussians: Sequence[Gaussian3D]) -> "GaussianCloud":
        if not gaussians:
            return cls.empty()
        return cls(np.stack([g.mean for g in gaussians]), np.stack([g.quat for g in gaussians]),
                   np.stack([g.scale for g in gaussians]), np.array([g.opacity for g in gaussians]),
                   np.stack([g.color for g in gaussians]), np.stack([g.linear for g in gaussians]))

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    def covariances(self) -> np.ndarray:
        a = self.linear @ quat_to_matrix(self.quat) * self.scale[:, None, :]
        return a @ np.swapaxes(a, 1, 2)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.mean.copy(), self.quat.copy(), self.scale.copy(),
                             self.opacity.copy(), self.color.copy(), self.linear.copy())


@dataclass
class CloudGrads:
    mean: np.ndarray
    quat: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "CloudGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray


@dataclass
class SplatBatch:
    mean2d: np.ndarray    # (N, 2) pixel centers
    cov2d: np.ndarray     # (N, 2, 2), dilation included
    depth: np.ndarray     # (N,) camera-space z
    opacity: np.ndarray   # (N,)
    color: np.ndarray     # (N, 3)
    valid: np.ndarray     # (N,) bool, False for splats behind the near plane
    cloud: GaussianCloud | None = None
    # intermediates kept for the backward pass
    cam_xyz: np.ndarray | None = None
    proj: np.ndarray | None = None   # (N, 2, 3) J @ W
    cov3d: np.ndarray | None = None
    factor: np.ndarray | None = None  # (N, 3, 3) linear @ R(q) @ diag(s)

    def __len__(self) -> int:
        return len(self.mean2d)

    @property
    def conic(self) -> np.ndarray:
        a, b, c = self.cov2d[:, 0, 0], self.cov2d[:, 0, 1], self.cov2d[:, 1, 1]
        det = a * c - b * b
        out = np.empty_like(self.cov2d)
        out[:, 0, 0] = c / det
        out[:, 1, 1] = a / det
        out[:, 0, 1] = out[:, 1, 0] = -b / det
        return out

    def __getitem__(self, i: int) -> Splat2D:
        return Splat2D(self.mean2d[i], self.cov2d[i], float(self.depth[i]),
                       float(self.opacity[i]), self.color[i])

    @classmethod
    def from_list(cls, splats: Sequence[Splat2D]) -> "SplatBatch":
        n = len(splats)
        if n == 0:
            return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros(0),
                       np.zeros((0, 3)), np.zeros(0, dtype=bool))
        depth = np.array([s.depth for s in splats], dtype=np.float64)
        return cls(np.stack([s.mean2d for s in splats]).astype(np.float64),
                   np.stack([s.cov2d for s in splats]).astype(np.float64), depth,
                   np.array([s.opacity for s in splats], dtype=np.float64),
                   np.stack([s.color for s in splats]).astype(np.float64), depth > NEAR_EPS)


@dataclass
class RasterState:
    splats: SplatBatch
    tiles: list[tuple[int, int, int, int]]   # (x0, y0, x1, y1), exclusive ends
    lists: list[np.ndarray]                  # depth-ordered splat ids per tile
    background: np.ndarray
    min_transmittance: float


@dataclass
class RenderOutput:
    color: np.ndarray   # (H, W, 3)
    alpha: np.ndarray   # (H, W)
    state: RasterState | None = None


# --------------------------------------------------------------------------- projection

def project_gaussians(cloud: GaussianCloud, cam: Camera, near: float = NEAR_EPS,
                      dilation: float = DILATION) -> SplatBatch:
    """Perspective EWA projection of every Gaussian; splats behind ``near`` are marked invalid."""
    w = cam.R
    xyz = cloud.mean @ w.T + cam.t
    valid = xyz[:, 2] > near
    z = np.where(valid, xyz[:, 2], 1.0)
    x, y = xyz[:, 0], xyz[:, 1]
    fx, fy = cam.fx, cam.fy
    n = len(cloud)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / z**2
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / z**2
    proj = jac @ w
    factor = cloud.linear @ quat_to_matrix(cloud.quat) * cloud.scale[:, None, :]
    cov3 = factor @ np.swapaxes(factor, 1, 2)
    cov2 = proj @ cov3 @ np.swapaxes(proj, 1, 2) + dilation * np.eye(2)
    mean2d = np.stack([fx * x / z + cam.cx, fy * y / z + cam.cy], axis=1)
    return SplatBatch(mean2d, cov2, xyz[:, 2].copy(), cloud.opacity.copy(), cloud.color.copy(),
                      valid, cloud, xyz, proj, cov3, factor)


def project_gaussian(g: Gaussian3D, cam: Camera, near: float = NEAR_EPS,
                     dilation: float = DILATION) -> Splat2D:
    batch = project_gaussians(GaussianCloud.from_list([g]), cam, near, dilation)
    if not batch.valid[0]:
        raise PointBehindCamera(f"Gaussian depth {batch.depth[0]:.3g} <= near plane {near:g}")
    return batch[0]


def _as_batch(splats) -> SplatBatch:
    return splats if isinstance(splats, SplatBatch) else SplatBatch.from_list(list(splats))


# --------------------------------------------------------------------------- tiling

def _tile_grid(width: int, height: int, tile: int):
    return [(x0, y0, min(x0 + tile, width), min(y0 + tile, height))
            for y0 in range(0, height, tile) for x0 in range(0, width, tile)]


def footprint_halfwidths(splats: SplatBatch, footprint_sigma: float | None,
                         contribution_eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Screen-space half extents (x, y) outside which a splat is culled from a tile."""
    if footprint_sigma is None:
        ratio = np.maximum(splats.opacity, 0.0) / contribution_eps
        k = np.where(ratio > 1.0, np.sqrt(2.0 * np.log(np.maximum(ratio, 1.0))), -1.0)
        k = np.where(k >= 0, np.maximum(k, 3.0), -1.0)
    else:
        k = np.full(len(splats), float(footprint_sigma))
    return k * np.sqrt(splats.cov2d[:, 0, 0]), k * np.sqrt(splats.cov2d[:, 1, 1])


def _bin_tiles(splats: SplatBatch, tiles, footprint_sigma, contribution_eps) -> list[np.ndarray]:
    order = np.argsort(splats.depth, kind="stable")
    order = order[splats.valid[order]]
    hx, hy = footprint_halfwidths(splats, footprint_sigma, contribution_eps)
    keep = hx[order] >= 0
    order = order[keep]
    u, v = splats.mean2d[order, 0], splats.mean2d[order, 1]
    hx, hy = hx[order], hy[order]
    lists = []
    for x0, y0, x1, y1 in tiles:
        # pixel centers of the tile span [x0, x1 - 1] x [y0, y1 - 1]
        hit = (u + hx >= x0) & (u - hx <= x1 - 1) & (v + hy >= y0) & (v - hy <= y1 - 1)
        lists.append(order[hit])
    return lists


def _tile_pixels(x0, y0, x1, y1) -> np.ndarray:
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def _tile_terms(pix, idx, splats: SplatBatch, conic, min_t):
    d = pix[:, None, :] - splats.mean2d[idx][None, :, :]
    dx, dy = d[..., 0], d[..., 1]
    c = conic[idx]
    power = -0.5 * (c[:, 0, 0] * dx * dx + 2.0 * c[:, 0, 1] * dx * dy + c[:, 1, 1] * dy * dy)
    g = np.exp(power)
    a = splats.opacity[idx] * g
    one_minus = 1.0 - a
    t_excl = np.empty_like(a)
    t_excl[:, 0] = 1.0
    np.cumprod(one_minus[:, :-1], axis=1, out=t_excl[:, 1:])
    inc = t_excl >= min_t
    return dx, dy, g, a, one_minus, t_excl, inc


def _forward_tile(args):
    (x0, y0, x1, y1), idx, splats, conic, bg, min_t = args
    pix = _tile_pixels(x0, y0, x1, y1)
    if len(idx) == 0:
        return np.broadcast_to(bg, (len(pix), 3)).copy(), np.ones(len(pix))
    _, _, _, a, one_minus, t_excl, inc = _tile_terms(pix, idx, splats, conic, min_t)
    w = np.where(inc, a * t_excl, 0.0)
    t_final = np.where(inc, one_minus, 1.0).prod(axis=1)
    color = w @ splats.color[idx] + t_final[:, None] * bg
    return color, t_final


def _run(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def rasterize(splats, cam: Camera, background=WHITE, *, tile_size: int = TILE_SIZE,
              min_transmittance: float = MIN_TRANSMITTANCE,
              contribution_eps: float = CONTRIBUTION_EPS,
              footprint_sigma: float | None = None, workers: int = 1) -> RenderOutput:
    """Tile-based front-to-back compositing onto ``background``."""
    splats = _as_batch(splats)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    h, w = cam.height, cam.width
    tiles = _tile_grid(w, h, tile_size)
    lists = _bin_tiles(splats, tiles, footprint_sigma, contribution_eps)
    conic = splats.conic if len(splats) else np.zeros((0, 2, 2))
    jobs = [(t, idx, splats, conic, bg, min_transmittance) for t, idx in zip(tiles, lists)]
    color = np.empty((h, w, 3))
    trans = np.empty((h, w))
    for (x0, y0, x1, y1), (c, t) in zip(tiles, _run(_forward_tile, jobs, workers)):
        color[y0:y1, x0:x1] = c.reshape(y1 - y0, x1 - x0, 3)
        trans[y0:y1, x0:x1] = t.reshape(y1 - y0, x1 - x0)
    state = RasterState(splats, tiles, lists, bg, min_transmittance)
    return RenderOutput(color, 1.0 - trans, state)


def oracle_render(splats, cam: Camera, background=WHITE) -> RenderOutput:
    """Reference compositor: global depth sort, untruncated densities, no early exit."""
    splats = _as_batch(splats)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    h, w = cam.height, cam.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    color = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    for i in np.argsort(splats.depth, kind="stable"):
        if not splats.valid[i]:
            continue
        inv = np.linalg.inv(splats.cov2d[i])
        dx = xs - splats.mean2d[i, 0]
        dy = ys - splats.mean2d[i, 1]
        g = np.exp(-0.5 * (inv[0, 0] * dx**2 + (inv[0, 1] + inv[1, 0]) * dx * dy + inv[1, 1] * dy**2))
        a = splats.opacity[i] * g
        color += (a * trans)[..., None] * splats.color[i]
        trans *= 1.0 - a
    color += trans[..., None] * bg
    return RenderOutput(color, 1.0 - trans, None)


# --------------------------------------------------------------------------- backward

def _backward_tile(args):
    (x0, y0, x1, y1), idx, splats, conic, bg, min_t, grad = args
    k = len(idx)
    if k == 0:
        return None
    pix = _tile_pixels(x0, y0, x1, y1)
    gpix = grad[y0:y1, x0:x1].reshape(-1, 3)
    dx, dy, g, a, one_minus, t_excl, inc = _tile_terms(pix, idx, splats, conic, min_t)
    w = np.where(inc, a * t_excl, 0.0)
    cols = splats.color[idx]
    d_color = w.T @ gpix

    # dC/da_k = T_k (c_k - B_k), B_k = what is composited behind splat k (scan back to front)
    gc = gpix @ cols.T                          # (P, K) upstream . c_k
    gb = gpix @ bg                              # upstream . background
    d_a = np.zeros_like(a)
    for j in range(k - 1, -1, -1):
        m = inc[:, j]
        aj = a[:, j]
        d_a[:, j] = np.where(m, t_excl[:, j] * (gc[:, j] - gb), 0.0)
        gb = np.where(m, aj * gc[:, j] + (1.0 - aj) * gb, gb)

    op = splats.opacity[idx]
    d_op = (d_a * g).sum(axis=0)
    dpow = d_a * op * g                         # dL/dpower
    c = conic[idx]
    cdx = c[:, 0, 0] * dx + c[:, 0, 1] * dy
    cdy = c[:, 0, 1] * dx + c[:, 1, 1] * dy
    d_mean2d = np.stack([(dpow * cdx).sum(0), (dpow * cdy).sum(0)], axis=1)
    d_conic = np.empty((k, 2, 2))
    d_conic[:, 0, 0] = -0.5 * (dpow * dx * dx).sum(0)
    d_conic[:, 1, 1] = -0.5 * (dpow * dy * dy).sum(0)
    d_conic[:, 0, 1] = d_conic[:, 1, 0] = -0.5 * (dpow * dx * dy).sum(0)
    return idx, d_color, d_op, d_mean2d, d_conic


def rasterize_backward(splats: SplatBatch, cam: Camera, background, grad_color: np.ndarray,
                       forward: RenderOutput | None, *, workers: int = 1) -> CloudGrads:
    """Exact gradients of ``sum(grad_color * rasterize(...).color)`` w.r.t. the source cloud."""
    if forward is None or forward.state is None or forward.state.splats is not splats:
        raise ForwardStateMissing("rasterize_backward needs the RenderOutput of rasterize() on these splats")
    if splats.cloud is None:
        raise ForwardStateMissing("splats were not produced by project_gaussians()")
    st = forward.state
    grad = np.asarray(grad_color, dtype=np.float64)
    if grad.shape != (cam.height, cam.width, 3):
        raise ShapeMismatch(f"upstream gradient shape {grad.shape} != {(cam.height, cam.width, 3)}")
    n = len(splats)
    conic = splats.conic if n else np.zeros((0, 2, 2))
    jobs = [(t, idx, splats, conic, st.background, st.min_transmittance, grad)
            for t, idx in zip(st.tiles, st.lists)]
    d_color = np.zeros((n, 3))
    d_op = np.zeros(n)
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 2, 2))
    for res in _run(_backward_tile, jobs, workers):
        if res is None:
            continue
        idx, dc, do, dm, dk = res
        d_color[idx] += dc
        d_op[idx] += do
        d_mean2d[idx] += dm
        d_conic[idx] += dk
    return _projection_backward(splats, cam, d_mean2d, d_conic, d_op, d_color)


def _projection_backward(splats: SplatBatch, cam: Camera, d_mean2d, d_conic, d_op, d_color) -> CloudGrads:
    cloud = splats.cloud
    n = len(splats)
    out = CloudGrads.zeros(n)
    v = splats.valid
    if not v.any():
        return out
    conic = splats.conic[v]
    d_cov2 = -conic @ d_conic[v] @ conic
    proj = splats.proj[v]
    cov3 = splats.cov3d[v]
    d_cov3 = np.swapaxes(proj, 1, 2) @ d_cov2 @ proj
    d_proj = 2.0 * d_cov2 @ proj @ cov3
    d_jac = d_proj @ cam.R.T

    x, y, z = splats.cam_xyz[v].T
    fx, fy = cam.fx, cam.fy
    dm = d_mean2d[v]
    dxc = dm[:, 0] * fx / z + d_jac[:, 0, 2] * (-fx / z**2)
    dyc = dm[:, 1] * fy / z + d_jac[:, 1, 2] * (-fy / z**2)
    dzc = (-dm[:, 0] * fx * x / z**2 - dm[:, 1] * fy * y / z**2
           + d_jac[:, 0, 0] * (-fx / z**2) + d_jac[:, 0, 2] * (2 * fx * x / z**3)
           + d_jac[:, 1, 1] * (-fy / z**2) + d_jac[:, 1, 2] * (2 * fy * y / z**3))
    out.mean[v] = np.stack([dxc, dyc, dzc], axis=1) @ cam.R

    factor = splats.factor[v]
    d_factor = 2.0 * d_cov3 @ factor
    scale = cloud.scale[v]
    lin_rot = cloud.linear[v] @ quat_to_matrix(cloud.quat[v])
    out.scale[v] = (lin_rot * d_factor).sum(axis=1)
    d_rot = np.swapaxes(cloud.linear[v], 1, 2) @ (d_factor * scale[:, None, :])
    out.quat[v] = quat_to_matrix_backward(cloud.quat[v], d_rot)
    out.opacity[v] = d_op[v]
    out.color[v] = d_color[v]
    return out


def render(cloud: GaussianCloud, cam: Camera, background=WHITE, **kwargs) -> tuple[SplatBatch, RenderOutput]:
    splats = project_gaussians(cloud, cam)
    return splats, rasterize(splats, cam, background, **kwargs)


# --------------------------------------------------------------------------- avatar -> cloud

def build_cloud(attrs, layouts, template, pose) -> GaussianCloud:
    """Posed Gaussians from front/back attribute maps.

    Per active texel the canonical center is ``anchor + offset``; it is skinned
    with the anchor's source-vertex weights, and the blended linear part of the
    skinning matrix is carried as ``linear`` so covariances follow the body.
    Order: front active texels (row-major), then back.
    """
    from .skeleton import blend_transforms, skinning_transforms

    mats = skinning_transforms(template, pose)
    parts = []
    for attr, layout in zip(attrs, layouts):
        if attr.mask.shape != layout.active.shape or not np.array_equal(attr.mask, layout.active):
            raise ShapeMismatch(f"{layout.plane} attribute map does not match its anchor layout")
        m = layout.active
        blend = blend_transforms(template.skinning_weights[layout.active_sources()], mats)
        canon = layout.active_anchors() + attr.offset[m]
        lin = blend[:, :, :3]
        mean = np.einsum("nab,nb->na", lin, canon) + blend[:, :, 3]
        parts.append((mean, attr.quat[m], attr.scale[m], attr.opacity[m], attr.color[m], lin))
    return GaussianCloud(*(np.concatenate(cols, axis=0) for cols in zip(*parts)))


def build_cloud_backward(grads: CloudGrads, cloud: GaussianCloud) -> np.ndarray:
    """Per-Gaussian gradients w.r.t. the 14 attribute channels (offset, q, s, alpha, c)."""
    d_offset = np.einsum("nba,nb->na", cloud.linear, grads.mean)
    return np.concatenate([d_offset, grads.quat, grads.scale, grads.opacity[:, None], grads.color], axis=1)


def scatter_channels(per_gaussian: np.ndarray, layouts) -> tuple[np.ndarray, np.ndarray]:
    """Split (N, C) per-Gaussian rows back onto the front/back texel grids."""
    out = []
    start = 0
    for layout in layouts:
        n = layout.n_active
        grid = np.zeros(layout.resolution + (per_gaussian.shape[1],))
        grid[layout.active] = per_gaussian[start:start + n]
        out.append(grid)
        start += n
    return out[0], out[1]
