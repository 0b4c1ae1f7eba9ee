"""Cameras, quaternions, rigid transforms and front/back anchor layouts.

Conventions: quaternions are ``(w, x, y, z)``; cameras follow the OpenCV
convention (x right, y down, z forward) with ``x_cam = R @ x_world + t``.
The canonical body faces +Z with +Y up.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import DegenerateAxis, EmptyMesh, NonUnitQuaternion, PointBehindCamera

NEAR_EPS = 1e-4
UNIT_TOL = 1e-9


# --------------------------------------------------------------------------- quaternions

def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of ``q`` (..., 4). Uses the polynomial form, no renormalization."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_to_matrix_backward(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``q`` of ``sum(grad_r * quat_to_matrix(q))``."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = grad_r
    gw = (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
          - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
          - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
          + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
          - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return 2.0 * np.stack([gw, gx, gy, gz], axis=-1)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return np.concatenate([[np.cos(h)], np.sin(h) * axis])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def check_unit_quat(q: np.ndarray, tol: float = UNIT_TOL) -> None:
    n = np.linalg.norm(np.asarray(q, dtype=np.float64), axis=-1)
    if not np.all(np.abs(n - 1.0) <= tol):
        raise NonUnitQuaternion(f"quaternion norm deviates from 1 (max |n-1| = {np.max(np.abs(n - 1)):.3g})")


def axis_angle_matrix(axis_dir: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix; ``axis_dir`` must be unit length."""
    a = np.asarray(axis_dir, dtype=np.float64)
    if a.shape != (3,) or abs(np.linalg.norm(a) - 1.0) > UNIT_TOL:
        raise DegenerateAxis(f"axis direction must be a unit 3-vector, got {a!r}")
    k = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


# --------------------------------------------------------------------------- rigid transforms

@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        check_unit_quat(q)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        q = quat_multiply(self.rotation, other.rotation)
        q = q / np.linalg.norm(q)
        t = self.rotation_matrix() @ other.translation + self.translation
        return RigidTransform(q, t)

    def inverse(self) -> "RigidTransform":
        qi = quat_conjugate(self.rotation)
        return RigidTransform(qi, -(quat_to_matrix(qi) @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation_matrix().T + self.translation


# --------------------------------------------------------------------------- camera

@dataclass(frozen=True)
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if np.max(np.abs(R @ R.T - np.eye(3))) > UNIT_TOL or abs(np.linalg.det(R) - 1.0) > UNIT_TOL:
            raise ValueError("camera rotation must be orthonormal with det +1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= K[0, 2] < self.width and 0 <= K[1, 2] < self.height):
            raise ValueError("principal point must lie inside the image")

    fx = property(lambda self: float(self.K[0, 0]))
    fy = property(lambda self: float(self.K[1, 1]))
    cx = property(lambda self: float(self.K[0, 2]))
    cy = property(lambda self: float(self.K[1, 2]))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def from_intrinsics(cls, fx: float, fy: float, cx: float, cy: float, width: int, height: int,
                        R=None, t=None) -> "Camera":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, np.eye(3) if R is None else R, np.zeros(3) if t is None else t, width, height)

    @classmethod
    def look_at(cls, eye, target, up, *, fx: float, fy: float, cx: float, cy: float,
                width: int, height: int) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls.from_intrinsics(fx, fy, cx, cy, width, height, R=R, t=-R @ eye)

    def world_to_camera(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.R.T + self.t

    def to_json(self) -> dict[str, Any]:
        return {
            "K": [float(v) for v in self.K.ravel()],
            "R": [float(v) for v in self.R.ravel()],
            "t": [float(v) for v in self.t],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Camera":
        return cls(np.array(obj["K"], dtype=np.float64), np.array(obj["R"], dtype=np.float64),
                   np.array(obj["t"], dtype=np.float64), int(obj["width"]), int(obj["height"]))

    def scaled(self, factor: float) -> "Camera":
        """Same pose, image resampled by ``factor`` (pixel-center convention kept at integers)."""
        K = self.K.copy()
        K[0, 0] *= factor
        K[1, 1] *= factor
        # pixel centers sit at integers, so pixel edges are at -0.5 .. W-0.5
        K[0, 2] = (K[0, 2] + 0.5) * factor - 0.5
        K[1, 2] = (K[1, 2] + 0.5) * factor - 0.5
        return Camera(K, self.R, self.t, int(round(self.width * factor)), int(round(self.height * factor)))


def project_point(p, cam: Camera, near: float = NEAR_EPS) -> np.ndarray:
    x, y, z = cam.world_to_camera(p)
    if z <= near:
        raise PointBehindCamera(f"camera-space depth {z:.3g} <= near plane {near:g}")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def rotate_about_axis(p, axis_point, axis_dir, angle: float) -> np.ndarray:
    """Rotate ``p`` (3,) or (N, 3) by ``angle`` about the line through ``axis_point``."""
    rot = axis_angle_matrix(axis_dir, angle)
    o = np.asarray(axis_point, dtype=np.float64)
    return (np.asarray(p, dtype=np.float64) - o) @ rot.T + o


def derive_backview_camera(cam: Camera, root_position, global_orientation_axis) -> Camera:
    """Half-turn the camera about the axis through ``root_position``.

    The camera center is rotated by pi about the axis and its orientation is
    pre-multiplied by the same world rotation, so the subject is seen from behind
    with unchanged intrinsics.
    """
    rot = axis_angle_matrix(np.asarray(global_orientation_axis, dtype=np.float64), np.pi)
    root = np.asarray(root_position, dtype=np.float64)
    center = root + rot @ (cam.center - root)
    R_new = cam.R @ rot.T
    return Camera(cam.K.copy(), R_new, -R_new @ center, cam.width, cam.height)


# --------------------------------------------------------------------------- anchor layouts

@dataclass(frozen=True)
class AnchorLayout:
    resolution: tuple[int, int]
    plane: str
    active: np.ndarray            # (H, W) bool
    anchor_position: np.ndarray   # (H, W, 3), zero where inactive
    ortho_bounds: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    source_vertex: np.ndarray     # (H, W) int, -1 where inactive

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def active_anchors(self) -> np.ndarray:
        return self.anchor_position[self.active]

    def active_sources(self) -> np.ndarray:
        return self.source_vertex[self.active]


def ortho_bounds(vertices: np.ndarray, inflate: float = 0.05) -> tuple[float, float, float, float]:
    lo = vertices[:, :2].min(axis=0)
    hi = vertices[:, :2].max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    # a degenerate (flat or single-point) extent falls back to the largest nonzero one, or 1
    fallback = half.max() if half.max() > 0 else 0.5
    half = np.where(half > 0, half, fallback) * (1.0 + inflate)
    return (float(center[0] - half[0]), float(center[0] + half[0]),
            float(center[1] - half[1]), float(center[1] + half[1]))


def texel_of(points: np.ndarray, bounds, resolution: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Nearest texel (row, col) for canonical points under the orthographic bounds."""
    h, w = resolution
    xmin, xmax, ymin, ymax = bounds
    col = np.floor((points[:, 0] - xmin) / (xmax - xmin) * w).astype(np.int64)
    row = np.floor((ymax - points[:, 1]) / (ymax - ymin) * h).astype(np.int64)
    return np.clip(row, 0, h - 1), np.clip(col, 0, w - 1)


def build_anchor_layouts(mesh_vertices, resolution: tuple[int, int],
                         inflate: float = 0.05) -> tuple[AnchorLayout, AnchorLayout]:
    """Orthographically splat canonical vertices onto a front and a back texel grid.

    Vertices with depth (z) at or in front of the bounding-box midplane go to the
    front layout, the others to the back layout. Per texel the vertex nearest the
    respective plane wins (largest z in front, smallest z at the back); ties go to
    the lower vertex index.
    """
    v = np.asarray(mesh_vertices, dtype=np.float64).reshape(-1, 3)
    if len(v) == 0:
        raise EmptyMesh("mesh has no vertices")
    h, w = (int(resolution[0]), int(resolution[1]))
    if h < 2 or w < 2:
        raise ValueError("layout resolution must be at least 2x2")
    bounds = ortho_bounds(v, inflate)
    mid = 0.5 * (v[:, 2].min() + v[:, 2].max())
    rows, cols = texel_of(v, bounds, (h, w))
    flat = rows * w + cols
    front_side = v[:, 2] >= mid
    ids = np.arange(len(v))

    layouts = []
    for plane, side, depth_key in (("front", front_side, -v[:, 2]), ("back", ~front_side, v[:, 2])):
        sel = ids[side]
        active = np.zeros((h, w), dtype=bool)
        anchors = np.zeros((h, w, 3))
        source = np.full((h, w), -1, dtype=np.int64)
        if len(sel):
            order = sel[np.lexsort((sel, depth_key[sel]))]
            _, first = np.unique(flat[order], return_index=True)
            win = order[first]
            r, c = rows[win], cols[win]
            active[r, c] = True
            anchors[r, c] = v[win]
            source[r, c] = win
        layouts.append(AnchorLayout((h, w), plane, active, anchors, bounds, source))
    return layouts[0], layouts[1]
