"""Procedural capsule-person template, ground-truth avatars, poses and cameras."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decoder import GaussianAttributeMap
from .errors import InvalidConfig
from .geometry import AnchorLayout, Camera, build_anchor_layouts, quat_from_axis_angle, quat_multiply, quat_to_matrix
from .gsplat import WHITE, build_cloud, oracle_render, project_gaussians
from .skeleton import Pose, SkeletonTemplate, forward_kinematics

LOOK_TARGET = np.array([0.0, 0.02, 0.0])
CAMERA_DISTANCE = 3.0
SUBJECT_FILL = 0.85
BODY_HEIGHT = 1.21


@dataclass(frozen=True)
class Capsule:
    a: tuple[float, float, float]
    b: tuple[float, float, float]
    radius: float
    part: str


def _joint_layout(n_joints: int):
    """Rest joint positions and parents: root, spine chain, head, left arm, right arm, legs."""
    if n_joints < 6:
        raise InvalidConfig("the capsule person needs at least 6 joints")
    n_spine = n_joints - 5
    pos = [(0.0, 0.0, 0.0)]
    parent = [-1]
    for k in range(n_spine):
        pos.append((0.0, 0.25 * (k + 1) / n_spine, 0.0))
        parent.append(k)
    top = n_spine
    pos += [(0.0, 0.42, 0.0), (0.15, 0.36, 0.0), (-0.15, 0.36, 0.0), (0.0, -0.05, 0.0)]
    parent += [top, top, top, 0]
    pos = np.array(pos)
    offsets = np.array([pos[0]] + [pos[i] - pos[parent[i]] for i in range(1, n_joints)])
    return pos, np.array(parent), offsets


def _bones(joint_pos: np.ndarray, n_joints: int) -> np.ndarray:
    """Segment per joint used for skinning-weight distances, shape (J, 2, 3)."""
    n_spine = n_joints - 5
    segs = [((0.0, -0.05, 0.0), (0.0, 0.08, 0.0))]
    chain = [joint_pos[k + 1] for k in range(n_spine)] + [joint_pos[n_spine + 1]]
    for k in range(n_spine):
        segs.append((tuple(chain[k]), tuple(chain[k + 1])))
    segs += [((0.0, 0.42, 0.0), (0.0, 0.62, 0.0)),
             ((0.15, 0.36, 0.0), (0.20, 0.02, 0.0)),
             ((-0.15, 0.36, 0.0), (-0.20, 0.02, 0.0)),
             ((0.0, -0.05, 0.0), (0.0, -0.55, 0.0))]
    return np.array(segs, dtype=np.float64)


CAPSULES = (
    Capsule((0.0, -0.04, 0.0), (0.0, 0.30, 0.0), 0.11, "torso"),
    Capsule((0.0, 0.48, 0.0), (0.0, 0.55, 0.0), 0.065, "head"),
    Capsule((0.165, 0.33, 0.0), (0.20, 0.03, 0.0), 0.035, "arm"),
    Capsule((-0.165, 0.33, 0.0), (-0.20, 0.03, 0.0), 0.035, "arm"),
    Capsule((0.0, -0.10, 0.0), (0.0, -0.50, 0.0), 0.09, "legs"),
)


def sample_capsule(c: Capsule, spacing: float) -> np.ndarray:
    a, b = np.array(c.a), np.array(c.b)
    axis = b - a
    length = np.linalg.norm(axis)
    u = axis / length
    tmp = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(u, tmp)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    n_ang = max(8, int(np.ceil(2 * np.pi * c.radius / spacing)))
    ang = np.arange(n_ang) * 2 * np.pi / n_ang
    ring = np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2
    n_len = max(2, int(np.ceil(length / spacing)) + 1)
    pts = [a + s * axis + c.radius * ring for s in np.linspace(0.0, 1.0, n_len)]
    n_lat = max(2, int(np.ceil(0.5 * np.pi * c.radius / spacing)))
    for end, sign in ((a, -1.0), (b, 1.0)):
        for lat in np.linspace(0.0, 0.5 * np.pi, n_lat + 1)[1:]:
            r = c.radius * np.cos(lat)
            k = max(1, int(np.ceil(2 * np.pi * r / spacing)))
            ang = np.arange(k) * 2 * np.pi / k
            ring_k = np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2
            pts.append(end + sign * c.radius * np.sin(lat) * u + r * ring_k)
    return np.concatenate(pts, axis=0)


def _segment_distance(p: np.ndarray, seg: np.ndarray) -> np.ndarray:
    a, b = seg
    ab = b - a
    t = np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def inverse_distance_weights(points: np.ndarray, bones: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Weights over the two nearest bones, proportional to inverse distance."""
    d = np.stack([_segment_distance(points, seg) for seg in bones], axis=1)
    nearest = np.argsort(d, axis=1, kind="stable")[:, :2]
    rows = np.arange(len(points))[:, None]
    inv = 1.0 / (d[rows, nearest] + eps)
    w = np.zeros_like(d)
    w[rows, nearest] = inv / inv.sum(axis=1, keepdims=True)
    return w


def capsule_person(n_joints: int = 6, spacing: float = 0.01) -> SkeletonTemplate:
    joint_pos, parent, offsets = _joint_layout(n_joints)
    verts = np.concatenate([sample_capsule(c, spacing) for c in CAPSULES], axis=0)
    weights = inverse_distance_weights(verts, _bones(joint_pos, n_joints))
    return SkeletonTemplate(parent, offsets, verts, weights)


def part_of(points: np.ndarray) -> np.ndarray:
    """Nearest capsule name per canonical point."""
    names = np.array([c.part for c in CAPSULES])
    d = np.stack([_segment_distance(points, np.array([c.a, c.b])) - c.radius for c in CAPSULES], axis=1)
    return names[np.argmin(d, axis=1)]


# --------------------------------------------------------------------------- ground truth

@dataclass(frozen=True)
class Palette:
    front: tuple[np.ndarray, np.ndarray]
    back: tuple[np.ndarray, np.ndarray]
    skin: np.ndarray
    pants: tuple[np.ndarray, np.ndarray]
    stripe_period: int = 4


def random_palette(rng: np.random.Generator) -> Palette:
    def col(lo=0.05, hi=0.95):
        return rng.uniform(lo, hi, 3)
    return Palette((col(), col()), (col(), col()), rng.uniform([0.55, 0.35, 0.25], [0.95, 0.75, 0.6]),
                   (col(0.05, 0.5), col(0.05, 0.5)), int(rng.integers(2, 5)))


def texel_scale(layout: AnchorLayout) -> float:
    h, w = layout.resolution
    xmin, xmax, ymin, ymax = layout.ortho_bounds
    return 0.55 * max((xmax - xmin) / w, (ymax - ymin) / h)


def ground_truth_attributes(layouts: Sequence[AnchorLayout], palette: Palette,
                            opacity: float = 0.95) -> tuple[GaussianAttributeMap, GaussianAttributeMap]:
    """Static attribute maps with high-frequency procedural color (stripes front, checks back)."""
    out = []
    for layout in layouts:
        h, w = layout.resolution
        rows, cols = np.mgrid[0:h, 0:w]
        parts = np.full((h, w), "", dtype=object)
        parts[layout.active] = part_of(layout.active_anchors())
        p = palette.stripe_period
        if layout.plane == "front":
            band = (rows // (p // 2 if p > 2 else 1)) % 2
            shirt = np.where(band[..., None] == 0, palette.front[0], palette.front[1])
        else:
            band = ((rows // 2) + (cols // 2)) % 2
            shirt = np.where(band[..., None] == 0, palette.back[0], palette.back[1])
        pants = np.where(((cols + rows // 3) % 3 == 0)[..., None], palette.pants[1], palette.pants[0])
        color = np.full((h, w, 3), 0.5)
        for name, src in (("torso", shirt), ("legs", pants)):
            m = parts == name
            color[m] = src[m]
        for name in ("head", "arm"):
            color[parts == name] = palette.skin
        color[~layout.active] = 0.0
        attr = GaussianAttributeMap.constant(layout.active, scale=texel_scale(layout), opacity=opacity)
        attr.color = color
        for arr in (attr.offset, attr.quat, attr.scale):
            arr[~layout.active] = 0.0
        attr.opacity[~layout.active] = 0.0
        out.append(attr)
    return out[0], out[1]


# --------------------------------------------------------------------------- motion and cameras

def pose_trajectory(n_joints: int, n_frames: int, rng: np.random.Generator,
                    yaw_amplitude: float = 0.25) -> list[Pose]:
    """Smooth sinusoidal joint swings, one cycle over the sequence."""
    amp = rng.uniform(0.8, 1.2, 8)
    phase = rng.uniform(0, 2 * np.pi, 8)
    n_spine = n_joints - 5
    head, larm, rarm, legs = n_spine + 1, n_spine + 2, n_spine + 3, n_spine + 4
    poses = []
    for f in range(n_frames):
        ph = 2 * np.pi * f / max(n_frames, 1)
        q = np.zeros((n_joints, 4))
        q[:, 0] = 1.0
        q[0] = quat_from_axis_angle([0, 1, 0], yaw_amplitude * amp[0] * np.sin(ph + phase[0]))
        for k in range(1, n_spine + 1):
            q[k] = quat_from_axis_angle([1, 0, 0], 0.12 * amp[1] * np.sin(2 * ph + phase[1]) / n_spine)
        q[head] = quat_from_axis_angle([0, 1, 0], 0.35 * amp[2] * np.sin(ph + phase[2]))
        for j, side in ((larm, 1.0), (rarm, -1.0)):
            swing = quat_from_axis_angle([1, 0, 0], 0.6 * amp[3] * np.sin(ph + phase[3] + (0 if side > 0 else np.pi)))
            abduct = quat_from_axis_angle([0, 0, 1], side * (0.15 + 0.2 * amp[4] * (1 + np.sin(2 * ph + phase[4]))))
            q[j] = quat_multiply(abduct, swing)
        q[legs] = quat_from_axis_angle([1, 0, 0], 0.2 * amp[5] * np.sin(ph + phase[5]))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        trans = np.array([0.03 * amp[6] * np.sin(ph + phase[6]), 0.01 * amp[7] * np.sin(2 * ph + phase[7]), 0.0])
        poses.append(Pose(q, trans))
    return poses


def orbit_camera(azimuth_deg: float, resolution: int, distance: float = CAMERA_DISTANCE,
                 target=LOOK_TARGET) -> Camera:
    """Camera on a horizontal circle; azimuth 0 faces the subject's front (+Z)."""
    a = np.deg2rad(azimuth_deg)
    target = np.asarray(target, dtype=np.float64)
    eye = target + distance * np.array([np.sin(a), 0.0, np.cos(a)])
    f = SUBJECT_FILL * resolution * distance / BODY_HEIGHT
    c = (resolution - 1) / 2.0
    return Camera.look_at(eye, target, [0.0, 1.0, 0.0], fx=f, fy=f, cx=c, cy=c,
                          width=resolution, height=resolution)


def root_frame(template: SkeletonTemplate, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """World root position and the body's up axis under ``pose`` (global orientation)."""
    root = forward_kinematics(template, pose)[0]
    return root.translation.copy(), quat_to_matrix(pose.joint_rotation[0]) @ np.array([0.0, 1.0, 0.0])


# --------------------------------------------------------------------------- scenes

@dataclass
class FrameSample:
    image: np.ndarray   # (H, W, 3) in [0, 1]
    mask: np.ndarray    # (H, W) bool
    pose: Pose
    camera: Camera
    source: str = "captured"
    view: str = "input"
    pose_index: int = -1
    camera_index: int = -1

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError("image and mask resolution differ")
        if (self.camera.height, self.camera.width) != self.mask.shape:
            raise ValueError("camera size does not match the image")
        if self.source not in ("captured", "generated"):
            raise ValueError(f"unknown frame source {self.source!r}")


def render_attributes(attrs, layouts, template, pose, camera, *, oracle: bool = False,
                      background=WHITE, workers: int = 1):
    from .gsplat import rasterize

    cloud = build_cloud(attrs, layouts, template, pose)
    splats = project_gaussians(cloud, camera)
    if oracle:
        return oracle_render(splats, camera, background)
    return rasterize(splats, camera, background, workers=workers)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits, as a PNG write/read would."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class SynthScene:
    template: SkeletonTemplate
    layouts: tuple[AnchorLayout, AnchorLayout]
    gt: tuple[GaussianAttributeMap, GaussianAttributeMap]
    poses: list[Pose]
    cameras: list[Camera]
    azimuths: list[float]
    frames: list[FrameSample]
    seed: int
    layout_resolution: tuple[int, int]
    meta: dict = field(default_factory=dict)


def synth_scene(seed: int, n_joints: int = 6, resolution: int = 64, n_frames: int = 24,
                camera_orbit: Sequence[float] = (0.0,), layout_resolution: tuple[int, int] = (32, 16),
                input_azimuth: float | None = None, palette: Palette | None = None,
                yaw_amplitude: float = 0.25, quantize_frames: bool = True) -> SynthScene:
    """Render ground-truth frames of a procedural avatar for every (pose, azimuth) pair.

    Frames at ``input_azimuth`` (default: the first orbit entry) are labelled
    view ``input``, all others ``novel``. All frames are tagged ``captured``.
    """
    if n_frames < 1 or resolution < 11 or not len(camera_orbit):
        raise InvalidConfig("synth_scene needs n_frames >= 1, resolution >= 11 and at least one azimuth")
    rng = np.random.default_rng(seed)
    template = capsule_person(n_joints)
    layouts = build_anchor_layouts(template.canonical_vertices, layout_resolution)
    pal = palette if palette is not None else random_palette(rng)
    gt = ground_truth_attributes(layouts, pal)
    poses = pose_trajectory(n_joints, n_frames, rng, yaw_amplitude)
    azimuths = [float(a) for a in camera_orbit]
    cameras = [orbit_camera(a, resolution) for a in azimuths]
    in_az = azimuths[0] if input_azimuth is None else float(input_azimuth)
    frames = []
    for j, (az, cam) in enumerate(zip(azimuths, cameras)):
        for i, pose in enumerate(poses):
            out = render_attributes(gt, layouts, template, pose, cam, oracle=True)
            img = quantize(out.color) if quantize_frames else out.color
            frames.append(FrameSample(img, out.alpha > 0.5, pose, cam, "captured",
                                      "input" if az == in_az else "novel", i, j))
    root, axis = root_frame(template, poses[0])
    meta = {"root_position": root.tolist(), "global_orientation_axis": axis.tolist(),
            "axis_convention": "root joint rotation applied to canonical +Y"}
    return SynthScene(template, layouts, gt, poses, cameras, azimuths, frames, seed,
                      tuple(layout_resolution), meta)
