"""Joint hierarchy, forward kinematics, linear blend skinning and posed position maps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import JointCountMismatch, LayoutTemplateMismatch, WeightRowNotNormalized
from .geometry import AnchorLayout, RigidTransform, check_unit_quat

WEIGHT_TOL = 1e-6


@dataclass(frozen=True)
class SkeletonTemplate:
    parent: np.ndarray             # (J,), parent[0] == -1, parent[i] < i
    rest_offset: np.ndarray        # (J, 3) bone vectors in the parent frame
    canonical_vertices: np.ndarray  # (V, 3)
    skinning_weights: np.ndarray   # (V, J)

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64).reshape(-1)
        offs = np.asarray(self.rest_offset, dtype=np.float64).reshape(-1, 3)
        verts = np.asarray(self.canonical_vertices, dtype=np.float64).reshape(-1, 3)
        w = np.asarray(self.skinning_weights, dtype=np.float64)
        j = len(parent)
        if j == 0 or parent[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        if np.any(parent[1:] < 0) or np.any(parent[1:] >= np.arange(1, j)):
            raise ValueError("parents must precede children (parent[i] < i), which rules out cycles")
        if offs.shape != (j, 3):
            raise JointCountMismatch(f"rest_offset has {len(offs)} rows for {j} joints")
        if w.shape != (len(verts), j):
            raise ValueError(f"skinning weights must be (V, J) = {(len(verts), j)}, got {w.shape}")
        if np.any(w < 0) or np.max(np.abs(w.sum(axis=1) - 1.0), initial=0.0) > WEIGHT_TOL:
            raise WeightRowNotNormalized("skinning weights must be nonnegative rows summing to 1")
        for name, val in (("parent", parent), ("rest_offset", offs),
                          ("canonical_vertices", verts), ("skinning_weights", w)):
            object.__setattr__(self, name, val)

    @property
    def n_joints(self) -> int:
        return len(self.parent)

    @property
    def height(self) -> float:
        ys = self.canonical_vertices[:, 1]
        return float(ys.max() - ys.min())


@dataclass(frozen=True)
class Pose:
    joint_rotation: np.ndarray   # (J, 4) unit quaternions, wxyz
    root_translation: np.ndarray  # (3,)

    def __post_init__(self):
        q = np.asarray(self.joint_rotation, dtype=np.float64).reshape(-1, 4)
        check_unit_quat(q)
        object.__setattr__(self, "joint_rotation", q)
        object.__setattr__(self, "root_translation",
                           np.asarray(self.root_translation, dtype=np.float64).reshape(3))

    @property
    def n_joints(self) -> int:
        return len(self.joint_rotation)

    @classmethod
    def identity(cls, n_joints: int) -> "Pose":
        q = np.zeros((n_joints, 4))
        q[:, 0] = 1.0
        return cls(q, np.zeros(3))

    def to_json(self) -> dict[str, Any]:
        return {"rotations": [[float(c) for c in q] for q in self.joint_rotation],
                "root_translation": [float(c) for c in self.root_translation]}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Pose":
        return cls(np.array(obj["rotations"], dtype=np.float64),
                   np.array(obj["root_translation"], dtype=np.float64))

    def flat(self) -> np.ndarray:
        return self.joint_rotation.ravel().copy()


def forward_kinematics(template: SkeletonTemplate, pose: Pose) -> list[RigidTransform]:
    """Joint-to-world transforms; joint i = parent ∘ (translate rest_offset_i, rotate θ_i)."""
    if pose.n_joints != template.n_joints:
        raise JointCountMismatch(f"pose has {pose.n_joints} joints, template {template.n_joints}")
    world: list[RigidTransform] = []
    for i in range(template.n_joints):
        local = RigidTransform(pose.joint_rotation[i], template.rest_offset[i])
        if i == 0:
            world.append(RigidTransform(translation=pose.root_translation).compose(local))
        else:
            world.append(world[template.parent[i]].compose(local))
    return world


def rest_joint_positions(template: SkeletonTemplate) -> np.ndarray:
    fk = forward_kinematics(template, Pose.identity(template.n_joints))
    return np.stack([t.translation for t in fk])


def skinning_transforms(template: SkeletonTemplate, pose: Pose) -> np.ndarray:
    """Rest-relative joint transforms as (J, 3, 4) matrices (identity at the rest pose)."""
    posed = forward_kinematics(template, pose)
    rest = forward_kinematics(template, Pose.identity(template.n_joints))
    out = np.empty((template.n_joints, 3, 4))
    for j, (p, r) in enumerate(zip(posed, rest)):
        out[j] = p.compose(r.inverse()).matrix()[:3]
    return out


def _as_matrices(joint_transforms) -> np.ndarray:
    if isinstance(joint_transforms, np.ndarray):
        m = np.asarray(joint_transforms, dtype=np.float64)
        return m[:, :3, :4]
    return np.stack([t.matrix()[:3] for t in joint_transforms])


def blend_transforms(weights: np.ndarray, joint_transforms) -> np.ndarray:
    """Per-point blended 3x4 matrices ``sum_j w_j T_j`` (N, 3, 4)."""
    w = np.asarray(weights, dtype=np.float64)
    if np.max(np.abs(w.sum(axis=1) - 1.0), initial=0.0) > WEIGHT_TOL:
        raise WeightRowNotNormalized("each weight row must sum to 1")
    mats = _as_matrices(joint_transforms)
    if mats.shape[0] != w.shape[1]:
        raise JointCountMismatch(f"{w.shape[1]} weight columns for {mats.shape[0]} transforms")
    return np.einsum("nj,jab->nab", w, mats)


def lbs_deform(points, weights, joint_transforms) -> np.ndarray:
    """Linear blend skinning: blend the 3x4 matrices, then apply."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = blend_transforms(weights, joint_transforms)
    return np.einsum("nab,nb->na", m[:, :, :3], p) + m[:, :, 3]


@dataclass(frozen=True)
class PosedPositionMaps:
    front: np.ndarray       # (H, W, 3) world-space posed positions, 0 where inactive
    back: np.ndarray
    front_mask: np.ndarray  # (H, W) bool
    back_mask: np.ndarray
    pose: Pose
    front_anchor: np.ndarray  # (H, W, 3) canonical anchors, 0 where inactive
    back_anchor: np.ndarray

    @property
    def resolution(self) -> tuple[int, int]:
        return self.front.shape[:2]

    def root_relative(self) -> tuple[np.ndarray, np.ndarray]:
        """Maps with the root translation removed; inactive texels stay 0."""
        d = self.pose.root_translation
        return (np.where(self.front_mask[..., None], self.front - d, 0.0),
                np.where(self.back_mask[..., None], self.back - d, 0.0))


def _check_layout(template: SkeletonTemplate, layout: AnchorLayout) -> np.ndarray:
    src = layout.active_sources()
    if np.any(src < 0) or np.any(src >= len(template.canonical_vertices)):
        raise LayoutTemplateMismatch("layout references vertices outside the template")
    if not np.array_equal(template.canonical_vertices[src], layout.active_anchors()):
        raise LayoutTemplateMismatch("layout anchors do not match the template's canonical vertices")
    return src


def build_position_maps(template: SkeletonTemplate, pose: Pose,
                        layouts: Sequence[AnchorLayout]) -> PosedPositionMaps:
    front, back = layouts
    mats = skinning_transforms(template, pose)
    planes = []
    for layout in (front, back):
        src = _check_layout(template, layout)
        out = np.zeros(layout.resolution + (3,))
        out[layout.active] = lbs_deform(layout.active_anchors(), template.skinning_weights[src], mats)
        planes.append(out)
    return PosedPositionMaps(planes[0], planes[1], front.active.copy(), back.active.copy(), pose,
                             front.anchor_position, back.anchor_position)
