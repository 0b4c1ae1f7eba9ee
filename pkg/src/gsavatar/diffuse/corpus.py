"""Procedural multi-identity video corpus for the toy diffusion model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import EmptyVideo
from ..geometry import Camera
from ..skeleton import Pose
from .denoiser import DiffusionBatch


def pose_condition(pose: Pose, camera: Camera) -> np.ndarray:
    """Flattened joint quaternions followed by the camera's viewing direction in world space."""
    return np.concatenate([pose.flat(), camera.R[2]])


@dataclass
class IdentityVideo:
    frames: np.ndarray   # (F, R, R, 3)
    poses: list[Pose]
    cameras: list[Camera]
    conds: np.ndarray    # (F, pose_dim)

    def __len__(self) -> int:
        return len(self.frames)

    def batch(self, identity: int, idx: Sequence[int] | None = None) -> DiffusionBatch:
        if len(self) == 0:
            raise EmptyVideo("identity video has no frames")
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        return DiffusionBatch(self.frames[idx], self.conds[idx], np.full(len(idx), identity))


def render_identity(seed: int, n_frames: int, native: int = 32, azimuths: Sequence[float] = (0.0, 180.0),
                    n_joints: int = 6) -> IdentityVideo:
    """One subject (palette drawn from ``seed``) in motion, seen from each azimuth."""
    from ..synth import (build_anchor_layouts, capsule_person, ground_truth_attributes, orbit_camera,
                         pose_trajectory, random_palette, render_attributes)

    rng = np.random.default_rng(seed)
    template = capsule_person(n_joints)
    layouts = build_anchor_layouts(template.canonical_vertices, (32, 16))
    gt = ground_truth_attributes(layouts, random_palette(rng))
    poses = pose_trajectory(n_joints, n_frames, rng)
    frames, ps, cams, conds = [], [], [], []
    for az in azimuths:
        cam = orbit_camera(az, native)
        for pose in poses:
            frames.append(render_attributes(gt, layouts, template, pose, cam).color)
            ps.append(pose)
            cams.append(cam)
            conds.append(pose_condition(pose, cam))
    return IdentityVideo(np.stack(frames), ps, cams, np.stack(conds))


def identity_corpus(n_identities: int, n_frames: int, seed: int = 0, native: int = 32,
                    azimuths: Sequence[float] = (0.0, 180.0)) -> list[IdentityVideo]:
    seeds = np.random.default_rng(seed).integers(0, 2**31, size=n_identities)
    return [render_identity(int(s), n_frames, native, azimuths) for s in seeds]


def merge_batches(batches: Sequence[DiffusionBatch]) -> DiffusionBatch:
    return DiffusionBatch(np.concatenate([b.x0 for b in batches]), np.concatenate([b.pose for b in batches]),
                          np.concatenate([b.identity for b in batches]))


def corpus_batch(videos: Sequence[IdentityVideo], ids: Sequence[int] | None = None) -> DiffusionBatch:
    """All frames of ``videos``; identity rows default to the video positions."""
    ids = range(len(videos)) if ids is None else ids
    return merge_batches([v.batch(i) for i, v in zip(ids, videos)])
