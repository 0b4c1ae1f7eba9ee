"""Base denoiser training and identity-inversion fine-tuning."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import EmptyDataset, EmptyVideo, TrainingDiverged
from ..optim import AdamState, adam_step
from .corpus import IdentityVideo
from .denoiser import (IDENTITY_TRAINABLE, DenoiserBundle, DiffusionBatch, assert_frozen, diffusion_loss,
                       reference_embedding)
from .schedule import NoiseSchedule, make_schedule


@dataclass
class PriorSet:
    """Videos of already-known identities with their identity-table rows."""
    videos: list[IdentityVideo]
    ids: list[int]

    def sample(self, rng: np.random.Generator, batch_size: int) -> DiffusionBatch:
        which = rng.integers(len(self.videos), size=batch_size)
        x0, pose, ident = [], [], []
        for w in which:
            v = self.videos[w]
            f = int(rng.integers(len(v)))
            x0.append(v.frames[f])
            pose.append(v.conds[f])
            ident.append(self.ids[w])
        return DiffusionBatch(np.stack(x0), np.stack(pose), np.array(ident))


def _sample_video(video: IdentityVideo, identity: int, rng, batch_size: int) -> DiffusionBatch:
    return video.batch(identity, rng.integers(len(video), size=batch_size))


@dataclass
class DiffusionTrainResult:
    bundle: DenoiserBundle
    losses: list[float] = field(default_factory=list)


def seed_identity_rows(bundle: DenoiserBundle, videos: Sequence[IdentityVideo]) -> DenoiserBundle:
    """Set row i of the identity table to the reference embedding of video i's first frame."""
    table = np.stack([reference_embedding(bundle, v.frames[0])[0] for v in videos])
    return bundle.replace_tensors({**bundle.tensors, "identity_table": table})


def train_denoiser(bundle: DenoiserBundle, videos: Sequence[IdentityVideo], sched: NoiseSchedule,
                   steps: int, rng: np.random.Generator, *, batch_size: int = 8,
                   lr: float = 2e-3) -> DiffusionTrainResult:
    """Fit every non-frozen tensor on the multi-identity corpus (video i uses identity row i)."""
    if not videos:
        raise EmptyDataset("no identity videos")
    prior = PriorSet(list(videos), list(range(len(videos))))
    adam = AdamState.for_params({k: bundle.tensors[k] for k in bundle.trainable()}, lr=lr)
    losses = []
    for step in range(steps):
        loss, grads = diffusion_loss(bundle, prior.sample(rng, batch_size), sched, rng)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"denoiser loss became non-finite at step {step}")
        tensors, adam = adam_step(bundle.tensors, grads, adam)
        bundle = bundle.replace_tensors(tensors)
        losses.append(loss)
    return DiffusionTrainResult(bundle, losses)


def add_identity(base: DenoiserBundle, reference_image: np.ndarray) -> tuple[DenoiserBundle, int]:
    """Append a table row initialized from the frozen reference encoder."""
    c_id = reference_embedding(base, reference_image)
    table = np.concatenate([base.tensors["identity_table"], c_id], axis=0)
    return base.replace_tensors({**base.tensors, "identity_table": table}), len(table) - 1


def finetune_identity(base: DenoiserBundle, target_video: IdentityVideo, prior_dataset: PriorSet,
                      steps: int, rng: np.random.Generator, *, sched: NoiseSchedule | None = None,
                      batch_size: int = 8, lr: float = 2e-3) -> tuple[DenoiserBundle, int, list[float]]:
    """Invert a new identity: tune only its embedding row and the identity injection layer.

    Even steps use batches from ``target_video``, odd steps from
    ``prior_dataset``. Returns the tuned bundle, the new row index and the
    per-step losses. Everything else is checked bit-identical to ``base``.
    """
    if len(target_video) == 0:
        raise EmptyVideo("target video has no frames")
    sched = sched or make_schedule()
    bundle, new_id = add_identity(base, target_video.frames[0])
    params = {"c_id": bundle.tensors["identity_table"][new_id].copy(),
              **{k: bundle.tensors[k] for k in IDENTITY_TRAINABLE}}
    adam = AdamState.for_params(params, lr=lr)
    losses = []
    for step in range(steps):
        if step % 2 == 0:
            batch = _sample_video(target_video, new_id, rng, batch_size)
        else:
            batch = prior_dataset.sample(rng, batch_size)
        loss, g = diffusion_loss(bundle, batch, sched, rng)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"fine-tuning loss became non-finite at step {step}")
        grads = {"c_id": g["identity_table"][new_id], **{k: g[k] for k in IDENTITY_TRAINABLE}}
        params, adam = adam_step(params, grads, adam)
        table = bundle.tensors["identity_table"].copy()
        table[new_id] = params["c_id"]
        bundle = bundle.replace_tensors({**bundle.tensors, "identity_table": table,
                                         **{k: params[k] for k in IDENTITY_TRAINABLE}})
        losses.append(loss)
    assert_frozen(base, bundle, IDENTITY_TRAINABLE)
    return bundle, new_id, losses
