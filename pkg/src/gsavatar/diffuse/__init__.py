"""Toy conditional diffusion: schedule, denoiser, identity inversion, tiled sampling."""
from .corpus import IdentityVideo, corpus_batch, identity_corpus, pose_condition, render_identity
from .denoiser import (Conditioning, DenoiserBundle, DenoiserConfig, DiffusionBatch, diffusion_loss,
                       expected_loss, init_bundle, load_bundle, predict_noise, reference_embedding, save_bundle)
from .finetune import PriorSet, add_identity, finetune_identity, seed_identity_rows, train_denoiser
from .schedule import NoiseSchedule, make_schedule, q_sample
from .tiles import TileCond, TileLayout, coverage, make_tile_layout, sample_video, tiled_denoise_step

__all__ = [
    "Conditioning", "DenoiserBundle", "DenoiserConfig", "DiffusionBatch", "IdentityVideo", "NoiseSchedule",
    "PriorSet", "TileCond", "TileLayout", "add_identity", "corpus_batch", "coverage", "diffusion_loss",
    "expected_loss", "finetune_identity", "identity_corpus", "init_bundle", "load_bundle", "make_schedule",
    "make_tile_layout", "pose_condition", "predict_noise", "q_sample", "reference_embedding",
    "render_identity", "sample_video", "save_bundle", "seed_identity_rows", "tiled_denoise_step",
    "train_denoiser",
]
