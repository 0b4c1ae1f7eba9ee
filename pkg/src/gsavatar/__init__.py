"""Pose-driven Gaussian-splat avatars with back-view pseudo-supervision, plus a toy diffusion side."""
from .config import Config, load_config, parse_config
from .decoder import DecoderConfig, DecoderParams, GaussianAttributeMap, decode, decoder_backward, init_decoder
from .geometry import (AnchorLayout, Camera, RigidTransform, build_anchor_layouts, derive_backview_camera,
                       project_point, rotate_about_axis)
from .gsplat import GaussianCloud, SplatBatch, build_cloud, oracle_render, project_gaussians, rasterize, rasterize_backward
from .metrics import MetricsReport, evaluate, psnr, ssim
from .optim import AdamState, adam_step
from .skeleton import Pose, PosedPositionMaps, SkeletonTemplate, build_position_maps, forward_kinematics, lbs_deform
from .synth import FrameSample, synth_scene
from .train import LossWeights, l1_loss, offset_reg, scale_reg, total_loss, train

__version__ = "0.1.0"
