"""Shared plain-text run configuration (``key = value`` lines)."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import InvalidConfig


@dataclass(frozen=True)
class Config:
    # avatar training
    iterations: int = 1000
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_lpips: float = 0.0
    lambda_offset: float = 0.01
    lambda_scale: float = 1.0
    seed: int = 0
    w_gen: float = 1.0
    backend: str = "conv_unet"
    map_height: int = 32
    map_width: int = 16
    workers: int = 1
    # synthetic scenes
    image_size: int = 64
    n_joints: int = 6
    n_frames: int = 24
    azimuths: str = "0"          # comma-separated degrees; the first is the input view
    pseudo_frames: int = 8
    pseudo_downsample: int = 1
    # toy diffusion
    diffusion_T: int = 100
    native: int = 32
    factor: int = 2
    n_identities: int = 8
    identity_frames: int = 12
    denoiser_steps: int = 3000
    finetune_steps: int = 2000
    diffusion_batch: int = 8
    diffusion_lr: float = 2e-3
    finetune_lr: float = 5e-3

    @property
    def weights(self):
        from .train import LossWeights

        return LossWeights(self.lambda_lpips, self.lambda_offset, self.lambda_scale)

    def azimuth_list(self) -> list[float]:
        try:
            return [float(a) for a in self.azimuths.split(",") if a.strip()]
        except ValueError:
            raise InvalidConfig(f"azimuths must be comma-separated numbers, got {self.azimuths!r}") from None

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    base = base or Config()
    types = {f.name: type(getattr(base, f.name)) for f in fields(base)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep or not key:
            raise InvalidConfig(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in types:
            raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        try:
            updates[key] = types[key](value)
        except ValueError:
            raise InvalidConfig(f"line {lineno}: cannot read {value!r} as {types[key].__name__}") from None
    cfg = replace(base, **updates)
    validate(cfg)
    return cfg


def validate(cfg: Config) -> None:
    if cfg.iterations < 0 or cfg.lr < 0 or cfg.w_gen < 0:
        raise InvalidConfig("iterations, lr and w_gen must be nonnegative")
    if cfg.workers < 1:
        raise InvalidConfig("workers must be >= 1")
    cfg.weights  # nonnegative lambdas, inactive LPIPS slot
    cfg.azimuth_list()


def load_config(path: str | Path | None, base: Config | None = None) -> Config:
    if path is None:
        return base or Config()
    p = Path(path)
    if not p.exists():
        from .errors import MissingFile

        raise MissingFile(f"missing file: {p}")
    return parse_config(p.read_text(), base)
