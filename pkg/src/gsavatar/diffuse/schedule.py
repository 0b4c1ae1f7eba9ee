"""Linear-beta DDPM schedule and forward noising."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidT, ShapeMismatch

BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray       # (T,), betas[t-1] is beta_t
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def abar(self, t) -> np.ndarray | float:
        """Cumulative product at 1-based step ``t``; ``t = 0`` gives 1."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bars])
        out = padded[t]
        return float(out) if out.ndim == 0 else out


def make_schedule(T: int = 100, beta_start: float = BETA_START, beta_end: float = BETA_END) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise InvalidT(f"a schedule needs T >= 2 steps, got {T}")
    betas = np.linspace(beta_start, beta_end, int(T))
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` may be a per-sample array."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {x0.shape} and noise {eps.shape} differ")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise InvalidT(f"t must lie in [1, {sched.T}]")
    ab = np.asarray(sched.abar(t), dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
