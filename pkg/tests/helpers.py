"""Finite-difference harness and small random scene builders shared by the tests."""
from __future__ import annotations

import numpy as np

from gsavatar.geometry import Camera, quat_normalize
from gsavatar.gsplat import GaussianCloud

FD_STEP = 1e-4
REL_FLOOR = 1e-6   # gradients below this magnitude are compared absolutely


def central_diff(f, x: np.ndarray, idx, h: float = FD_STEP) -> float:
    """(f(x + h e_idx) - f(x - h e_idx)) / 2h, restoring ``x`` afterwards."""
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2.0 * h)


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def fd_verdict(errs, frac_tol: float = 1e-3, worst_tol: float = 1e-2) -> tuple[bool, float, float]:
    """(passes, fraction under frac_tol, worst error) for the 95% / worst-case rule."""
    e = np.asarray(errs, dtype=np.float64)
    frac = float(np.mean(e < frac_tol))
    worst = float(e.max()) if e.size else 0.0
    return frac >= 0.95 and worst < worst_tol, frac, worst


def pinhole(size: int = 32, f: float = 40.0) -> Camera:
    c = (size - 1) / 2.0
    return Camera.from_intrinsics(f, f, c, c, size, size)


def random_cloud(rng: np.random.Generator, n: int, *, depth=(3.0, 6.0), spread: float = 1.0,
                 scale=(0.05, 0.3), opacity=(0.2, 0.95)) -> GaussianCloud:
    """Gaussians in front of a camera at the origin looking down +Z, distinct depths."""
    z = rng.uniform(*depth, size=n)
    xy = rng.uniform(-spread, spread, size=(n, 2)) * z[:, None] / 4.0
    mean = np.column_stack([xy, z])
    quat = quat_normalize(rng.standard_normal((n, 4)))
    sc = rng.uniform(*scale, size=(n, 3))
    return GaussianCloud(mean, quat, sc, rng.uniform(*opacity, size=n), rng.uniform(0, 1, size=(n, 3)))


# acceptance verdicts, printed once more in the terminal summary (see conftest)
VERDICTS: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str) -> str:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    VERDICTS.append(line)
    print(line)
    return line
