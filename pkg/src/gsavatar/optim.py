"""Bias-corrected Adam over dictionaries of numpy tensors."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaViolation, ShapeMismatch
from .tensorfile import load_tensors, save_tensors


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **hyper) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **hyper)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update. Returns new parameter and state objects; inputs are left untouched.

    Only keys present in ``grads`` are updated, so a partial gradient dict
    freezes the remaining parameters exactly.
    """
    for k, g in grads.items():
        if k not in params or params[k].shape != np.shape(g):
            raise ShapeMismatch(f"gradient {k!r} does not match any parameter of that shape")
    st = state.copy()
    st.step += 1
    t = st.step
    bc1 = 1.0 - st.beta1 ** t
    bc2 = 1.0 - st.beta2 ** t
    out = dict(params)
    for k, g in grads.items():
        if k not in st.m:
            st.m[k] = np.zeros_like(params[k])
            st.v[k] = np.zeros_like(params[k])
        st.m[k] = st.beta1 * st.m[k] + (1.0 - st.beta1) * g
        st.v[k] = st.beta2 * st.v[k] + (1.0 - st.beta2) * g * g
        m_hat = st.m[k] / bc1
        v_hat = st.v[k] / bc2
        out[k] = params[k] - st.lr * m_hat / (np.sqrt(v_hat) + st.eps)
    return out, st


def save_adam(path: str | Path, state: AdamState) -> None:
    tensors = {f"m/{k}": a for k, a in state.m.items()}
    tensors.update({f"v/{k}": a for k, a in state.v.items()})
    meta = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "step": state.step}
    save_tensors(path, tensors, kind="adam_state", meta=meta)


def load_adam(path: str | Path) -> AdamState:
    tensors, meta = load_tensors(path, expect_kind="adam_state")
    try:
        st = AdamState(float(meta["lr"]), float(meta["beta1"]), float(meta["beta2"]),
                       float(meta["eps"]), int(meta["step"]))
    except KeyError as exc:
        raise SchemaViolation(f"adam header missing {exc}") from None
    for name, arr in tensors.items():
        which, _, key = name.partition("/")
        getattr(st, which)[key] = arr
    if set(st.m) != set(st.v):
        raise SchemaViolation("first and second moments cover different parameters")
    return st
