"""Flow path between upsampled LRMS (t = 1) and HRMS (t = 0), velocity targets, Euler sampling.

Works on numpy arrays and torch tensors alike. ``t`` may be a scalar or one
value per sample (leading axis).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Tuple

import numpy as np
import torch


@dataclass
class FlowState:
    y0: Any
    y1: Any
    t: Any
    y_t: Any


@dataclass
class VelocityTarget:
    v: Any


def _check_shapes(*arrays):
    shape = tuple(arrays[0].shape)
    for a in arrays[1:]:
        if tuple(a.shape) != shape:
            raise ValueError(f"shape mismatch: {shape} vs {tuple(a.shape)}")


def _broadcast_t(t, like):
    if isinstance(like, torch.Tensor):
        t = torch.as_tensor(t, dtype=like.dtype)
        if t.dim() == 1 and like.dim() > 1:
            t = t.reshape(-1, *([1] * (like.dim() - 1)))
        return t
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and np.ndim(like) > 1:
        t = t.reshape(-1, *([1] * (np.ndim(like) - 1)))
    return t


def _check_t(t):
    tv = t.detach() if isinstance(t, torch.Tensor) else np.asarray(t)
    if (tv < 0).any() or (tv > 1).any():
        raise ValueError("t must lie in [0, 1]")


def interpolate(y0, y1, t) -> FlowState:
    """``y_t = t * y0 + (1 - t) * y1``: t = 1 is the LRMS end, t = 0 the HRMS end."""
    _check_shapes(y0, y1)
    _check_t(t)
    tb = _broadcast_t(t, y0)
    return FlowState(y0, y1, t, tb * y0 + (1 - tb) * y1)


def velocity_target(y0, y1) -> VelocityTarget:
    _check_shapes(y0, y1)
    return VelocityTarget(y1 - y0)


def reconstruct_endpoint(state: FlowState, v_hat):
    """One-step estimate of the HRMS end: ``y_t + t * v_hat``."""
    _check_shapes(state.y_t, v_hat)
    return state.y_t + _broadcast_t(state.t, state.y_t) * v_hat


VelocityFn = Callable[[Any, Any, Any, Any], Any]


def euler_sample(model: VelocityFn, y0, conditions: Tuple[Any, Any], steps: int):
    """Integrate ``dy = model(y, t, m, p) dt`` from t = 1 down to t = 0 in ``steps`` Euler steps."""
    if int(steps) != steps or steps < 1:
        raise ValueError("steps must be a positive integer")
    m, p = conditions
    n = y0.shape[0] if np.ndim(y0) else 1
    dt = 1.0 / steps
    y = y0
    for i in range(steps):
        t = 1.0 - i * dt
        if isinstance(y0, torch.Tensor):
            t_vec = torch.full((n,), t, dtype=y0.dtype)
        else:
            t_vec = np.full((n,), t)
        y = y + dt * model(y, t_vec, m, p)
    return y


def sample_times(n: int, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Uniform t in [0, 1), one per sample."""
    return torch.rand(n, generator=generator, dtype=dtype)
