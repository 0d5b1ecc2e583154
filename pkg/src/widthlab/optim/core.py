"""SGD+momentum, Adam, Adam+parameter scaling and Adam-atan2 on lists of numpy blocks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..params import LayerRole
from ..scalealg import rms_norm
from . import _kernels
from .config import EpsilonMode, LearningRateSchedule, OptimizerConfig, OptimizerFamily, epsilon_for

# Parameter scaling never uses less than this fraction of a block's initial RMS.
PS_FLOOR = 1e-3


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block: str):
        self.block = block
        super().__init__(f"non-finite gradient in block {block!r}")


@dataclass
class OptimizerState:
    m: list
    v: Optional[list]
    t: int = 0
    init_rms: list = field(default_factory=list)


def init_state(params: Sequence[np.ndarray], cfg: OptimizerConfig, init_scale=None) -> OptimizerState:
    """Zero moments. ``init_scale`` is the prescribed per-block init std used for the
    parameter-scaling floor; without it the blocks' current RMS is used, which is 0
    for zero-initialised blocks."""
    m = [np.zeros_like(p, dtype=np.float64) for p in params]
    v = None if cfg.kind is OptimizerFamily.SGD else [np.zeros_like(p, dtype=np.float64) for p in params]
    scale = [rms_norm(p) for p in params] if init_scale is None else [float(s) for s in init_scale]
    if len(scale) != len(m):
        raise ValueError("init_scale needs one entry per parameter block")
    return OptimizerState(m=m, v=v, t=0, init_rms=scale)


def _finish(d: np.ndarray, cfg: OptimizerConfig, param=None, init_rms=None, sumsq=None) -> np.ndarray:
    """Block-RMS clipping, then parameter scaling. Modifies ``d`` in place."""
    if cfg.update_clip_rms is not None:
        r = np.sqrt(sumsq / d.size) if sumsq is not None else rms_norm(d)
        if r > cfg.update_clip_rms:
            d *= cfg.update_clip_rms / r
    if cfg.kind is OptimizerFamily.ADAM_PS:
        if param is None:
            raise ValueError("parameter scaling needs the current parameter block")
        scale = rms_norm(param)
        if init_rms is not None:
            scale = max(scale, PS_FLOOR * init_rms)
        d *= scale
    return d


def adam_update(m_hat, v_hat, cfg: OptimizerConfig, eps: float, param=None, init_rms=None) -> np.ndarray:
    """Direction (before the learning rate) from bias-corrected moments."""
    m_hat = np.asarray(m_hat, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if m_hat.shape != v_hat.shape:
        raise ValueError(f"moment shapes differ: {m_hat.shape} vs {v_hat.shape}")
    if param is not None and np.shape(param) != m_hat.shape:
        raise ValueError(f"parameter shape {np.shape(param)} differs from moments {m_hat.shape}")
    if cfg.kind is OptimizerFamily.SGD:
        raise ValueError("adam_update called with an SGD config")
    if cfg.kind is OptimizerFamily.ADAM_ATAN2:
        d = cfg.atan2_a * np.arctan2(m_hat, cfg.atan2_b * np.sqrt(v_hat))
    else:
        d = m_hat / (np.sqrt(v_hat) + eps)
    return _finish(d, cfg, param, init_rms)


def step(
    params: list,
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    cfg: OptimizerConfig,
    schedule: LearningRateSchedule,
    width: int,
    roles: Sequence[LayerRole],
    t: Optional[int] = None,
    names: Optional[Sequence[str]] = None,
    kernel=None,
):
    """One optimizer step; blocks and moments are updated in place and returned.

    Returns ``(params, state, deltas)`` where ``deltas[i]`` is the weight change
    applied to block ``i``.
    """
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("optimizer steps are counted from 1")
    if names is None:
        names = [f"W{i + 1}" for i in range(len(params))]
    for g, name in zip(grads, names):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    kernel = kernel or _kernels.adam_direction

    deltas = []
    for i, (p, g, role) in enumerate(zip(params, grads, roles)):
        if p.shape != g.shape:
            raise ValueError(f"block {names[i]}: gradient shape {g.shape} != parameter {p.shape}")
        lr = schedule.effective_lr(role, width, t)
        if cfg.kind is OptimizerFamily.SGD:
            m = state.m[i]
            m *= cfg.beta1
            m += g
            delta = -lr * m
        else:
            eps = epsilon_for(cfg.epsilon_policy, role, width)
            if cfg.kind is OptimizerFamily.ADAM_ATAN2 or cfg.epsilon_policy.mode is EpsilonMode.NONE:
                eps = 0.0
            bc1 = 1.0 - cfg.beta1**t if cfg.bias_correction else 1.0
            bc2 = 1.0 - cfg.beta2**t if cfg.bias_correction else 1.0
            out = np.empty(p.size, dtype=np.float64)
            sumsq = kernel(
                np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                state.m[i].reshape(-1),
                state.v[i].reshape(-1),
                cfg.beta1, cfg.beta2, bc1, bc2, eps,
                cfg.kind is OptimizerFamily.ADAM_ATAN2, cfg.atan2_a, cfg.atan2_b,
                out, cfg.update_clip_rms is not None,
            )
            d = _finish(out.reshape(p.shape), cfg, p, state.init_rms[i] if state.init_rms else None, sumsq)
            delta = -lr * d
        p += delta
        deltas.append(delta)
    state.t = t
    return params, state, deltas
