"""Inner AdamW, outer Nesterov SGD, warmup/cosine schedule and the dynamic
loss scaler.

Updates do their arithmetic in float64 per element and store FP32, through
:mod:`diloco.kernels`. State objects are immutable; every step returns new
ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError
from .tensor import ParamVector, require_same_layout

DEFAULT_BETAS = (0.9, 0.95)


@dataclass(frozen=True)
class AdamWState:
    m: ParamVector
    v: ParamVector
    step_count: int = 0
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    eps: float = 1e-8
    weight_decay: float = 0.1
    base_lr: float = 4e-4

    @classmethod
    def init(cls, params: ParamVector, **hyper) -> "AdamWState":
        zeros = ParamVector.zeros(params.layout)
        return cls(zeros, zeros, **hyper)


@dataclass(frozen=True)
class NesterovState:
    momentum_buf: ParamVector
    lr: float = 0.7
    momentum: float = 0.9

    @classmethod
    def init(cls, params: ParamVector, lr: float = 0.7, momentum: float = 0.9) -> "NesterovState":
        return cls(ParamVector.zeros(params.layout), lr, momentum)


def adamw_step(state: AdamWState, params: ParamVector, grad, lr: float):
    """One decoupled-weight-decay Adam update.

    m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2
    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
    """
    require_same_layout(params, grad)
    require_same_layout(params, state.m)
    if lr < 0:
        raise ConfigError("lr must be non-negative")
    g = np.ascontiguousarray(grad.data, dtype=np.float32)
    if not np.isfinite(g).all():
        raise NumericError("non-finite gradient in adamw_step")
    t = state.step_count + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    p = params.copy_data()
    m = state.m.copy_data()
    v = state.v.copy_data()
    kernels.adamw_update(p, g, m, v, float(lr), state.beta1, state.beta2,
                         state.eps, state.weight_decay, bc1, bc2)
    layout = params.layout
    new_state = replace(state, m=ParamVector(m, layout), v=ParamVector(v, layout), step_count=t)
    return ParamVector(p, layout), new_state


def nesterov_step(state: NesterovState, params: ParamVector, pseudo_grad):
    """buf <- mu*buf + g ; p <- p - lr*(g + mu*buf).

    ``pseudo_grad`` may carry float64 data (see :class:`~diloco.engine.PseudoGradient`).
    """
    require_same_layout(params, pseudo_grad)
    require_same_layout(params, state.momentum_buf)
    g = np.ascontiguousarray(pseudo_grad.data, dtype=np.float64)
    if not np.isfinite(g).all():
        raise NumericError("non-finite pseudo-gradient in nesterov_step")
    p = params.copy_data()
    buf = state.momentum_buf.copy_data()
    kernels.nesterov_update(p, g, buf, float(state.lr), float(state.momentum))
    return ParamVector(p, params.layout), replace(state, momentum_buf=ParamVector(buf, params.layout))


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 4e-4
    warmup_steps: int = 1000
    total_steps: int = 88_000
    decay: str = "cosine"
    min_ratio: float = 0.1

    def __post_init__(self):
        if self.decay not in ("none", "cosine"):
            raise ConfigError(f"lr decay must be 'none' or 'cosine', got {self.decay!r}")
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise ConfigError("warmup_steps and total_steps must be non-negative")


def lr_at(schedule: LrSchedule, step: int) -> float:
    base = schedule.base_lr
    w = schedule.warmup_steps
    if step < w:
        return base * max(step, 1) / w
    if schedule.decay == "none":
        return base
    floor = schedule.min_ratio * base
    span = schedule.total_steps - w
    if span <= 0 or step >= schedule.total_steps:
        return floor
    progress = (step - w) / span
    return min(base, floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass(frozen=True)
class LossScaler:
    scale: float = 2.0 ** 16
    growth_interval: int = 2000
    consecutive_good: int = 0
    enabled: bool = True

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError("loss scale must be positive")


_MIN_SCALE = 2.0 ** -126


def scaler_scale_loss(scaler: LossScaler, loss):
    if not scaler.enabled:
        return loss
    return loss * np.float32(scaler.scale)


def scaler_scale_grad(scaler: LossScaler, grad: ParamVector) -> np.ndarray:
    """Gradient of the scaled loss (what a scaled backward pass would produce)."""
    if not scaler.enabled:
        return grad.copy_data()
    with np.errstate(over="ignore"):
        return grad.data * np.float32(scaler.scale)


def scaler_unscale_and_check(scaler: LossScaler, grad) -> tuple[ParamVector | None, bool]:
    """Divide by the scale; returns ``(grad, overflow)``, grad is None on overflow."""
    data = grad.data if isinstance(grad, ParamVector) else np.asarray(grad, np.float32)
    if not np.isfinite(data).all():
        return None, True
    if scaler.enabled:
        data = data / np.float32(scaler.scale)
    layout = grad.layout if isinstance(grad, ParamVector) else None
    return (ParamVector(data, layout) if layout is not None else data), False


def scaler_update(scaler: LossScaler, overflow: bool) -> LossScaler:
    if not scaler.enabled:
        return scaler
    if overflow:
        return replace(scaler, scale=max(scaler.scale * 0.5, _MIN_SCALE), consecutive_good=0)
    good = scaler.consecutive_good + 1
    if good >= scaler.growth_interval:
        return replace(scaler, scale=scaler.scale * 2.0, consecutive_good=0)
    return replace(scaler, consecutive_good=good)
