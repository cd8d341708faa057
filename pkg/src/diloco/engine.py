"""The DiLoCo inner/outer loop.

Each worker keeps two copies of the weights: ``theta_t``, the outer weights
shared by the fleet, and ``theta_local``, trained for H inner AdamW steps.
After the window the pseudo-gradient ``theta_t - theta_local`` is averaged
across workers, the outer Nesterov step updates ``theta_t`` and every worker
restarts its window from the new ``theta_t``.

The training loop is a generator that yields :class:`Compute` and
:class:`Reduce` requests, so the same code runs over real sockets, inside the
network simulator, or with no collective at all.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tasks
from .errors import ConfigError, DilocoError
from .optim import (AdamWState, LossScaler, LrSchedule, NesterovState, adamw_step, lr_at,
                    nesterov_step, scaler_scale_grad, scaler_unscale_and_check, scaler_update)
from .tensor import ParamVector, PseudoGradient, round_fp16, pack_array, unpack_array

PRECISIONS = ("fp32", "fp16")


@dataclass(frozen=True)
class DilocoConfig:
    local_steps: int = 50
    num_workers: int = 1
    total_inner_steps: int = 100
    batch_size: int = 32
    reduce_precision: str = "fp32"
    inner_lr: float = 4e-4
    warmup_steps: int = 0
    lr_decay: str = "none"
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    outer_lr: float = 0.7
    outer_momentum: float = 0.9
    amp: bool = False
    loss_scale: float = 2.0 ** 16
    scale_growth_interval: int = 2000

    def __post_init__(self):
        if self.local_steps < 1:
            raise ConfigError("local_steps must be >= 1")
        if self.num_workers < 1:
            raise ConfigError("num_workers must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.total_inner_steps < 0 or self.total_inner_steps % self.local_steps:
            raise ConfigError(f"total_inner_steps={self.total_inner_steps} must be a non-negative "
                              f"multiple of local_steps={self.local_steps}")
        if self.reduce_precision not in PRECISIONS:
            raise ConfigError(f"reduce_precision must be one of {PRECISIONS}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0 <= self.outer_momentum < 1:
            raise ConfigError("outer_momentum must lie in [0, 1)")
        LrSchedule(self.inner_lr, self.warmup_steps, self.total_inner_steps, self.lr_decay)

    @property
    def rounds(self) -> int:
        return self.total_inner_steps // self.local_steps

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.inner_lr, self.warmup_steps, self.total_inner_steps, self.lr_decay)


@dataclass(frozen=True)
class EngineState:
    theta_t: ParamVector
    theta_local: ParamVector
    inner: AdamWState
    outer: NesterovState
    scaler: LossScaler
    inner_step: int = 0
    outer_epoch: int = 0


def init_engine(config: DilocoConfig, params: ParamVector) -> EngineState:
    inner = AdamWState.init(params, beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                            weight_decay=config.weight_decay, base_lr=config.inner_lr)
    outer = NesterovState.init(params, lr=config.outer_lr, momentum=config.outer_momentum)
    scaler = LossScaler(config.loss_scale, config.scale_growth_interval, 0, enabled=config.amp)
    return EngineState(params, params, inner, outer, scaler)


@dataclass(frozen=True)
class InnerMetrics:
    loss: float
    lr: float
    skipped: bool = False


def inner_step(state: EngineState, config: DilocoConfig, task: tasks.TaskSpec,
               batch: tasks.Batch) -> tuple[EngineState, InnerMetrics]:
    """One forward/backward pass and AdamW update of ``theta_local``.

    With ``amp`` the scaled gradient is pushed through binary16 as a half
    precision backward pass would be; an overflow skips the update but the
    step counter (and data cursor) still advance.
    """
    if state.inner_step >= config.total_inner_steps:
        raise DilocoError("all inner steps already taken")
    lr = lr_at(config.schedule(), state.inner_step)
    loss, grad = tasks.loss_and_grad(task, state.theta_local, batch)
    scaler = state.scaler
    if scaler.enabled:
        half = round_fp16(scaler_scale_grad(scaler, grad))
        unscaled, overflow = scaler_unscale_and_check(scaler, half)
        scaler = scaler_update(scaler, overflow)
        if overflow:
            nxt = replace(state, scaler=scaler, inner_step=state.inner_step + 1)
            return nxt, InnerMetrics(float(loss), lr, skipped=True)
        grad = ParamVector(unscaled, grad.layout)
    theta_local, inner = adamw_step(state.inner, state.theta_local, grad, lr)
    nxt = replace(state, theta_local=theta_local, inner=inner, scaler=scaler,
                  inner_step=state.inner_step + 1)
    return nxt, InnerMetrics(float(loss), lr)


def compute_pseudo_gradient(state: EngineState, config: DilocoConfig) -> PseudoGradient:
    """``theta_t - theta_local``, exact (held in float64), tagged with the epoch."""
    if state.inner_step % config.local_steps:
        raise DilocoError(f"pseudo-gradient requested mid-window at step {state.inner_step}")
    delta = state.theta_t.data.astype(np.float64) - state.theta_local.data.astype(np.float64)
    return PseudoGradient(delta, state.theta_t.layout, config.reduce_precision, state.outer_epoch)


def outer_step(state: EngineState, reduced: PseudoGradient) -> tuple[EngineState, bool]:
    """Apply the averaged pseudo-gradient; returns ``(state, applied)``.

    A non-finite average skips the update and resets ``theta_local``.
    """
    if reduced.outer_epoch != state.outer_epoch:
        raise DilocoError(f"pseudo-gradient of epoch {reduced.outer_epoch} offered at "
                          f"epoch {state.outer_epoch}")
    if not reduced.is_finite():
        return replace(state, theta_local=state.theta_t, outer_epoch=state.outer_epoch + 1), False
    theta_t, outer = nesterov_step(state.outer, state.theta_t, reduced)
    return replace(state, theta_t=theta_t, theta_local=theta_t, outer=outer,
                   outer_epoch=state.outer_epoch + 1), True


# -- training loop -------------------------------------------------------------

@dataclass(frozen=True)
class Compute:
    seconds: float


@dataclass(frozen=True)
class Reduce:
    pseudo_grad: PseudoGradient


@dataclass
class LoopContext:
    """Per-worker inputs of :func:`training_loop`."""
    config: DilocoConfig
    task: tasks.TaskSpec
    shard: tasks.Shard
    emit: Callable[[dict], None] = lambda record: None
    step_seconds: Callable[[int], float] | None = None
    on_round_end: Callable[[EngineState], None] | None = None
    evaluate: bool = True
    extra: dict = field(default_factory=dict)


def training_loop(state: EngineState, ctx: LoopContext):
    """Generator running every remaining inner step with an outer round each H.

    Yields :class:`Compute` after each window (virtual seconds when
    ``step_seconds`` is given) and :class:`Reduce`, which must be answered
    with ``(PseudoGradient, ReduceReport | None)``. Returns the final state.
    """
    cfg = ctx.config
    while state.inner_step < cfg.total_inner_steps:
        window = 0.0
        for _ in range(cfg.local_steps - state.inner_step % cfg.local_steps):
            batch = tasks.make_batch(ctx.task, ctx.shard, state.inner_step * cfg.batch_size,
                                     cfg.batch_size)
            t0 = time.perf_counter()
            state, m = inner_step(state, cfg, ctx.task, batch)
            if ctx.step_seconds is not None:
                secs = ctx.step_seconds(state.inner_step - 1)
            else:
                secs = time.perf_counter() - t0
            window += secs
            ctx.emit({"kind": "inner", "inner_step": state.inner_step, "outer_epoch": state.outer_epoch,
                      "loss": m.loss, "perplexity": tasks.perplexity(m.loss), "lr": m.lr,
                      "compute_ms": secs * 1e3, "comm_ms": 0.0, "bytes_sent": 0,
                      "contributors": None, "skipped": m.skipped, **ctx.extra})
        yield Compute(window)
        pg = compute_pseudo_gradient(state, cfg)
        reduced, report = yield Reduce(pg)
        state, applied = outer_step(state, reduced)
        record = {"kind": "outer", "inner_step": state.inner_step, "outer_epoch": state.outer_epoch,
                  "applied": applied, **ctx.extra}
        if ctx.evaluate:
            loss = tasks.evaluate(ctx.task, state.theta_t)
            record.update(loss=loss, perplexity=tasks.perplexity(loss))
        if report is not None:
            record.update(comm_ms=report.wall_time * 1e3, wait_ms=report.wait_time * 1e3,
                          bytes_sent=report.bytes_sent, reduce_bytes=report.reduce_bytes_sent,
                          contributors=len(report.contributors), attempt=report.attempt)
        else:
            record.update(comm_ms=0.0, wait_ms=0.0, bytes_sent=0, reduce_bytes=0, contributors=1,
                          attempt=0)
        ctx.emit(record)
        if not applied:
            ctx.emit({"kind": "event", "event": "outer_step_skipped", "inner_step": state.inner_step,
                      "outer_epoch": state.outer_epoch, "reason": "non-finite pseudo-gradient",
                      **ctx.extra})
        if ctx.on_round_end is not None:
            ctx.on_round_end(state)
    return state


def local_reduce(pg: PseudoGradient):
    """Single-worker all-reduce: the average of one contribution is itself."""
    return pg, None


def drive(loop, reduce_fn=local_reduce):
    """Run a training-loop generator to completion with a blocking reducer."""
    value = None
    while True:
        try:
            op = loop.send(value)
        except StopIteration as stop:
            return stop.value
        value = reduce_fn(op.pseudo_grad) if isinstance(op, Reduce) else None


class DilocoOptimizer:
    """Single-optimizer facade for a conventional loop::

        opt = DilocoOptimizer(params, config, reducer)
        for batch in batches:
            opt.zero_grad()
            loss = opt.step(task, batch)

    Every H-th ``step`` runs the outer round through ``reducer`` (a callable
    taking and returning a :class:`PseudoGradient`).
    """

    def __init__(self, params: ParamVector, config: DilocoConfig, reducer=None):
        self.config = config
        self.state = init_engine(config, params)
        self.reducer = reducer or (lambda pg: pg)
        self.last_metrics: InnerMetrics | None = None

    @property
    def params(self) -> ParamVector:
        return self.state.theta_local

    def zero_grad(self) -> None:
        # gradients are recomputed from scratch each step; nothing accumulates
        self.last_metrics = None

    def step(self, task: tasks.TaskSpec, batch: tasks.Batch) -> float:
        self.state, m = inner_step(self.state, self.config, task, batch)
        self.last_metrics = m
        if self.state.inner_step % self.config.local_steps == 0:
            reduced = self.reducer(compute_pseudo_gradient(self.state, self.config))
            self.state, _ = outer_step(self.state, reduced)
        return m.loss


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"DLCKPT01"


def _scalar_fields(state: EngineState, config_hash: str) -> dict:
    return {
        "config_hash": config_hash,
        "inner_step": state.inner_step,
        "outer_epoch": state.outer_epoch,
        "cursor": state.inner_step,
        "adam_step": state.inner.step_count,
        "adam_beta1": state.inner.beta1, "adam_beta2": state.inner.beta2,
        "adam_eps": state.inner.eps, "adam_wd": state.inner.weight_decay,
        "adam_base_lr": state.inner.base_lr,
        "outer_lr": state.outer.lr, "outer_momentum": state.outer.momentum,
        "scale": state.scaler.scale, "scale_good": state.scaler.consecutive_good,
        "scale_interval": state.scaler.growth_interval, "scale_enabled": int(state.scaler.enabled),
    }


def save_checkpoint(path, state: EngineState, config_hash: str = "") -> None:
    """Text header of scalars (floats as exact hex) followed by five vectors."""
    header = []
    for key, value in _scalar_fields(state, config_hash).items():
        if isinstance(value, float):
            value = float.hex(value)
        header.append(f"{key}={value}")
    text = "\n".join(header).encode("utf-8")
    blobs = [pack_array(v.layout, v.data) for v in
             (state.theta_t, state.theta_local, state.inner.m, state.inner.v, state.outer.momentum_buf)]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(text)) + text)
        for blob in blobs:
            fh.write(struct.pack("<Q", len(blob)) + blob)


def load_checkpoint(path) -> tuple[EngineState, str]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint")
    (n,) = struct.unpack_from("<Q", buf, 8)
    pos = 16 + n
    raw = dict(line.split("=", 1) for line in buf[16:pos].decode("utf-8").splitlines())
    vecs = []
    for _ in range(5):
        (size,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        layout, arr, _ = unpack_array(buf[pos:pos + size], np.float32)
        vecs.append(ParamVector(arr, layout))
        pos += size

    def f(key):
        return float.fromhex(raw[key])

    inner = AdamWState(vecs[2], vecs[3], int(raw["adam_step"]), f("adam_beta1"), f("adam_beta2"),
                       f("adam_eps"), f("adam_wd"), f("adam_base_lr"))
    outer = NesterovState(vecs[4], f("outer_lr"), f("outer_momentum"))
    scaler = LossScaler(f("scale"), int(raw["scale_interval"]), int(raw["scale_good"]),
                        bool(int(raw["scale_enabled"])))
    state = EngineState(vecs[0], vecs[1], inner, outer, scaler, int(raw["inner_step"]),
                        int(raw["outer_epoch"]))
    return state, raw["config_hash"]

