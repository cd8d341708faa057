"""Flat ``key = value`` run configuration.

Keys carry their units (``bandwidth_mbits``, ``barrier_timeout_s``); unknown
keys and malformed values raise :class:`~diloco.errors.ConfigError` naming the
key. Lists are comma separated.
"""

from __future__ import annotations

import hashlib
import typing
from dataclasses import asdict, dataclass, fields, replace

from .. import engine, tasks
from ..collective.protocol import ProtocolSettings
from ..errors import ConfigError
from ..netsim import LinkMatrix, StepTimeModel

MODES = ("worker", "simulate", "baseline_dp", "baseline_single")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "simulate"
    seed: int = 0
    output: str = "runs/metrics.jsonl"
    evaluate: bool = True
    # task
    task_kind: str = "char_lm"
    task_input_dim: int = 32
    task_hidden_dim: int = 16
    task_output_dim: int = 32
    task_depth: int = 1
    task_dataset_size: int = 65536
    task_noise_std: float = 0.0
    task_context_len: int = 1
    task_eval_size: int = 2048
    # diloco
    local_steps: int = 50
    num_workers: int = 4
    total_inner_steps: int = 500
    batch_size: int = 32
    reduce_precision: str = "fp32"
    inner_lr: float = 4e-4
    warmup_steps: int = 100
    lr_decay: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    outer_lr: float = 0.7
    outer_momentum: float = 0.9
    amp: bool = False
    loss_scale: float = 65536.0
    # collective
    barrier_timeout_s: float = 30.0
    ring_timeout_s: float = 30.0
    chunk_size_bytes: int = 1 << 20
    quorum_min: int = 1
    max_restarts: int = 4
    # simulated network and compute
    link_matrix: str = ""
    bandwidth_mbits: float = 1000.0
    bandwidth_scale: float = 1.0
    latency_ms: float = 0.0
    step_seconds: float = 0.1
    step_multipliers: tuple = ()
    step_jitter: float = 0.0
    payload_elements: int = 0
    detect_after_s: float = 0.0
    # real sockets
    run_id: str = "diloco"
    rendezvous: str = ""
    listen: str = "127.0.0.1:0"
    worker_index: int = 0
    join_timeout_s: float = 30.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.num_workers < 1:
            raise ConfigError("num_workers must be >= 1")
        if self.mode == "baseline_single" and self.num_workers != 1:
            object.__setattr__(self, "num_workers", 1)
        if self.chunk_size_bytes < 4:
            raise ConfigError("chunk_size_bytes must be >= 4")
        if self.bandwidth_mbits <= 0 and not self.link_matrix:
            raise ConfigError("bandwidth_mbits must be positive")
        if self.bandwidth_scale <= 0:
            raise ConfigError("bandwidth_scale must be positive")
        if self.payload_elements < 0:
            raise ConfigError("payload_elements must be >= 0")
        # building the parts validates them
        self.task()
        self.diloco()

    def task(self) -> tasks.TaskSpec:
        return tasks.TaskSpec(self.task_kind, self.task_input_dim, self.task_hidden_dim,
                              self.task_output_dim, self.task_depth, self.seed, self.task_dataset_size,
                              self.task_noise_std, self.task_context_len, self.task_eval_size)

    def diloco(self) -> engine.DilocoConfig:
        return engine.DilocoConfig(
            self.local_steps, self.num_workers, self.total_inner_steps, self.batch_size,
            self.reduce_precision, self.inner_lr, self.warmup_steps, self.lr_decay, self.beta1,
            self.beta2, self.eps, self.weight_decay, self.outer_lr, self.outer_momentum, self.amp,
            self.loss_scale)

    def settings(self) -> ProtocolSettings:
        return ProtocolSettings(self.barrier_timeout_s, self.ring_timeout_s, None, self.max_restarts,
                                self.chunk_size_bytes, self.quorum_min)

    def links(self) -> LinkMatrix:
        if self.link_matrix == "sample":
            links = LinkMatrix.sample()
        elif self.link_matrix:
            links = LinkMatrix.load(self.link_matrix)
        else:
            links = LinkMatrix.uniform(self.num_workers, self.bandwidth_mbits, self.latency_ms)
        return links if self.bandwidth_scale == 1.0 else links.scaled(self.bandwidth_scale)

    def step_time(self) -> StepTimeModel:
        return StepTimeModel(self.step_seconds, tuple(self.step_multipliers), self.step_jitter, self.seed)

    def with_overrides(self, **kw) -> "RunConfig":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return replace(self, **kw)

    def digest(self) -> str:
        """Hash of everything that shapes the trajectory (not the output path)."""
        items = {k: v for k, v in asdict(self).items() if k not in ("output", "listen", "rendezvous")}
        return hashlib.sha256(repr(sorted(items.items())).encode()).hexdigest()[:16]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_HINTS = typing.get_type_hints(RunConfig)


def coerce(key: str, raw: str):
    if key not in _HINTS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _HINTS[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw, 0)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = coerce(key, value)
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                values = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for key, raw in (overrides or {}).items():
        values[key] = coerce(key, raw) if isinstance(raw, str) else raw
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
