"""Synthetic learning tasks with closed-form forward and backward passes.

Three kinds are provided:

``linear_regression``
    y = x W* + b* + noise, squared error.
``mlp_classifier``
    tanh MLP trained with softmax cross-entropy on labels from a random teacher.
``char_lm``
    embedding + softmax next-symbol model over text drawn from a sparse Markov
    chain; ``input_dim`` is the vocabulary and ``hidden_dim`` the embedding width.

All randomness comes from Philox streams keyed by ``(seed, purpose, index)`` so
any process can rebuild the same dataset and initial parameters on its own.
Math runs in float64; parameters and gradients cross the API as FP32.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensor import ParamVector

KINDS = ("linear_regression", "mlp_classifier", "char_lm")

_PURPOSE = {"init": 1, "data": 2, "teacher": 3, "noise": 4, "eval": 5, "chain": 6}


def keyed_rng(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Counter-based generator for one ``(seed, purpose, index)`` key."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), _PURPOSE[purpose], int(index)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "char_lm"
    input_dim: int = 16
    hidden_dim: int = 8
    output_dim: int = 16
    depth: int = 1
    seed: int = 0
    dataset_size: int = 4096
    noise_std: float = 0.0
    context_len: int = 1
    eval_size: int = 2048

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"task.kind must be one of {KINDS}, got {self.kind!r}")
        for name in ("input_dim", "output_dim", "dataset_size", "context_len", "eval_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"task.{name} must be positive")
        if self.kind == "mlp_classifier":
            if self.depth < 1:
                raise ConfigError("task.depth must be >= 1")
            if self.depth > 1 and self.hidden_dim <= 0:
                raise ConfigError("task.hidden_dim must be positive for depth > 1")
        if self.kind == "char_lm":
            if self.hidden_dim <= 0:
                raise ConfigError("task.hidden_dim (embedding width) must be positive")
            if self.output_dim != self.input_dim:
                raise ConfigError("task.output_dim must equal input_dim (vocabulary) for char_lm")


def layer_shapes(spec: TaskSpec) -> list[tuple[str, tuple[int, ...]]]:
    if spec.kind == "linear_regression":
        return [("w", (spec.input_dim, spec.output_dim)), ("b", (spec.output_dim,))]
    if spec.kind == "mlp_classifier":
        dims = [spec.input_dim] + [spec.hidden_dim] * (spec.depth - 1) + [spec.output_dim]
        shapes = []
        for i in range(spec.depth):
            shapes += [(f"w{i}", (dims[i], dims[i + 1])), (f"b{i}", (dims[i + 1],))]
        return shapes
    v, d, c = spec.input_dim, spec.hidden_dim, spec.context_len
    return [("embed", (v, d)), ("w_out", (c * d, v)), ("b_out", (v,))]


def param_count(spec: TaskSpec) -> int:
    return sum(math.prod(s) for _, s in layer_shapes(spec))


def init_params(spec: TaskSpec) -> ParamVector:
    """Scaled-uniform weights (bound 1/sqrt(fan_in)), zero biases."""
    shapes = layer_shapes(spec)
    for name, shape in shapes:
        if math.prod(shape) == 0:
            raise ConfigError(f"layer {name} has zero size {shape}")
    rng = keyed_rng(spec.seed, "init")
    parts = {}
    for name, shape in shapes:
        if len(shape) == 1:
            parts[name] = np.zeros(shape)
        elif name == "embed":
            parts[name] = rng.uniform(-0.1, 0.1, size=shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            parts[name] = rng.uniform(-bound, bound, size=shape)
    return ParamVector.from_segments(parts)


def _unflatten(spec: TaskSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    for name, shape in layer_shapes(spec):
        n = math.prod(shape)
        out[name] = flat[pos:pos + n].reshape(shape)
        pos += n
    return out


# -- datasets ----------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray


def true_params(spec: TaskSpec) -> ParamVector:
    """Generating parameters of a linear_regression task."""
    if spec.kind != "linear_regression":
        raise ConfigError("true_params is only defined for linear_regression")
    rng = keyed_rng(spec.seed, "teacher")
    w = rng.normal(size=(spec.input_dim, spec.output_dim)) / math.sqrt(spec.input_dim)
    b = rng.normal(size=spec.output_dim) * 0.5
    return ParamVector.from_segments({"w": w, "b": b})


def _teacher_labels(spec: TaskSpec, x: np.ndarray) -> np.ndarray:
    rng = keyed_rng(spec.seed, "teacher")
    dims = [spec.input_dim] + [spec.hidden_dim] * (spec.depth - 1) + [spec.output_dim]
    h = x
    for i in range(spec.depth):
        w = rng.normal(size=(dims[i], dims[i + 1])) * (3.0 / math.sqrt(dims[i]))
        h = h @ w
        if i < spec.depth - 1:
            h = np.tanh(h)
    return np.argmax(h, axis=1)


def markov_transitions(spec: TaskSpec) -> np.ndarray:
    """Sparse row-stochastic transition matrix of the char_lm text source."""
    rng = keyed_rng(spec.seed, "chain")
    v = spec.input_dim
    return rng.dirichlet(np.full(v, 0.2), size=v)


def _markov_tokens(spec: TaskSpec, n_samples: int, purpose: str) -> tuple[np.ndarray, np.ndarray]:
    trans = markov_transitions(spec)
    cdf = np.cumsum(trans, axis=1)
    cdf[:, -1] = 1.0
    c = spec.context_len
    streams = min(256, n_samples)
    per = -(-n_samples // streams)
    rng = keyed_rng(spec.seed, purpose, 1)
    toks = np.empty((streams, per + c), dtype=np.int64)
    toks[:, 0] = rng.integers(0, spec.input_dim, size=streams)
    u = rng.random((per + c - 1, streams))
    for t in range(1, per + c):
        toks[:, t] = (u[t - 1][:, None] > cdf[toks[:, t - 1]]).sum(axis=1)
    # sample i -> stream i // per, window ending at position (i % per) + c
    idx = np.arange(n_samples)
    s, p = idx // per, idx % per
    ctx = np.stack([toks[s, p + k] for k in range(c)], axis=1)
    return ctx, toks[s, p + c]


def _build(spec: TaskSpec, n: int, purpose: str) -> Dataset:
    rng = keyed_rng(spec.seed, purpose)
    if spec.kind == "char_lm":
        ctx, tgt = _markov_tokens(spec, n, purpose)
        return Dataset(ctx, tgt)
    x = rng.normal(size=(n, spec.input_dim))
    if spec.kind == "linear_regression":
        tp = _unflatten(spec, true_params(spec).data.astype(np.float64))
        y = x @ tp["w"] + tp["b"]
        if spec.noise_std > 0:
            y = y + spec.noise_std * keyed_rng(spec.seed, "noise", _PURPOSE[purpose]).normal(size=y.shape)
        return Dataset(x, y)
    return Dataset(x, _teacher_labels(spec, x))


@functools.lru_cache(maxsize=32)
def dataset(spec: TaskSpec) -> Dataset:
    return _build(spec, spec.dataset_size, "data")


@functools.lru_cache(maxsize=32)
def eval_dataset(spec: TaskSpec) -> Dataset:
    return _build(spec, spec.eval_size, "eval")


# -- sharding and batches ----------------------------------------------------

@dataclass(frozen=True)
class Shard:
    worker_index: int
    num_workers: int
    indices: np.ndarray = field(repr=False, compare=False)

    def __len__(self):
        return int(self.indices.size)


def shard(spec: TaskSpec, worker_index: int, num_workers: int) -> Shard:
    """Sample ``i`` belongs to worker ``i mod num_workers``."""
    if num_workers <= 0:
        raise ConfigError("num_workers must be positive")
    if not 0 <= worker_index < num_workers:
        raise ConfigError(f"worker_index {worker_index} out of range for {num_workers} workers")
    idx = np.arange(worker_index, spec.dataset_size, num_workers)
    if idx.size == 0:
        raise ConfigError("shard is empty: dataset_size smaller than num_workers")
    idx.flags.writeable = False
    return Shard(worker_index, num_workers, idx)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    index_range: tuple[int, int]


def make_batch(spec: TaskSpec, sh: Shard, cursor: int, batch_size: int) -> Batch:
    """Sequential batch starting at ``cursor`` within the shard, wrapping around."""
    data = dataset(spec)
    pos = (cursor + np.arange(batch_size)) % len(sh)
    rows = sh.indices[pos]
    return Batch(data.inputs[rows], data.targets[rows], (cursor, cursor + batch_size))


def full_batch(spec: TaskSpec, data: Dataset) -> Batch:
    return Batch(data.inputs, data.targets, (0, len(data.targets)))


# -- forward / backward ------------------------------------------------------

def _softmax_xent(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    n = logits.shape[0]
    loss = -logp[np.arange(n), targets].mean()
    probs = ez / denom
    probs[np.arange(n), targets] -= 1.0
    return float(loss), probs / n


def _forward_backward(spec: TaskSpec, flat: np.ndarray, batch: Batch, need_grad: bool):
    p = _unflatten(spec, flat)
    x, t = batch.inputs, batch.targets
    if spec.kind == "linear_regression":
        r = x @ p["w"] + p["b"] - t
        loss = 0.5 * float((r * r).sum(axis=1).mean())
        if not need_grad:
            return loss, None
        r = r / x.shape[0]
        return loss, np.concatenate([(x.T @ r).ravel(), r.sum(axis=0)])

    if spec.kind == "mlp_classifier":
        acts = [x]
        h = x
        for i in range(spec.depth):
            h = h @ p[f"w{i}"] + p[f"b{i}"]
            if i < spec.depth - 1:
                h = np.tanh(h)
            acts.append(h)
        loss, d = _softmax_xent(acts[-1], t)
        if not need_grad:
            return loss, None
        grads = []
        for i in reversed(range(spec.depth)):
            grads.append(d.sum(axis=0))
            grads.append((acts[i].T @ d).ravel())
            if i > 0:
                d = (d @ p[f"w{i}"].T) * (1.0 - acts[i] ** 2)
        return loss, np.concatenate(grads[::-1])

    d_emb = spec.hidden_dim
    c = spec.context_len
    emb = p["embed"]
    feats = emb[x].reshape(x.shape[0], c * d_emb)
    loss, d = _softmax_xent(feats @ p["w_out"] + p["b_out"], t)
    if not need_grad:
        return loss, None
    g_w = feats.T @ d
    g_b = d.sum(axis=0)
    d_feats = (d @ p["w_out"].T).reshape(x.shape[0], c, d_emb)
    g_emb = np.zeros_like(emb)
    for k in range(c):
        np.add.at(g_emb, x[:, k], d_feats[:, k])
    return loss, np.concatenate([g_emb.ravel(), g_w.ravel(), g_b])


def _check_inputs(spec: TaskSpec, params: ParamVector, batch: Batch) -> None:
    if len(params) != param_count(spec):
        raise ShapeError(f"params have {len(params)} scalars, task expects {param_count(spec)}")
    if not params.is_finite():
        raise NumericError("non-finite parameters")
    if batch.inputs.dtype.kind == "f" and not np.isfinite(batch.inputs).all():
        raise NumericError("non-finite batch inputs")


def loss_and_grad(spec: TaskSpec, params: ParamVector, batch: Batch) -> tuple[np.float32, ParamVector]:
    """Mean batch loss and its gradient, both FP32."""
    _check_inputs(spec, params, batch)
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grad = _forward_backward(spec, params.data.astype(np.float64), batch, True)
        loss32, grad32 = np.float32(loss), np.asarray(grad, dtype=np.float32)
    if not (np.isfinite(loss32) and np.isfinite(grad32).all()):
        raise NumericError("non-finite loss or gradient")
    return loss32, ParamVector(grad32, params.layout)


def loss_value(spec: TaskSpec, flat: np.ndarray, batch: Batch) -> float:
    """Float64 forward pass on a raw parameter array (no gradient)."""
    return _forward_backward(spec, np.asarray(flat, dtype=np.float64), batch, False)[0]


def evaluate(spec: TaskSpec, params: ParamVector) -> float:
    """Mean loss on the held-out evaluation set."""
    return loss_value(spec, params.data, full_batch(spec, eval_dataset(spec)))


def perplexity(loss: float) -> float:
    loss = float(loss)
    return float(np.float32(math.exp(loss))) if loss < 709.0 else math.inf
