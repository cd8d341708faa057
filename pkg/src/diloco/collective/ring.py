"""Ring reduce-scatter / all-gather bookkeeping shared by both transports.

The vector is cut into K contiguous segments (one per contributor, ordered by
peer_id) and each segment into sub-chunks of at most ``chunk_size`` bytes.
Segment ``c`` is accumulated along the ring starting at rank ``c`` and ends
owned by rank ``c - 1``; the owner divides by K and the all-gather forwards
the final values. Because the accumulation order is fixed, every peer ends up
with bitwise identical results regardless of message timing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import round_fp16
from . import wire

ITEMSIZE = {"fp32": 4, "fp16": 2}


@dataclass(frozen=True)
class Chunk:
    index: int
    segment: int
    start: int
    end: int

    @property
    def size(self) -> int:
        return self.end - self.start


def partition(n: int, k: int) -> list[tuple[int, int]]:
    base, extra = divmod(n, k)
    bounds = []
    start = 0
    for c in range(k):
        size = base + (1 if c < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def plan_chunks(n: int, k: int, chunk_size: int, precision: str) -> list[list[Chunk]]:
    """Sub-chunks per segment; ``chunk_index`` is global across the vector."""
    max_elems = max(1, chunk_size // ITEMSIZE[precision])
    plan = []
    index = 0
    for c, (s, e) in enumerate(partition(n, k)):
        subs = []
        pos = s
        while pos < e:
            end = min(e, pos + max_elems)
            subs.append(Chunk(index, c, pos, end))
            index += 1
            pos = end
        plan.append(subs)
    return plan


def quantize(x: np.ndarray, precision: str) -> np.ndarray:
    """FP32 values representable in the wire precision."""
    x32 = np.asarray(x, dtype=np.float32)
    if precision == "fp16":
        return round_fp16(x32)
    return x32.copy()


def to_wire(x: np.ndarray, precision: str) -> np.ndarray:
    if precision == "fp16":
        from ..tensor import encode_fp16
        return np.asarray(encode_fp16(x).bits)
    return np.asarray(x, dtype=np.float32)


def from_wire(data: np.ndarray, precision: str) -> np.ndarray:
    if precision == "fp16":
        from .. import kernels
        return np.asarray(kernels.f16_to_f32(np.ascontiguousarray(data, dtype=np.uint16)))
    return np.asarray(data, dtype=np.float32)


def owner_of(segment: int, k: int) -> int:
    return (segment - 1) % k


def reference_ring(contributions, precision: str = "fp32") -> np.ndarray:
    """Single-process replay of the distributed ring arithmetic.

    ``contributions`` are ordered by contributor rank. Returns the FP32 mean
    every peer ends up holding.
    """
    k = len(contributions)
    if k == 1:
        return np.asarray(contributions[0], dtype=np.float64).astype(np.float32)
    acc = [quantize(c, precision) for c in contributions]
    n = acc[0].size
    out = np.empty(n, dtype=np.float32)
    for c, (s, e) in enumerate(partition(n, k)):
        partial = acc[c][s:e]
        for hop in range(1, k):
            r = (c + hop) % k
            partial = quantize(partial, precision) + acc[r][s:e]
        out[s:e] = quantize(partial / np.float32(k), precision)
    return out


def round_bytes_per_peer(n: int, k: int, precision: str, chunk_size: int, attempt: int = 0) -> list[int]:
    """Exact REDUCE_CHUNK bytes each rank sends in one successful ring."""
    if k == 1:
        return [0]
    plan = plan_chunks(n, k, chunk_size, precision)
    name_len = len(f"rs/{attempt}")
    sent = [0] * k
    for c, subs in enumerate(plan):
        seg_bytes = sum(wire.chunk_frame_size(ch.size, precision, name_len) for ch in subs)
        # reduce-scatter: ranks c .. c+k-2 forward segment c
        for hop in range(k - 1):
            sent[(c + hop) % k] += seg_bytes
        # all-gather: owner c-1 and the next k-2 ranks forward it
        own = owner_of(c, k)
        for hop in range(k - 1):
            sent[(own + hop) % k] += seg_bytes
    return sent
