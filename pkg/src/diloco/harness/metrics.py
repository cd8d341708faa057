"""JSON-lines metrics: one object per line with a ``kind`` of ``inner``,
``outer``, ``event`` or ``summary``."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

RECORD_FIELDS = ("inner_step", "outer_epoch", "loss", "perplexity", "lr", "compute_ms", "comm_ms",
                 "bytes_sent", "contributors")


@dataclass(frozen=True)
class MetricsRecord:
    kind: str
    inner_step: int
    outer_epoch: int
    loss: float | None = None
    perplexity: float | None = None
    lr: float | None = None
    compute_ms: float = 0.0
    comm_ms: float = 0.0
    bytes_sent: int = 0
    contributors: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(d["kind"], **{k: d.get(k) for k in RECORD_FIELDS if k in d})

    def check(self) -> None:
        """Raise ValueError if the record breaks a field invariant."""
        if self.loss is not None and self.perplexity is not None:
            if self.perplexity != float(np.float32(math.exp(self.loss))):
                raise ValueError("perplexity must equal exp(loss) rounded to FP32")
        if self.kind == "inner" and self.bytes_sent:
            raise ValueError("inner-step records carry no bytes")


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=True)


class MetricsWriter:
    def __init__(self, path, append: bool = False):
        self.path = path
        self._fh = open(path, "a" if append else "w", encoding="utf-8") if path else None
        self.count = 0

    def __call__(self, record: dict) -> None:
        self.count += 1
        if self._fh is not None:
            self._fh.write(dumps(record) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summary_of(records: list[dict]) -> dict | None:
    found = [r for r in records if r.get("kind") == "summary"]
    return found[-1] if found else None


def export_csv(src, dst, kind: str = "inner") -> int:
    """Write the records of one kind as a tidy CSV; returns the row count."""
    rows = [r for r in read_metrics(src) if r.get("kind") == kind]
    keys = sorted({k for r in rows for k in r})
    with open(dst, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k, "") for k in keys})
    return len(rows)
