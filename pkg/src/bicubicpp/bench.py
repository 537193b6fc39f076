"""Forward-pass latency measurement and the channel/runtime sweep.

Timing covers the forward call only: input generation, model construction,
and metric computation all happen outside the clock. The median over
post-warmup iterations is reported (robust to scheduler noise). Numbers are
wall-clock and machine-specific by nature; the sweep exists so users can
find their own hardware's sweet spots, not to reproduce anyone else's.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RangeError
from .model import Model, ModelConfig

DEFAULT_INPUT_DIMS = (1, 3, 720, 1280)  # 720p in, 4K out


@dataclass
class RuntimeStats:
    input_dims: tuple
    warmup: int
    iters: int
    per_iteration_ms: list[float]
    median_ms: float
    p10_ms: float
    p90_ms: float
    dtype: str


def measure_runtime(model, input_dims, warmup: int = 3, iters: int = 20, seed: int = 0) -> RuntimeStats:
    """Median/percentile forward latency on a fixed random input.

    `model` may be a Model or any callable taking the input array.
    """
    if iters < 5:
        raise RangeError(f"iters must be >= 5, got {iters}")
    if warmup < 0:
        raise RangeError(f"warmup must be >= 0, got {warmup}")
    rng = np.random.default_rng(seed)
    x = rng.random(size=tuple(input_dims), dtype=np.float32)
    fn = model.forward if isinstance(model, Model) or hasattr(model, "forward") else model

    for _ in range(warmup):
        fn(x)
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn(x)
        times.append((time.perf_counter() - t0) * 1e3)
    return RuntimeStats(
        input_dims=tuple(input_dims),
        warmup=warmup,
        iters=iters,
        per_iteration_ms=times,
        median_ms=float(np.median(times)),
        p10_ms=float(np.percentile(times, 10)),
        p90_ms=float(np.percentile(times, 90)),
        dtype="binary32",
    )


@dataclass
class SweepRow:
    ch: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    normalized: float


def channel_sweep(
    base_config: ModelConfig,
    ch_list,
    input_dims=DEFAULT_INPUT_DIMS,
    warmup: int = 3,
    iters: int = 20,
    seed: int = 0,
) -> list[SweepRow]:
    """Runtime per channel count, normalized so the first entry maps to 0
    and the last to 1. Fresh random weights per width; accuracy is not
    measured here."""
    ch_list = list(ch_list)
    if len(ch_list) < 2:
        raise ConfigError("ch_list needs at least two entries")
    if ch_list != sorted(ch_list):
        raise ConfigError("ch_list must be sorted ascending")
    stats = []
    for ch in ch_list:
        cfg = dataclasses.replace(base_config, ch=int(ch))
        model = Model.build(cfg, seed)
        stats.append(measure_runtime(model, input_dims, warmup, iters, seed))
    t0, t1 = stats[0].median_ms, stats[-1].median_ms
    span = t1 - t0
    rows = []
    for ch, st in zip(ch_list, stats):
        if span == 0.0:
            norm = 1.0 if ch == ch_list[-1] else 0.0
        else:
            norm = (st.median_ms - t0) / span
        rows.append(SweepRow(int(ch), st.median_ms, st.p10_ms, st.p90_ms, norm))
    return rows


SWEEP_CSV_HEADER = ["ch", "median_ms", "p10_ms", "p90_ms", "normalized"]


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SWEEP_CSV_HEADER)
        for r in rows:
            writer.writerow([r.ch, r.median_ms, r.p10_ms, r.p90_ms, r.normalized])
