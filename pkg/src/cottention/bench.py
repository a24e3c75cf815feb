"""Time and tracked-memory sweeps over sequence length or head dimension.

Each implementation is run on deterministic single-precision inputs, once
to warm up and then ``reps`` times. Wall time is the median over reps and
``peak_bytes`` is the tracked-allocator high-water mark (inputs and the
returned output are not counted).
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import os
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import memory
from .causal import DEFAULT_CHUNK, causal_cos_attention
from .config import AttentionConfig
from .core_ops import bidirectional_cos_attention, softmax_attention
from .errors import FitError
from .recurrent import stream_sequence

log = logging.getLogger(__name__)

IMPLS = ("softmax", "cosine-bidir", "cosine-causal", "cosine-stream")
AXES = ("seq", "dim")
CSV_HEADER = ("impl", "axis", "s", "d", "reps", "wall_ns_median", "peak_bytes", "status")


@dataclass(frozen=True)
class BenchRecord:
    impl: str
    axis: str
    s: int
    d: int
    reps: int
    wall_ns: int
    peak_bytes: int
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class ScalingFit:
    impl: str
    axis: str
    metric: str
    exponent: float
    r2: float
    n_points: int


@dataclass
class BenchConfig:
    N: int = 1
    H: int = 8
    s: int = 1024
    d: int = 64
    chunk_len: int = DEFAULT_CHUNK
    causal_softmax: bool = True
    dtype: str = "float32"
    seed: int = 0


def _inputs(cfg: BenchConfig, s: int, d: int):
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.dtype)
    shape = (cfg.N, cfg.H, s, d)
    return tuple(rng.standard_normal(shape, dtype=np.float32).astype(dtype, copy=False) for _ in range(3))


def make_runner(impl: str, cfg: BenchConfig, s: int, d: int) -> Callable[[], np.ndarray]:
    Q, K, V = _inputs(cfg, s, d)
    acfg = AttentionConfig(N=cfg.N, H=cfg.H, s=s, d_key=d, d_value=d)
    if impl == "softmax":
        return lambda: softmax_attention(Q, K, V, causal=cfg.causal_softmax)
    if impl == "cosine-bidir":
        return lambda: bidirectional_cos_attention(Q, K, V, acfg, grouping="kv-first")
    if impl == "cosine-causal":
        return lambda: causal_cos_attention(Q, K, V, acfg, chunk_len=cfg.chunk_len)
    if impl == "cosine-stream":
        return lambda: stream_sequence(Q, K, V, acfg)
    raise ValueError(f"unknown impl {impl!r}; expected one of {IMPLS}")


def measure(run: Callable[[], np.ndarray], reps: int = 5, warmup: int = 1) -> tuple[int, int]:
    """Median wall time in ns and tracked peak bytes of ``run``."""
    for _ in range(warmup):
        run()
    times = []
    peaks = set()
    for _ in range(reps):
        with memory.track() as tracker:
            t0 = time.perf_counter_ns()
            run()
            times.append(time.perf_counter_ns() - t0)
        peaks.add(tracker.peak)
    if len(peaks) != 1:
        log.warning("tracked peak varied across reps: %s", sorted(peaks))
    return int(statistics.median(times)), max(peaks)


def run_sweep(
    impl: str,
    axis: str,
    points: Iterable[int],
    fixed: BenchConfig | None = None,
    reps: int = 5,
    warmup: int = 1,
) -> list[BenchRecord]:
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    if reps < 3:
        raise ValueError("reps must be >= 3")
    points = [int(p) for p in points]
    if any(b <= a for a, b in zip(points, points[1:])):
        raise ValueError(f"points must be strictly increasing, got {points}")
    fixed = fixed if fixed is not None else BenchConfig()

    records = []
    for p in points:
        s, d = (p, fixed.d) if axis == "seq" else (fixed.s, p)
        try:
            wall_ns, peak = measure(make_runner(impl, fixed, s, d), reps, warmup)
            rec = BenchRecord(impl, axis, s, d, reps, max(wall_ns, 1), peak)
        except MemoryError:
            log.warning("%s ran out of memory at s=%d d=%d", impl, s, d)
            rec = BenchRecord(impl, axis, s, d, reps, 0, 0, "failed")
        log.info("%s", rec)
        records.append(rec)
    return records


def _x_of(rec: BenchRecord) -> int:
    return rec.s if rec.axis == "seq" else rec.d


def _metric_of(rec: BenchRecord, metric: str) -> int:
    if metric == "time":
        return rec.wall_ns
    if metric == "memory":
        return rec.peak_bytes
    raise ValueError(f"metric must be 'time' or 'memory', got {metric!r}")


def fit_exponent(records: list[BenchRecord], metric: str = "time") -> ScalingFit:
    """Least-squares slope of log(metric) against log(s) (or log(d))."""
    good = [r for r in records if r.ok and _metric_of(r, metric) > 0]
    if len(good) < 4:
        raise FitError(f"need at least 4 valid points, got {len(good)}")
    x = np.log([_x_of(r) for r in good])
    y = np.log([_metric_of(r, metric) for r in good])
    if math.exp(x.max() - x.min()) < 8 - 1e-9:
        raise FitError("points must span at least an 8x range")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return ScalingFit(good[0].impl, good[0].axis, metric, float(slope), r2, len(good))


def growth_ratios(records: list[BenchRecord], metric: str = "memory") -> list[float]:
    """Metric ratio between consecutive valid points."""
    good = [r for r in records if r.ok]
    return [_metric_of(b, metric) / _metric_of(a, metric) for a, b in zip(good, good[1:])]


def emit_csv(records: list[BenchRecord], fits: list[ScalingFit], path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in records:
                writer.writerow([r.impl, r.axis, r.s, r.d, r.reps, r.wall_ns, r.peak_bytes, r.status])
            for f in fits:
                fh.write(
                    f"# fit impl={f.impl} axis={f.axis} metric={f.metric} "
                    f"exponent={f.exponent!r} r2={f.r2!r} points={f.n_points}\n"
                )
    except OSError as exc:
        raise OSError(f"cannot write benchmark CSV to {path}: {exc}") from exc


def read_csv(path) -> tuple[list[BenchRecord], list[ScalingFit]]:
    records, fits = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    for line in lines:
        if line.startswith("# fit "):
            kv = dict(item.split("=", 1) for item in line[len("# fit "):].split())
            fits.append(ScalingFit(kv["impl"], kv["axis"], kv["metric"], float(kv["exponent"]),
                                   float(kv["r2"]), int(kv["points"])))
    reader = csv.DictReader(body)
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected header {reader.fieldnames} in {path}")
    for row in reader:
        records.append(BenchRecord(
            row["impl"], row["axis"], int(row["s"]), int(row["d"]), int(row["reps"]),
            int(row["wall_ns_median"]), int(row["peak_bytes"]), row["status"],
        ))
    return records, fits


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS/OpenMP worker threads at ``$COTT_THREADS`` when it is set."""
    limit = os.environ.get("COTT_THREADS")
    if not limit:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(limit)):
        yield
