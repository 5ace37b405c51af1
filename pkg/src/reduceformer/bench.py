"""Micro-benchmark harness: timed, counted runs of the attention ops and
whole models, with CSV/JSON emission.

Wall-clock numbers carry dispersion (median/p5/p95 over R runs after
mandatory warmup) and are never asserted against absolute targets; op
counts come from the analytic formulas and are exactly reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .attention import (flop_count_attention, random_bundle,
                        reduce_former_attention, relu_linear_attention)
from .model import VariantConfig, build_variant, cost_report, forward
from .tensor import Rng, Tensor

TARGETS = ("attention_rf", "attention_eq1", "model")

_SHORT_TARGETS = {"rf": "attention_rf", "eq1": "attention_eq1", "model": "model"}


def canonical_target(name: str) -> str:
    t = _SHORT_TARGETS.get(name, name)
    if t not in TARGETS:
        raise ValueError(f"unknown bench target {name!r}")
    return t


@dataclass(frozen=True)
class BenchSpec:
    """What to run and how often.  d/n apply to attention targets,
    variant/resolution to the model target."""

    target: str
    b: int = 1
    d: int = 64
    n: int = 196
    variant: str = "b1"
    resolution: Optional[int] = None
    repeats: int = 20
    warmup: int = 3
    threads: int = 1
    seed: int = 0
    eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "target", canonical_target(self.target))
        if self.repeats < 5:
            raise ValueError(f"repeats must be >= 5, got {self.repeats}")
        if self.warmup < 1:
            raise ValueError(f"warmup must be >= 1, got {self.warmup}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        if min(self.b, self.d, self.n) < 1:
            raise ValueError("b, d and n must be >= 1")


_ROW_FIELDS = ("target", "b", "d", "n", "variant", "resolution", "repeats",
               "warmup", "threads", "seed", "median_ms", "p5_ms", "p95_ms",
               "flops", "macs", "throughput_items_per_s")


@dataclass
class BenchRow:
    """One measured point: the spec echo plus timing stats and op counts."""

    spec: BenchSpec
    median_ms: float
    p5_ms: float
    p95_ms: float
    flops: int
    macs: int
    throughput_items_per_s: float = field(init=False)

    def __post_init__(self):
        if not (self.p5_ms <= self.median_ms <= self.p95_ms):
            raise ValueError("timing quantiles out of order")
        self.throughput_items_per_s = self.spec.b * 1000.0 / self.median_ms

    def as_dict(self) -> dict:
        s = self.spec
        return {
            "target": s.target, "b": s.b,
            "d": s.d if s.target != "model" else "",
            "n": s.n if s.target != "model" else "",
            "variant": s.variant if s.target == "model" else "",
            "resolution": s.resolution if s.target == "model" else "",
            "repeats": s.repeats, "warmup": s.warmup, "threads": s.threads,
            "seed": s.seed, "median_ms": self.median_ms, "p5_ms": self.p5_ms,
            "p95_ms": self.p95_ms, "flops": self.flops, "macs": self.macs,
            "throughput_items_per_s": self.throughput_items_per_s,
        }


def _build_target(spec: BenchSpec) -> tuple[Callable[[], Tensor], int, int]:
    """Returns (callable, flops, macs).  Model counts are per image (batch 1)."""
    if spec.target == "model":
        res = spec.resolution
        cfg = VariantConfig.preset(spec.variant) if spec.variant in ("b1", "b2", "b3") \
            else VariantConfig.preset("b1")
        if res is None:
            res = cfg.input_resolution
        m = build_variant(cfg, Rng(spec.seed))
        x = Rng(spec.seed + 1).tensor((spec.b, 3, res, res))
        rep = cost_report(m, res)
        return (lambda: forward(m, x)), rep.total_flops, rep.macs
    kind = "reduceformer" if spec.target == "attention_rf" else "relu_linear"
    bundle = random_bundle(spec.d, spec.n, spec.b, seed=spec.seed)
    rep = flop_count_attention(kind, spec.b, spec.d, spec.n)
    if kind == "reduceformer":
        fn = lambda: reduce_former_attention(bundle, spec.eps)  # noqa: E731
    else:
        fn = lambda: relu_linear_attention(bundle, spec.eps)  # noqa: E731
    return fn, rep.total_flops, rep.macs


def run_bench(spec: BenchSpec) -> BenchRow:
    """Warm up, time R runs on a monotonic clock, report stats and counts."""
    fn, flops, macs = _build_target(spec)
    old_threads = ops.get_num_threads()
    ops.set_num_threads(spec.threads)
    try:
        for _ in range(spec.warmup):
            fn()
        times_ms = np.empty(spec.repeats, dtype=np.float64)
        for i in range(spec.repeats):
            t0 = time.perf_counter_ns()
            fn()
            times_ms[i] = (time.perf_counter_ns() - t0) / 1e6
    finally:
        ops.set_num_threads(old_threads)
    p5, med, p95 = np.percentile(times_ms, [5.0, 50.0, 95.0])
    return BenchRow(spec=spec, median_ms=float(med), p5_ms=float(p5),
                    p95_ms=float(p95), flops=flops, macs=macs)


@dataclass
class ScalingResult:
    rows: list
    sweep_axis: str
    slope: Optional[float]  # log-log fit of flops vs the swept size; None for 1 point


def scaling_study(target: str, sweep: Sequence[int], axis: str = "n",
                  d: int = 64, n: int = 196, b: int = 1, repeats: int = 5,
                  warmup: int = 1, threads: int = 1, seed: int = 0) -> ScalingResult:
    """One BenchRow per sweep point plus a log-log slope of analytic flops
    against the swept size (token count N or channel dim d)."""
    target = canonical_target(target)
    if target == "model":
        raise ValueError("scaling_study sweeps the attention ops; bench models directly")
    if axis not in ("n", "d"):
        raise ValueError(f"sweep axis must be 'n' or 'd', got {axis!r}")
    sweep = [int(v) for v in sweep]
    if sweep != sorted(sweep) or len(set(sweep)) != len(sweep):
        raise ValueError("sweep must be strictly ascending")
    rows = []
    for v in sweep:
        spec = BenchSpec(target=target, b=b, d=v if axis == "d" else d,
                         n=v if axis == "n" else n, repeats=repeats,
                         warmup=warmup, threads=threads, seed=seed)
        rows.append(run_bench(spec))
    slope = None
    if len(rows) >= 2:
        xs = np.log(np.asarray(sweep, dtype=np.float64))
        ys = np.log(np.asarray([r.flops for r in rows], dtype=np.float64))
        slope = float(np.polyfit(xs, ys, 1)[0])
    return ScalingResult(rows=rows, sweep_axis=axis, slope=slope)


def compare_attention(d: int, n: int, b: int = 1, repeats: int = 50,
                      warmup: int = 3, seed: int = 0, eps: float = 1e-6) -> dict:
    """Run both attention kinds on the identical bundle; exact flop ratio,
    environment-dependent latency ratio, and output sanity flags."""
    bundle = random_bundle(d, n, b, seed=seed)
    rf_rep = flop_count_attention("reduceformer", b, d, n)
    eq1_rep = flop_count_attention("relu_linear", b, d, n)

    def timed(fn):
        for _ in range(warmup):
            out = fn(bundle, eps)
        times = np.empty(repeats, dtype=np.float64)
        for i in range(repeats):
            t0 = time.perf_counter_ns()
            out = fn(bundle, eps)
            times[i] = (time.perf_counter_ns() - t0) / 1e6
        return float(np.percentile(times, 50.0)), out

    rf_ms, rf_out = timed(reduce_former_attention)
    eq1_ms, eq1_out = timed(relu_linear_attention)
    finite = bool(np.isfinite(rf_out.data).all() and np.isfinite(eq1_out.data).all())
    return {
        "d": d, "n": n, "b": b, "repeats": repeats, "seed": seed,
        "flops_rf": rf_rep.total_flops, "flops_eq1": eq1_rep.total_flops,
        "macs_rf": rf_rep.macs, "macs_eq1": eq1_rep.macs,
        "flop_ratio_eq1_over_rf": eq1_rep.total_flops / rf_rep.total_flops,
        "median_ms_rf": rf_ms, "median_ms_eq1": eq1_ms,
        "latency_ratio_eq1_over_rf": eq1_ms / rf_ms if rf_ms > 0 else float("inf"),
        "outputs_finite": finite,
        "shapes_equal": rf_out.shape == eq1_out.shape,
        "rf_faster": rf_ms < eq1_ms,
    }


# ---------------------------------------------------------------------------
# report emission


def rows_to_csv(rows: Sequence[BenchRow]) -> str:
    lines = [",".join(_ROW_FIELDS)]
    for r in rows:
        d = r.as_dict()
        lines.append(",".join(_fmt(d[k]) for k in _ROW_FIELDS))
    return "\n".join(lines) + "\n"


def rows_to_json(rows: Sequence[BenchRow]) -> str:
    return json.dumps([r.as_dict() for r in rows], indent=2, sort_keys=True) + "\n"


def format_table(rows: Sequence[BenchRow]) -> str:
    cols = ("target", "b", "d", "n", "variant", "median_ms", "p5_ms", "p95_ms",
            "flops", "macs", "throughput_items_per_s")
    table = [cols] + [tuple(_fmt(r.as_dict()[c]) for c in cols) for r in rows]
    widths = [max(len(str(row[i])) for row in table) for i in range(len(cols))]
    out = []
    for row in table:
        out.append("  ".join(str(v).rjust(w) for v, w in zip(row, widths)))
    return "\n".join(out)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)
