"""Wall-clock and flop-count scaling of softmax vs Fastmax forward passes."""
from __future__ import annotations

import contextlib
import io
import math
import os
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .core import AttentionConfig, fastmax_attention
from .errors import ConfigError, MemoryBudgetError
from .flops import FlopMeter
from .oracle import softmax_attention
from .tensor import Rng

IMPLS = ("softmax_naive", "fastmax1", "fastmax2")
CSV_HEADER = "impl,masked,n,d,reps,mean_ms,std_ms,mults,adds"
DEFAULT_BUDGET = 8 * 1024**3
BUDGET_ENV = "FASTMAX_MEM_BUDGET_BYTES"


def default_budget():
    raw = os.environ.get(BUDGET_ENV)
    return int(raw) if raw else DEFAULT_BUDGET


@dataclass(frozen=True)
class BenchRecord:
    impl: str
    masked: bool
    n: int
    d: int
    reps: int
    mean_ms: float
    std_ms: float
    mults: int
    adds: int

    @property
    def flops(self):
        return self.mults + self.adds

    @property
    def over_budget(self):
        return self.mean_ms < 0

    def csv_row(self):
        return (f"{self.impl},{str(self.masked).lower()},{self.n},{self.d},{self.reps},"
                f"{self.mean_ms:.6g},{self.std_ms:.6g},{self.mults},{self.adds}")


@dataclass(frozen=True)
class ScalingFit:
    slope: float
    intercept: float
    r2: float

    def summary(self, label="mean_ms"):
        return f"# fit log({label}) ~ log(n): slope={self.slope:.4f} intercept={self.intercept:.4f} r2={self.r2:.5f}"


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def attention_fn(impl, masked):
    if impl == "softmax_naive":
        return lambda q, k, v: softmax_attention(q, k, v, masked)
    if impl in ("fastmax1", "fastmax2"):
        cfg = AttentionConfig(p=int(impl[-1]), masked=masked)
        return lambda q, k, v: fastmax_attention(q, k, v, cfg)
    raise ConfigError(f"unknown impl {impl!r}; choose from {IMPLS}")


def check_budget(impl, n, itemsize, budget):
    if impl == "softmax_naive":
        need = n * n * itemsize
        if need > budget:
            raise MemoryBudgetError(n, need, budget)


def measure_flops(impl, n, d, masked=False, rng=None):
    rng = rng or Rng(0)
    q, k, v = (rng.normal((n, d)) for _ in range(3))
    fn = attention_fn(impl, masked)
    with FlopMeter() as meter:
        fn(q, k, v)
    return meter


def run_bench(impl, masked, n_list, d, reps, rng, budget=None, flop_only=False,
              dtype=np.float64, on_budget="record"):
    """One :class:`BenchRecord` per N: warm-up, ``reps`` timed runs, one metered run.

    Over-budget softmax sizes raise :class:`MemoryBudgetError`, or with
    ``on_budget="record"`` produce a row with ``mean_ms = -1``.
    """
    if reps < 3:
        raise ConfigError("reps must be >= 3")
    if any(n < 1 for n in n_list):
        raise ConfigError("every N must be >= 1")
    budget = default_budget() if budget is None else budget
    fn = attention_fn(impl, masked)
    itemsize = np.dtype(dtype).itemsize
    records = []
    for n in n_list:
        try:
            check_budget(impl, n, itemsize, budget)
        except MemoryBudgetError:
            if on_budget != "record":
                raise
            records.append(BenchRecord(impl, masked, n, d, reps, -1.0, 0.0, 0, 0))
            continue
        q, k, v = (rng.normal((n, d)).astype(dtype) for _ in range(3))
        with FlopMeter() as meter:
            fn(q, k, v)
        mean_ms = std_ms = 0.0
        if not flop_only:
            times = []
            with _single_thread():
                fn(q, k, v)
                for _ in range(reps):
                    t0 = time.perf_counter()
                    fn(q, k, v)
                    times.append((time.perf_counter() - t0) * 1e3)
            mean_ms = statistics.fmean(times)
            std_ms = statistics.pstdev(times)
        records.append(BenchRecord(impl, masked, n, d, reps, mean_ms, std_ms, meter.mults, meter.adds))
    return records


def fit_scaling(records, metric="time"):
    """Least-squares slope of log(metric) against log(N).

    ``metric`` is ``"time"`` (mean_ms) or ``"flops"`` (mults + adds).
    Over-budget rows are ignored.
    """
    recs = [r for r in records if not r.over_budget]
    if len({(r.impl, r.d, r.masked) for r in recs}) > 1:
        raise ConfigError("records mix implementations or head sizes")
    ns = sorted({r.n for r in recs})
    if len(recs) < 4 or len(ns) != len(recs) or ns[-1] < 8 * ns[0]:
        raise ConfigError("need >= 4 records with distinct N spanning >= 8x")
    x = np.log([r.n for r in recs])
    y = np.log([r.mean_ms if metric == "time" else r.flops for r in recs])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(float(slope), float(intercept), r2)


def flop_crossover(d, p, masked=False, n_max=1 << 22):
    """Smallest N at which Fastmax-p uses no more counted flops than softmax."""
    if d < 1:
        raise ConfigError("d must be >= 1")
    fast = f"fastmax{p}"

    def fastmax_wins(n):
        f = measure_flops(fast, n, d, masked).total
        s = measure_flops("softmax_naive", n, d, masked).total
        return f <= s

    hi = 1
    while not fastmax_wins(hi):
        hi *= 2
        if hi > n_max:
            raise ConfigError(f"no crossover below N={n_max}")
    lo = hi // 2
    # invariant: fastmax loses at lo (or lo == 0), wins at hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fastmax_wins(mid):
            hi = mid
        else:
            lo = mid
    return hi


def timed_crossover(d, p, masked=False, reps=3, n_start=16, budget=None, rng=None):
    """First power-of-two N where Fastmax-p is faster than softmax by wall clock.

    Returns ``None`` if the softmax memory budget is hit first.
    """
    rng = rng or Rng(0)
    budget = default_budget() if budget is None else budget
    n = n_start
    while True:
        try:
            check_budget("softmax_naive", n, 8, budget)
        except MemoryBudgetError:
            return None
        soft, fast = (run_bench(impl, masked, [n], d, reps, rng, budget)[0]
                      for impl in ("softmax_naive", f"fastmax{p}"))
        if fast.mean_ms <= soft.mean_ms:
            return n
        n *= 2


def write_csv(records, out, fit=None, fit_label="mean_ms"):
    out.write(CSV_HEADER + "\n")
    for r in records:
        out.write(r.csv_row() + "\n")
    if fit is not None:
        out.write(fit.summary(fit_label) + "\n")


def records_to_csv(records, fit=None, fit_label="mean_ms"):
    buf = io.StringIO()
    write_csv(records, buf, fit, fit_label)
    return buf.getvalue()
