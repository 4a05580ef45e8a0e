"""Randomized invariant suites behind ``fastmax check`` and the acceptance tests.

Each check returns a :class:`CheckResult` carrying the worst measured value,
the limit it was held to, and a verdict.  Suites are lists of such rows.
"""
from __future__ import annotations

import math
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import _backend, oracle
from .core import (AttentionConfig, apply_dropout, build_terms_causal, build_terms_flat,
                   fastmax_attention, fastmax_forward, fastmax_scores, normalize_qk)
from .errors import NumericalInstability
from .flops import FlopMeter
from .grad import backward, check_gradients, forward_with_cache
from .tensor import Rng

SUITES = ("forward", "grad", "dropout")
ORACLE_N = (1, 2, 3, 5, 16, 48, 64)
ORACLE_D = (1, 2, 4, 8, 16)
COMBOS = tuple((p, masked) for p in (1, 2) for masked in (False, True))


@dataclass
class CheckResult:
    suite: str
    name: str
    cases: int
    value: float
    limit: str
    passed: bool
    note: str = ""

    def format_row(self):
        verdict = "PASS" if self.passed else "FAIL"
        line = f"{self.suite:<8} {self.name:<34} {self.cases:>6} {self.value:>11.3e} {self.limit:>18}  {verdict}"
        return f"{line}  # {self.note}" if self.note else line


TABLE_HEADER = f"{'suite':<8} {'check':<34} {'cases':>6} {'measured':>11} {'limit':>18}  result"


def format_table(results):
    return "\n".join([TABLE_HEADER] + [r.format_row() for r in results])


def _tag(p, masked):
    return f"p={p} {'masked' if masked else 'flat'}"


def _rel_dev(a, b, floor):
    """Worst ``|a - b| / max(|b|, floor)``; at most ``rtol`` means ``allclose``-like agreement."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def _pick(rng, choices):
    return int(choices[int(rng.integers(0, len(choices), 1)[0])])


def _qkv(rng, n, d):
    return tuple(rng.normal((n, d)) for _ in range(3))


# -- forward -------------------------------------------------------------------------

def _streamed(pair, v, p, masked):
    fv, g = fastmax_scores(pair.qh, pair.kh, v, p, masked)
    return fv / g[:, None]


def oracle_equivalence(p, masked, trials, rng, n_choices=ORACLE_N, d_choices=ORACLE_D,
                       rtol=1e-10, atol=1e-12):
    """Stored-term and streamed factorized outputs against the explicit double loop.

    A degree-1 instance with a vanishing denominator must be rejected by every
    path; such instances are counted in the note, not as comparisons.
    """
    worst, singular, ok = 0.0, 0, True
    build = build_terms_causal if masked else build_terms_flat
    for _ in range(trials):
        n, d = _pick(rng, n_choices), _pick(rng, d_choices)
        q, k, v = _qkv(rng, n, d)
        pair = normalize_qk(q, k)
        outcomes = []
        for path in (
            lambda: oracle.fastmax_naive(pair.qh, pair.kh, v, p, masked),
            lambda: fastmax_forward(pair.qh, build(pair.kh, v, p), p, masked),
            lambda: _streamed(pair, v, p, masked),
        ):
            try:
                outcomes.append(path())
            except NumericalInstability:
                outcomes.append(None)
        if any(o is None for o in outcomes):
            singular += 1
            ok &= all(o is None for o in outcomes)
            continue
        ref = outcomes[0]
        for got in outcomes[1:]:
            worst = max(worst, _rel_dev(got, ref, atol / rtol))
    return CheckResult("forward", f"oracle_equivalence {_tag(p, masked)}", trials, worst,
                       f"<= {rtol:g}", ok and worst <= rtol,
                       f"{singular} singular (rejected by all paths)" if singular else "")


def causality(p, trials, rng, max_n=32, max_d=8, tol=1e-12):
    """Masked rows before ``j`` ignore any change to token ``j`` of Q, K and V."""
    cfg = AttentionConfig(p=p, masked=True)
    worst = 0.0
    done = 0
    while done < trials:
        n = int(rng.integers(2, max_n + 1, 1)[0])
        d = int(rng.integers(1, max_d + 1, 1)[0])
        j = int(rng.integers(1, n, 1)[0])
        q, k, v = _qkv(rng, n, d)
        q2, k2, v2 = q.copy(), k.copy(), v.copy()
        for a in (q2, k2, v2):
            a[j] += rng.normal(d) * 3.0
        try:
            before = fastmax_attention(q, k, v, cfg)
            after = fastmax_attention(q2, k2, v2, cfg)
        except NumericalInstability:
            continue
        worst = max(worst, float(np.max(np.abs(before[:j] - after[:j]))))
        done += 1
    return CheckResult("forward", f"causality p={p}", trials, worst, f"<= {tol:g}", worst <= tol)


def row_stochastic(trials, rng, max_n=64, max_d=16, tol=1e-9, masked=None):
    """p=2 attention rows sum to one with every unmasked weight positive.

    ``masked=None`` alternates between flat and causal instances.
    """
    worst, positive = 0.0, True
    fixed = masked
    for t in range(trials):
        masked = bool(t % 2) if fixed is None else fixed
        n = int(rng.integers(1, max_n + 1, 1)[0])
        d = int(rng.integers(1, max_d + 1, 1)[0])
        q, k, v = _qkv(rng, n, d)
        pair = normalize_qk(q, k)
        a = oracle.explicit_attention(pair.qh, pair.kh, 2, masked)
        keep = np.tril(np.ones((n, n), dtype=bool)) if masked else np.ones((n, n), dtype=bool)
        positive &= bool(np.all(a[keep] > 0))
        _, g = fastmax_scores(pair.qh, pair.kh, v, 2, masked)
        positive &= bool(np.all(g > 0))
        worst = max(worst, float(np.max(np.abs(a.sum(axis=1) - 1.0))))
    tag = "" if fixed is None else (" masked" if fixed else " flat")
    return CheckResult("forward", f"row_stochastic p=2{tag}", trials, worst, f"<= {tol:g}",
                       positive and worst <= tol, "" if positive else "non-positive weight seen")


def linearity_in_v(p, trials, rng, max_n=32, max_d=8, rtol=1e-10):
    cfg = AttentionConfig(p=p)
    worst = 0.0
    done = 0
    while done < trials:
        n = int(rng.integers(1, max_n + 1, 1)[0])
        d = int(rng.integers(1, max_d + 1, 1)[0])
        q, k, v1 = _qkv(rng, n, d)
        v2 = rng.normal((n, d))
        try:
            lhs = fastmax_attention(q, k, v1 + v2, cfg)
            rhs = fastmax_attention(q, k, v1, cfg) + fastmax_attention(q, k, v2, cfg)
        except NumericalInstability:
            continue
        worst = max(worst, _rel_dev(lhs, rhs, 1.0))
        done += 1
    return CheckResult("forward", f"linearity_in_v p={p}", trials, worst, f"<= {rtol:g}", worst <= rtol)


def term_flops(n, d, p, masked=False, rng=None):
    """Counted flops of building the terms and evaluating them at N queries."""
    rng = rng or Rng(0)
    q, k, v = _qkv(rng, n, d)
    pair = normalize_qk(q, k)
    build = build_terms_causal if masked else build_terms_flat
    with FlopMeter() as meter:
        fastmax_forward(pair.qh, build(pair.kh, v, p), p, masked)
    return meter.total


def flop_growth_in_n(rng):
    """Doubling N doubles the term+forward flop count exactly."""
    ratios = []
    for p, masked in COMBOS:
        for n, d in ((64, 4), (256, 8)):
            ratios.append(term_flops(2 * n, d, p, masked, rng) / term_flops(n, d, p, masked, rng))
    worst = max(abs(r - 2.0) for r in ratios)
    return CheckResult("forward", "flops_linear_in_n", len(ratios), worst, "== 0 (|ratio-2|)", worst == 0.0)


def flop_growth_in_d(rng, n=64):
    """Doubling D (D >= 8) at p=2 multiplies the flop count by about 8."""
    ratios = [term_flops(n, 2 * d, 2, False, rng) / term_flops(n, d, 2, False, rng) for d in (8, 16, 32)]
    worst = max(abs(r / 8.0 - 1.0) for r in ratios)
    return CheckResult("forward", "flops_cubic_in_d p=2", len(ratios), worst, "<= 0.15 (|r/8-1|)",
                       worst <= 0.15, "ratios " + ",".join(f"{r:.3f}" for r in ratios))


def prefix_consistency(p, trials, rng, max_n=24, max_d=8, rtol=1e-12):
    """Causal terms at row i equal flat terms over rows 0..i."""
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, max_n + 1, 1)[0])
        d = int(rng.integers(1, max_d + 1, 1)[0])
        _, k, v = _qkv(rng, n, d)
        kh = normalize_qk(k, k).kh
        causal = build_terms_causal(kh, v, p).arrays()
        for i in range(n):
            flat = build_terms_flat(kh[: i + 1], v[: i + 1], p).arrays()
            for name, arr in flat.items():
                if arr is not None:
                    worst = max(worst, _rel_dev(causal[name][i], arr, 1.0))
    return CheckResult("forward", f"prefix_consistency p={p}", trials, worst, f"<= {rtol:g}", worst <= rtol)


def forward_suite(trials, rng):
    out = [oracle_equivalence(p, m, trials, rng) for p, m in COMBOS]
    out += [causality(p, trials, rng) for p in (1, 2)]
    out.append(row_stochastic(trials, rng))
    out += [linearity_in_v(p, trials, rng) for p in (1, 2)]
    out += [flop_growth_in_n(rng), flop_growth_in_d(rng)]
    out += [prefix_consistency(p, max(1, trials // 5), rng) for p in (1, 2)]
    return out


# -- gradients ---------------------------------------------------------------------

def _poly(z, p):
    return sum(z ** ell / math.factorial(ell) for ell in range(p + 1))


def score_derivative_formula(p, masked, trials, rng, max_n=12, max_d=6, h=1e-20, tol=1e-10):
    """``f'(s)/g (v - o)`` against complex-step derivatives of ``o`` in each score."""
    worst = 0.0
    done = 0
    while done < trials:
        n = int(rng.integers(1, max_n + 1, 1)[0])
        d = int(rng.integers(1, max_d + 1, 1)[0])
        q, k, v = _qkv(rng, n, d)
        pair = normalize_qk(q, k)
        try:
            formula = oracle.score_derivative(pair.qh, pair.kh, v, p, masked)
        except NumericalInstability:
            continue
        s = pair.qh @ pair.kh.T
        for i in range(n):
            last = i + 1 if masked else n
            for l in range(last):
                z = s[i, :last].astype(np.complex128)
                z[l] += 1j * h
                f = _poly(z, p)
                o = (f @ v[:last]) / f.sum()
                worst = max(worst, float(np.max(np.abs(o.imag / h - formula[i, :, l]))))
        done += 1
    return CheckResult("grad", f"score_derivative {_tag(p, masked)}", trials, worst, f"<= {tol:g}", worst <= tol)


def gradient_fidelity(p, masked, trials, rng):
    rep = check_gradients(AttentionConfig(p=p, masked=masked), trials, rng)
    fd = max(r.fd_error for r in rep.rows)
    naive = max(r.naive_error for r in rep.rows)
    note = f"max naive rel err {naive:.3e} (limit {rep.naive_rtol:g})"
    if rep.skipped:
        note += f"; {rep.skipped} ill-conditioned redrawn"
    return CheckResult("grad", f"custom_vs_fd {_tag(p, masked)}", trials, fd, f"<= {rep.fd_rtol:g}",
                       rep.passed, note)


def gradient_determinism(rng, n=32, d=8):
    worst = 0.0
    for p, masked in COMBOS:
        cfg = AttentionConfig(p=p, masked=masked)
        q, k, v = _qkv(rng, n, d)
        up = rng.normal((n, d))
        _, cache = forward_with_cache(q, k, v, cfg)
        a, b = backward(cache, cfg, up), backward(cache, cfg, up)
        same = all(np.array_equal(x, y) for x, y in zip(a, b))
        worst = max(worst, 0.0 if same else 1.0)
    return CheckResult("grad", "bitwise_determinism", len(COMBOS), worst, "== 0 (mismatches)", worst == 0.0)


def backward_peak_bytes(n, d, p=2, masked=False, rng=None):
    """Peak bytes allocated while :func:`backward` runs (cache already built)."""
    rng = rng or Rng(0)
    cfg = AttentionConfig(p=p, masked=masked)
    q, k, v = _qkv(rng, n, d)
    up = rng.normal((n, d))
    _, cache = forward_with_cache(q, k, v, cfg)
    backward(cache, cfg, up)  # warm any lazy imports / caches
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        backward(cache, cfg, up)
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return peak - base


def memory_base_n():
    """Smallest N at which the active backend's backward memory is token-dominated.

    The numpy fallback works in fixed-size blocks whose temporaries swamp the
    O(N D) arrays until N is in the thousands.
    """
    return 256 if _backend.active_name() == "compiled" else 8192


def memory_growth(rng, d=8, n=None):
    n = n or memory_base_n()
    ratios = []
    for p, masked in COMBOS:
        ratios.append(backward_peak_bytes(2 * n, d, p, masked, rng) / backward_peak_bytes(n, d, p, masked, rng))
    worst = max(abs(r - 2.0) for r in ratios)
    return CheckResult("grad", f"backward_memory_linear N={n}->{2 * n}", len(ratios), worst,
                       "<= 0.3 (|ratio-2|)", worst <= 0.3,
                       "ratios " + ",".join(f"{r:.3f}" for r in ratios))


def grad_suite(trials, rng):
    out = [gradient_fidelity(p, m, trials, rng) for p, m in COMBOS]
    out += [score_derivative_formula(p, m, max(1, trials // 5), rng) for p, m in COMBOS]
    out += [gradient_determinism(rng), memory_growth(rng)]
    return out


# -- dropout -------------------------------------------------------------------------

def _terms_for(rng, n, d, p, masked):
    _, k, v = _qkv(rng, n, d)
    kh = normalize_qk(k, k).kh
    return (build_terms_causal if masked else build_terms_flat)(kh, v, p)


def quadratic_dropout_isolation(trials, rng, rate=0.3):
    """Quadratic-mode dropout touches x3/y3 only; the lower terms stay bit-identical."""
    bad = 0
    for t in range(trials):
        terms = _terms_for(rng, int(rng.integers(2, 17, 1)[0]), int(rng.integers(1, 9, 1)[0]), 2, bool(t % 2))
        dropped = apply_dropout(terms, "quadratic", rate, rng)
        for name in ("x1", "x2", "y1", "y2"):
            if not np.array_equal(getattr(terms, name), getattr(dropped, name)):
                bad += 1
    return CheckResult("dropout", "quadratic_keeps_low_order", trials, float(bad), "== 0 (changed)", bad == 0)


def standard_dropout_bias(rng, masks=200, rate=0.1, n=16, d=4, tol=0.10):
    """Mean of standard-mode dropped terms over many masks is close to the undropped terms.

    Deviation is measured per term as ``||mean - orig|| / ||orig||`` (Frobenius).
    """
    worst = 0.0
    for masked in (False, True):
        terms = _terms_for(rng, n, d, 2, masked)
        orig = {k: np.asarray(a, dtype=np.float64) for k, a in terms.arrays().items()}
        acc = {k: np.zeros_like(a) for k, a in orig.items()}
        for _ in range(masks):
            for k, a in apply_dropout(terms, "standard", rate, rng).arrays().items():
                acc[k] += a
        for k, a in orig.items():
            worst = max(worst, float(np.linalg.norm(acc[k] / masks - a) / np.linalg.norm(a)))
    return CheckResult("dropout", f"standard_unbiased ({masks} masks)", 2 * masks, worst, f"<= {tol:g}", worst <= tol)


def one_d_channel_consistency(trials, rng, rate=0.5):
    """A channel dropped in ``one_d`` mode vanishes from every term that indexes it."""
    bad = 0
    for t in range(trials):
        p = 1 + t % 2
        terms = _terms_for(rng, 8, int(rng.integers(2, 9, 1)[0]), p, False)
        dropped = apply_dropout(terms, "one_d", rate, rng)
        gone = np.flatnonzero((dropped.y2 == 0) & (terms.y2 != 0))
        for m in gone:
            if np.any(dropped.x2[:, m] != 0):
                bad += 1
            if p == 2 and (np.any(dropped.x3[:, m, :] != 0) or np.any(dropped.y3[m, :] != 0)):
                bad += 1
        if not np.array_equal(terms.x1, dropped.x1):
            bad += 1
    return CheckResult("dropout", "one_d_drops_whole_channels", trials, float(bad), "== 0 (violations)", bad == 0)


def zero_rate_identity(rng):
    terms = _terms_for(rng, 8, 4, 2, False)
    same = all(apply_dropout(terms, mode, 0.0, rng) is terms for mode in ("standard", "one_d", "quadratic"))
    return CheckResult("dropout", "rate_zero_is_identity", 3, 0.0 if same else 1.0, "== 0", same)


def dropout_suite(trials, rng):
    return [
        quadratic_dropout_isolation(trials, rng),
        standard_dropout_bias(rng),
        one_d_channel_consistency(trials, rng),
        zero_rate_identity(rng),
    ]


def run_suite(name, trials, rng):
    """Results for one suite, or all of them for ``name == "all"``."""
    table = {"forward": forward_suite, "grad": grad_suite, "dropout": dropout_suite}
    names = SUITES if name == "all" else (name,)
    out = []
    for n in names:
        out.extend(table[n](trials, rng))
    return out
