"""Command-line entry point: ``fastmax {check,bench,attnmap,train,crossover}``.

Exit status is 0 on success, 1 when a check, training run or budget fails,
and 2 for bad flags or inputs rejected before any computation.
"""
from __future__ import annotations

import argparse
import contextlib
import sys

import numpy as np

from . import _backend, bench, checks, oracle
from .core import normalize_qk
from .errors import ConfigError, DimensionError, TrainingDiverged
from .tensor import Rng, read_matrix
from .train import DEFAULT_CLIP, IMPLS as TRAIN_IMPLS, TrainConfig, train

ATTNMAP_MAX_N = 4096
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _int_list(text):
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


@contextlib.contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            yield fh


@contextlib.contextmanager
def _backend_choice(name):
    if name is None:
        yield
        return
    try:
        prev = _backend.set_backend(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        yield
    finally:
        _backend.set_backend(prev)


# -- subcommands ---------------------------------------------------------------------

def cmd_check(args, out):
    rng = Rng(args.seed)
    with _backend_choice(args.backend):
        results = checks.run_suite(args.suite, args.trials, rng)
        used = _backend.active_name()
    out.write(checks.format_table(results) + "\n")
    failed = [r for r in results if not r.passed]
    out.write(f"# {len(results) - len(failed)}/{len(results)} checks passed "
              f"(backend={used}, seed={args.seed})\n")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(args, out):
    if any(b <= a for a, b in zip(args.n, args.n[1:])):
        raise ConfigError("--n must be strictly ascending")
    if args.reps < 3:
        raise ConfigError("--reps must be >= 3")
    dtype = np.float32 if args.f32 else np.float64
    with _backend_choice(args.backend):
        records = bench.run_bench(args.impl, args.masked, args.n, args.d, args.reps, Rng(args.seed),
                                  budget=args.budget, flop_only=args.flop_only, dtype=dtype)
    metric, label = ("flops", "mults+adds") if args.flop_only else ("time", "mean_ms")
    try:
        fit = bench.fit_scaling(records, metric)
    except ConfigError as exc:
        fit = None
        note = f"# fit skipped: {exc}"
    bench.write_csv(records, out, fit, label)
    if fit is None:
        out.write(note + "\n")
    return EXIT_OK


def attention_map(q, p, masked):
    """Explicit attention of ``q`` with itself (Q = K), after row normalization."""
    if len(q) > ATTNMAP_MAX_N:
        raise ConfigError(f"attnmap materializes N x N; N={len(q)} exceeds {ATTNMAP_MAX_N}")
    pair = normalize_qk(q, q)
    return oracle.explicit_attention(pair.qh, pair.kh, p, masked)


def format_pgm(a, masked=False):
    """Plain PGM (P2), min-max scaled to 0..255; a constant map is mid-gray.

    Masked entries are written as 0 even when negative degree-1 weights push
    the minimum below zero.
    """
    lo, hi = float(a.min()), float(a.max())
    if hi > lo:
        pix = np.rint((a - lo) / (hi - lo) * 255.0).astype(int)
    else:
        pix = np.full(a.shape, 128, dtype=int)
    if masked:
        pix[np.triu_indices(len(a), 1)] = 0
    rows = [" ".join(map(str, r)) for r in pix]
    return f"P2\n{a.shape[1]} {a.shape[0]}\n255\n" + "\n".join(rows) + "\n"


def format_csv(a):
    return "".join(",".join(f"{x:.17g}" for x in row) + "\n" for row in a)


def cmd_attnmap(args, out):
    if args.random is not None:
        if len(args.random) != 2 or min(args.random) < 1:
            raise ConfigError("--random expects n,d with both >= 1")
        n, d = args.random
        if n > ATTNMAP_MAX_N:
            raise ConfigError(f"N={n} exceeds {ATTNMAP_MAX_N}")
        q = Rng(args.seed).normal((n, d))
    else:
        try:
            q = read_matrix(args.input)
        except (OSError, DimensionError, ValueError) as exc:
            raise ConfigError(f"cannot read {args.input}: {exc}") from exc
    a = attention_map(q, args.p, args.masked)
    out.write(format_pgm(a, args.masked) if args.format == "pgm" else format_csv(a))
    return EXIT_OK


def cmd_train(args, out):
    cfg = TrainConfig(impl=args.impl, n=args.n, d_in=args.d_in, d=args.d, steps=args.steps,
                      lr=args.lr, seed=args.seed, masked=args.masked, batch=args.batch,
                      clip=args.clip or None)
    try:
        curve = train(cfg)
    except TrainingDiverged as exc:
        print(f"error: training diverged at step {exc.step} (loss={exc.loss})", file=sys.stderr)
        return EXIT_FAIL
    out.write(curve.to_csv())
    ratio = curve.ratio
    print(f"# {cfg.impl} lr={cfg.lr:g} clip={cfg.clip} final/initial={ratio:.4g} "
          f"({'ok' if ratio <= 0.1 else 'above 0.1'})", file=sys.stderr)
    return EXIT_OK if ratio <= 0.1 else EXIT_FAIL


def cmd_crossover(args, out):
    masked = str(args.masked).lower()
    n = bench.flop_crossover(args.d, args.p, args.masked)
    out.write(f"flop_crossover d={args.d} p={args.p} masked={masked} n={n}\n")
    if args.timed:
        with _backend_choice(args.backend):
            t = bench.timed_crossover(args.d, args.p, args.masked, reps=args.reps, rng=Rng(args.seed))
            used = _backend.active_name()
        shown = "none_within_budget" if t is None else t
        out.write(f"timed_crossover d={args.d} p={args.p} masked={masked} n={shown} backend={used}\n")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed, default=0, help="RNG seed (default 0)")
    common.add_argument("--out", default=None, help="output path (default stdout)")

    backend = argparse.ArgumentParser(add_help=False)
    backend.add_argument("--backend", choices=("auto", "compiled", "python"), default=None,
                         help="kernel backend (default: FASTMAX_BACKEND or auto)")

    ap = argparse.ArgumentParser(prog="fastmax", description="Fastmax attention tools.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", parents=[common, backend], help="run randomized invariant suites")
    p.add_argument("--suite", choices=("all",) + checks.SUITES, default="all")
    p.add_argument("--trials", type=_positive_int, default=50)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("bench", parents=[common, backend], help="time and flop-count one implementation")
    p.add_argument("--impl", choices=bench.IMPLS, required=True)
    p.add_argument("--masked", action="store_true")
    p.add_argument("--d", type=_positive_int, default=16)
    p.add_argument("--n", type=_int_list, default=[1024, 2048, 4096, 8192], help="comma-separated, ascending")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--flop-only", "--no-timing", dest="flop_only", action="store_true",
                   help="skip timing; only count flops (deterministic output)")
    p.add_argument("--f32", action="store_true", help="single-precision operands")
    p.add_argument("--budget", type=int, default=None,
                   help=f"softmax memory budget in bytes (default ${bench.BUDGET_ENV} or 8 GiB)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("attnmap", parents=[common], help="export an explicit attention map")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="matrix file used as both Q and K")
    src.add_argument("--random", type=_int_list, metavar="N,D", help="random Q = K of this shape")
    p.add_argument("--p", type=int, choices=(1, 2), default=2)
    p.add_argument("--masked", action="store_true")
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.set_defaults(func=cmd_attnmap)

    p = sub.add_parser("train", parents=[common], help="teacher-student training run")
    p.add_argument("--impl", choices=TRAIN_IMPLS, default="fastmax2")
    p.add_argument("--n", type=_positive_int, default=32)
    p.add_argument("--d-in", type=_positive_int, default=16)
    p.add_argument("--d", type=_positive_int, default=8)
    p.add_argument("--steps", type=_positive_int, default=500)
    p.add_argument("--lr", type=float, default=None, help="SGD step (default depends on --impl)")
    p.add_argument("--clip", type=float, default=DEFAULT_CLIP, help="gradient-norm cap; 0 disables")
    p.add_argument("--batch", type=_positive_int, default=4)
    p.add_argument("--masked", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossover", parents=[common, backend], help="flop (and timed) break-even N")
    p.add_argument("--d", type=_positive_int, default=32)
    p.add_argument("--p", type=int, choices=(1, 2), default=2)
    p.add_argument("--masked", action="store_true")
    p.add_argument("--timed", action="store_true", help="also measure the wall-clock crossover")
    p.add_argument("--reps", type=int, default=3)
    p.set_defaults(func=cmd_crossover)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with _output(args.out) as out:
            return args.func(args, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
