"""Time the compiled kernels against the NumPy fallback.

For each (degree, masked, N) the forward pass and one forward+backward step
are timed under both backends on identical inputs, and the outputs are
compared so a speedup never hides a wrong answer.  Prints CSV.
"""
import argparse
import statistics
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from fastmax import _backend
from fastmax.core import AttentionConfig, fastmax_attention
from fastmax.grad import backward, forward_with_cache
from fastmax.tensor import Rng

HEADER = "p,masked,n,d,pass,python_ms,compiled_ms,speedup,max_abs_diff"


def _time(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        out = fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times), out


def _passes(cfg, q, k, v, up):
    def fwd():
        return fastmax_attention(q, k, v, cfg)

    def fwd_bwd():
        _, cache = forward_with_cache(q, k, v, cfg)
        return np.concatenate(list(backward(cache, cfg, up)), axis=1)

    return {"forward": fwd, "forward+backward": fwd_bwd}


def compare(ns, d, reps, seed):
    if "compiled" not in _backend.BACKENDS:
        sys.exit("compiled extension not built; run `python3 setup.py build_ext --inplace`")
    rng = Rng(seed)
    for p in (1, 2):
        for masked in (False, True):
            cfg = AttentionConfig(p=p, masked=masked)
            for n in ns:
                q, k, v, up = (rng.normal((n, d)) for _ in range(4))
                for name, fn in _passes(cfg, q, k, v, up).items():
                    res = {}
                    for backend in ("python", "compiled"):
                        prev = _backend.set_backend(backend)
                        try:
                            res[backend] = _time(fn, reps)
                        finally:
                            _backend.set_backend(prev)
                    (py_ms, py_out), (c_ms, c_out) = res["python"], res["compiled"]
                    diff = float(np.max(np.abs(py_out - c_out)))
                    yield (f"{p},{str(masked).lower()},{n},{d},{name},{py_ms:.4g},{c_ms:.4g},"
                           f"{py_ms / c_ms:.3g},{diff:.3g}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", default="256,1024,4096,16384")
    ap.add_argument("--d", type=int, default=16)
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    print(HEADER)
    with threadpool_limits(limits=1):
        for line in compare([int(x) for x in args.n.split(",")], args.d, args.reps, args.seed):
            print(line, flush=True)


if __name__ == "__main__":
    main()
