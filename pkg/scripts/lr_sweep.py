"""Sweep SGD learning rates and gradient caps for the teacher-student task.

Prints one line per (impl, clip, lr) with, for each seed, the final/initial
loss ratio and the fraction of steps on which the loss went up.  The defaults
in ``fastmax.train`` were picked from this table: a ratio at most 0.1 on the
first three seeds and, where reachable, at most 10% rising steps.
"""
import argparse
import math

import numpy as np

from fastmax.errors import TrainingDiverged
from fastmax.train import IMPLS, TrainConfig, train


def sweep(impls, lrs, clips, seeds, steps):
    for impl in impls:
        for clip in clips:
            for lr in lrs:
                ratios, rising = [], []
                for seed in seeds:
                    cfg = TrainConfig(impl=impl, lr=lr, clip=clip, seed=seed, steps=steps)
                    try:
                        losses = train(cfg).losses
                        ratios.append(losses[-1] / losses[0])
                        rising.append(float(np.mean(np.diff(losses) > 0)))
                    except TrainingDiverged:
                        ratios.append(math.inf)
                        rising.append(math.nan)
                worst = max(ratios[:3])
                mark = "ok" if worst <= 0.1 else "--"
                cells = " ".join(f"{r:.3f}/{u:.2f}" for r, u in zip(ratios, rising))
                yield (f"{impl:14s} clip={clip!s:5s} lr={lr:<6g} worst3={worst:.3f} {mark}  "
                       f"ratio/rising [{cells}]")


def _floats(text):
    return [None if t == "none" else float(t) for t in text.split(",")]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--impl", default=",".join(IMPLS))
    ap.add_argument("--lr", default="0.05,0.25,0.5,1,2,2.5,3,4")
    ap.add_argument("--clip", default="none,1,0.1")
    ap.add_argument("--seeds", type=int, default=8)
    ap.add_argument("--steps", type=int, default=500)
    args = ap.parse_args(argv)
    for line in sweep(args.impl.split(","), _floats(args.lr), _floats(args.clip),
                      range(args.seeds), args.steps):
        print(line, flush=True)


if __name__ == "__main__":
    main()
