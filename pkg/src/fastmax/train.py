"""Teacher-student regression through a single attention head.

A frozen random head (the teacher) labels random token matrices; a student
head of the same kind is fitted by plain gradient descent on the mean squared
error.  The task is realizable, so the loss can reach zero.
"""
from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import oracle
from .core import AttentionConfig, standardize_rows
from .errors import ConfigError, NumericalInstability, TrainingDiverged
from .grad import backward, forward_with_cache, naive_backward
from .tensor import Rng

IMPLS = ("softmax_naive", "fastmax1", "fastmax2")

# chosen by scripts/lr_sweep.py; degree-2 gradients are small, so it needs a
# larger rate, but above ~3 its loss starts to oscillate
DEFAULT_LR = {"softmax_naive": 1.0, "fastmax1": 1.0, "fastmax2": 2.5}
# global gradient-norm cap; keeps degree-1 students from jumping across a
# vanishing row denominator
DEFAULT_CLIP = 0.1
# a loss this many times the initial one counts as divergence
DIVERGENCE_RATIO = 1e8


@dataclass(frozen=True)
class TrainConfig:
    impl: str = "fastmax2"
    n: int = 32
    d_in: int = 16
    d: int = 8
    steps: int = 500
    lr: float | None = None
    seed: int = 0
    masked: bool = False
    batch: int = 4
    clip: float | None = DEFAULT_CLIP

    def __post_init__(self):
        if self.impl not in IMPLS:
            raise ConfigError(f"impl must be one of {IMPLS}")
        if self.lr is None:
            object.__setattr__(self, "lr", DEFAULT_LR[self.impl])
        if self.clip is not None and not self.clip > 0:
            raise ConfigError("clip must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if min(self.n, self.d_in, self.d, self.batch) < 1:
            raise ConfigError("sizes must be >= 1")

    @property
    def attention(self):
        if self.impl == "softmax_naive":
            return None
        return AttentionConfig(p=int(self.impl[-1]), masked=self.masked)


@dataclass
class HeadParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    @classmethod
    def random(cls, d_in, d, rng):
        s = 1.0 / math.sqrt(d_in)
        return cls(*(rng.normal((d_in, d)) * s for _ in range(3)))

    def copy(self):
        return HeadParams(self.wq.copy(), self.wk.copy(), self.wv.copy())

    def __iter__(self):
        return iter((self.wq, self.wk, self.wv))


@dataclass
class LossCurve:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)

    def append(self, step, loss, wall_ms):
        self.steps.append(step)
        self.losses.append(loss)
        self.wall_ms.append(wall_ms)

    @property
    def ratio(self):
        return self.losses[-1] / self.losses[0] if self.losses[0] > 0 else 0.0

    def to_csv(self):
        buf = io.StringIO()
        buf.write("step,loss,wall_ms\n")
        for s, l, w in zip(self.steps, self.losses, self.wall_ms):
            buf.write(f"{s},{l:.9g},{w:.9g}\n")
        return buf.getvalue()


@dataclass
class TeacherTask:
    inputs: list
    targets: list
    teacher: HeadParams


def attend(cfg, q, k, v):
    if cfg.impl == "softmax_naive":
        return oracle.softmax_attention(q, k, v, cfg.masked)
    return forward_with_cache(q, k, v, cfg.attention)[0]


# degree-1 heads (teacher and initial student) are redrawn until no row
# denominator is nearly cancelled
MAX_TEACHER_CANCELLATION = 20.0
MAX_TEACHER_DRAWS = 1000


def _well_conditioned(cfg, teacher, inputs):
    att = cfg.attention
    if att is None or att.p == 2:
        return True
    for x in inputs:
        qh, _ = standardize_rows(x @ teacher.wq, att.eps)
        kh, _ = standardize_rows(x @ teacher.wk, att.eps)
        try:
            if oracle.cancellation(qh, kh, att.p, att.masked) > MAX_TEACHER_CANCELLATION:
                return False
        except NumericalInstability:
            return False
    return True


def make_teacher_task(cfg, rng):
    inputs = [rng.normal((cfg.n, cfg.d_in)) for _ in range(cfg.batch)]
    for _ in range(MAX_TEACHER_DRAWS):
        teacher = HeadParams.random(cfg.d_in, cfg.d, rng)
        if _well_conditioned(cfg, teacher, inputs):
            break
    else:
        raise ConfigError("could not draw a well-conditioned degree-1 teacher")
    return TeacherTask(inputs, [attend(cfg, x @ teacher.wq, x @ teacher.wk, x @ teacher.wv)
                                for x in inputs], teacher)


def init_student(cfg, task, rng):
    for _ in range(MAX_TEACHER_DRAWS):
        params = HeadParams.random(cfg.d_in, cfg.d, rng)
        if _well_conditioned(cfg, params, task.inputs):
            return params
    raise ConfigError("could not draw a well-conditioned degree-1 student")


def loss_and_grads(cfg, params, task, mode="custom"):
    """MSE over all output entries and its gradient w.r.t. the three projections.

    ``mode="naive"`` routes Fastmax through the explicit-matrix backward.
    """
    total = 0.0
    grads = [np.zeros_like(w) for w in params]
    count = len(task.inputs) * cfg.n * cfg.d
    for x, t in zip(task.inputs, task.targets):
        q, k, v = x @ params.wq, x @ params.wk, x @ params.wv
        if cfg.impl == "softmax_naive":
            o = oracle.softmax_attention(q, k, v, cfg.masked)
        else:
            o, cache = forward_with_cache(q, k, v, cfg.attention)
        err = o - t
        total += float((err * err).sum())
        up = 2.0 * err / count
        if cfg.impl == "softmax_naive":
            dq, dk, dv = oracle.softmax_backward(q, k, v, cfg.masked, up)
        elif mode == "naive":
            dq, dk, dv = naive_backward(q, k, v, cfg.attention, up)
        else:
            dq, dk, dv = backward(cache, cfg.attention, up)
        for g, d in zip(grads, (dq, dk, dv)):
            g += x.T @ d
    return total / count, HeadParams(*grads)


def sgd_step(params, grads, lr, clip=None):
    """``w -= lr * g``, with ``g`` rescaled to global norm ``clip`` when larger."""
    scale = 1.0
    if clip is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if norm > clip:
            scale = clip / norm
    return HeadParams(*(w - (lr * scale) * g for w, g in zip(params, grads)))


def train(cfg, task=None, init=None, mode="custom"):
    """Fit a student head; returns the per-step loss before each update.

    Raises TrainingDiverged on a non-finite loss, a loss above
    ``DIVERGENCE_RATIO`` times the initial one, or a vanishing denominator.
    """
    rng = Rng(cfg.seed)
    task = task or make_teacher_task(cfg, rng)
    params = init.copy() if init is not None else init_student(cfg, task, rng)
    curve = LossCurve()
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        try:
            loss, grads = loss_and_grads(cfg, params, task, mode)
        except NumericalInstability as exc:
            raise TrainingDiverged(step, float("nan")) from exc
        if not math.isfinite(loss) or (curve.losses and loss > DIVERGENCE_RATIO * curve.losses[0]):
            raise TrainingDiverged(step, loss)
        curve.append(step, loss, (time.perf_counter() - t0) * 1e3)
        params = sgd_step(params, grads, cfg.lr, cfg.clip)
    return curve
