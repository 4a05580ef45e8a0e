"""Dense matrices, the seeded generator and the plain-text matrix format.

Matrices are ``numpy.ndarray`` objects of dtype float64 with shape ``(N, D)``
(row-major, C-contiguous).  Generated matrices are returned read-only so they
can be shared freely.

Random stream
-------------
:class:`Rng` draws 64-bit words from the PCG64 bit generator seeded through
``numpy.random.SeedSequence``; both are covered by NumPy's stream-stability
policy, unlike the distribution methods of ``numpy.random.Generator``.
Uniforms take the top 53 bits of each word, ``u = (w >> 11) * 2**-53``.
Normals use the Box-Muller transform on consecutive uniform pairs
``(u1, u2)``: ``sqrt(-2 log(1 - u1)) * (cos 2 pi u2, sin 2 pi u2)``, emitted in
that order.
"""
from __future__ import annotations

import io
import math
import os

import numpy as np

from .errors import DimensionError

_TWO_PI = 2.0 * math.pi


class Rng:
    """Deterministic random stream (see module docstring for the algorithm)."""

    def __init__(self, seed: int = 0):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self._bits = np.random.PCG64(self.seed)

    def __repr__(self):
        return f"Rng(seed={self.seed})"

    def words(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n)

    def uniform(self, size) -> np.ndarray:
        """Uniform floats in ``[0, 1)``."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = math.prod(shape)
        u = (self.words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = math.prod(shape)
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = _TWO_PI * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = radius * np.cos(angle)
        z[:, 1] = radius * np.sin(angle)
        return z.reshape(-1)[:n].reshape(shape)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        """Integers in ``[low, high)`` (floor of scaled uniforms)."""
        u = self.uniform(size)
        return low + np.floor(u * (high - low)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def child(self) -> "Rng":
        """Independent generator seeded from this stream."""
        return Rng(int(self.words(1)[0] >> np.uint64(1)))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return ``a`` as a C-contiguous float64 2-D array."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"{name} has a zero dimension: {a.shape}")
    return a


def mat_random(n: int, d: int, rng: Rng, scale: float = 1.0) -> np.ndarray:
    """``n x d`` matrix of i.i.d. standard normals times ``scale``."""
    if n < 1 or d < 1:
        raise DimensionError(f"matrix dimensions must be >= 1, got {n}x{d}")
    if scale < 0:
        raise ValueError("scale must be non-negative")
    return _frozen(rng.normal((n, d)) * scale)


def mat_close(a, b, rtol: float = 1e-12, atol: float = 0.0) -> bool:
    """True iff ``|a - b| <= atol + rtol * |b|`` holds elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(np.abs(a - b) <= atol + rtol * np.abs(b)))


def check_same_shape(**mats):
    shapes = {name: np.shape(m) for name, m in mats.items()}
    first = next(iter(shapes.values()))
    if any(s != first for s in shapes.values()):
        desc = ", ".join(f"{k}={v}" for k, v in shapes.items())
        raise DimensionError(f"shape mismatch: {desc}")


# -- text format -------------------------------------------------------------
# First line "N D", then N rows of D floats; '#' lines are comments.

def format_matrix(a) -> str:
    a = as_matrix(a)
    out = io.StringIO()
    out.write(f"{a.shape[0]} {a.shape[1]}\n")
    for row in a:
        out.write(" ".join(f"{x:.17g}" for x in row))
        out.write("\n")
    return out.getvalue()


def parse_matrix(text: str) -> np.ndarray:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise DimensionError("empty matrix file")
    header = lines[0].split()
    if len(header) != 2:
        raise DimensionError(f"bad header {lines[0]!r}; expected 'N D'")
    n, d = int(header[0]), int(header[1])
    if n < 1 or d < 1:
        raise DimensionError(f"matrix dimensions must be >= 1, got {n}x{d}")
    rows = lines[1:]
    if len(rows) != n:
        raise DimensionError(f"header declares {n} rows, found {len(rows)}")
    data = np.empty((n, d))
    for i, ln in enumerate(rows):
        vals = ln.split()
        if len(vals) != d:
            raise DimensionError(f"row {i + 1} has {len(vals)} values, expected {d}")
        data[i] = [float(v) for v in vals]
    return data


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    with open(path) as fh:
        return parse_matrix(fh.read())


def write_matrix(path: str | os.PathLike, a) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_matrix(a))
