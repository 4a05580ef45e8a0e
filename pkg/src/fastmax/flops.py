"""Multiply/add counters for the attention kernels.

Kernels report their arithmetic through :func:`count`; the counts land in
every :class:`FlopMeter` currently entered on this thread.  Convention:
accumulating ``k`` terms into a zero-initialized buffer costs ``k`` adds,
a division costs one multiply, and ``exp``/``sqrt``/comparisons are not
counted.
"""
from __future__ import annotations

import threading

_local = threading.local()


def _stack():
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


class FlopMeter:
    """Monotone multiply/add counters, active inside a ``with`` block."""

    def __init__(self):
        self.mults = 0
        self.adds = 0

    @property
    def total(self):
        return self.mults + self.adds

    def record(self, mults=0, adds=0):
        if mults < 0 or adds < 0:
            raise ValueError("flop counts only grow")
        self.mults += int(mults)
        self.adds += int(adds)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def __repr__(self):
        return f"FlopMeter(mults={self.mults}, adds={self.adds})"


def count(mults=0, adds=0):
    for meter in _stack():
        meter.record(mults, adds)


def metering():
    """True when at least one meter is active (lets kernels skip bookkeeping)."""
    return bool(_stack())
