"""Byte-accounting allocator for temporary buffers.

Every scratch buffer the attention routines need is requested through
:func:`empty` / :func:`zeros` and handed back with :func:`release`. The
active :class:`MemoryTracker` (installed with :func:`track`) keeps a running
total and a high-water mark, which is what the benchmarks report as
``peak_bytes``. Inputs and returned outputs are never counted.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Iterator

import numpy as np


class MemoryTracker:
    """Running and peak byte counts for live tracked buffers."""

    def __init__(self) -> None:
        self.current = 0
        self.peak = 0
        self.n_allocs = 0
        self._live: dict[int, int] = {}

    def _register(self, arr: np.ndarray) -> np.ndarray:
        self._live[id(arr)] = arr.nbytes
        self.current += arr.nbytes
        self.n_allocs += 1
        if self.current > self.peak:
            self.peak = self.current
        return arr

    def empty(self, shape, dtype=np.float64) -> np.ndarray:
        return self._register(np.empty(shape, dtype=dtype))

    def zeros(self, shape, dtype=np.float64) -> np.ndarray:
        return self._register(np.zeros(shape, dtype=dtype))

    def release(self, *arrays: np.ndarray) -> None:
        for arr in arrays:
            nbytes = self._live.pop(id(arr), None)
            if nbytes is None:
                raise ValueError("releasing a buffer this tracker did not allocate")
            self.current -= nbytes

    def reset_peak(self) -> None:
        """Restart the high-water mark from the bytes currently live."""
        self.peak = self.current

    def __repr__(self) -> str:
        return f"MemoryTracker(current={self.current}, peak={self.peak})"


_active: contextvars.ContextVar[MemoryTracker | None] = contextvars.ContextVar(
    "cottention_tracker", default=None
)


def current() -> MemoryTracker | None:
    """The tracker installed by the innermost :func:`track`, if any."""
    return _active.get()


@contextlib.contextmanager
def track(tracker: MemoryTracker | None = None) -> Iterator[MemoryTracker]:
    tracker = tracker if tracker is not None else MemoryTracker()
    token = _active.set(tracker)
    try:
        yield tracker
    finally:
        _active.reset(token)


# With no tracker installed these are plain numpy allocations and
# release() is a no-op.
def empty(shape, dtype=np.float64) -> np.ndarray:
    tracker = _active.get()
    return np.empty(shape, dtype=dtype) if tracker is None else tracker.empty(shape, dtype)


def zeros(shape, dtype=np.float64) -> np.ndarray:
    tracker = _active.get()
    return np.zeros(shape, dtype=dtype) if tracker is None else tracker.zeros(shape, dtype)


def adopt(*arrays: np.ndarray) -> None:
    """Count already-allocated temporaries as tracked until released."""
    tracker = _active.get()
    if tracker is not None:
        for arr in arrays:
            tracker._register(arr)


def release(*arrays: np.ndarray) -> None:
    tracker = _active.get()
    if tracker is not None:
        tracker.release(*arrays)
