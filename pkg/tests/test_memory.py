import numpy as np
import pytest

from cottention import memory


def test_tracker_counts_current_and_peak():
    with memory.track() as t:
        a = memory.empty((10,), np.float64)
        b = memory.zeros((5,), np.float32)
        assert t.current == 80 + 20
        memory.release(a)
        assert t.current == 20
        c = memory.empty((2,), np.float64)
        memory.release(b, c)
    assert t.current == 0
    assert t.peak == 100


def test_no_tracker_is_plain_numpy():
    assert memory.current() is None
    a = memory.zeros((3,))
    memory.release(a)
    assert a.shape == (3,)


def test_release_foreign_buffer_raises():
    with memory.track():
        with pytest.raises(ValueError):
            memory.release(np.zeros(3))


def test_reset_peak_and_nesting():
    outer = memory.MemoryTracker()
    with memory.track(outer):
        a = memory.empty((4,))
        with memory.track() as inner:
            memory.release(memory.empty((100,)))
        assert inner.peak == 800
        assert outer.peak == 32
        outer.reset_peak()
        assert outer.peak == outer.current == 32
        memory.release(a)


def test_adopt_counts_existing_arrays():
    with memory.track() as t:
        x = np.ones(8)
        memory.adopt(x)
        assert t.current == 64
        memory.release(x)
        assert t.current == 0
