"""Token-by-token causal cosine attention with a fixed-size hidden state.

The state is the running sum of ``v_t k_t^T`` per (batch, head), shape
(N, H, d_value, d_key). Reading it out against a query gives the same output
as the batch scan, while memory stays put no matter how many tokens have
been consumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import memory
from .config import AttentionConfig
from .core_ops import _l2_normalize_inplace, check_qkv, sigmoid
from .errors import ShapeError


@dataclass
class RecurrentState:
    Hstate: np.ndarray
    t: int = 0
    # Kahan compensation term; None unless the state was built compensated.
    comp: np.ndarray | None = None

    @property
    def nbytes(self) -> int:
        return self.Hstate.nbytes + (0 if self.comp is None else self.comp.nbytes)

    def copy(self) -> "RecurrentState":
        return RecurrentState(
            self.Hstate.copy(), self.t, None if self.comp is None else self.comp.copy()
        )


def state_init(config: AttentionConfig, dtype=np.float64, compensated: bool = False) -> RecurrentState:
    Hstate = memory.zeros(config.state_shape, dtype)
    comp = memory.zeros(config.state_shape, dtype) if compensated else None
    return RecurrentState(Hstate, 0, comp)


def state_free(state: RecurrentState) -> None:
    """Hand the state's buffers back to the active tracker."""
    memory.release(state.Hstate)
    if state.comp is not None:
        memory.release(state.comp)


def state_update(state: RecurrentState, k_t: np.ndarray, v_t: np.ndarray, inplace: bool = True) -> RecurrentState:
    """Add ``v_t k_t^T`` to the state and advance the token counter.

    ``inplace=False`` leaves ``state`` untouched and returns an updated copy.
    """
    N, H, d_value, d_key = state.Hstate.shape
    if k_t.shape != (N, H, d_key) or v_t.shape != (N, H, d_value):
        raise ShapeError(
            f"k_t {k_t.shape} / v_t {v_t.shape} do not fit state {state.Hstate.shape}"
        )
    if not inplace:
        state = state.copy()
    outer = memory.empty(state.Hstate.shape, state.Hstate.dtype)
    np.multiply(v_t[..., :, None], k_t[..., None, :], out=outer)
    if state.comp is None:
        state.Hstate += outer
    else:
        # y = outer - c; t = H + y; c = (t - H) - y; H = t
        outer -= state.comp
        np.add(state.Hstate, outer, out=state.comp)
        state.comp -= state.Hstate
        state.comp -= outer
        state.Hstate += outer
    memory.release(outer)
    state.t += 1
    return state


def state_readout(state: RecurrentState, q_t: np.ndarray) -> np.ndarray:
    """Contract the state's key axis with the query: ``o = H q``."""
    N, H, d_value, d_key = state.Hstate.shape
    if q_t.shape != (N, H, d_key):
        raise ShapeError(f"q_t {q_t.shape} does not fit state {state.Hstate.shape}")
    return (state.Hstate @ q_t[..., None])[..., 0]


def stream_sequence(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    config: AttentionConfig | None = None,
    compensated: bool = False,
    return_step_bytes: bool = False,
):
    """Run the whole sequence through the recurrence one token at a time.

    Normalization and stabilization happen per token, so raw per-head
    tensors go in, exactly as for :func:`causal.causal_cos_attention`. With
    ``return_step_bytes`` the tracked peak of every step is returned too.
    """
    check_qkv(Q, K, V, config)
    if config is None:
        config = AttentionConfig.from_tensors(Q, K, V)
    N, H, s, d_key = Q.shape
    d_value = V.shape[-1]
    dtype = np.result_type(Q, K, V)
    sig_m = sigmoid(config.m).reshape(1, -1, 1, 1)
    out = np.empty((N, H, s, d_value), dtype=dtype)
    step_bytes: list[int] = []

    tracker = memory.current()
    with memory.track(tracker) as tracker:
        overall = tracker.peak
        state = state_init(config, dtype, compensated)
        q = memory.empty((N, H, 1, d_key), dtype)
        k = memory.empty((N, H, 1, d_key), dtype)
        v = memory.empty((N, H, 1, d_value), dtype)
        norms = memory.empty((N, H, 1, 1), dtype)
        div = memory.empty((N, H, 1, 1), np.float64)
        for t in range(s):
            tracker.reset_peak()
            q[...] = Q[:, :, t : t + 1]
            k[...] = K[:, :, t : t + 1]
            v[...] = V[:, :, t : t + 1]
            _l2_normalize_inplace(q, norms, config.eps_norm)
            _l2_normalize_inplace(k, norms, config.eps_norm)
            length = float(t + 1) if config.stab_mode == "growing" else float(config.s)
            np.power(np.full((1, 1, 1, 1), length), sig_m, out=div)
            np.divide(v, div, out=v)
            state_update(state, k[:, :, 0], v[:, :, 0])
            out[:, :, t] = state_readout(state, q[:, :, 0])
            step_bytes.append(tracker.peak)
        # per-step resets must not hide the whole-call peak from an outer tracker
        tracker.peak = max([overall, *step_bytes])
        memory.release(q, k, v, norms, div)
        state_free(state)
    return (out, step_bytes) if return_step_bytes else out


def softmax_kv_stream(Q: np.ndarray, K: np.ndarray, V: np.ndarray, return_step_bytes: bool = False):
    """Causal softmax attention decoded token by token with a KV cache.

    The cache holds every past key and value, so its tracked size grows
    linearly with the number of tokens seen.
    """
    check_qkv(Q, K, V)
    N, H, s, d_key = Q.shape
    d_value = V.shape[-1]
    dtype = np.result_type(Q, K, V)
    scale = 1.0 / np.sqrt(d_key)
    out = np.empty((N, H, s, d_value), dtype=dtype)
    step_bytes: list[int] = []

    tracker = memory.current()
    with memory.track(tracker) as tracker:
        overall = tracker.peak
        k_cache = memory.empty((N, H, 0, d_key), dtype)
        v_cache = memory.empty((N, H, 0, d_value), dtype)
        for t in range(s):
            tracker.reset_peak()
            k_new = memory.empty((N, H, t + 1, d_key), dtype)
            v_new = memory.empty((N, H, t + 1, d_value), dtype)
            k_new[:, :, :t] = k_cache
            v_new[:, :, :t] = v_cache
            k_new[:, :, t] = K[:, :, t]
            v_new[:, :, t] = V[:, :, t]
            memory.release(k_cache, v_cache)
            k_cache, v_cache = k_new, v_new

            w = memory.empty((N, H, 1, t + 1), dtype)
            np.matmul(Q[:, :, t : t + 1], np.swapaxes(k_cache, -1, -2), out=w)
            w *= scale
            w -= w.max(axis=-1, keepdims=True)
            np.exp(w, out=w)
            w /= w.sum(axis=-1, keepdims=True)
            out[:, :, t] = (w @ v_cache)[:, :, 0]
            memory.release(w)
            step_bytes.append(tracker.peak)
        # per-step resets must not hide the whole-call peak from an outer tracker
        tracker.peak = max([overall, *step_bytes])
        memory.release(k_cache, v_cache)
    return (out, step_bytes) if return_step_bytes else out
