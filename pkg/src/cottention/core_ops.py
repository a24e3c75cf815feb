"""Stateless primitives: row normalization, cosine similarity, the softmax
reference, value stabilization and bidirectional cosine attention.

Per-head tensors use the layout ``(N, H, s, d)``. All functions return new
arrays and never write into their inputs.
"""

from __future__ import annotations

import numpy as np

from . import memory
from .config import AttentionConfig
from .errors import DomainError, NumericError, ShapeError

GROUPINGS = ("scores-first", "kv-first")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def check_qkv(Q: np.ndarray, K: np.ndarray, V: np.ndarray, config: AttentionConfig | None = None) -> None:
    if Q.ndim != 4 or K.ndim != 4 or V.ndim != 4:
        raise ShapeError(f"expected 4-d (N, H, s, d) tensors, got {Q.shape}, {K.shape}, {V.shape}")
    if Q.shape != K.shape:
        raise ShapeError(f"Q {Q.shape} and K {K.shape} must match")
    if V.shape[:3] != Q.shape[:3]:
        raise ShapeError(f"V {V.shape} must share (N, H, s) with Q {Q.shape}")
    if config is not None and (Q.shape != config.qk_shape or V.shape != config.v_shape):
        raise ShapeError(
            f"tensors {Q.shape}/{V.shape} do not match config {config.qk_shape}/{config.v_shape}"
        )


def l2_normalize_rows(X: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Divide each row (last axis) by ``max(||row||, eps)``.

    Zero rows stay zero, so padded positions pass through harmlessly.
    """
    if not eps > 0:
        raise DomainError("eps must be positive")
    X = np.asarray(X)
    if X.ndim == 0 or X.shape[-1] == 0:
        raise ShapeError(f"cannot normalize rows of shape {X.shape}")
    out = X.astype(np.result_type(X.dtype, np.float32), copy=True)
    norms = memory.empty(X.shape[:-1] + (1,), out.dtype)
    _l2_normalize_inplace(out, norms, eps)
    memory.release(norms)
    return out


def _l2_normalize_inplace(X: np.ndarray, norms: np.ndarray, eps: float) -> None:
    # norms is a caller-owned scratch buffer of shape X.shape[:-1] + (1,)
    np.einsum("...d,...d->...", X, X, out=norms[..., 0])
    np.sqrt(norms, out=norms)
    np.maximum(norms, eps, out=norms)
    np.divide(X, norms, out=X)


def cosine_similarity(Q: np.ndarray, K: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Pairwise row cosines: ``out[..., i, j] = cos(Q[..., i, :], K[..., j, :])``."""
    Q = np.asarray(Q)
    K = np.asarray(K)
    if Q.shape[-1] != K.shape[-1] or Q.shape[:-2] != K.shape[:-2]:
        raise ShapeError(f"cannot compare rows of {Q.shape} with rows of {K.shape}")
    Qn = l2_normalize_rows(Q, eps)
    Kn = l2_normalize_rows(K, eps)
    return Qn @ np.swapaxes(Kn, -1, -2)


def _causal_bias(s: int, dtype) -> np.ndarray:
    return np.triu(np.full((s, s), -np.inf, dtype=dtype), k=1)


def softmax_weights(Q: np.ndarray, K: np.ndarray, causal: bool = False) -> np.ndarray:
    """Full ``softmax(QK^T / sqrt(d_key) + mask)`` weight tensor, shape (N, H, s, s)."""
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(K))):
        raise NumericError("softmax attention needs finite Q and K")
    scores = Q @ np.swapaxes(K, -1, -2) / np.sqrt(Q.shape[-1])
    if causal:
        scores = scores + _causal_bias(Q.shape[-2], scores.dtype)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    return w / w.sum(axis=-1, keepdims=True)


def softmax_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray, causal: bool = False) -> np.ndarray:
    """Scaled dot-product softmax attention, one (batch, head) pair at a time.

    A single s x s score buffer is reused across heads; it is the dominant
    tracked allocation and grows quadratically in s.
    """
    check_qkv(Q, K, V)
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(K)) and np.all(np.isfinite(V))):
        raise NumericError("softmax attention needs finite inputs")
    N, H, s, d_key = Q.shape
    dtype = np.result_type(Q, K, V)
    scale = dtype.type(1.0 / np.sqrt(d_key))
    out = np.empty(V.shape, dtype=dtype)

    scores = memory.empty((s, s), dtype)
    rowstat = memory.empty((s, 1), dtype)
    bias = memory.empty((s, s), dtype) if causal else None
    if causal:
        bias[...] = _causal_bias(s, dtype)
    for n in range(N):
        for h in range(H):
            np.matmul(Q[n, h], K[n, h].T, out=scores)
            scores *= scale
            if causal:
                scores += bias
            np.max(scores, axis=-1, keepdims=True, out=rowstat)
            scores -= rowstat
            np.exp(scores, out=scores)
            np.sum(scores, axis=-1, keepdims=True, out=rowstat)
            scores /= rowstat
            np.matmul(scores, V[n, h], out=out[n, h])
    memory.release(scores, rowstat)
    if causal:
        memory.release(bias)
    return out


def as_length_array(s_len) -> np.ndarray:
    lengths = np.asarray(s_len, dtype=np.float64)
    if lengths.ndim == 0:
        lengths = lengths.reshape(1, 1, 1, 1)
    elif lengths.ndim == 1:
        lengths = lengths.reshape(-1, 1, 1, 1)
    elif lengths.ndim != 4:
        raise ShapeError(f"s_len must be a scalar, per-batch vector or 4-d array, got {lengths.shape}")
    if not np.all(np.isfinite(lengths)) or np.any(lengths < 1):
        raise DomainError("sequence length for stabilization must be >= 1")
    return lengths


def stabilization_divisor(s_len, m) -> np.ndarray:
    """``s_len ** sigmoid(m)`` shaped to broadcast against (N, H, s, d).

    ``s_len`` may be a scalar, a per-batch vector of shape (N,), or an array
    already broadcastable to (N, 1, s, 1) (per-position lengths).
    """
    lengths = as_length_array(s_len)
    m = np.asarray(m, dtype=np.float64).reshape(1, -1, 1, 1)
    if not np.all(np.isfinite(m)):
        raise DomainError("m must be finite")
    return lengths ** sigmoid(m)


def stabilize_values(V: np.ndarray, s_len, m) -> np.ndarray:
    """Divide values by ``s_len ** sigmoid(m)``; the divisor lies in [1, s_len]."""
    div = stabilization_divisor(s_len, m)
    if div.shape[1] != V.shape[1]:
        raise ShapeError(f"m has {div.shape[1]} entries but V has {V.shape[1]} heads")
    out = V / div
    if np.issubdtype(V.dtype, np.floating):
        out = out.astype(V.dtype, copy=False)
    return out


def position_lengths(s: int) -> np.ndarray:
    """Per-position lengths 1..s for the growing stabilization mode."""
    return np.arange(1, s + 1, dtype=np.float64).reshape(1, 1, s, 1)


def bidirectional_cos_attention(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    config: AttentionConfig | None = None,
    grouping: str = "kv-first",
    s_len=None,
) -> np.ndarray:
    """Non-causal cosine attention ``N(Q) N(K)^T (V / s^sigmoid(m))``.

    ``grouping="scores-first"`` materializes the s x s similarity matrix;
    ``"kv-first"`` contracts keys with values first and only holds a
    d_key x d_value block. ``s_len`` overrides the stabilization length,
    e.g. with the per-batch valid counts from :func:`effective_length`.
    """
    if grouping not in GROUPINGS:
        raise ValueError(f"grouping must be one of {GROUPINGS}, got {grouping!r}")
    check_qkv(Q, K, V, config)
    if config is None:
        config = AttentionConfig.from_tensors(Q, K, V)
    Qn = l2_normalize_rows(Q, config.eps_norm)
    Kn = l2_normalize_rows(K, config.eps_norm)
    Vs = stabilize_values(V, config.s if s_len is None else s_len, config.m)
    memory.adopt(Qn, Kn, Vs)
    N, H, s, d_key = Q.shape
    d_value = V.shape[-1]
    if grouping == "scores-first":
        mid = memory.empty((N, H, s, s), Qn.dtype)
        np.matmul(Qn, np.swapaxes(Kn, -1, -2), out=mid)
    else:
        mid = memory.empty((N, H, d_key, d_value), Qn.dtype)
        np.matmul(np.swapaxes(Kn, -1, -2), Vs, out=mid)
    out = mid @ Vs if grouping == "scores-first" else Qn @ mid
    memory.release(mid, Qn, Kn, Vs)
    return out


def apply_padding_mask(Q: np.ndarray, K: np.ndarray, V: np.ndarray, pad: np.ndarray):
    """Zero padded positions (``pad[n, t] == False``) in Q, K and V."""
    pad = np.asarray(pad, dtype=bool)
    if pad.shape != (Q.shape[0], Q.shape[2]):
        raise ShapeError(f"pad shape {pad.shape} != (N, s) = {(Q.shape[0], Q.shape[2])}")
    keep = pad[:, None, :, None]
    return Q * keep, K * keep, V * keep


def effective_length(pad: np.ndarray) -> np.ndarray:
    """Valid-token count per batch element, clamped below at 1."""
    pad = np.asarray(pad, dtype=bool)
    return np.maximum(pad.sum(axis=-1), 1).astype(np.float64)
