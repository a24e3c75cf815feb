"""Causal cosine attention.

Three routes to ``O = (Q K^T * M) V`` with a lower-triangular (diagonal
included) binary mask ``M``:

* :func:`causal_oracle` builds the s x s masked score matrix.
* :func:`causal_linear_forward` scans the sequence chunk by chunk, carrying
  a ``d_value x d_key`` running sum of ``v_t k_t^T``. Only one chunk of
  partial sums is alive at a time, so the workspace does not grow with s.
* :func:`causal_backward` reuses the same scan, forward in time for dQ and
  backward in time for dK and dV.

These three take already-normalized, already-stabilized inputs.
:func:`causal_cos_attention` is the full pipeline (normalize Q/K rows,
stabilize V, scan) with normalization fused into the per-chunk work.
"""

from __future__ import annotations

import numpy as np

from . import memory
from .config import AttentionConfig
from .core_ops import _l2_normalize_inplace, check_qkv, position_lengths, sigmoid, as_length_array
from .errors import DomainError, ShapeError

DEFAULT_CHUNK = 128


def causal_mask(s: int, strict: bool = False) -> np.ndarray:
    """Binary multiplicative mask, ones on and below the diagonal.

    ``strict=True`` drops the diagonal; it exists only so fault-injection
    checks can feed a wrong-but-still-causal mask to the oracle.
    """
    return np.tril(np.ones((s, s)), k=-1 if strict else 0)


def causal_oracle(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    config: AttentionConfig | None = None,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    check_qkv(Q, K, V, config)
    s = Q.shape[-2]
    if mask is None:
        mask = causal_mask(s)
    if mask.shape != (s, s):
        raise ShapeError(f"mask shape {mask.shape} != ({s}, {s})")
    scores = memory.empty(Q.shape[:-1] + (s,), np.result_type(Q, K))
    np.matmul(Q, np.swapaxes(K, -1, -2), out=scores)
    scores *= mask
    out = scores @ V
    memory.release(scores)
    return out


def _check_chunk(chunk_len: int) -> int:
    if int(chunk_len) != chunk_len or chunk_len < 1:
        raise DomainError(f"chunk_len must be a positive integer, got {chunk_len!r}")
    return int(chunk_len)


def _scan(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    chunk_len: int,
    reverse: bool = False,
    normalize_eps: float | None = None,
    lengths: np.ndarray | None = None,
    sig_m: np.ndarray | None = None,
) -> np.ndarray:
    """``out[t] = sum over tau <= t (tau >= t if reverse) of (q_t . k_tau) v_tau``.

    With ``normalize_eps`` set, Q and K chunks are row-normalized and V
    chunks divided by ``lengths ** sig_m`` before use.
    """
    N, H, s, d_key = Q.shape
    d_value = V.shape[-1]
    dtype = np.result_type(Q, K, V)
    L = min(chunk_len, s)
    out = np.empty((N, H, s, d_value), dtype=dtype)

    acc = memory.zeros((N, H, d_value, d_key), dtype)
    part = memory.empty((N, H, L, d_value, d_key), dtype)
    fused = normalize_eps is not None
    if fused:
        qb = memory.empty((N, H, L, d_key), dtype)
        kb = memory.empty((N, H, L, d_key), dtype)
        vb = memory.empty((N, H, L, d_value), dtype)
        norms = memory.empty((N, H, L, 1), dtype)
        divb = memory.empty((N, H, L, 1), np.float64)

    starts = range(0, s, L)
    if reverse:
        starts = reversed(starts)
    for start in starts:
        stop = min(start + L, s)
        n = stop - start
        if fused:
            q, k, v = qb[:, :, :n], kb[:, :, :n], vb[:, :, :n]
            q[...] = Q[:, :, start:stop]
            k[...] = K[:, :, start:stop]
            v[...] = V[:, :, start:stop]
            _l2_normalize_inplace(q, norms[:, :, :n], normalize_eps)
            _l2_normalize_inplace(k, norms[:, :, :n], normalize_eps)
            seg = lengths if lengths.shape[2] == 1 else lengths[:, :, start:stop]
            np.power(seg, sig_m, out=divb[:, :, :n])
            np.divide(v, divb[:, :, :n], out=v)
        else:
            q, k, v = Q[:, :, start:stop], K[:, :, start:stop], V[:, :, start:stop]

        p = part[:, :, :n]
        np.multiply(v[..., :, None], k[..., None, :], out=p)
        # Strict sequential accumulation: the addition order is the same as
        # the recurrent update and does not depend on chunk_len.
        if reverse:
            p[:, :, n - 1] += acc
            for i in range(n - 2, -1, -1):
                p[:, :, i] += p[:, :, i + 1]
            acc[...] = p[:, :, 0]
        else:
            p[:, :, 0] += acc
            for i in range(1, n):
                p[:, :, i] += p[:, :, i - 1]
            acc[...] = p[:, :, n - 1]
        np.matmul(p, q[..., None], out=out[:, :, start:stop, :, None])

    memory.release(acc, part)
    if fused:
        memory.release(qb, kb, vb, norms, divb)
    return out


def causal_linear_forward(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    config: AttentionConfig | None = None,
    chunk_len: int = DEFAULT_CHUNK,
) -> np.ndarray:
    chunk_len = _check_chunk(chunk_len)
    check_qkv(Q, K, V, config)
    return _scan(Q, K, V, chunk_len)


def causal_backward(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    G: np.ndarray,
    config: AttentionConfig | None = None,
    chunk_len: int = DEFAULT_CHUNK,
):
    """Gradients of ``sum(G * causal_linear_forward(Q, K, V))``.

    dQ = (G V^T * M) K           forward scan of (G, V, K)
    dK = (G V^T * M)^T Q         reverse scan of (V, G, Q)
    dV = (Q K^T * M)^T G         reverse scan of (K, Q, G)
    """
    chunk_len = _check_chunk(chunk_len)
    check_qkv(Q, K, V, config)
    if G.shape != V.shape:
        raise ShapeError(f"G {G.shape} must match the forward output {V.shape}")
    dQ = _scan(G, V, K, chunk_len)
    dK = _scan(V, G, Q, chunk_len, reverse=True)
    dV = _scan(K, Q, G, chunk_len, reverse=True)
    return dQ, dK, dV


def stabilization_lengths(config: AttentionConfig, s_len=None) -> np.ndarray:
    """Length array fed to the stabilization divisor for a causal call."""
    if config.stab_mode == "growing":
        return position_lengths(config.s)
    return as_length_array(config.s if s_len is None else s_len)


def causal_cos_attention(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    config: AttentionConfig | None = None,
    chunk_len: int = DEFAULT_CHUNK,
    s_len=None,
) -> np.ndarray:
    """Causal cosine attention on raw per-head Q, K, V.

    Rows of Q and K are L2-normalized and V is divided by
    ``length ** sigmoid(m)`` inside the scan, one chunk at a time.
    """
    chunk_len = _check_chunk(chunk_len)
    check_qkv(Q, K, V, config)
    if config is None:
        config = AttentionConfig.from_tensors(Q, K, V)
    lengths = stabilization_lengths(config, s_len)
    sig_m = sigmoid(config.m).reshape(1, -1, 1, 1)
    return _scan(Q, K, V, chunk_len, normalize_eps=config.eps_norm, lengths=lengths, sig_m=sig_m)
