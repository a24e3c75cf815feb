"""Multi-head cosine attention layer with a hand-written backward pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .causal import DEFAULT_CHUNK, causal_backward, causal_linear_forward
from .config import STAB_MODES
from .core_ops import as_length_array, effective_length, l2_normalize_rows, position_lengths, sigmoid, stabilization_divisor
from .errors import ConfigError, ShapeError, UsageError


@dataclass
class AttentionLayer:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    m: np.ndarray
    H: int
    eps_norm: float = 1e-12
    # bumped on every parameter update so stale forward caches are caught
    version: int = 0

    @property
    def d_model(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_key(self) -> int:
        return self.W_Q.shape[1]

    @property
    def d_value(self) -> int:
        return self.W_V.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "m": self.m}

    def apply_update(self, grads: "LayerGradients", lr: float) -> None:
        """Plain gradient-descent step."""
        self.W_Q -= lr * grads.dW_Q
        self.W_K -= lr * grads.dW_K
        self.W_V -= lr * grads.dW_V
        self.m -= lr * grads.dm
        self.version += 1

    def copy(self) -> "AttentionLayer":
        return AttentionLayer(
            self.W_Q.copy(), self.W_K.copy(), self.W_V.copy(), self.m.copy(), self.H, self.eps_norm
        )


@dataclass
class LayerGradients:
    dW_Q: np.ndarray
    dW_K: np.ndarray
    dW_V: np.ndarray
    dm: np.ndarray
    dx: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"W_Q": self.dW_Q, "W_K": self.dW_K, "W_V": self.dW_V, "m": self.dm, "x": self.dx}


@dataclass
class LayerCache:
    layer_id: int
    version: int
    x: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    Qn: np.ndarray
    Kn: np.ndarray
    Vs: np.ndarray
    div: np.ndarray
    lengths: np.ndarray
    causal: bool
    chunk_len: int
    keep: np.ndarray | None = field(default=None)


def layer_init(d_model: int, d_key: int, d_value: int, H: int, seed: int = 0, m_init: float = 0.5) -> AttentionLayer:
    """Gaussian weights with std ``1/sqrt(d_model)`` and ``m = m_init`` per head."""
    for name, value in (("d_model", d_model), ("d_key", d_key), ("d_value", d_value), ("H", H)):
        if value < 1:
            raise ConfigError(f"{name} must be >= 1, got {value}")
    if d_key % H or d_value % H:
        raise ConfigError(f"d_key={d_key} and d_value={d_value} must both be divisible by H={H}")
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(d_model)
    return AttentionLayer(
        W_Q=rng.normal(0.0, scale, (d_model, d_key)),
        W_K=rng.normal(0.0, scale, (d_model, d_key)),
        W_V=rng.normal(0.0, scale, (d_model, d_value)),
        m=np.full(H, float(m_init)),
        H=H,
    )


def split_heads(X: np.ndarray, H: int) -> np.ndarray:
    N, s, d = X.shape
    return X.reshape(N, s, H, d // H).transpose(0, 2, 1, 3)


def merge_heads(X: np.ndarray) -> np.ndarray:
    N, H, s, d = X.shape
    return X.transpose(0, 2, 1, 3).reshape(N, s, H * d)


def normalize_backward(X: np.ndarray, G: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Vector-Jacobian product of row L2 normalization.

    For a row with norm n and direction u: ``(G - u (u . G)) / n``. Rows with
    ``n <= eps`` get a zero gradient.
    """
    if G.shape != X.shape:
        raise ShapeError(f"G {G.shape} must match X {X.shape}")
    norms = np.sqrt(np.sum(X * X, axis=-1, keepdims=True))
    live = norms > eps
    safe = np.where(live, norms, 1.0)
    u = X / safe
    dX = (G - u * np.sum(u * G, axis=-1, keepdims=True)) / safe
    return np.where(live, dX, 0.0)


def _kv_first(Qn, Kn, Vs):
    return Qn @ (np.swapaxes(Kn, -1, -2) @ Vs)


def layer_forward(
    layer: AttentionLayer,
    x: np.ndarray,
    causal: bool = True,
    chunk_len: int = DEFAULT_CHUNK,
    stab_mode: str = "fixed",
    pad: np.ndarray | None = None,
):
    """Project, split heads, run cosine attention, merge heads.

    Returns ``(y, cache)`` with ``y`` of shape (N, s, d_value). ``pad`` is an
    optional boolean (N, s) array of valid positions; padded positions are
    zeroed after projection and the stabilization length becomes the valid
    count.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != layer.d_model:
        raise ShapeError(f"x must be (N, s, {layer.d_model}), got {x.shape}")
    if stab_mode not in STAB_MODES:
        raise ConfigError(f"stab_mode must be one of {STAB_MODES}")
    N, s, _ = x.shape
    H = layer.H
    Q = split_heads(x @ layer.W_Q, H)
    K = split_heads(x @ layer.W_K, H)
    V = split_heads(x @ layer.W_V, H)

    keep = None
    s_len = float(s)
    if pad is not None:
        pad = np.asarray(pad, dtype=bool)
        if pad.shape != (N, s):
            raise ShapeError(f"pad shape {pad.shape} != {(N, s)}")
        keep = pad[:, None, :, None].astype(np.float64)
        Q, K, V = Q * keep, K * keep, V * keep
        s_len = effective_length(pad)
    lengths = position_lengths(s) if stab_mode == "growing" else s_len

    Qn = l2_normalize_rows(Q, layer.eps_norm)
    Kn = l2_normalize_rows(K, layer.eps_norm)
    div = stabilization_divisor(lengths, layer.m)
    Vs = V / div
    O = causal_linear_forward(Qn, Kn, Vs, chunk_len=chunk_len) if causal else _kv_first(Qn, Kn, Vs)

    cache = LayerCache(
        layer_id=id(layer),
        version=layer.version,
        x=x,
        Q=Q,
        K=K,
        Qn=Qn,
        Kn=Kn,
        Vs=Vs,
        div=div,
        lengths=as_length_array(lengths),
        causal=causal,
        chunk_len=chunk_len,
        keep=keep,
    )
    return merge_heads(O), cache


def layer_backward(layer: AttentionLayer, cache: LayerCache, dY: np.ndarray) -> LayerGradients:
    if cache.layer_id != id(layer) or cache.version != layer.version:
        raise UsageError("forward cache does not belong to this layer's current parameters")
    N, s, _ = cache.x.shape
    if dY.shape != (N, s, layer.d_value):
        raise ShapeError(f"dY {dY.shape} must be {(N, s, layer.d_value)}")
    dO = split_heads(np.asarray(dY, dtype=np.float64), layer.H)
    Qn, Kn, Vs = cache.Qn, cache.Kn, cache.Vs

    if cache.causal:
        dQn, dKn, dVs = causal_backward(Qn, Kn, Vs, dO, chunk_len=cache.chunk_len)
    else:
        dQn = dO @ (np.swapaxes(Vs, -1, -2) @ Kn)
        dKn = Vs @ (np.swapaxes(dO, -1, -2) @ Qn)
        dVs = Kn @ (np.swapaxes(Qn, -1, -2) @ dO)

    # Vs = V * length^(-sigmoid(m)), so dVs/dm = -Vs * ln(length) * sigmoid'(m)
    sig = sigmoid(layer.m)
    radial = dVs * Vs * -np.log(cache.lengths)
    dm = radial.sum(axis=(0, 2, 3)) * sig * (1.0 - sig)
    dV = dVs / cache.div
    dQ = normalize_backward(cache.Q, dQn, layer.eps_norm)
    dK = normalize_backward(cache.K, dKn, layer.eps_norm)
    if cache.keep is not None:
        dQ, dK, dV = dQ * cache.keep, dK * cache.keep, dV * cache.keep

    dQf, dKf, dVf = merge_heads(dQ), merge_heads(dK), merge_heads(dV)
    x = cache.x
    return LayerGradients(
        dW_Q=np.einsum("nsi,nsj->ij", x, dQf),
        dW_K=np.einsum("nsi,nsj->ij", x, dKf),
        dW_V=np.einsum("nsi,nsj->ij", x, dVf),
        dm=dm,
        dx=dQf @ layer.W_Q.T + dKf @ layer.W_K.T + dVf @ layer.W_V.T,
    )


@dataclass
class ToyTask:
    """Regress onto the outputs of a fixed random teacher layer.

    The 16 input sequences and their teacher targets are fixed by ``seed``,
    so the student has to memorize a small, exactly realizable mapping.
    """

    n_samples: int = 16
    seq_len: int = 8
    d_model: int = 8
    d_key: int = 8
    d_value: int = 8
    H: int = 2
    causal: bool = True
    teacher_m: float = -1.0
    seed: int = 0

    def make(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        x = rng.standard_normal((self.n_samples, self.seq_len, self.d_model))
        teacher = layer_init(self.d_model, self.d_key, self.d_value, self.H,
                             seed=self.seed + 1, m_init=self.teacher_m)
        y, _ = layer_forward(teacher, x, self.causal)
        return x, y


@dataclass
class TrainResult:
    loss: list[float]
    m_trace: list[np.ndarray]
    diverged: bool = False


def mse(y: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = y - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def train_toy(
    layer: AttentionLayer | None = None,
    task: ToyTask | None = None,
    steps: int = 200,
    lr: float = 0.5,
    seed: int = 42,
) -> TrainResult:
    """Full-batch gradient descent on ``task``; returns ``steps + 1`` losses and m values.

    Entry 0 is the starting point; entry i is after i updates. A non-finite
    loss stops training early with ``diverged=True``.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if lr < 0:
        raise ConfigError("lr must be >= 0")
    task = task if task is not None else ToyTask()
    if layer is None:
        layer = layer_init(task.d_model, task.d_key, task.d_value, task.H, seed=seed)
    x, target = task.make()

    y, cache = layer_forward(layer, x, task.causal)
    loss, dY = mse(y, target)
    result = TrainResult([loss], [layer.m.copy()])
    for _ in range(steps):
        layer.apply_update(layer_backward(layer, cache, dY), lr)
        y, cache = layer_forward(layer, x, task.causal)
        loss, dY = mse(y, target)
        result.loss.append(loss)
        result.m_trace.append(layer.m.copy())
        if not np.isfinite(loss):
            result.diverged = True
            break
    return result
