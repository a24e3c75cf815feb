"""Central finite differences and error reports for the manual gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError, NumericError, ShapeError

DEFAULT_STEP = 1e-6
ATOL_FLOOR = 1e-10
THRESHOLD = 1e-5
# Steps this coarse leave truncation error well above THRESHOLD.
UNRELIABLE_STEP = 1e-3


def finite_diff(f: Callable[[np.ndarray], float], X: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``X``, one element at a time.

    ``X`` is perturbed in a private copy; the caller's array is left alone.
    """
    if not step > 0:
        raise DomainError("step must be positive")
    X = np.array(X, dtype=np.float64, copy=True)
    grad = np.empty_like(X)
    flat = X.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(X)
        flat[i] = orig - step
        lo = f(X)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"f is not finite near element {i}")
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


@dataclass
class GradReport:
    max_rel_err: float
    argmax: tuple
    threshold: float = THRESHOLD
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold

    def merge(self, name: str, other: "GradReport") -> "GradReport":
        """Fold another tensor's report into this one under ``name``."""
        self.per_tensor[name] = other.max_rel_err
        if other.max_rel_err > self.max_rel_err:
            self.max_rel_err = other.max_rel_err
            self.argmax = (name,) + tuple(other.argmax)
        return self


def compare(analytic: np.ndarray, numeric: np.ndarray, atol: float = ATOL_FLOOR, rtol: float = THRESHOLD) -> GradReport:
    """Elementwise ``|a - n| / max(|a|, |n|, atol)``; ``rtol`` is the pass threshold."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"analytic {a.shape} vs numeric {n.shape}")
    if a.size == 0:
        return GradReport(0.0, (), rtol)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
    idx = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return GradReport(float(rel[idx]), tuple(int(i) for i in idx), rtol)


def check_tensors(
    analytic: dict[str, np.ndarray],
    loss_of: dict[str, Callable[[np.ndarray], float]],
    at: dict[str, np.ndarray],
    step: float = DEFAULT_STEP,
    atol: float = ATOL_FLOOR,
    rtol: float = THRESHOLD,
) -> GradReport:
    """Compare several analytic gradients with finite differences in one report."""
    report = GradReport(0.0, (), rtol)
    for name, grad in analytic.items():
        numeric = finite_diff(loss_of[name], at[name], step)
        report.merge(name, compare(grad, numeric, atol, rtol))
    return report


def causal_report(Q, K, V, G, chunk_len: int = 128, step: float = DEFAULT_STEP, rtol: float = THRESHOLD) -> GradReport:
    """dQ, dK, dV from :func:`causal.causal_backward` versus finite differences
    of ``sum(G * causal_linear_forward(Q, K, V))``."""
    from .causal import causal_backward, causal_linear_forward

    dQ, dK, dV = causal_backward(Q, K, V, G, chunk_len=chunk_len)

    def loss(q, k, v):
        return float(np.sum(G * causal_linear_forward(q, k, v, chunk_len=chunk_len)))

    return check_tensors(
        {"dQ": dQ, "dK": dK, "dV": dV},
        {
            "dQ": lambda X: loss(X, K, V),
            "dK": lambda X: loss(Q, X, V),
            "dV": lambda X: loss(Q, K, X),
        },
        {"dQ": Q, "dK": K, "dV": V},
        step=step,
        rtol=rtol,
    )


def layer_report(layer, x, dY, causal: bool = True, chunk_len: int = 128, stab_mode: str = "fixed",
                 pad=None, step: float = DEFAULT_STEP, rtol: float = THRESHOLD) -> GradReport:
    """Every gradient from :func:`layer.layer_backward` (weights, m, input)
    versus finite differences of ``sum(dY * layer_forward(...))``."""
    from .layer import layer_backward, layer_forward

    y, cache = layer_forward(layer, x, causal, chunk_len, stab_mode, pad)
    grads = layer_backward(layer, cache, dY)

    def loss_with(name):
        def f(X):
            probe = layer.copy()
            if name == "x":
                return float(np.sum(dY * layer_forward(probe, X, causal, chunk_len, stab_mode, pad)[0]))
            setattr(probe, name, X)
            return float(np.sum(dY * layer_forward(probe, x, causal, chunk_len, stab_mode, pad)[0]))
        return f

    analytic = {"dW_Q": grads.dW_Q, "dW_K": grads.dW_K, "dW_V": grads.dW_V, "dm": grads.dm, "dx": grads.dx}
    names = {"dW_Q": "W_Q", "dW_K": "W_K", "dW_V": "W_V", "dm": "m", "dx": "x"}
    points = {key: (x if attr == "x" else getattr(layer, attr)) for key, attr in names.items()}
    return check_tensors(
        analytic,
        {key: loss_with(attr) for key, attr in names.items()},
        points,
        step=step,
        rtol=rtol,
    )
