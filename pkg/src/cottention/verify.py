"""Equivalence, causality and bound checks behind ``cott verify``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .causal import causal_cos_attention, causal_linear_forward, causal_mask, causal_oracle
from .config import AttentionConfig
from .core_ops import bidirectional_cos_attention, cosine_similarity, l2_normalize_rows, stabilization_divisor, stabilize_values
from .recurrent import stream_sequence

TOLERANCE = {"high": 1e-9, "single": 1e-4}
DTYPES = {"high": np.float64, "single": np.float32}


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    detail: str = ""

    def line(self) -> str:
        return f"CHECK {self.name} {'PASS' if self.passed else 'FAIL'} {self.value:.3e}"


def random_qkv(rng, N, H, s, d_key, d_value, dtype=np.float64):
    Q = rng.standard_normal((N, H, s, d_key)).astype(dtype)
    K = rng.standard_normal((N, H, s, d_key)).astype(dtype)
    V = rng.standard_normal((N, H, s, d_value)).astype(dtype)
    return Q, K, V


def random_config(rng, max_s=64, max_d=16, max_nh=4) -> AttentionConfig:
    H = int(rng.integers(1, max_nh + 1))
    return AttentionConfig(
        N=int(rng.integers(1, max_nh + 1)),
        H=H,
        s=int(rng.integers(1, max_s + 1)),
        d_key=int(rng.integers(1, max_d + 1)),
        d_value=int(rng.integers(1, max_d + 1)),
        m=rng.normal(0.0, 1.0, H),
    )


def _prepared(Q, K, V, cfg):
    return l2_normalize_rows(Q, cfg.eps_norm), l2_normalize_rows(K, cfg.eps_norm), stabilize_values(V, cfg.s, cfg.m)


def _instances(cfg: AttentionConfig, n_random: int, rng, precision: str):
    """The configured instance followed by ``n_random`` random ones no larger than it."""
    dtype = DTYPES[precision]
    yield cfg, random_qkv(rng, cfg.N, cfg.H, cfg.s, cfg.d_key, cfg.d_value, dtype)
    for _ in range(n_random):
        c = random_config(rng, cfg.s, max(cfg.d_key, cfg.d_value), max(cfg.N, cfg.H))
        yield c, random_qkv(rng, c.N, c.H, c.s, c.d_key, c.d_value, dtype)


def oracle_equivalence(instances, chunk_len, tol, mask_hook=None) -> Check:
    worst = 0.0
    for cfg, (Q, K, V) in instances:
        Qn, Kn, Vs = _prepared(Q, K, V, cfg)
        mask = None if mask_hook is None else mask_hook(cfg.s)
        ref = causal_oracle(Qn, Kn, Vs, cfg, mask=mask)
        got = causal_linear_forward(Qn, Kn, Vs, cfg, chunk_len)
        worst = max(worst, float(np.max(np.abs(ref - got))))
    return Check("oracle-equivalence", worst < tol, worst)


def grouping_equivalence(instances, tol) -> Check:
    worst = 0.0
    for cfg, (Q, K, V) in instances:
        a = bidirectional_cos_attention(Q, K, V, cfg, "scores-first")
        b = bidirectional_cos_attention(Q, K, V, cfg, "kv-first")
        worst = max(worst, float(np.max(np.abs(a - b))))
    return Check("grouping-equivalence", worst < tol, worst)


def chunk_invariance(instances, chunk_len, tol) -> Check:
    worst = 0.0
    for cfg, (Q, K, V) in instances:
        a = causal_cos_attention(Q, K, V, cfg, chunk_len=1)
        b = causal_cos_attention(Q, K, V, cfg, chunk_len=chunk_len)
        worst = max(worst, float(np.max(np.abs(a - b))))
    return Check("chunk-invariance", worst < tol, worst)


def stream_batch_equivalence(instances, chunk_len, tol) -> tuple[Check, Check]:
    worst = 0.0
    spread = 0
    for cfg, (Q, K, V) in instances:
        batch = causal_cos_attention(Q, K, V, cfg, chunk_len=chunk_len)
        streamed, step_bytes = stream_sequence(Q, K, V, cfg, return_step_bytes=True)
        worst = max(worst, float(np.max(np.abs(batch - streamed))))
        spread = max(spread, max(step_bytes) - min(step_bytes))
    return (
        Check("stream-batch-equivalence", worst < tol, worst),
        Check("stream-constant-memory", spread == 0, float(spread)),
    )


def causality(cfg: AttentionConfig, Q, K, V, chunk_len, mask_hook=None) -> Check:
    """Perturb each token t' in K and V; every output before t' must be bit-identical.

    Covers all (t, t') pairs with t < t' for the oracle, the scan and the stream.
    """
    Qn, Kn, Vs = _prepared(Q, K, V, cfg)
    mask = None if mask_hook is None else mask_hook(cfg.s)
    routes = {
        "oracle": lambda q, k, v: causal_oracle(q, k, v, cfg, mask=mask),
        "scan": lambda q, k, v: causal_linear_forward(q, k, v, cfg, chunk_len),
        "stream": lambda q, k, v: stream_sequence(q, k, v, cfg),
    }
    raw = {"oracle": (Qn, Kn, Vs), "scan": (Qn, Kn, Vs), "stream": (Q, K, V)}
    worst = 0.0
    for name, route in routes.items():
        q, k, v = raw[name]
        base = route(q, k, v)
        for tp in range(1, cfg.s):
            k2, v2 = k.copy(), v.copy()
            k2[:, :, tp] += 1.0
            v2[:, :, tp] -= 1.0
            moved = route(q, k2, v2)
            changed = base[:, :, :tp] != moved[:, :, :tp]
            if changed.any():
                worst = max(worst, float(np.max(np.abs(base[:, :, :tp] - moved[:, :, :tp]))))
    return Check("causality", worst == 0.0, worst)


def similarity_bound(instances, tol) -> Check:
    worst = 0.0
    for _, (Q, K, _) in instances:
        # Scale rows wildly so normalization, not the data, enforces the bound.
        scales = np.exp(np.linspace(-20, 20, Q.shape[-2])).reshape(1, 1, -1, 1)
        sim = cosine_similarity(Q * scales, K[..., ::-1, :] * scales)
        worst = max(worst, float(np.max(np.abs(sim))) - 1.0)
    return Check("similarity-bound", worst <= tol, max(worst, 0.0))


def stabilization_bounds(s_max: int, tol) -> Check:
    """Divisor within [1, s] over a wide m range; s=1 is identity; m=0, s=4 gives 2."""
    ms = np.concatenate([np.linspace(-50, 50, 101), [-1e6, 1e6]])
    worst = 0.0
    for s in sorted({1, 2, 4, s_max}):
        div = stabilization_divisor(float(s), ms).reshape(-1)
        below = np.maximum(1.0 - div, 0.0)
        above = np.maximum(div - s, 0.0)
        worst = max(worst, float(below.max()), float(above.max()))
    V = np.arange(6.0).reshape(1, 1, 2, 3)
    worst = max(worst, float(np.max(np.abs(stabilize_values(V, 1.0, [3.7]) - V))))
    worst = max(worst, abs(float(stabilization_divisor(4.0, [0.0]).item()) - 2.0))
    return Check("stabilization-bounds", worst <= tol, worst)


def run_verify(
    cfg: AttentionConfig,
    seed: int = 42,
    chunk_len: int = 128,
    n_random: int = 20,
    precision: str = "high",
    corrupt_mask: bool = False,
) -> list[Check]:
    """Run every verification check and return them in a fixed order.

    ``corrupt_mask`` swaps the oracle's mask for the strictly-lower one (a
    fault-injection hook): still causal, but no longer the right operator.
    """
    tol = TOLERANCE[precision]
    rng = np.random.default_rng(seed)
    instances = list(_instances(cfg, n_random, rng, precision))
    hook = (lambda s: causal_mask(s, strict=True)) if corrupt_mask else None
    head_cfg, (Q, K, V) = instances[0]
    stream_checks = stream_batch_equivalence(instances, chunk_len, tol)
    return [
        oracle_equivalence(instances, chunk_len, tol, hook),
        grouping_equivalence(instances, tol),
        chunk_invariance(instances, chunk_len, tol),
        *stream_checks,
        causality(head_cfg, Q, K, V, chunk_len, hook),
        similarity_bound(instances, tol),
        stabilization_bounds(cfg.s, tol),
    ]
