from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

STAB_MODES = ("fixed", "growing")


@dataclass
class AttentionConfig:
    """Shapes and stabilization settings for one attention call.

    ``m`` holds one stabilization exponent per head; values are divided by
    ``s_len ** sigmoid(m)``. ``stab_mode="growing"`` divides the value at
    position t (0-based) by ``(t + 1) ** sigmoid(m)`` instead of using the
    full sequence length.
    """

    N: int
    H: int
    s: int
    d_key: int
    d_value: int
    m: np.ndarray = field(default=None)
    eps_norm: float = 1e-12
    stab_mode: str = "fixed"

    def __post_init__(self):
        for name in ("N", "H", "s", "d_key", "d_value"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.m is None:
            self.m = np.full(self.H, 0.5)
        self.m = np.asarray(self.m, dtype=np.float64).reshape(-1)
        if self.m.shape != (self.H,):
            raise ConfigError(f"m must have one entry per head ({self.H}), got {self.m.shape}")
        if not np.all(np.isfinite(self.m)):
            raise ConfigError("m must be finite")
        if not self.eps_norm > 0:
            raise ConfigError("eps_norm must be positive")
        if self.stab_mode not in STAB_MODES:
            raise ConfigError(f"stab_mode must be one of {STAB_MODES}, got {self.stab_mode!r}")

    @property
    def qk_shape(self) -> tuple[int, int, int, int]:
        return (self.N, self.H, self.s, self.d_key)

    @property
    def v_shape(self) -> tuple[int, int, int, int]:
        return (self.N, self.H, self.s, self.d_value)

    @property
    def state_shape(self) -> tuple[int, int, int, int]:
        return (self.N, self.H, self.d_value, self.d_key)

    @classmethod
    def from_tensors(cls, Q, K, V, m=None, **kwargs) -> "AttentionConfig":
        N, H, s, d_key = Q.shape
        return cls(N=N, H=H, s=s, d_key=d_key, d_value=V.shape[-1], m=m, **kwargs)
