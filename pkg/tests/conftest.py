import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def qkv(rng, N, H, s, d_key, d_value):
    return (
        rng.standard_normal((N, H, s, d_key)),
        rng.standard_normal((N, H, s, d_key)),
        rng.standard_normal((N, H, s, d_value)),
    )
