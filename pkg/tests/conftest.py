import numpy as np
import pytest


@pytest.fixture
def rng_values():
    """Mixed-scale random float64 draws for quantizer property tests."""
    r = np.random.default_rng(1234)

    def draw(n, max_exp=40, min_exp=-40):
        exps = r.uniform(min_exp, max_exp, n)
        signs = np.where(r.uniform(0, 1, n) < 0.5, -1.0, 1.0)
        vals = signs * np.exp2(exps) * r.uniform(1.0, 2.0, n)
        vals[r.uniform(0, 1, n) < 0.01] = 0.0
        return vals

    return draw
