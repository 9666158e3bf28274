import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from dataset import DataSet, Family  # noqa: E402
from simkit import Scenario, gen_dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def linear_data(rng):
    """Control-function DGP with f(X) = X, one instrument and one covariate."""
    n = 2000
    z, c, u, eps, e = rng.standard_normal((5, n))
    delta1 = u + eps
    x = 1.0 + 0.8 * z + c + delta1
    y = 1.0 + x + c + delta1 + e
    return DataSet(z=z, c=c, x=x, y=y)


@pytest.fixture
def quad_data():
    return gen_dataset(Scenario(causal_f="quad3", n=3000, pve=0.25, base_seed=7), 0)


@pytest.fixture
def binary_data():
    sc = Scenario(causal_f="quad3", n=3000, pve=0.25, outcome_family=Family.BINOMIAL, base_seed=11)
    return gen_dataset(sc, 0)


@pytest.fixture
def sine_data():
    return gen_dataset(Scenario(causal_f="sin", n=2000, pve=0.25, exposure_intercept=10.0, base_seed=3), 0)


@pytest.fixture
def write_toml(tmp_path):
    def _write(text: str, name: str = "config.toml") -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write
