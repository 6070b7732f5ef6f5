import numpy as np
import pytest

from dprisk.dpmcmc import GammaBase
from dprisk.loglinear import independence_spec
from dprisk.table import ContingencyTable, KeyVariable, draw_sample, generate_population


@pytest.fixture
def var_ab():
    return [KeyVariable("A", ("a0", "a1")), KeyVariable("B", ("b0", "b1"))]


@pytest.fixture
def var_5():
    return [KeyVariable("V", tuple("abcde"))]


@pytest.fixture
def toy_table_k5(var_5):
    """Five cells with mixed counts; pi chosen so rates are O(1)."""
    return ContingencyTable(var_5, f=[3, 1, 0, 2, 1], pi=0.4)


def make_sparse_sample(seed=0, pi=0.1, n_target=900, base=GammaBase(1.0, 1.0)):
    """Population with heterogeneous effects over a 6x5x4 table, plus a
    without-replacement sample that reliably contains uniques."""
    A = KeyVariable("A", tuple(str(i) for i in range(6)))
    B = KeyVariable("B", tuple(str(i) for i in range(5)))
    C = KeyVariable("C", tuple(str(i) for i in range(4)))
    spec = independence_spec([A, B, C])
    rng = np.random.default_rng(seed)
    beta = np.concatenate([[1.0], rng.normal(0, 0.6, spec.q - 1)])
    pop = generate_population(spec, beta, N_target=n_target, seed=seed + 1,
                              random_effects=base)
    sample = draw_sample(pop, pi, seed=seed + 2)
    return pop, sample, spec


@pytest.fixture
def sparse_sample():
    return make_sparse_sample()
