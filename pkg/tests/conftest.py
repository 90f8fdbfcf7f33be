import numpy as np
import pytest

from ndae_ident.power_model import NdaeModel, build_synthetic_model


def zero_nl(n):
    return lambda x_d, x_a: np.zeros(n)


def scalar_decay_model():
    """x_d' = -x_d with the algebraic tail x_a = 2 x_d."""
    return NdaeModel(a_d=[[-1.0]], c_d=[[0.0]], b=[[0.0]], a_a=[[1.0]], c_a=[[1.0]],
                     h=[0.0], w0=0.0, f=zero_nl(1), g=lambda x_d, x_a: -2.0 * x_d)


@pytest.fixture
def decay_model():
    return scalar_decay_model()


@pytest.fixture(scope="session")
def synthetic3():
    return build_synthetic_model(3, 0)


@pytest.fixture(scope="session")
def synthetic1():
    return build_synthetic_model(1, 7)


def zero_input(m):
    return lambda t: np.zeros(m)
