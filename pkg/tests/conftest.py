import numpy as np
import pytest

from dhh import nets


@pytest.fixture
def exact_spring_hamiltonian():
    """H(q, p) = q^2 + p^2 (mass-spring with m=1/2, k=2) as an exact network."""
    cfg = nets.MlpConfig(2, 1, (2,), "square")
    params = nets.NetworkParams([np.eye(2), np.array([[1.0, 1.0]])], [np.zeros(2), np.zeros(1)], cfg)
    return params, cfg
