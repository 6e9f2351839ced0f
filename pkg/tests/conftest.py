import numpy as np
import pytest

from mixopt.dataset import Domain, Trajectory


def make_domain(idx, name, lengths, d_s=3, d_a=2, seed=0):
    rng = np.random.default_rng([seed, idx])
    trajs = tuple(
        Trajectory(rng.normal(size=(n, d_s)), rng.normal(size=(n, d_a))) for n in lengths
    )
    return Domain(idx, name, trajs)


@pytest.fixture
def two_domains():
    return [make_domain(0, "alpha", [4, 5, 6]), make_domain(1, "beta", [3, 3, 3, 2, 7])]
