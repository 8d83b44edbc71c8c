import numpy as np
import pytest

from pathgeo import netgraph


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_theta(net, rng, scale=0.8):
    return rng.normal(0.0, scale, size=net.n_param)


def safe_eval_point(net, rng, min_gap=1e-3, tries=200, scale=0.8, n_inputs=1):
    """(theta, X) whose pre-activations stay away from the ReLU kink."""
    for _ in range(tries):
        theta = random_theta(net, rng, scale)
        X = rng.normal(0.0, 1.0, size=(n_inputs, len(net.input_nodes)))
        trace = netgraph.forward(net, theta, X)
        z_int = trace.z[net.internal_nodes]
        if z_int.size == 0 or np.abs(z_int).min() > min_gap:
            return theta, X
    raise AssertionError("could not find a kink-free evaluation point")
