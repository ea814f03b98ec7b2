from importlib import resources

import numpy as np
import pytest

from wardrop.latency import BPR, Affine
from wardrop.network import Edge, Network, parse_tntp


def parallel_net(latencies, demand: float) -> Network:
    """n parallel edges between one origin-destination pair."""
    edges = [Edge(0, 1, f) for f in latencies]
    return Network([0, 1], edges, [(0, 1)], np.array([demand]))


def braess_net(demand: float = 6.0) -> Network:
    """Four-node diamond with the cross edge; all three paths are used at
    equilibrium for the classic parameters (path cost 92 at demand 6)."""
    edges = [
        Edge(0, 1, Affine(10.0, 0.0)),  # o -> a
        Edge(0, 2, Affine(1.0, 50.0)),  # o -> b
        Edge(1, 3, Affine(1.0, 50.0)),  # a -> d
        Edge(2, 3, Affine(10.0, 0.0)),  # b -> d
        Edge(1, 2, Affine(1.0, 10.0)),  # a -> b (cross)
    ]
    return Network([0, 1, 2, 3], edges, [(0, 3)], np.array([demand]))


@pytest.fixture(scope="session")
def pigou():
    # constant link vs linear link, unit demand: the classic 4/3 instance
    return parallel_net([Affine(0.0, 1.0), Affine(1.0, 0.0)], 1.0)


@pytest.fixture(scope="session")
def braess():
    return braess_net()


@pytest.fixture(scope="session")
def sioux_falls():
    net_text = (resources.files("wardrop") / "data/siouxfalls_net.tntp").read_text()
    trips_text = (
        resources.files("wardrop") / "data/siouxfalls_evacuation_trips.tntp"
    ).read_text()
    return parse_tntp(net_text, trips_text)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_column_stochastic(rng, n: int, spread: float = 1.0) -> np.ndarray:
    """Random column-stochastic matrix, optionally shrunk towards identity."""
    raw = rng.random((n, n)) + 1e-3
    mat = raw / raw.sum(axis=0, keepdims=True)
    return (1.0 - spread) * np.eye(n) + spread * mat


def two_bpr_links(demand: float = 2.0) -> Network:
    return parallel_net(
        [BPR(1.0, 1.5, 0.15, 4.0), BPR(2.0, 3.0, 0.6, 4.0)], demand
    )
