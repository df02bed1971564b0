from __future__ import annotations

import numpy as np
import pytest

from lvcons.topology import EdgeSpec, ExclusiveGroup, StochasticTopologySpec


def six_node_spec(d_bar: int = 0, noise_var: float = 0.0, weights=None) -> StochasticTopologySpec:
    """Agent 1 hears agent 2 or 3 (1/2 each); 4->2, 5->3, 5->4, 6->5, 1->6 always present."""
    pmf = (1.0,) if d_bar == 0 else (0.5, 0.5)
    w = weights or {}
    links = [(0, 1, 0.5), (0, 2, 0.5), (1, 3, 1.0), (2, 4, 1.0), (3, 4, 1.0), (4, 5, 1.0), (5, 0, 1.0)]
    edges = tuple(EdgeSpec(i, j, pa, w.get((i, j), 1.0), 0.0, pmf) for i, j, pa in links)
    return StochasticTopologySpec(6, d_bar, edges, (ExclusiveGroup(0, ((1, 0.5), (2, 0.5))),), noise_var)


BALANCED_WEIGHTS = {(1, 3): 0.5, (2, 4): 0.5, (3, 4): 0.5}


@pytest.fixture
def six():
    return six_node_spec()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
