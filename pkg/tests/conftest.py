from __future__ import annotations

import numpy as np
import pytest

from hetsolver.datagen import Layout, OracleGeometry
from hetsolver.hetgraph import NodeWindow, build_graph
from hetsolver.model import ModelConfig, init_params, make_batch


def random_graph(rng: np.random.Generator, max_fluid: int = 6, max_solid: int = 3,
                 layout: str = "channel1d"):
    ns = int(rng.integers(1, max_solid + 1))
    if layout == Layout.GRID2D.value:
        geometry = OracleGeometry(ns * int(rng.integers(2, 4)), ns, float(rng.uniform(0.5, 2.0)),
                                  layout=layout)
    else:
        geometry = OracleGeometry(int(rng.integers(2, max_fluid + 1)), ns,
                                  float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 2.0)))
    return build_graph(geometry)


def random_window(rng: np.random.Generator, graph, config: ModelConfig) -> NodeWindow:
    n = graph.num_nodes
    return NodeWindow(rng.normal(size=(n, config.window, max(config.in_channels))),
                      rng.normal(size=(n, config.phys_dim)), float(rng.uniform(0.05, 0.5)))


def randomize(params, rng: np.random.Generator, scale: float = 0.5):
    for t in params:
        t.data = rng.normal(scale=scale, size=t.shape)
    return params


@pytest.fixture
def small_config() -> ModelConfig:
    return ModelConfig(d=4, layers=2, window=2, pos_dim=1, time_dim=4, phys_dim=3)


@pytest.fixture
def small_case(small_config):
    rng = np.random.default_rng(7)
    graph = build_graph(OracleGeometry(4, 2, 1.0, 1.0, gap=0.5))
    window = random_window(rng, graph, small_config)
    batch = make_batch([(graph, window)])
    params = randomize(init_params(small_config, 0), rng)
    return graph, window, batch, params
