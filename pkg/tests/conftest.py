from pathlib import Path

import pytest

import py_skeb
from py_skeb.components.corpus_graph import DomainGraph, Entity, WeightedEdge
from py_skeb.components.gateway import MockGateway
from py_skeb.utility.config import RunConfig

SYNTHETIC = Path(py_skeb.__file__).parent / "data" / "synthetic"


def make_graph(n_nodes, edges, freqs=None):
    """DomainGraph on ids 0..n_nodes-1 from (u, v, w) triples."""
    freqs = freqs or [1] * n_nodes
    entities = [Entity(i, f"entity {i}", (), "character", freqs[i]) for i in range(n_nodes)]
    return DomainGraph(entities, [WeightedEdge(u, v, w) for u, v, w in edges])


@pytest.fixture
def triangle():
    return make_graph(3, [(0, 1, 1), (1, 2, 2), (0, 2, 3)], freqs=[3, 4, 5])


@pytest.fixture
def path3():
    return make_graph(3, [(0, 1, 1), (1, 2, 1)], freqs=[2, 2, 2])


@pytest.fixture
def synthetic_dir():
    return SYNTHETIC


@pytest.fixture
def synthetic_config(tmp_path):
    def _make(name="run", **sections):
        overrides = {"paths": {"output_dir": str(tmp_path / name)}}
        for section, values in sections.items():
            overrides.setdefault(section, {}).update(values)
        return RunConfig.from_toml(SYNTHETIC / "run.toml", overrides=overrides)

    return _make


@pytest.fixture
def judge_gateway():
    """A mock gateway answering judge prompts by a snippet of the response."""

    def _make(answers):
        rules = []
        for (model, snippet), text in answers.items():
            rules.append({"model": model, "contains": ["You are an evaluator", snippet], "response_text": text})
        return MockGateway(rules)

    return _make
