import math
import random
from collections import deque
from itertools import pairwise

import networkx as nx
import pytest

from py_skeb.components.entanglement import (
    CONSTANT_METRIC,
    EMPTY_SUBGRAPH,
    METRICS,
    NO_EDGES,
    NO_REACHABLE_PAIRS,
    SINGLE_NODE,
    UNREACHABLE_FROM_REFERENCES,
    DwisConfig,
    EntanglementVector,
    connection_metrics,
    dwis,
    entanglement_vector,
    induce_subgraph,
    metric_names,
    node_metrics,
    normalize_scores,
    score_prompts,
    topology_metrics,
)
from py_skeb.components.prompts import PromptRecord
from py_skeb.utility.exceptions import EmptyReferenceSet, EmptySubgraph, InputEmpty, UnknownEntity

from .conftest import make_graph


def _bfs(adj, source, allowed):
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v in allowed and v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def brute_force_vector(n_nodes, edges, freqs, nodes, refs, delta):
    """The nine metrics by direct enumeration over the edge list."""
    adj = {i: set() for i in range(n_nodes)}
    for u, v, _ in edges:
        adj[u].add(v)
        adj[v].add(u)
    internal = [(u, v, w) for u, v, w in edges if u in nodes and v in nodes]
    n, e = len(nodes), len(internal)
    m2 = math.fsum(w for _, _, w in internal)
    m1 = m2 / n
    m3 = m2 / e if e else 0.0
    m4 = math.fsum(freqs[i] for i in nodes) / n
    m5 = sum(len(adj[i]) for i in nodes) / n
    m6 = 2 * e / (n * (n - 1)) if n >= 2 else 0.0
    sub_adj = {i: {j for j in adj[i] if j in nodes} for i in nodes}
    hops = []
    for a in nodes:
        dist = _bfs(sub_adj, a, nodes)
        hops += [d for b, d in dist.items() if b != a]
    m7 = sum(hops) / len(hops) if hops else 0.0
    m8 = e / n
    everything = set(range(n_nodes))
    per_ref = [_bfs(adj, r, everything) for r in refs]
    m9 = 0.0
    for i in nodes:
        reachable = [d[i] for d in per_ref if i in d]
        if reachable:
            m9 += freqs[i] * delta ** min(reachable)
    return (m1, m2, m3, m4, m5, m6, m7, m8, m9)


def test_induce_triangle(triangle):
    sub = induce_subgraph(triangle, {0, 1, 2})
    assert sub.edges == {(0, 1): 1.0, (0, 2): 3.0, (1, 2): 2.0}
    assert induce_subgraph(triangle, {1}).edges == {}


def test_induce_unknown(triangle):
    with pytest.raises(UnknownEntity):
        induce_subgraph(triangle, {0, 7})


def test_induce_matches_edge_filter():
    rng = random.Random(3)
    g = nx.gnp_random_graph(8, 0.5, seed=3)
    edges = [(u, v, rng.randint(1, 5)) for u, v in g.edges]
    graph = make_graph(8, edges)
    for _ in range(20):
        nodes = set(rng.sample(range(8), rng.randint(0, 8)))
        expected = {(min(u, v), max(u, v)): float(w) for u, v, w in edges if u in nodes and v in nodes}
        assert induce_subgraph(graph, nodes).edges == expected


def test_connection_metrics(triangle):
    assert connection_metrics(induce_subgraph(triangle, {0, 1, 2})) == (2.0, 6.0, 2.0)
    single = make_graph(2, [(0, 1, 5)])
    assert connection_metrics(induce_subgraph(single, {0, 1})) == (2.5, 5.0, 5.0)
    assert connection_metrics(induce_subgraph(make_graph(2, []), {0, 1})) == (0.0, 0.0, 0.0)


def test_node_metrics():
    g = make_graph(5, [(0, 2, 1), (0, 3, 1), (0, 4, 1), (1, 2, 1), (1, 3, 1), (1, 4, 1), (2, 3, 1)],
                   freqs=[10, 20, 1, 1, 1])
    # parent degrees 3 and 3; frequencies 10 and 20
    assert node_metrics(induce_subgraph(g, {0, 1})) == (15.0, 3.0)
    star = make_graph(4, [(0, 1, 1), (0, 2, 1), (0, 3, 1)], freqs=[7, 1, 1, 1])
    assert node_metrics(induce_subgraph(star, {0})) == (7.0, 3.0)
    with pytest.raises(EmptySubgraph):
        node_metrics(induce_subgraph(star, set()))


def test_topology_metrics(triangle, path3):
    assert topology_metrics(induce_subgraph(triangle, {0, 1, 2})) == (1.0, 1.0, 1.0)
    m6, m7, m8 = topology_metrics(induce_subgraph(path3, {0, 1, 2}))
    assert m6 == pytest.approx(2 / 3)
    assert m7 == pytest.approx(4 / 3)
    assert m8 == pytest.approx(2 / 3)
    assert topology_metrics(induce_subgraph(make_graph(2, []), {0, 1})) == (0.0, 0.0, 0.0)


def test_dwis_examples():
    g = make_graph(3, [(0, 1, 1), (1, 2, 1)], freqs=[3, 9, 4])
    sub = induce_subgraph(g, {0})
    assert dwis(sub, DwisConfig({0}, 0.5)) == 3.0
    sub = induce_subgraph(g, {2})
    assert dwis(sub, DwisConfig({0}, 0.5)) == 1.0


def test_dwis_unreachable_contributes_zero():
    g = make_graph(3, [(0, 1, 1)], freqs=[2, 2, 5])
    assert dwis(induce_subgraph(g, {1, 2}), DwisConfig({0})) == 1.0


def test_dwis_empty_references(triangle):
    with pytest.raises(EmptyReferenceSet):
        dwis(induce_subgraph(triangle, {0}), DwisConfig(frozenset()))
    with pytest.raises(ValueError):
        DwisConfig({0}, delta=1.0)


def test_dwis_matches_bfs_oracle():
    rng = random.Random(11)
    for seed in range(10):
        g = nx.gnp_random_graph(8, 0.3, seed=seed)
        edges = [(u, v, 1) for u, v in g.edges]
        freqs = [rng.randint(0, 9) for _ in range(8)]
        graph = make_graph(8, edges, freqs)
        refs = set(rng.sample(range(8), rng.randint(1, 3)))
        nodes = set(rng.sample(range(8), rng.randint(1, 8)))
        expected = brute_force_vector(8, edges, freqs, nodes, refs, 0.5)[8]
        assert dwis(induce_subgraph(graph, nodes), DwisConfig(refs, 0.5)) == pytest.approx(expected, abs=1e-9)


def test_vector_flags(triangle):
    v = entanglement_vector(triangle, {1}, DwisConfig({0}), prompt_id="p")
    assert {NO_EDGES, SINGLE_NODE, NO_REACHABLE_PAIRS} <= v.flags
    assert v.prompt_id == "p"
    with pytest.raises(EmptySubgraph):
        entanglement_vector(triangle, set(), DwisConfig({0}))


def test_vector_is_composition():
    rng = random.Random(5)
    g = nx.gnp_random_graph(10, 0.4, seed=5)
    graph = make_graph(10, [(u, v, rng.randint(1, 4)) for u, v in g.edges], [rng.randint(1, 9) for _ in range(10)])
    cfg = DwisConfig({0, 1}, 0.3)
    for _ in range(20):
        nodes = set(rng.sample(range(10), rng.randint(1, 6)))
        sub = induce_subgraph(graph, nodes)
        v = entanglement_vector(graph, nodes, cfg)
        expected = (*connection_metrics(sub), *node_metrics(sub), *topology_metrics(sub), dwis(sub, cfg))
        assert tuple(v.values().values()) == expected


def test_oracle_on_small_connected_graphs():
    rng = random.Random(2024)
    checked = 0
    for atlas_graph in nx.graph_atlas_g():
        n = atlas_graph.number_of_nodes()
        if n == 0 or n > 6 or not nx.is_connected(atlas_graph):
            continue
        for _ in range(3):
            edges = [(u, v, rng.uniform(0.5, 10.0)) for u, v in atlas_graph.edges]
            freqs = [rng.randint(0, 20) for _ in range(n)]
            graph = make_graph(n, edges, freqs)
            nodes = set(rng.sample(range(n), rng.randint(1, n)))
            refs = set(rng.sample(range(n), rng.randint(1, n)))
            delta = rng.uniform(0.1, 0.9)
            got = entanglement_vector(graph, nodes, DwisConfig(refs, delta)).values()
            expected = brute_force_vector(n, edges, freqs, nodes, refs, delta)
            for m, value in zip(METRICS, expected, strict=True):
                assert got[m] == pytest.approx(value, abs=1e-9), (m, sorted(atlas_graph.edges), nodes)
            checked += 1
    assert checked == 3 * 143


def test_weight_scaling():
    edges = [(0, 1, 1.0), (1, 2, 2.5), (0, 3, 4.0), (2, 3, 0.5)]
    cfg = DwisConfig({0}, 0.5)
    base = entanglement_vector(make_graph(4, edges, [1, 2, 3, 4]), {0, 1, 2, 3}, cfg).values()
    scaled = entanglement_vector(
        make_graph(4, [(u, v, 3 * w) for u, v, w in edges], [1, 2, 3, 4]), {0, 1, 2, 3}, cfg
    ).values()
    for m in ("m1", "m2", "m3"):
        assert scaled[m] == pytest.approx(3 * base[m])
    for m in ("m5", "m6", "m7", "m8", "m9"):
        assert scaled[m] == pytest.approx(base[m])


def test_dwis_monotone_in_delta():
    g = make_graph(4, [(0, 1, 1), (1, 2, 1), (2, 3, 1)], [1, 2, 3, 4])
    sub = induce_subgraph(g, {1, 2, 3})
    values = [dwis(sub, DwisConfig({0}, d)) for d in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert values == sorted(values)
    # adding a reference never lowers the score
    assert dwis(sub, DwisConfig({0, 3}, 0.5)) >= dwis(sub, DwisConfig({0}, 0.5))


def test_normalize_examples():
    vectors = [EntanglementVector(*([x] * 9), prompt_id=str(x)) for x in (2.0, 4.0, 6.0)]
    out = normalize_scores(vectors)
    assert [v.normalized["m1"] for v in out] == [0.0, 50.0, 100.0]
    assert out[1].m1 == 4.0

    flat = normalize_scores([EntanglementVector(*([1.0] * 9)) for _ in range(3)])
    assert all(v.normalized["m4"] == 0.0 for v in flat)
    assert all(CONSTANT_METRIC in v.flags and f"{CONSTANT_METRIC}:m4" in v.flags for v in flat)

    with pytest.raises(InputEmpty):
        normalize_scores([])


def test_normalize_preserves_order():
    rng = random.Random(9)
    vectors = [EntanglementVector(*(rng.uniform(0, 50) for _ in range(9))) for _ in range(30)]
    out = normalize_scores(vectors)
    for m in METRICS:
        raw = [getattr(v, m) for v in vectors]
        norm = [v.normalized[m] for v in out]
        assert all(0.0 <= x <= 100.0 for x in norm)
        assert sorted(range(30), key=raw.__getitem__) == sorted(range(30), key=norm.__getitem__)


def test_score_prompts_marks_empty_subgraph(triangle):
    records = [
        PromptRecord("a", "a", "orig", "text", entities={0, 1}),
        PromptRecord("b", "b", "orig", "text"),
    ]
    vectors = score_prompts(triangle, records, DwisConfig({0}), n_jobs=2)
    assert [v.prompt_id for v in vectors] == ["a", "b"]
    assert EMPTY_SUBGRAPH in vectors[1].flags
    assert vectors[1].m2 == 0.0
    assert vectors[0].m2 == 1.0


def test_vector_dict_round_trip(triangle):
    v = normalize_scores([entanglement_vector(triangle, {0, 1}, DwisConfig({0}), "a", "orig")])[0]
    assert EntanglementVector.from_dict(v.to_dict()) == v


def test_unreachable_flag():
    g = make_graph(4, [(0, 1, 1), (2, 3, 1)], freqs=[1, 1, 1, 1])
    assert UNREACHABLE_FROM_REFERENCES in entanglement_vector(g, {1, 2}, DwisConfig({0})).flags
    assert UNREACHABLE_FROM_REFERENCES not in entanglement_vector(g, {0, 1}, DwisConfig({0})).flags


def test_metric_names():
    names = metric_names()
    assert list(names) == list(METRICS)
    assert names["m9"] == "DWIS"
    names["m1"] = "changed"
    assert metric_names()["m1"] == "ECE"


def test_adding_an_edge_never_lowers_weight_or_density():
    rng = random.Random(31)
    for seed in range(20):
        g = nx.gnp_random_graph(9, 0.35, seed=seed)
        edges = [(u, v, rng.randint(1, 5)) for u, v in g.edges]
        nodes = set(rng.sample(range(9), rng.randint(2, 9)))
        missing = [(u, v) for u in sorted(nodes) for v in sorted(nodes) if u < v and not g.has_edge(u, v)]
        if not missing:
            continue
        u, v = rng.choice(missing)
        cfg = DwisConfig({0})
        before = entanglement_vector(make_graph(9, edges), nodes, cfg).values()
        grown = make_graph(9, [*edges, (u, v, rng.randint(1, 5))])
        after = entanglement_vector(grown, nodes, cfg).values()
        for m in ("m2", "m6", "m8"):
            assert after[m] >= before[m], (m, seed)


@pytest.mark.parametrize("delta", [0.1, 0.5, 0.9])
def test_contribution_decays_with_hops(delta):
    k = 6
    path = make_graph(k + 1, [(i, i + 1, 1) for i in range(k)], freqs=[7] * (k + 1))
    cfg = DwisConfig({0}, delta)
    contributions = [dwis(induce_subgraph(path, {h}), cfg) for h in range(k + 1)]
    assert contributions[0] == 7.0
    assert all(a > b > 0 for a, b in pairwise(contributions))
