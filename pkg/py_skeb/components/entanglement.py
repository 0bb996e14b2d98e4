import logging
import math
from dataclasses import dataclass, field, replace

import networkx as nx
import numpy as np
from joblib import Parallel, delayed

from ..utility.exceptions import (
    EmptyReferenceSet,
    EmptySubgraph,
    InputEmpty,
    UnknownEntity,
)

logger = logging.getLogger(__name__)

METRIC_NAMES = {
    "m1": "ECE",  # edge connection entanglement
    "m2": "EWS",  # edge weight sum
    "m3": "AEWS",  # average edge weight strength
    "m4": "WNR",  # weighted node relevance
    "m5": "ANDE",  # average node degree entanglement
    "m6": "SGD",  # subgraph density
    "m7": "MSP",  # mean shortest path
    "m8": "RR",  # redundancy ratio
    "m9": "DWIS",  # distance-weighted influence score
}
METRICS = tuple(METRIC_NAMES)

# Degeneracy flags
NO_EDGES = "NO_EDGES"
NO_REACHABLE_PAIRS = "NO_REACHABLE_PAIRS"
SINGLE_NODE = "SINGLE_NODE"
UNREACHABLE_FROM_REFERENCES = "UNREACHABLE_FROM_REFERENCES"
EMPTY_SUBGRAPH = "EMPTY_SUBGRAPH"
CONSTANT_METRIC = "CONSTANT_METRIC"


def metric_names():
    """Return the short name of every metric id (m1 -> ECE, ...)."""
    return dict(METRIC_NAMES)


@dataclass(frozen=True)
class InducedSubgraph:
    """
    The nodes a prompt mentions and every parent edge among them.

    Attributes
    ----------
    nodes : frozenset
        Entity ids.
    edges : dict
        (u, v) with u < v -> weight, exactly the parent edges internal to
        ``nodes``.
    parent : DomainGraph
        The graph the subgraph was induced from.
    """

    nodes: frozenset
    edges: dict
    parent: object = field(repr=False, compare=False)

    @property
    def nx_graph(self):
        return self.parent.nx_graph.subgraph(self.nodes)


@dataclass(frozen=True)
class DwisConfig:
    """
    Parameters of the distance-weighted influence score.

    Parameters
    ----------
    reference_nodes : frozenset
        Entity ids the influence decays from.
    delta : float, optional
        Decay factor per hop, in (0, 1). By default 0.5.
    """

    reference_nodes: frozenset
    delta: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "reference_nodes", frozenset(self.reference_nodes))
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class EntanglementVector:
    """The nine entanglement metrics of one prompt's induced subgraph."""

    m1: float
    m2: float
    m3: float
    m4: float
    m5: float
    m6: float
    m7: float
    m8: float
    m9: float
    prompt_id: str | None = None
    variant: str | None = None
    flags: frozenset = frozenset()
    normalized: dict | None = None

    def values(self):
        return {m: getattr(self, m) for m in METRICS}

    def to_dict(self):
        d = {
            "prompt_id": self.prompt_id,
            "variant": self.variant,
            "flags": sorted(self.flags),
            **self.values(),
        }
        if self.normalized is not None:
            d["normalized"] = dict(self.normalized)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            **{m: float(d[m]) for m in METRICS},
            prompt_id=d.get("prompt_id"),
            variant=d.get("variant"),
            flags=frozenset(d.get("flags", ())),
            normalized=d.get("normalized"),
        )


def induce_subgraph(graph, entities) -> InducedSubgraph:
    """
    Induce the subgraph of a domain graph on a set of entities.

    Raises
    ------
    UnknownEntity
        If an id is not a node of ``graph``.
    """
    nodes = frozenset(entities)
    unknown = sorted(n for n in nodes if n not in graph)
    if unknown:
        raise UnknownEntity(f"entities not in the graph: {unknown}")
    adj = graph.nx_graph.adj
    edges = {}
    for u in sorted(nodes):
        for v, attr in adj[u].items():
            if u < v and v in nodes:
                edges[(u, v)] = attr["weight"]
    return InducedSubgraph(nodes, dict(sorted(edges.items())), graph)


def connection_metrics(sub: InducedSubgraph):
    """
    Compute ECE, EWS and AEWS.

    Returns
    -------
    tuple
        (m1, m2, m3). m2 is the total edge weight, m1 = m2 / |nodes| and
        m3 = m2 / |edges|. Undefined ratios are 0.
    """
    m2 = math.fsum(sub.edges.values())
    m1 = m2 / len(sub.nodes) if sub.nodes else 0.0
    m3 = m2 / len(sub.edges) if sub.edges else 0.0
    return m1, m2, m3


def node_metrics(sub: InducedSubgraph):
    """
    Compute WNR and ANDE from parent-graph frequencies and degrees.

    Returns
    -------
    tuple
        (m4, m5), the mean parent frequency and mean parent degree of the
        subgraph's nodes.

    Raises
    ------
    EmptySubgraph
        If the subgraph has no node.
    """
    if not sub.nodes:
        raise EmptySubgraph("node metrics need at least one node")
    g = sub.parent
    n = len(sub.nodes)
    m4 = math.fsum(g.freq(i) for i in sub.nodes) / n
    m5 = math.fsum(g.degree(i) for i in sub.nodes) / n
    return m4, m5


def _hop_statistics(sub: InducedSubgraph):
    """Sum and count of hop distances over ordered reachable node pairs."""
    total, pairs = 0, 0
    for _, lengths in nx.all_pairs_shortest_path_length(sub.nx_graph):
        for d in lengths.values():
            if d > 0:
                total += d
                pairs += 1
    return total, pairs


def topology_metrics(sub: InducedSubgraph):
    """
    Compute SGD, MSP and RR.

    Returns
    -------
    tuple
        (m6, m7, m8). MSP is the mean unweighted hop distance over ordered
        node pairs connected within the subgraph; 0 when there is none.
    """
    n, e = len(sub.nodes), len(sub.edges)
    m6 = 2 * e / (n * (n - 1)) if n >= 2 else 0.0
    total, pairs = _hop_statistics(sub)
    m7 = total / pairs if pairs else 0.0
    m8 = e / n if n >= 1 else 0.0
    return m6, m7, m8


def reference_hops(graph, reference_nodes):
    """
    Hop distance from every node of ``graph`` to its nearest reference node.

    Computed once per reference set with a multi-source search over the
    whole graph. Nodes that cannot reach any reference are absent.

    Raises
    ------
    EmptyReferenceSet
        If no reference node is given.
    UnknownEntity
        If a reference node is not in the graph.
    """
    refs = frozenset(reference_nodes)
    if not refs:
        raise EmptyReferenceSet("DWIS needs at least one reference node")
    unknown = sorted(r for r in refs if r not in graph)
    if unknown:
        raise UnknownEntity(f"reference nodes not in the graph: {unknown}")
    return nx.multi_source_dijkstra_path_length(
        graph.nx_graph, refs, weight=lambda u, v, d: 1
    )


def dwis(sub: InducedSubgraph, cfg: DwisConfig, hops=None) -> float:
    """
    Compute the distance-weighted influence score.

    m9 = sum of freq(n) * delta ** hops(n, R) over the subgraph's nodes, where
    hops(n, R) is the parent-graph hop distance from n to the nearest
    reference node. Nodes that cannot reach R contribute 0.

    Parameters
    ----------
    sub : InducedSubgraph
        The prompt's subgraph.
    cfg : DwisConfig
        Reference nodes and decay.
    hops : dict, optional
        Precomputed output of reference_hops for ``cfg.reference_nodes``.
    """
    if hops is None:
        hops = reference_hops(sub.parent, cfg.reference_nodes)
    elif not cfg.reference_nodes:
        raise EmptyReferenceSet("DWIS needs at least one reference node")
    g = sub.parent
    return math.fsum(
        g.freq(n) * cfg.delta ** hops[n] for n in sorted(sub.nodes) if n in hops
    )


def entanglement_vector(
    graph, prompt_entities, cfg, prompt_id=None, variant=None, hops=None
) -> EntanglementVector:
    """
    Compute all nine metrics for one prompt.

    Parameters
    ----------
    graph : DomainGraph
        The domain graph.
    prompt_entities : iterable of int
        The entities the prompt mentions.
    cfg : DwisConfig
        DWIS parameters.
    prompt_id, variant : str, optional
        Carried into the vector.
    hops : dict, optional
        Precomputed reference hops (see reference_hops).

    Raises
    ------
    EmptySubgraph
        If the prompt mentions no entity.
    """
    sub = induce_subgraph(graph, prompt_entities)
    if not sub.nodes:
        raise EmptySubgraph(f"prompt {prompt_id!r} mentions no entity")
    if hops is None:
        hops = reference_hops(graph, cfg.reference_nodes)

    m1, m2, m3 = connection_metrics(sub)
    m4, m5 = node_metrics(sub)
    m6, m7, m8 = topology_metrics(sub)
    m9 = dwis(sub, cfg, hops)

    flags = set()
    if not sub.edges:
        flags.add(NO_EDGES)
    if len(sub.nodes) == 1:
        flags.add(SINGLE_NODE)
    if m7 == 0.0:
        flags.add(NO_REACHABLE_PAIRS)
    if any(n not in hops for n in sub.nodes):
        flags.add(UNREACHABLE_FROM_REFERENCES)
    return EntanglementVector(
        m1, m2, m3, m4, m5, m6, m7, m8, m9,
        prompt_id=prompt_id, variant=variant, flags=frozenset(flags),
    )


def _score_one(graph, record, cfg, hops):
    try:
        return entanglement_vector(
            graph, record.entities, cfg, record.id, record.variant, hops
        )
    except EmptySubgraph:
        logger.debug("Prompt %s mentions no entity", record.id)
        return EntanglementVector(
            *([0.0] * 9),
            prompt_id=record.id,
            variant=record.variant,
            flags=frozenset({EMPTY_SUBGRAPH}),
        )


def score_prompts(graph, records, cfg: DwisConfig, n_jobs=1):
    """
    Score a list of annotated prompts.

    Reference hops are computed once for the batch. A prompt with no entity
    yields an all-zero vector flagged EMPTY_SUBGRAPH.

    Returns
    -------
    list of EntanglementVector
        In the order of ``records``.
    """
    hops = reference_hops(graph, cfg.reference_nodes)
    if n_jobs == 1:
        vectors = [_score_one(graph, r, cfg, hops) for r in records]
    else:
        vectors = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_score_one)(graph, r, cfg, hops) for r in records
        )
    n_empty = sum(EMPTY_SUBGRAPH in v.flags for v in vectors)
    logger.info("Scored %d prompts (%d without entities)", len(vectors), n_empty)
    return vectors


def normalize_scores(vectors):
    """
    Min-max scale every metric to [0, 100] over the given vectors.

    A metric that is constant over the list maps to 0 and every vector gets
    the flags ``CONSTANT_METRIC`` and ``CONSTANT_METRIC:<metric>``.

    Returns
    -------
    list of EntanglementVector
        Copies of the inputs with ``normalized`` filled in; raw values are
        kept.

    Raises
    ------
    InputEmpty
        If ``vectors`` is empty.
    """
    if not vectors:
        raise InputEmpty("nothing to normalize")
    values = np.array([[getattr(v, m) for m in METRICS] for v in vectors], dtype=float)
    lo, hi = values.min(axis=0), values.max(axis=0)
    span = hi - lo
    constant = span == 0
    scaled = np.zeros_like(values)
    ok = ~constant
    scaled[:, ok] = np.clip(100.0 * (values[:, ok] - lo[ok]) / span[ok], 0.0, 100.0)

    extra = set()
    for j, m in enumerate(METRICS):
        if constant[j]:
            extra.update({CONSTANT_METRIC, f"{CONSTANT_METRIC}:{m}"})
    return [
        replace(
            v,
            flags=v.flags | extra,
            normalized={m: float(scaled[i, j]) for j, m in enumerate(METRICS)},
        )
        for i, v in enumerate(vectors)
    ]
