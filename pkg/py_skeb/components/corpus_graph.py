import logging
import re
from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import networkx as nx
from joblib import Parallel, delayed
from joblib.externals.loky import set_loky_pickler

from ..utility.exceptions import FormatError, InputEmpty, NoSegments
from ..utility.util import read_json, sha256_obj, sha256_text, write_json

set_loky_pickler("dill")

logger = logging.getLogger(__name__)

CATEGORIES = ("character", "location", "object", "event")


@dataclass(frozen=True)
class Entity:
    """
    A domain entity (a node of the domain graph).

    Parameters
    ----------
    id : int
        Stable integer identifier, unique within a graph.
    canonical_name : str
        The display name. Always the first alias.
    aliases : tuple of str
        Surface forms matched in text.
    category : str
        One of "character", "location", "object", or "event".
    freq : int, optional
        Total mention count across the corpus. Computed by build_graph; a
        gazetteer entry carries 0.
    """

    id: int
    canonical_name: str
    aliases: tuple
    category: str
    freq: int = 0

    def __post_init__(self):
        aliases = [self.canonical_name]
        aliases += [a for a in self.aliases if a != self.canonical_name]
        object.__setattr__(self, "aliases", tuple(dict.fromkeys(aliases)))
        if not isinstance(self.id, int) or isinstance(self.id, bool):
            raise ValueError(f"entity id must be an integer, got {self.id!r}")
        if not self.canonical_name.strip():
            raise ValueError(f"entity {self.id} has an empty name")
        if self.category not in CATEGORIES:
            raise ValueError(
                f"entity {self.id} has category {self.category!r}; "
                f"expected one of {CATEGORIES}"
            )
        if self.freq < 0:
            raise ValueError(f"entity {self.id} has negative freq {self.freq}")

    def to_dict(self):
        return {
            "id": self.id,
            "name": self.canonical_name,
            "aliases": list(self.aliases),
            "category": self.category,
            "freq": self.freq,
        }


@dataclass(frozen=True)
class WeightedEdge:
    """An undirected edge; endpoints are stored with u < v."""

    u: int
    v: int
    weight: float

    def __post_init__(self):
        if self.u == self.v:
            raise ValueError(f"self-loop on entity {self.u}")
        if not self.weight > 0:
            raise ValueError(f"edge ({self.u}, {self.v}) has non-positive weight")
        if self.u > self.v:
            u, v = self.v, self.u
            object.__setattr__(self, "u", u)
            object.__setattr__(self, "v", v)
        object.__setattr__(self, "weight", float(self.weight))

    @property
    def key(self):
        return (self.u, self.v)


class Gazetteer:
    """
    The entity list used to find mentions in text.

    Matching is case-insensitive, word-boundary anchored and longest-match
    first. No stemming is applied.

    Parameters
    ----------
    entries : list of Entity
        Entity definitions; their ``freq`` is ignored.

    Raises
    ------
    FormatError
        If two entries share an alias after case-folding, or ids repeat.
    """

    def __init__(self, entries):
        self.entries = tuple(sorted(entries, key=lambda e: e.id))
        self.alias_map = {}
        seen_ids = set()
        for e in self.entries:
            if e.id in seen_ids:
                raise FormatError(f"duplicate entity id {e.id} in gazetteer")
            seen_ids.add(e.id)
            for alias in e.aliases:
                key = alias.casefold()
                owner = self.alias_map.get(key)
                if owner is not None and owner != e.id:
                    raise FormatError(
                        f"alias {alias!r} is shared by entities {owner} and {e.id}"
                    )
                self.alias_map[key] = e.id

        # Longest alias first so that the regex alternation prefers it at a
        # given position; ties sorted for a stable pattern.
        aliases = sorted(
            {a for e in self.entries for a in e.aliases}, key=lambda a: (-len(a), a)
        )
        if aliases:
            body = "|".join(re.escape(a) for a in aliases)
            self.pattern = re.compile(rf"(?<!\w)(?:{body})(?!\w)", re.IGNORECASE)
        else:
            self.pattern = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def lookup(self, surface: str):
        """Return the entity id for a matched surface form."""
        eid = self.alias_map.get(surface.casefold())
        if eid is None:
            eid = self.alias_map.get(surface.lower())
        if eid is None:
            for e in self.entries:
                if any(re.fullmatch(re.escape(a), surface, re.I) for a in e.aliases):
                    return e.id
        return eid

    def to_records(self):
        return [
            {
                "id": e.id,
                "name": e.canonical_name,
                "aliases": list(e.aliases),
                "category": e.category,
            }
            for e in self.entries
        ]

    def hash(self):
        return sha256_obj(self.to_records())

    @classmethod
    def from_records(cls, records, path=None):
        entries = []
        for i, rec in enumerate(records):
            try:
                entries.append(
                    Entity(
                        id=rec["id"],
                        canonical_name=rec["name"],
                        aliases=tuple(rec.get("aliases", ())),
                        category=rec.get("category", "character"),
                    )
                )
            except (KeyError, TypeError, ValueError) as e:
                raise FormatError(f"invalid entity: {e}", path=path, offset=f"[{i}]") from e
        return cls(entries)

    @classmethod
    def load(cls, path):
        """Load a gazetteer from a JSON list of entity definitions."""
        records = read_json(path)
        if not isinstance(records, list):
            raise FormatError("gazetteer must be a JSON list", path=str(path))
        return cls.from_records(records, path=str(path))


class DomainGraph:
    """
    The weighted, undirected entity co-occurrence graph.

    A built graph is immutable; its networkx view is frozen at construction
    so that it can be shared between threads.

    Parameters
    ----------
    entities : iterable of Entity
        The nodes, with their corpus frequencies.
    edges : iterable of WeightedEdge
        At most one edge per unordered pair.
    provenance : dict, optional
        Corpus hash and build parameters.

    Attributes
    ----------
    entities : dict
        Entity id -> Entity, ids ascending.
    edges : dict
        (u, v) with u < v -> weight.
    nx_graph : networkx.Graph
        Frozen networkx view with ``weight`` edge attributes.
    """

    def __init__(self, entities, edges, provenance=None):
        ents = {}
        for e in entities:
            if e.id in ents:
                raise ValueError(f"duplicate entity id {e.id}")
            ents[e.id] = e
        self.entities = dict(sorted(ents.items()))

        eds = {}
        for edge in edges:
            if edge.u not in self.entities or edge.v not in self.entities:
                raise ValueError(f"edge {edge.key} references an unknown entity")
            if edge.key in eds:
                raise ValueError(f"duplicate edge {edge.key}")
            eds[edge.key] = edge.weight
        self.edges = dict(sorted(eds.items()))
        self.provenance = dict(provenance or {})

        g = nx.Graph()
        g.add_nodes_from(self.entities)
        g.add_weighted_edges_from((u, v, w) for (u, v), w in self.edges.items())
        self.nx_graph = nx.freeze(g)

    def __eq__(self, other):
        if not isinstance(other, DomainGraph):
            return NotImplemented
        return (
            self.entities == other.entities
            and self.edges == other.edges
            and self.provenance == other.provenance
        )

    def __contains__(self, eid):
        return eid in self.entities

    def weight(self, u, v):
        return self.edges.get((min(u, v), max(u, v)))

    def degree(self, n):
        return self.nx_graph.degree(n)

    def freq(self, n):
        return self.entities[n].freq

    def neighbors(self, n):
        return self.nx_graph.neighbors(n)

    def summary(self):
        return {
            "entities": len(self.entities),
            "edges": len(self.edges),
            "total_mentions": sum(e.freq for e in self.entities.values()),
            "isolated": sum(1 for n in self.entities if self.degree(n) == 0),
        }

    def to_dict(self):
        return {
            "entities": [e.to_dict() for e in self.entities.values()],
            "edges": [{"u": u, "v": v, "w": w} for (u, v), w in self.edges.items()],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data, path=None):
        if not isinstance(data, dict):
            raise FormatError("graph file must hold a JSON object", path=path)
        for key in ("entities", "edges"):
            if not isinstance(data.get(key), list):
                raise FormatError(f"missing list {key!r}", path=path)
        entities = []
        seen = set()
        for i, rec in enumerate(data["entities"]):
            try:
                e = Entity(
                    id=rec["id"],
                    canonical_name=rec["name"],
                    aliases=tuple(rec["aliases"]),
                    category=rec["category"],
                    freq=rec["freq"],
                )
            except (KeyError, TypeError, ValueError) as err:
                raise FormatError(str(err), path=path, offset=f"entities[{i}]") from err
            if e.id in seen:
                raise FormatError(f"duplicate id {e.id}", path=path, offset=f"entities[{i}]")
            seen.add(e.id)
            entities.append(e)
        edges = []
        pairs = set()
        for i, rec in enumerate(data["edges"]):
            try:
                edge = WeightedEdge(rec["u"], rec["v"], rec["w"])
            except (KeyError, TypeError, ValueError) as err:
                raise FormatError(str(err), path=path, offset=f"edges[{i}]") from err
            if edge.u not in seen or edge.v not in seen:
                raise FormatError(
                    f"edge references unknown id ({edge.u}, {edge.v})",
                    path=path,
                    offset=f"edges[{i}]",
                )
            if edge.key in pairs:
                raise FormatError(f"duplicate edge {edge.key}", path=path, offset=f"edges[{i}]")
            pairs.add(edge.key)
            edges.append(edge)
        return cls(entities, edges, data.get("provenance", {}))


def read_corpus(path) -> str:
    return Path(path).read_text(encoding="utf-8")


def segment_corpus(raw_text: str, marker_pattern: str) -> list:
    """
    Split a corpus into chapters at lines matching a marker pattern.

    Each chapter starts with its marker line. Text before the first marker
    (front matter) is kept at the head of the first chapter, so that
    ``"".join(chapters) == raw_text``.

    Parameters
    ----------
    raw_text : str
        The corpus.
    marker_pattern : str
        A regular expression matched at line starts (``re.MULTILINE``); a
        leading ``^`` is added when missing.

    Returns
    -------
    list of str
        The chapters in corpus order.

    Raises
    ------
    InputEmpty
        If the corpus is empty or only whitespace.
    NoSegments
        If no line matches the marker.
    FormatError
        If the pattern does not compile.
    """
    if not raw_text or not raw_text.strip():
        raise InputEmpty("the corpus is empty")
    if not marker_pattern.startswith("^"):
        marker_pattern = "^" + marker_pattern
    try:
        marker = re.compile(marker_pattern, re.MULTILINE)
    except re.error as e:
        raise FormatError(f"invalid marker pattern {marker_pattern!r}: {e}") from e

    starts = [m.start() for m in marker.finditer(raw_text)]
    if not starts:
        raise NoSegments(f"no line matches the marker {marker_pattern!r}")
    starts[0] = 0
    bounds = [*starts, len(raw_text)]
    return [raw_text[bounds[i] : bounds[i + 1]] for i in range(len(starts))]


def extract_entities(text: str, gazetteer: Gazetteer) -> list:
    """
    Find gazetteer mentions in a text.

    Parameters
    ----------
    text : str
        Any text.
    gazetteer : Gazetteer
        The entity list.

    Returns
    -------
    list of tuple
        ``(entity id, (start, end))`` for each non-overlapping mention, in
        text order. At a given position the longest alias wins.
    """
    if gazetteer.pattern is None or not text:
        return []
    mentions = []
    for m in gazetteer.pattern.finditer(text):
        eid = gazetteer.lookup(m.group(0))
        if eid is not None:
            mentions.append((eid, m.span()))
    return mentions


def _count_chapter(chapter, gazetteer):
    return Counter(eid for eid, _ in extract_entities(chapter, gazetteer))


def build_graph(chapters, gazetteer, weight_fn=None, n_jobs=1, build_params=None):
    """
    Build the domain graph from chapters.

    Edge weight(u, v) is the number of chapters mentioning both u and v at
    least once. freq(n) is the total number of mentions of n. Repeated
    co-mentions within a chapter count once.

    Parameters
    ----------
    chapters : list of str
        Output of segment_corpus.
    gazetteer : Gazetteer
        The entity list. Every entry becomes a node, mentioned or not.
    weight_fn : callable, optional
        Hook ``weight_fn(u, v, chapter_count) -> float`` replacing the
        chapter-count weight. Non-positive results drop the edge.
    n_jobs : int, optional
        Number of joblib workers used for per-chapter extraction. The merge
        is order independent, so the result does not depend on it.
    build_params : dict, optional
        Extra parameters recorded in the provenance (e.g. the marker).

    Returns
    -------
    DomainGraph
    """
    if not chapters:
        raise InputEmpty("no chapters to build a graph from")

    if n_jobs == 1 or len(chapters) == 1:
        per_chapter = [_count_chapter(c, gazetteer) for c in chapters]
    else:
        per_chapter = Parallel(n_jobs=n_jobs)(
            delayed(_count_chapter)(c, gazetteer) for c in chapters
        )

    freq = Counter()
    pair_counts = Counter()
    for counts in per_chapter:
        freq.update(counts)
        pair_counts.update(combinations(sorted(counts), 2))

    entities = [
        Entity(e.id, e.canonical_name, e.aliases, e.category, freq.get(e.id, 0))
        for e in gazetteer
    ]
    edges = []
    for (u, v), c in sorted(pair_counts.items()):
        w = float(c) if weight_fn is None else float(weight_fn(u, v, c))
        if w > 0:
            edges.append(WeightedEdge(u, v, w))

    provenance = {
        "corpus_sha256": sha256_text("".join(chapters)),
        "gazetteer_sha256": gazetteer.hash(),
        "n_chapters": len(chapters),
        "weight": "chapter_count" if weight_fn is None else getattr(weight_fn, "__name__", "custom"),
    }
    provenance.update(build_params or {})

    g = DomainGraph(entities, edges, provenance)
    logger.info(
        "Built domain graph: %d entities, %d edges from %d chapters",
        len(g.entities),
        len(g.edges),
        len(chapters),
    )
    return g


def save_graph(g: DomainGraph, path):
    """Write a graph in the canonical JSON format (sorted keys, ids ascending)."""
    write_json(g.to_dict(), path, indent=1)


def load_graph(path) -> DomainGraph:
    """
    Read a graph written by save_graph.

    Raises
    ------
    FormatError
        With line/column for syntax errors, or a JSON location such as
        ``edges[3]`` for invariant violations.
    """
    return DomainGraph.from_dict(read_json(path), path=str(path))
