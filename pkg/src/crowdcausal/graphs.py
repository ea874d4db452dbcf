"""Directed acyclic graph core: representation, fixtures, enumeration, projection."""

from __future__ import annotations

import heapq
import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

TAU_EDGE = 0.5  # default confidence threshold for asserting an edge
ENUMERATION_LIMIT = 4


class GraphError(Exception):
    """Base class for graph-layer failures."""


class CycleError(GraphError):
    def __init__(self, message: str, cycle: Optional[list[str]] = None):
        super().__init__(message)
        self.cycle = cycle or []


class UnknownNode(GraphError):
    pass


class NodeSetMismatch(GraphError):
    pass


class TooLarge(GraphError):
    pass


class PairRelation(Enum):
    """Relation between an ordered pair (u, v): u causes v, v causes u, or neither."""

    FORWARD = 1
    NONE = 0
    BACKWARD = -1

    def flipped(self) -> "PairRelation":
        if self is PairRelation.FORWARD:
            return PairRelation.BACKWARD
        if self is PairRelation.BACKWARD:
            return PairRelation.FORWARD
        return PairRelation.NONE


def canonical_pair(u: str, v: str) -> tuple[str, str]:
    """Order a node pair lexicographically."""
    if u == v:
        raise ValueError(f"pair endpoints must differ, got {u!r} twice")
    return (u, v) if u < v else (v, u)


def canonical_pairs(nodes: Sequence[str]) -> list[tuple[str, str]]:
    """All unordered node pairs, canonically ordered and lexicographically sorted."""
    return list(itertools.combinations(sorted(nodes), 2))


def find_cycle(nodes: Iterable[str], edges: Iterable[tuple[str, str]]) -> Optional[list[str]]:
    """Return one directed cycle as a node list (first node repeated at the end), or None."""
    adj: dict[str, list[str]] = {n: [] for n in nodes}
    for u, v in edges:
        adj[u].append(v)
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in adj}
    stack: list[str] = []

    def visit(start: str) -> Optional[list[str]]:
        # Iterative DFS keeping the gray path on an explicit stack.
        frames = [(start, iter(adj[start]))]
        color[start] = GRAY
        stack.append(start)
        while frames:
            node, it = frames[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == GRAY:
                    i = stack.index(nxt)
                    return stack[i:] + [nxt]
                if color[nxt] == WHITE:
                    color[nxt] = GRAY
                    stack.append(nxt)
                    frames.append((nxt, iter(adj[nxt])))
                    advanced = True
                    break
            if not advanced:
                frames.pop()
                stack.pop()
                color[node] = BLACK
        return None

    for n in sorted(adj):
        if color[n] == WHITE:
            cyc = visit(n)
            if cyc is not None:
                return cyc
    return None


def shortest_path_length(
    edges: Iterable[tuple[str, str]], u: str, v: str
) -> Optional[int]:
    """Minimal edge count of a directed path u -> ... -> v over an arbitrary edge set."""
    adj: dict[str, list[str]] = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
    seen = {u}
    queue = deque([(u, 0)])
    while queue:
        node, dist = queue.popleft()
        for nxt in adj.get(node, ()):
            if nxt == v:
                return dist + 1
            if nxt not in seen:
                seen.add(nxt)
                queue.append((nxt, dist + 1))
    return None


@dataclass(frozen=True)
class Dag:
    """Immutable directed acyclic graph over named variables.

    ``nodes`` keeps the caller's ordering; ``edges`` is a set of (u, v)
    pairs meaning u causes v. Construction validates names, rejects
    self-loops, and rejects cycles (naming one offending cycle).
    """

    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", frozenset(tuple(e) for e in self.edges))
        if len(set(self.nodes)) != len(self.nodes):
            raise GraphError("duplicate node names")
        node_set = set(self.nodes)
        for u, v in self.edges:
            if u == v:
                raise GraphError(f"self-loop on {u!r}")
            if u not in node_set or v not in node_set:
                raise UnknownNode(f"edge ({u!r}, {v!r}) references an unknown node")
        cyc = find_cycle(self.nodes, self.edges)
        if cyc is not None:
            raise CycleError(f"graph contains a directed cycle: {' -> '.join(cyc)}", cyc)

    @property
    def node_set(self) -> frozenset[str]:
        return frozenset(self.nodes)

    def has_edge(self, u: str, v: str) -> bool:
        return (u, v) in self.edges

    def parents(self, v: str) -> set[str]:
        self._check_nodes(v)
        return {a for a, b in self.edges if b == v}

    def children(self, u: str) -> set[str]:
        self._check_nodes(u)
        return {b for a, b in self.edges if a == u}

    def relation(self, u: str, v: str) -> PairRelation:
        """Direct relation of the ordered pair (u, v)."""
        self._check_nodes(u, v)
        if (u, v) in self.edges:
            return PairRelation.FORWARD
        if (v, u) in self.edges:
            return PairRelation.BACKWARD
        return PairRelation.NONE

    def with_edges(self, add=(), remove=()) -> "Dag":
        edges = (set(self.edges) - set(remove)) | set(add)
        return Dag(self.nodes, frozenset(edges))

    def _check_nodes(self, *names: str) -> None:
        node_set = set(self.nodes)
        for n in names:
            if n not in node_set:
                raise UnknownNode(f"unknown node {n!r}")


def topological_order(dag: Dag) -> list[str]:
    """Topological node order, ties broken by node name (deterministic)."""
    indeg = {n: 0 for n in dag.nodes}
    adj: dict[str, list[str]] = {n: [] for n in dag.nodes}
    for u, v in dag.edges:
        indeg[v] += 1
        adj[u].append(v)
    ready = [n for n, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    out: list[str] = []
    while ready:
        n = heapq.heappop(ready)
        out.append(n)
        for nxt in adj[n]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(out) != len(dag.nodes):  # unreachable for a validated Dag
        cyc = find_cycle(dag.nodes, dag.edges)
        raise CycleError(f"directed cycle: {' -> '.join(cyc or [])}", cyc)
    return out


def reachable(dag: Dag, u: str, v: str) -> Optional[int]:
    """Shortest directed path length from u to v, or None when v is unreachable."""
    dag._check_nodes(u, v)
    if u == v:
        raise ValueError("reachable() requires distinct nodes")
    return shortest_path_length(dag.edges, u, v)


def node_depths(dag: Dag) -> dict[str, int]:
    """Longest-path depth of each node measured from the roots (roots have depth 0)."""
    depth = {n: 0 for n in dag.nodes}
    for n in topological_order(dag):
        for child in dag.children(n):
            depth[child] = max(depth[child], depth[n] + 1)
    return depth


def _require_same_nodes(a: Dag, b: Dag) -> None:
    if a.node_set != b.node_set:
        raise NodeSetMismatch(
            f"node sets differ: {sorted(a.node_set)} vs {sorted(b.node_set)}"
        )


def shd(a: Dag, b: Dag) -> int:
    """Structural Hamming distance: pairs whose relation differs (a reversal counts 1)."""
    _require_same_nodes(a, b)
    return sum(
        1 for u, v in canonical_pairs(a.nodes) if a.relation(u, v) != b.relation(u, v)
    )


def project_to_dag(
    nodes: Sequence[str],
    weights: Mapping[tuple[str, str], float],
    confidence: Optional[Mapping[tuple[str, str], float]] = None,
    threshold: float = TAU_EDGE,
) -> Dag:
    """Project signed pairwise relation weights onto an acyclic graph.

    ``weights`` maps canonical pairs (u, v) with u < v to a signed value:
    positive favors u -> v, negative favors v -> u. ``confidence`` (defaults
    to ``abs(weight)``) orders insertion and is compared against
    ``threshold``. Pairs are inserted greedily in descending confidence,
    ties broken by lexicographic pair order; an insertion that would create
    a cycle is skipped. Pairs below the threshold, or with weight exactly
    zero, assert nothing.
    """
    node_set = set(nodes)
    items = []
    for pair, w in weights.items():
        u, v = pair
        if u not in node_set or v not in node_set:
            raise UnknownNode(f"weight pair {pair!r} references an unknown node")
        conf = abs(w) if confidence is None else confidence[pair]
        items.append((pair, w, conf))
    items.sort(key=lambda t: (-t[2], t[0]))

    edges: set[tuple[str, str]] = set()
    for (u, v), w, conf in items:
        if conf < threshold or w == 0:
            continue
        edge = (u, v) if w > 0 else (v, u)
        if shortest_path_length(edges, edge[1], edge[0]) is not None:
            continue  # would close a directed cycle
        edges.add(edge)
    return Dag(tuple(nodes), frozenset(edges))


def enumerate_dags(n: int) -> list[Dag]:
    """Every labeled DAG on n nodes (a, b, c, ...), by brute-force enumeration.

    Kept deliberately naive (3 relation states per pair, filtered by the
    acyclicity check) so it can serve as an independent oracle.
    """
    if n > ENUMERATION_LIMIT:
        raise TooLarge(f"enumeration supports n <= {ENUMERATION_LIMIT}, got {n}")
    if n < 1:
        raise ValueError("need at least one node")
    nodes = tuple("abcdefghijklmnopqrstuvwxyz"[:n])
    pairs = canonical_pairs(nodes)
    out: list[Dag] = []
    for states in itertools.product((PairRelation.NONE, PairRelation.FORWARD, PairRelation.BACKWARD), repeat=len(pairs)):
        edges = set()
        for (u, v), s in zip(pairs, states):
            if s is PairRelation.FORWARD:
                edges.add((u, v))
            elif s is PairRelation.BACKWARD:
                edges.add((v, u))
        if find_cycle(nodes, edges) is None:
            out.append(Dag(nodes, frozenset(edges)))
    return out


ASIA_NODES = (
    "VisitAsia",
    "Tuberculosis",
    "Smoking",
    "LungCancer",
    "Bronchitis",
    "TBorCancer",
    "Xray",
    "Dyspnea",
)

ASIA_EDGES = frozenset(
    {
        ("VisitAsia", "Tuberculosis"),
        ("Smoking", "LungCancer"),
        ("Smoking", "Bronchitis"),
        ("Tuberculosis", "TBorCancer"),
        ("LungCancer", "TBorCancer"),
        ("TBorCancer", "Xray"),
        ("TBorCancer", "Dyspnea"),
        ("Bronchitis", "Dyspnea"),
    }
)

# Shipped with the fixture so survey question text can describe each variable.
ASIA_DESCRIPTIONS = {
    "VisitAsia": "whether the patient recently visited Asia",
    "Tuberculosis": "whether the patient has tuberculosis",
    "Smoking": "whether the patient smokes",
    "LungCancer": "whether the patient has lung cancer",
    "Bronchitis": "whether the patient has bronchitis",
    "TBorCancer": "whether the patient has either tuberculosis or lung cancer",
    "Xray": "whether the patient's chest X-ray shows an abnormality",
    "Dyspnea": "whether the patient suffers from shortness of breath",
}


def asia_fixture() -> Dag:
    """The eight-node, eight-edge respiratory diagnosis network."""
    return Dag(ASIA_NODES, ASIA_EDGES)


def dag_to_json(dag: Dag) -> str:
    return json.dumps(
        {"nodes": list(dag.nodes), "edges": sorted([u, v] for u, v in dag.edges)},
        indent=2,
    )


def dag_from_json(text: str) -> Dag:
    """Parse the network file format; cyclic input is rejected naming one cycle."""
    doc = json.loads(text)
    if not isinstance(doc, dict) or "nodes" not in doc:
        raise GraphError("network document must be an object with a 'nodes' list")
    nodes = [str(n) for n in doc["nodes"]]
    edges = {(str(u), str(v)) for u, v in doc.get("edges", [])}
    return Dag(tuple(nodes), frozenset(edges))


def load_network(source: str | Path) -> Dag:
    """Load a network by fixture name ("asia") or from a JSON file path."""
    if str(source).lower() == "asia":
        return asia_fixture()
    return dag_from_json(Path(source).read_text())
