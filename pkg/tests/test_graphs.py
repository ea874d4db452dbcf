import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdcausal.graphs import (
    ASIA_DESCRIPTIONS,
    CycleError,
    Dag,
    GraphError,
    NodeSetMismatch,
    PairRelation,
    TooLarge,
    UnknownNode,
    asia_fixture,
    canonical_pair,
    canonical_pairs,
    dag_from_json,
    dag_to_json,
    enumerate_dags,
    find_cycle,
    load_network,
    node_depths,
    project_to_dag,
    reachable,
    shd,
    shortest_path_length,
    topological_order,
)


def random_dag(rng: np.random.Generator, n: int = 5, p: float = 0.4) -> Dag:
    """Sample pairs at rate p and orient each along a random permutation."""
    nodes = tuple(f"n{i}" for i in range(n))
    pos = {i: k for k, i in enumerate(rng.permutation(n))}
    edges = set()
    for i, j in itertools.combinations(range(n), 2):
        if rng.random() < p:
            a, b = (i, j) if pos[i] < pos[j] else (j, i)
            edges.add((nodes[a], nodes[b]))
    return Dag(nodes, frozenset(edges))


class TestDagBasics:
    def test_rejects_cycles(self):
        with pytest.raises(CycleError) as err:
            Dag(("a", "b", "c"), frozenset({("a", "b"), ("b", "c"), ("c", "a")}))
        assert err.value.cycle is not None

    def test_rejects_self_loop_and_unknown_nodes(self):
        with pytest.raises(GraphError):
            Dag(("a",), frozenset({("a", "a")}))
        with pytest.raises(UnknownNode):
            Dag(("a", "b"), frozenset({("a", "z")}))

    def test_rejects_duplicate_nodes(self):
        with pytest.raises(GraphError):
            Dag(("a", "a"), frozenset())

    def test_relation_and_edit_helpers(self):
        dag = Dag(("a", "b", "c"), frozenset({("a", "b")}))
        assert dag.relation("a", "b") is PairRelation.FORWARD
        assert dag.relation("b", "a") is PairRelation.BACKWARD
        assert dag.relation("a", "c") is PairRelation.NONE
        grown = dag.with_edges(add=[("b", "c")])
        assert grown.has_edge("b", "c") and dag.edges < grown.edges
        assert dag.parents("b") == {"a"} and dag.children("a") == {"b"}

    def test_canonical_pairs(self):
        assert canonical_pair("b", "a") == ("a", "b")
        pairs = canonical_pairs(("c", "a", "b"))
        assert pairs == sorted(pairs) and len(pairs) == 3


class TestTraversal:
    def test_topological_order_lexicographic_ties(self):
        dag = Dag(("b", "a", "c"), frozenset())
        assert topological_order(dag) == ["a", "b", "c"]

    def test_topological_order_respects_edges(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            dag = random_dag(rng)
            order = topological_order(dag)
            position = {n: i for i, n in enumerate(order)}
            assert all(position[u] < position[v] for u, v in dag.edges)

    def test_shortest_path_and_reachable(self):
        dag = Dag(("a", "b", "c", "d"), frozenset({("a", "b"), ("b", "c"), ("a", "c")}))
        assert shortest_path_length(dag.edges, "a", "c") == 1
        assert reachable(dag, "a", "c") == 1
        assert reachable(dag, "c", "a") is None
        assert reachable(dag, "a", "d") is None

    def test_find_cycle_reports_a_cycle(self):
        cycle = find_cycle(("a", "b", "c"), [("a", "b"), ("b", "c"), ("c", "a")])
        assert cycle is not None and cycle[0] == cycle[-1]
        assert len(set(cycle)) == len(cycle) - 1 >= 3
        assert find_cycle(("a", "b"), [("a", "b")]) is None

    def test_node_depths_longest_path(self):
        dag = Dag(("a", "b", "c"), frozenset({("a", "b"), ("b", "c"), ("a", "c")}))
        assert node_depths(dag) == {"a": 0, "b": 1, "c": 2}


class TestEnumerationOracle:
    @pytest.mark.parametrize("n,count", [(2, 3), (3, 25), (4, 543)])
    def test_labelled_dag_counts(self, n, count):
        dags = enumerate_dags(n)
        assert len(dags) == count

    def test_enumeration_unique_and_acyclic(self):
        dags = enumerate_dags(3)
        seen = {d.edges for d in dags}
        assert len(seen) == len(dags)
        for d in dags:
            assert find_cycle(d.nodes, d.edges) is None

    def test_enumeration_size_guard(self):
        with pytest.raises(TooLarge):
            enumerate_dags(5)


class TestShd:
    def test_reversal_counts_once(self):
        a = Dag(("a", "b"), frozenset({("a", "b")}))
        b = Dag(("a", "b"), frozenset({("b", "a")}))
        assert shd(a, b) == 1

    def test_extra_and_missing(self):
        a = Dag(("a", "b", "c"), frozenset({("a", "b")}))
        b = Dag(("a", "b", "c"), frozenset({("a", "b"), ("b", "c")}))
        assert shd(a, b) == 1 and shd(a, a) == 0

    def test_node_set_mismatch(self):
        with pytest.raises(NodeSetMismatch):
            shd(Dag(("a", "b")), Dag(("a", "c")))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_symmetry_and_identity(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_dag(rng), random_dag(rng)
        assert shd(a, b) == shd(b, a)
        assert shd(a, a) == 0
        # Triangle inequality over pairwise relation mismatches.
        c = random_dag(rng)
        assert shd(a, c) <= shd(a, b) + shd(b, c)


class TestProjection:
    def test_round_trip_over_all_three_node_dags(self):
        for dag in enumerate_dags(3):
            weights = {}
            for u, v in canonical_pairs(dag.nodes):
                rel = dag.relation(u, v)
                weights[(u, v)] = {"FORWARD": 1.0, "BACKWARD": -1.0, "NONE": 0.0}[rel.name]
            assert project_to_dag(dag.nodes, weights) == dag

    def test_threshold_inclusive_at_tau(self):
        nodes = ("a", "b")
        dag = project_to_dag(nodes, {("a", "b"): 0.5}, {("a", "b"): 0.5})
        assert dag.has_edge("a", "b")
        dag = project_to_dag(nodes, {("a", "b"): 0.49}, {("a", "b"): 0.49})
        assert not dag.edges

    def test_zero_weight_asserts_nothing(self):
        dag = project_to_dag(("a", "b"), {("a", "b"): 0.0}, {("a", "b"): 1.0})
        assert not dag.edges

    def test_cycle_breaking_prefers_confidence(self):
        nodes = ("a", "b", "c")
        weights = {("a", "b"): 0.9, ("b", "c"): 0.8, ("a", "c"): -0.7}
        dag = project_to_dag(nodes, weights)
        assert dag.has_edge("a", "b") and dag.has_edge("b", "c")
        assert not dag.has_edge("c", "a")  # would close the cycle, so skipped

    def test_lexicographic_tie_break(self):
        nodes = ("a", "b", "c")
        # Equal confidence; (a, b) is processed first, then (a, c), then (b, c).
        weights = {("a", "b"): 1.0, ("a", "c"): 1.0, ("b", "c"): -1.0}
        dag = project_to_dag(nodes, weights)
        assert dag.has_edge("a", "b") and dag.has_edge("a", "c")
        assert dag.has_edge("c", "b")

    def test_unknown_node_rejected(self):
        with pytest.raises(UnknownNode):
            project_to_dag(("a", "b"), {("a", "z"): 1.0})


class TestAsiaAndSerialization:
    def test_asia_shape(self):
        asia = asia_fixture()
        assert len(asia.nodes) == 8 and len(asia.edges) == 8
        assert set(ASIA_DESCRIPTIONS) == set(asia.nodes)
        assert topological_order(asia)  # acyclic by construction

    def test_json_round_trip(self):
        asia = asia_fixture()
        assert dag_from_json(dag_to_json(asia)) == asia

    def test_load_network_fixture_and_file(self, tmp_path):
        assert load_network("asia") == asia_fixture()
        path = tmp_path / "net.json"
        path.write_text(dag_to_json(asia_fixture()))
        assert load_network(path) == asia_fixture()

    def test_cyclic_network_file_rejected(self):
        doc = {"nodes": ["a", "b"], "edges": [["a", "b"], ["b", "a"]]}
        with pytest.raises(CycleError):
            dag_from_json(json.dumps(doc))

    def test_malformed_document_rejected(self):
        with pytest.raises(GraphError):
            dag_from_json(json.dumps([1, 2, 3]))
