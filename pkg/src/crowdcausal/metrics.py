"""Recovery and behavior metrics for structure estimates and response sets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .graphs import (
    Dag,
    PairRelation,
    UnknownNode,
    find_cycle,
    node_depths,
    reachable,
    shd,
)
from .graphs import NodeSetMismatch, canonical_pairs
from .experts import Protocol, Response


@dataclass
class MetricsReport:
    shd: Optional[int] = None
    edge_precision: Optional[float] = None
    edge_recall: Optional[float] = None
    fdr: Optional[float] = None
    edge_coverage: Optional[float] = None
    rank_correlation: Optional[float] = None
    pairwise_order_accuracy: Optional[float] = None
    abstention_rate: Optional[float] = None
    cycle_injection_rate: Optional[float] = None
    edge_flip_frequency: Optional[float] = None
    inconsistency_count: Optional[int] = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def edge_metrics(estimate: Dag, truth: Dag) -> MetricsReport:
    """Precision, recall, FDR, coverage, and SHD of a structure estimate.

    Conventions for empty denominators: precision 1 (fdr 0) when nothing is
    asserted, recall and coverage 1 when the truth has no edges. Coverage
    counts a true edge as covered when it is asserted in either orientation.
    """
    if estimate.node_set != truth.node_set:
        raise NodeSetMismatch("estimate and truth disagree on nodes")
    asserted = estimate.edges
    true_edges = truth.edges
    tp = len(asserted & true_edges)
    precision = tp / len(asserted) if asserted else 1.0
    recall = tp / len(true_edges) if true_edges else 1.0
    covered = sum(
        1 for u, v in true_edges if (u, v) in asserted or (v, u) in asserted
    )
    coverage = covered / len(true_edges) if true_edges else 1.0
    return MetricsReport(
        shd=shd(estimate, truth),
        edge_precision=precision,
        edge_recall=recall,
        fdr=1.0 - precision,
        edge_coverage=coverage,
    )


def order_metrics(scores: Mapping[str, float], truth: Dag) -> MetricsReport:
    """Rank agreement of a score field against the true causal order.

    rank_correlation is the Spearman correlation between scores and negated
    depth (longest path from any root); 0.0 when either side is constant.
    pairwise_order_accuracy is the fraction of ordered pairs (u, v) with a
    directed truth path u to v for which score(u) > score(v); 1.0 when the
    truth orders no pairs.
    """
    missing = set(truth.nodes) - set(scores)
    if missing:
        raise UnknownNode(f"scores missing for {sorted(missing)}")
    depths = node_depths(truth)
    s = np.array([scores[n] for n in truth.nodes], dtype=float)
    d = np.array([-depths[n] for n in truth.nodes], dtype=float)
    if np.ptp(s) == 0 or np.ptp(d) == 0:
        rank_corr = 0.0
    else:
        rank_corr = float(stats.spearmanr(s, d).statistic)
    ordered = 0
    agree = 0
    for u, v in canonical_pairs(truth.nodes):
        for a, b in ((u, v), (v, u)):
            if reachable(truth, a, b) is not None:
                ordered += 1
                agree += scores[a] > scores[b]
    accuracy = agree / ordered if ordered else 1.0
    return MetricsReport(rank_correlation=rank_corr, pairwise_order_accuracy=accuracy)


def _round_snapshots(responses: Sequence[Response]) -> list[set[tuple[str, str]]]:
    # Round r takes each pair's (r+1)-th answer, or its last if re-queried
    # fewer times; a snapshot is the edge set those answers assert.
    per_pair: dict[tuple[str, str], list[int]] = {}
    for r in responses:
        per_pair.setdefault(r.query.pair, []).append(r.value)
    if not per_pair:
        return []
    rounds = max(len(vs) for vs in per_pair.values())
    snapshots = []
    for r in range(rounds):
        edges = set()
        for (u, v), vs in per_pair.items():
            value = vs[min(r, len(vs) - 1)]
            if value > 0:
                edges.add((u, v))
            elif value < 0:
                edges.add((v, u))
        snapshots.append(edges)
    return snapshots


def behavior_metrics(responses: Sequence[Response]) -> MetricsReport:
    """Consistency diagnostics over an edge-wise response set with repeats."""
    for r in responses:
        if r.protocol is not Protocol.EDGE:
            raise ValueError("behavior metrics are defined for edge-wise responses")
    if not responses:
        return MetricsReport(
            abstention_rate=0.0,
            cycle_injection_rate=0.0,
            edge_flip_frequency=0.0,
            inconsistency_count=0,
        )
    abstention = sum(1 for r in responses if r.value == 0) / len(responses)

    nodes = set()
    per_pair: dict[tuple[str, str], list[int]] = {}
    for r in responses:
        nodes.update(r.query.pair)
        per_pair.setdefault(r.query.pair, []).append(r.value)

    snapshots = _round_snapshots(responses)
    cycle_rate = sum(
        1 for edges in snapshots if find_cycle(nodes, edges) is not None
    ) / len(snapshots)

    requeried = {p: vs for p, vs in per_pair.items() if len(vs) > 1}
    flips = sum(1 for vs in requeried.values() if 1 in vs and -1 in vs)
    flip_freq = flips / len(requeried) if requeried else 0.0
    inconsistent = sum(1 for vs in requeried.values() if len(set(vs)) > 1)

    return MetricsReport(
        abstention_rate=abstention,
        cycle_injection_rate=cycle_rate,
        edge_flip_frequency=flip_freq,
        inconsistency_count=inconsistent,
    )


def evaluate(
    estimate: Dag,
    truth: Dag,
    scores: Optional[Mapping[str, float]] = None,
    responses: Optional[Sequence[Response]] = None,
) -> MetricsReport:
    """One merged report: edge metrics plus optional order and behavior parts."""
    report = edge_metrics(estimate, truth)
    if scores is not None:
        om = order_metrics(scores, truth)
        report.rank_correlation = om.rank_correlation
        report.pairwise_order_accuracy = om.pairwise_order_accuracy
    if responses is not None:
        bm = behavior_metrics(responses)
        report.abstention_rate = bm.abstention_rate
        report.cycle_injection_rate = bm.cycle_injection_rate
        report.edge_flip_frequency = bm.edge_flip_frequency
        report.inconsistency_count = bm.inconsistency_count
    return report
