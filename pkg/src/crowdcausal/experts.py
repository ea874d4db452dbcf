"""Simulated informants: quality profiles, perturbed belief graphs, survey answers.

An expert is described by four dimensions in [0,1]: completeness (how much of
the graph they know), validity (how often a known relation is right),
confidence (how readily they assert rather than abstain), and trustworthiness
(low values mean adversarial behavior). A profile plus a seed determines a
belief graph, and the belief graph determines stochastic answers under two
survey protocols: ternary edge judgments in {-1, 0, 1} and signed ordering
strengths in [-10, 10].
"""

from __future__ import annotations

import csv
import io
import json
import math
import zlib
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .graphs import (
    Dag,
    PairRelation,
    canonical_pair,
    canonical_pairs,
    shortest_path_length,
)

SPURIOUS_BASE_RATE = 0.2
ORDER_SCALE = 10
ADVERSARY_TAU = 0.5  # below this, belief negation kicks in


class Protocol(Enum):
    EDGE = "edge"
    ORDERING = "ordering"

    @property
    def value_range(self) -> tuple[int, int]:
        return (-1, 1) if self is Protocol.EDGE else (-ORDER_SCALE, ORDER_SCALE)


@dataclass(frozen=True)
class Query:
    """An unordered variable pair, stored with u < v lexicographically."""

    u: str
    v: str

    def __post_init__(self):
        u, v = canonical_pair(self.u, self.v)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def pair(self) -> tuple[str, str]:
        return (self.u, self.v)


@dataclass(frozen=True)
class Response:
    """One survey answer; positive values favor query.u causing query.v."""

    query: Query
    protocol: Protocol
    value: int
    expert_id: str

    def __post_init__(self):
        lo, hi = self.protocol.value_range
        if not (lo <= self.value <= hi):
            raise ValueError(
                f"value {self.value} outside {self.protocol.value} range [{lo}, {hi}]"
            )


KnowledgeSet = list[Response]


@dataclass(frozen=True)
class ExpertProfile:
    completeness: float
    validity: float
    confidence: float
    trustworthiness: float
    archetype: Optional[str] = None

    def __post_init__(self):
        for name in ("completeness", "validity", "confidence", "trustworthiness"):
            x = getattr(self, name)
            if not (0.0 <= x <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {x}")


ARCHETYPES = {
    "Omniscient": (1.0, 1.0, 1.0, 1.0),
    "PerfectIncomplete": (0.4, 1.0, 0.9, 1.0),
    "Imperfect": (0.8, 0.7, 0.7, 0.9),
    "Uncertain": (0.7, 0.85, 0.3, 1.0),
    "BadActor": (0.9, 0.2, 0.9, 0.1),
}


def make_profile(archetype: str) -> ExpertProfile:
    """Preset profile for one of the five named informant archetypes."""
    if archetype not in ARCHETYPES:
        raise KeyError(
            f"unknown archetype {archetype!r}; choose from {sorted(ARCHETYPES)}"
        )
    c, v, kappa, tau = ARCHETYPES[archetype]
    return ExpertProfile(c, v, kappa, tau, archetype=archetype)


@dataclass(frozen=True)
class BeliefGraph:
    """What one expert privately believes, pair by pair.

    ``relations`` is defined exactly on the pairs the expert knows; values are
    relative to the canonical (u < v) orientation. The asserted edge set may
    contain directed cycles: imperfect beliefs need not be coherent.
    """

    nodes: tuple[str, ...]
    relations: dict[tuple[str, str], PairRelation]

    @property
    def known(self) -> set[tuple[str, str]]:
        return set(self.relations)

    @property
    def asserted_edges(self) -> set[tuple[str, str]]:
        edges = set()
        for (u, v), rel in self.relations.items():
            if rel is PairRelation.FORWARD:
                edges.add((u, v))
            elif rel is PairRelation.BACKWARD:
                edges.add((v, u))
        return edges


def sample_belief_graph(
    profile: ExpertProfile, truth: Dag, rng: np.random.Generator
) -> BeliefGraph:
    """Perturb the truth into one expert's belief graph.

    Each pair is known with probability completeness. A known true edge stays
    correct with probability validity, otherwise it is reversed or dropped
    (50/50). A known non-adjacent pair picks up a spurious edge in a random
    direction with probability 0.2*(1 - validity). Adversaries (tau < 0.5)
    then negate each known relation with probability 1 - tau.
    """
    c, v, tau = profile.completeness, profile.validity, profile.trustworthiness
    spurious = SPURIOUS_BASE_RATE * (1.0 - v)
    relations: dict[tuple[str, str], PairRelation] = {}
    for pair in canonical_pairs(truth.nodes):
        if rng.random() >= c:
            continue
        rel = truth.relation(*pair)
        if rel is not PairRelation.NONE:
            if rng.random() >= v:
                rel = rel.flipped() if rng.random() < 0.5 else PairRelation.NONE
        else:
            if rng.random() < spurious:
                rel = (
                    PairRelation.FORWARD
                    if rng.random() < 0.5
                    else PairRelation.BACKWARD
                )
        if tau < ADVERSARY_TAU and rng.random() < 1.0 - tau:
            if rel is PairRelation.NONE:
                rel = (
                    PairRelation.FORWARD
                    if rng.random() < 0.5
                    else PairRelation.BACKWARD
                )
            else:
                rel = rel.flipped()
        relations[pair] = rel
    return BeliefGraph(tuple(truth.nodes), relations)


def answer_edge(
    profile: ExpertProfile,
    belief: BeliefGraph,
    q: Query,
    rng: np.random.Generator,
) -> int:
    """Ternary edge judgment: report the believed relation or abstain."""
    rel = belief.relations.get(q.pair)
    if rel is None:  # pair not known to this expert
        return 0
    if rng.random() >= profile.confidence:
        return 0
    return rel.value


def answer_order(
    profile: ExpertProfile,
    belief: BeliefGraph,
    q: Query,
    rng: np.random.Generator,
) -> int:
    """Signed ordering strength in [-10, 10] from believed reachability.

    Base strength is +-10*(1 - (l - 1)/N) for a length-l believed path, with
    the shorter direction winning (ties give 0). Confidence scales the base;
    noise with standard deviation 2*(1 - validity) is added before rounding.
    The noise draw happens on every call so response streams stay aligned
    across profiles sharing a seed.
    """
    edges = belief.asserted_edges
    n = len(belief.nodes)
    fwd = shortest_path_length(edges, q.u, q.v)
    bwd = shortest_path_length(edges, q.v, q.u)
    base = 0.0
    if fwd is not None and (bwd is None or fwd < bwd):
        base = ORDER_SCALE * (1.0 - (fwd - 1) / n)
    elif bwd is not None and (fwd is None or bwd < fwd):
        base = -ORDER_SCALE * (1.0 - (bwd - 1) / n)
    noise = rng.normal(0.0, 2.0 * (1.0 - profile.validity))
    raw = profile.confidence * base + noise
    # Round half away from zero, then clamp to the survey scale.
    value = int(math.floor(abs(raw) + 0.5)) * (1 if raw >= 0 else -1)
    return max(-ORDER_SCALE, min(ORDER_SCALE, value))


def _pair_stream(
    seed: int, pair: tuple[str, str], occurrence: int, protocol: Protocol
) -> np.random.Generator:
    # Stable per (expert, pair, repeat) stream: transcripts do not depend on
    # the order in which queries arrive.
    key = [
        seed,
        zlib.crc32(pair[0].encode()),
        zlib.crc32(pair[1].encode()),
        occurrence,
        0 if protocol is Protocol.EDGE else 1,
    ]
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass
class Expert:
    """A profile bound to a sampled belief graph and a response seed."""

    expert_id: str
    profile: ExpertProfile
    belief: BeliefGraph
    seed: int
    _occurrences: Counter = field(default_factory=Counter, repr=False)

    def answer(self, q: Query, protocol: Protocol) -> Response:
        key = (q.pair, protocol)
        occurrence = self._occurrences[key]
        self._occurrences[key] += 1
        rng = _pair_stream(self.seed, q.pair, occurrence, protocol)
        if protocol is Protocol.EDGE:
            value = answer_edge(self.profile, self.belief, q, rng)
        else:
            value = answer_order(self.profile, self.belief, q, rng)
        return Response(q, protocol, value, self.expert_id)

    def reset(self) -> None:
        """Forget repeat counters; answers then replay from occurrence 0."""
        self._occurrences.clear()


def make_expert(
    expert_id: str, profile: ExpertProfile, truth: Dag, seed: int
) -> Expert:
    belief_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBE11EF]))
    belief = sample_belief_graph(profile, truth, belief_rng)
    return Expert(expert_id, profile, belief, seed)


def make_crowd(
    archetypes: Sequence[str], truth: Dag, master_seed: int
) -> list[Expert]:
    """One expert per listed archetype, with seeds derived from the master."""
    crowd = []
    for i, archetype in enumerate(archetypes):
        seed = int(np.random.SeedSequence([master_seed, i]).generate_state(1)[0])
        crowd.append(make_expert(f"e{i}", make_profile(archetype), truth, seed))
    return crowd


def crowd_from_spec(doc, truth: Dag, master_seed: int = 0) -> list[Expert]:
    """Build experts from a crowd specification document.

    The document is a list of entries, each holding either an ``archetype``
    name or explicit dimension fields, plus optional ``expert_id`` and
    ``seed``. Missing seeds derive from the master seed and position.
    """
    if isinstance(doc, (str, Path)):
        doc = json.loads(Path(doc).read_text())
    crowd = []
    for i, entry in enumerate(doc):
        if "archetype" in entry:
            profile = make_profile(entry["archetype"])
        else:
            profile = ExpertProfile(
                entry["completeness"],
                entry["validity"],
                entry["confidence"],
                entry["trustworthiness"],
            )
        expert_id = entry.get("expert_id", f"e{i}")
        seed = entry.get("seed")
        if seed is None:
            seed = int(np.random.SeedSequence([master_seed, i]).generate_state(1)[0])
        crowd.append(make_expert(expert_id, profile, truth, int(seed)))
    return crowd


def elicit(
    experts: Iterable[Expert],
    queries: Sequence[Query],
    protocol: Protocol,
    repeats: int = 1,
) -> KnowledgeSet:
    """Collect every expert's answers to every query, repeated as asked."""
    responses: KnowledgeSet = []
    for expert in experts:
        for _ in range(repeats):
            for q in queries:
                responses.append(expert.answer(q, protocol))
    return responses


def all_pair_queries(nodes: Sequence[str]) -> list[Query]:
    return [Query(u, v) for u, v in canonical_pairs(nodes)]


def transcript_to_csv(responses: KnowledgeSet, path: Optional[str | Path] = None) -> str:
    """Serialize responses as expert_id,u,v,protocol,value rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["expert_id", "u", "v", "protocol", "value"])
    for r in responses:
        writer.writerow([r.expert_id, r.query.u, r.query.v, r.protocol.value, r.value])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def transcript_from_csv(source: str | Path) -> KnowledgeSet:
    text = Path(source).read_text() if isinstance(source, Path) else source
    if isinstance(source, str) and "\n" not in source and Path(source).exists():
        text = Path(source).read_text()
    responses: KnowledgeSet = []
    for row in csv.DictReader(io.StringIO(text)):
        responses.append(
            Response(
                Query(row["u"], row["v"]),
                Protocol(row["protocol"]),
                int(row["value"]),
                row["expert_id"],
            )
        )
    return responses
