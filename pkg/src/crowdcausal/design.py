"""Budgeted sequential query design.

Two stage-level criteria: E-optimality of the comparison graph's weighted
Laplacian (connectivity-seeking), and expected information gain against the
current belief (uncertainty-seeking). A uniform-random criterion is included
as the evaluation baseline. Stages chain into an aggregated design whose
weights are the per-stage budget shares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import digamma

from .graphs import Dag, UnknownNode, canonical_pair, canonical_pairs
from .experts import Expert, KnowledgeSet, Protocol, Query
from .inference import (
    SIGMA_PHI,
    EdgePosterior,
    ScoreField,
    infer_edgewise,
    infer_scores,
)
from .aggregation import aggregate_expert_level
from .metrics import MetricsReport, edge_metrics, order_metrics

EIGEN_CLIP = 1e-10
DEFAULT_NOISE = 1.0  # observation noise for a fresh Gaussian belief

Pair = tuple[str, str]


class BudgetExceedsPool(Exception):
    pass


class Criterion(str, Enum):
    EOPT = "eopt"
    EIG = "eig"
    RANDOM = "random"


class PoolMode(str, Enum):
    REMOVE = "remove"
    FIXED = "fixed"


def _check_pairs(nodes: Sequence[str], pairs: Sequence[Pair]) -> None:
    known = set(nodes)
    for u, v in pairs:
        if u not in known or v not in known:
            raise UnknownNode(f"pair ({u}, {v}) leaves the node set")


def information_matrix(
    nodes: Sequence[str],
    pairs: Sequence[Pair],
    weights: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Weighted Laplacian of the comparison graph over the selected pairs."""
    nodes = tuple(nodes)
    _check_pairs(nodes, pairs)
    if weights is None:
        weights = [1.0] * len(pairs)
    if len(weights) != len(pairs):
        raise ValueError("need one weight per pair")
    idx = {n: i for i, n in enumerate(nodes)}
    mat = np.zeros((len(nodes), len(nodes)))
    for (u, v), w in zip(pairs, weights):
        i, j = idx[u], idx[v]
        mat[i, i] += w
        mat[j, j] += w
        mat[i, j] -= w
        mat[j, i] -= w
    return mat


def e_optimality(
    nodes: Sequence[str],
    pairs: Sequence[Pair],
    weights: Optional[Sequence[float]] = None,
) -> float:
    """Smallest eigenvalue orthogonal to the all-ones direction.

    Numerically the second-smallest Laplacian eigenvalue, clipped to 0 below
    1e-10; 0 whenever the comparison graph is disconnected.
    """
    mat = information_matrix(nodes, pairs, weights)
    if mat.shape[0] < 2:
        return 0.0
    lam = float(np.linalg.eigvalsh(mat)[1])
    return lam if lam >= EIGEN_CLIP else 0.0


@dataclass
class GaussianBelief:
    """Gaussian over the latent score field, singular along all-ones.

    The covariance lives on the zero-sum subspace, so the gauge direction
    carries no variance and no information.
    """

    nodes: tuple[str, ...]
    mean: np.ndarray
    cov: np.ndarray
    noise: float  # observation variance sigma^2

    @classmethod
    def prior(
        cls,
        nodes: Sequence[str],
        sigma_phi: float = SIGMA_PHI,
        noise: float = DEFAULT_NOISE,
    ) -> "GaussianBelief":
        nodes = tuple(nodes)
        n = len(nodes)
        cov = sigma_phi**2 * (np.eye(n) - np.ones((n, n)) / n)
        return cls(nodes, np.zeros(n), cov, noise)

    @classmethod
    def laplace(
        cls,
        field_fit: ScoreField,
        pair_counts: Mapping[Pair, int],
        sigma_phi: float = SIGMA_PHI,
    ) -> "GaussianBelief":
        """Belief at the score-field MAP: prior precision plus query information."""
        nodes = field_fit.nodes
        n = len(nodes)
        noise = field_fit.sigma**2
        pairs = list(pair_counts)
        counts = [float(pair_counts[p]) for p in pairs]
        prec = (np.eye(n) - np.ones((n, n)) / n) / sigma_phi**2
        prec = prec + information_matrix(nodes, pairs, counts) / noise
        cov = np.linalg.pinv(prec, hermitian=True)
        mean = field_fit.as_vector()
        return cls(tuple(nodes), mean - mean.mean(), cov, noise)

    def _direction(self, pair: Pair) -> np.ndarray:
        idx = {n: i for i, n in enumerate(self.nodes)}
        u, v = pair
        if u not in idx or v not in idx:
            raise UnknownNode(f"pair ({u}, {v}) leaves the node set")
        d = np.zeros(len(self.nodes))
        d[idx[u]], d[idx[v]] = 1.0, -1.0
        return d

    def eig_gain(self, pair: Pair) -> float:
        """Entropy reduction from one observation of u minus v: 1/2 log(1 + dSd/s2)."""
        d = self._direction(pair)
        return 0.5 * math.log1p(float(d @ self.cov @ d) / self.noise)

    def update(self, pair: Pair, y: Optional[float] = None) -> None:
        """Rank-1 posterior update; the covariance shrinks whether or not y is given."""
        d = self._direction(pair)
        cd = self.cov @ d
        s = float(d @ cd) + self.noise
        if y is not None:
            self.mean = self.mean + cd * ((y - float(d @ self.mean)) / s)
        self.cov = self.cov - np.outer(cd, cd) / s

    def entropy(self) -> float:
        """Differential entropy on the zero-sum subspace (pseudo-determinant)."""
        eig = np.linalg.eigvalsh(self.cov)
        eig = eig[eig > EIGEN_CLIP]
        if eig.size == 0:
            return float("-inf")
        return 0.5 * float(eig.size * math.log(2.0 * math.pi * math.e) + np.log(eig).sum())

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.nodes, self.mean.copy(), self.cov.copy(), self.noise)


class DirichletBelief:
    """Independent Dirichlet(1,1,1) per pair over outcomes (+1, 0, -1)."""

    def __init__(
        self,
        nodes: Sequence[str],
        prior: tuple[float, float, float] = (1.0, 1.0, 1.0),
    ):
        self.nodes = tuple(nodes)
        self.prior = tuple(float(a) for a in prior)
        self.alphas: dict[Pair, np.ndarray] = {
            pair: np.array(self.prior) for pair in canonical_pairs(self.nodes)
        }

    def _alpha(self, pair: Pair) -> np.ndarray:
        key = canonical_pair(*pair)
        if key not in self.alphas:
            raise UnknownNode(f"pair {pair} leaves the node set")
        return self.alphas[key]

    def predictive(self, pair: Pair) -> np.ndarray:
        a = self._alpha(pair)
        return a / a.sum()

    def entropy(self, pair: Pair) -> float:
        p = self.predictive(pair)
        return float(-(p * np.log(p)).sum())

    def total_entropy(self) -> float:
        return float(sum(self.entropy(p) for p in self.alphas))

    def eig_gain(self, pair: Pair) -> float:
        """Mutual information between the next answer and the outcome rates.

        H(predictive) minus the expected categorical entropy under the
        Dirichlet, which has the digamma closed form.
        """
        a = self._alpha(pair)
        a0 = a.sum()
        expected_h = float(np.sum((a / a0) * (digamma(a0 + 1.0) - digamma(a + 1.0))))
        return self.entropy(pair) - expected_h

    def update(self, pair: Pair, value: Union[int, float]) -> None:
        self._alpha(pair)[{1: 0, 0: 1, -1: 2}[int(np.sign(value))]] += 1.0

    def interim_update(self, pair: Pair) -> None:
        """Design-time update before the answer arrives: add the predictive mass."""
        a = self._alpha(pair)
        a += a / a.sum()

    def copy(self) -> "DirichletBelief":
        out = DirichletBelief.__new__(DirichletBelief)
        out.nodes = self.nodes
        out.prior = self.prior
        out.alphas = {k: v.copy() for k, v in self.alphas.items()}
        return out


Belief = Union[GaussianBelief, DirichletBelief]


@dataclass
class StageDesign:
    """One stage's selections: ordered queries plus a binary mask over the pool."""

    stage: int
    budget: int
    pool: tuple[Pair, ...]
    mask: np.ndarray
    queries: list[Query]
    criterion_values: list[float]

    def __post_init__(self):
        if int(self.mask.sum()) != self.budget or len(self.queries) != self.budget:
            raise ValueError("mask and query list must both match the budget")

    def pairs(self) -> list[Pair]:
        return [q.pair for q in self.queries]


@dataclass
class AggregatedDesign:
    stages: list[StageDesign] = field(default_factory=list)

    @property
    def total_budget(self) -> int:
        return sum(s.budget for s in self.stages)

    @property
    def stage_weights(self) -> list[float]:
        total = self.total_budget
        return [s.budget / total for s in self.stages]

    def allocation(self) -> dict[Pair, float]:
        """Budget-share mixture of the stage designs; values sum to 1."""
        total = self.total_budget
        out: dict[Pair, float] = {}
        for s in self.stages:
            for pair in s.pairs():
                out[pair] = out.get(pair, 0.0) + 1.0 / total
        return out


def select_stage(
    nodes: Sequence[str],
    pool: Sequence[Pair],
    budget: int,
    criterion: Union[Criterion, str],
    belief: Optional[Belief] = None,
    history: Sequence[Pair] = (),
    weights: Optional[Mapping[Pair, float]] = None,
    rng: Optional[np.random.Generator] = None,
    stage: int = 1,
) -> StageDesign:
    """Greedy forward selection of `budget` pool pairs under one criterion.

    EOPT picks the pair whose addition to the accumulated design (history
    plus picks so far) raises the Laplacian lambda_1 most, ties broken by
    trace increase then pair order. EIG picks the largest entropy reduction
    against the belief, applying interim posterior updates between picks.
    RANDOM draws uniformly without replacement. No pair repeats in-stage.
    """
    criterion = Criterion(criterion)
    nodes = tuple(nodes)
    pool = [canonical_pair(u, v) for u, v in pool]
    _check_pairs(nodes, pool)
    if len(set(pool)) != len(pool):
        raise ValueError("pool has duplicate pairs")
    if budget < 1:
        raise ValueError("stage budget must be at least 1")
    if budget > len(pool):
        raise BudgetExceedsPool(f"budget {budget} exceeds pool of {len(pool)}")
    if criterion is Criterion.EIG and belief is None:
        raise ValueError("EIG selection needs a belief")
    if criterion is Criterion.RANDOM and rng is None:
        raise ValueError("random selection needs an rng")

    order = sorted(range(len(pool)), key=lambda i: pool[i])
    chosen: list[int] = []
    values: list[float] = []

    if criterion is Criterion.RANDOM:
        chosen = list(rng.choice(len(pool), size=budget, replace=False))
        values = [0.0] * budget
    elif criterion is Criterion.EOPT:
        selected = list(history)
        sel_weights = None
        if weights is not None:
            sel_weights = [weights.get(p, 1.0) for p in selected]
        base = e_optimality(nodes, selected, sel_weights)
        for _ in range(budget):
            best = None
            for i in order:
                if i in chosen:
                    continue
                w = 1.0 if weights is None else weights.get(pool[i], 1.0)
                cand_w = None if sel_weights is None else sel_weights + [w]
                lam = e_optimality(nodes, selected + [pool[i]], cand_w)
                key = (lam - base, 2.0 * w)  # tie-break on trace increase
                if best is None or key > best[0]:
                    best = (key, i)
            (gain, _), i = best
            chosen.append(i)
            values.append(gain)
            selected.append(pool[i])
            if sel_weights is not None:
                sel_weights.append(weights.get(pool[i], 1.0))
            base = base + gain
    else:
        interim = belief.copy()
        for _ in range(budget):
            best = None
            for i in order:
                if i in chosen:
                    continue
                gain = interim.eig_gain(pool[i])
                if best is None or gain > best[0]:
                    best = (gain, i)
            gain, i = best
            chosen.append(i)
            values.append(gain)
            if isinstance(interim, DirichletBelief):
                interim.interim_update(pool[i])
            else:
                interim.update(pool[i])

    mask = np.zeros(len(pool), dtype=int)
    mask[chosen] = 1
    queries = [Query(*pool[i]) for i in chosen]
    return StageDesign(stage, budget, tuple(pool), mask, queries, values)


@dataclass
class StageRecord:
    """Per-stage trace entry: what was asked and how the estimate scored."""

    stage: int
    budget: int
    pairs: list[Pair]
    criterion_values: list[float]
    metrics: MetricsReport

    def as_dict(self) -> dict:
        return {
            "t": self.stage,
            "K_t": self.budget,
            "pairs": [list(p) for p in self.pairs],
            "criterion_values": self.criterion_values,
            "metrics": self.metrics.as_dict(),
        }


def _edge_estimate(
    nodes: tuple[str, ...], responses: KnowledgeSet
) -> tuple[Dag, list[EdgePosterior]]:
    by_expert: dict[str, KnowledgeSet] = {}
    for r in responses:
        by_expert.setdefault(r.expert_id, []).append(r)
    fits = [infer_edgewise(nodes, rs) for _, rs in sorted(by_expert.items())]
    posteriors = [post for post, _ in fits]
    if len(fits) == 1:
        return fits[0][1], posteriors
    return aggregate_expert_level(posteriors), posteriors


def run_sequential(
    experts: Union[Expert, Sequence[Expert]],
    truth: Dag,
    stages: Sequence[int],
    criterion: Union[Criterion, str],
    protocol: Protocol = Protocol.EDGE,
    pool_mode: Union[PoolMode, str] = PoolMode.FIXED,
    seed: int = 0,
    sigma_phi: float = SIGMA_PHI,
) -> tuple[AggregatedDesign, Union[Dag, ScoreField], list[StageRecord]]:
    """Stage loop: select, query every expert, re-infer, update the pool.

    Edge-wise runs keep a Dirichlet belief per pair and estimate the graph
    from per-expert posteriors (vote-aggregated when there are several
    experts). Ordering runs refit the score field on everything answered so
    far and carry a Gaussian belief at that fit forward. REMOVE drops asked
    pairs from the pool; FIXED allows later stages to re-ask.
    """
    if isinstance(experts, Expert):
        experts = [experts]
    if not experts:
        raise ValueError("need at least one expert")
    if not stages:
        raise ValueError("need at least one stage")
    criterion = Criterion(criterion)
    pool_mode = PoolMode(pool_mode)
    nodes = truth.nodes
    pool = list(canonical_pairs(nodes))
    rng = np.random.default_rng(seed)

    belief: Belief = (
        DirichletBelief(nodes)
        if protocol is Protocol.EDGE
        else GaussianBelief.prior(nodes, sigma_phi)
    )
    responses: KnowledgeSet = []
    asked: list[Pair] = []
    pair_counts: dict[Pair, int] = {}
    design = AggregatedDesign()
    records: list[StageRecord] = []
    estimate: Union[Dag, ScoreField]

    for t, budget in enumerate(stages, start=1):
        stage_design = select_stage(
            nodes,
            pool,
            budget,
            criterion,
            belief=belief,
            history=asked,
            rng=rng,
            stage=t,
        )
        design.stages.append(stage_design)
        for expert in experts:
            for q in stage_design.queries:
                resp = expert.answer(q, protocol)
                responses.append(resp)
                if protocol is Protocol.EDGE:
                    belief.update(q.pair, resp.value)
                pair_counts[q.pair] = pair_counts.get(q.pair, 0) + 1
        asked.extend(stage_design.pairs())

        if protocol is Protocol.EDGE:
            estimate, _ = _edge_estimate(nodes, responses)
            metrics = edge_metrics(estimate, truth)
        else:
            estimate = infer_scores(nodes, responses, sigma_phi)
            belief = GaussianBelief.laplace(estimate, pair_counts, sigma_phi)
            metrics = order_metrics(estimate.phi, truth)
        records.append(
            StageRecord(t, budget, stage_design.pairs(), stage_design.criterion_values, metrics)
        )
        if pool_mode is PoolMode.REMOVE:
            stage_pairs = set(stage_design.pairs())
            pool = [p for p in pool if p not in stage_pairs]

    return design, estimate, records
