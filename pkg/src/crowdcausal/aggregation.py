"""Crowd aggregation: expert-level voting and query-level mixture modeling.

The query-level model explains every raw response with a latent per
(expert, pair) mechanism z in {+, -, 0}: the expert believes u causes v,
believes the reverse, or believes no relation. The mixing prior over z comes
from a candidate graph; per-expert reliability and per-pair difficulty shape
the emission distributions. EM fits the emission parameters with the prior
held fixed, and a penalized hill climb searches graph space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .graphs import (
    Dag,
    NodeSetMismatch,
    PairRelation,
    canonical_pairs,
    project_to_dag,
    reachable,
    shortest_path_length,
)
from .experts import KnowledgeSet, Protocol, Response
from .inference import EdgePosterior, ProtocolMismatch, infer_edgewise

# Mixing prior over z = (+, -, 0) keyed by the candidate's pair state.
PI_TABLE = {
    PairRelation.FORWARD: (0.8, 0.1, 0.1),
    PairRelation.BACKWARD: (0.1, 0.8, 0.1),
    PairRelation.NONE: (0.1, 0.1, 0.8),
}
G_UNREACHABLE = 0.5
SIGMA2_FLOOR = 0.25**2
F_BOUNDS = (0.05, 20.0)
EM_TOL = 1e-7
EM_MAX_ITERS = 500
MONOTONE_SLACK = 1e-8
ACCEPT_EPS = 1e-9


class EmptyResponses(Exception):
    pass


class AllZeroWeights(Exception):
    pass


def _state_index(rel: PairRelation) -> int:
    return {PairRelation.FORWARD: 0, PairRelation.BACKWARD: 1, PairRelation.NONE: 2}[rel]


_LOG_PI = np.log(
    np.array(
        [PI_TABLE[PairRelation.FORWARD], PI_TABLE[PairRelation.BACKWARD], PI_TABLE[PairRelation.NONE]]
    )
)  # [state, z]


def _safe_log(x: np.ndarray) -> np.ndarray:
    return np.log(np.clip(x, 1e-300, None))


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


@dataclass
class MixtureParams:
    """Fitted mixture state for one candidate graph."""

    protocol: Protocol
    expert_ids: tuple[str, ...]
    pairs: tuple[tuple[str, str], ...]
    pi: np.ndarray  # [P, 3] mixing prior over (+, -, 0), fixed by the candidate
    loglik_trace: list[float] = field(default_factory=list)
    # Edge-wise emission parameters, one per expert:
    correct: Optional[np.ndarray] = None
    reverse: Optional[np.ndarray] = None
    honesty: Optional[np.ndarray] = None
    # Ordering emission parameters:
    mu_plus: Optional[float] = None
    sigma2: Optional[float] = None
    reliability: Optional[np.ndarray] = None  # f, one per expert
    difficulty: Optional[np.ndarray] = None  # g, one per pair


@dataclass
class CandidateState:
    graph: Dag
    score: float
    params: MixtureParams


class _EdgewiseData:
    """Sufficient statistics for edge-wise EM: counts[expert, pair, outcome]."""

    INIT = (0.6, 0.1, 0.7)  # interior start for (correct, reverse, honesty)

    def __init__(self, nodes: Sequence[str], responses: Sequence[Response]):
        self.nodes = tuple(nodes)
        self.expert_ids = tuple(sorted({r.expert_id for r in responses}))
        self.pairs = tuple(sorted({r.query.pair for r in responses}))
        eidx = {e: i for i, e in enumerate(self.expert_ids)}
        pidx = {p: i for i, p in enumerate(self.pairs)}
        self.counts = np.zeros((len(self.expert_ids), len(self.pairs), 3))
        for r in responses:
            out = {1: 0, -1: 1, 0: 2}[int(np.sign(r.value))]
            self.counts[eidx[r.expert_id], pidx[r.query.pair], out] += 1.0
        # Distinct per-(expert, pair) tally vectors; tally_class[m, p] -> row
        # of tallies. K is tiny (3 when every pair is answered once).
        flat = self.counts.reshape(-1, 3)
        self.tallies, inverse = np.unique(flat, axis=0, return_inverse=True)
        self.tally_class = inverse.reshape(self.counts.shape[:2])
        self._states_cache: dict[frozenset, np.ndarray] = {}

    def states_for(self, graph: Dag) -> np.ndarray:
        cached = self._states_cache.get(graph.edges)
        if cached is None:
            edges = graph.edges
            cached = np.array(
                [
                    0 if (u, v) in edges else 1 if (v, u) in edges else 2
                    for u, v in self.pairs
                ]
            )
            self._states_cache[graph.edges] = cached
        return cached

    def signature(self, graph: Dag) -> tuple:
        return tuple(self.states_for(graph).tolist())

    def _log_emissions(self, c, r, h) -> np.ndarray:
        """Per (.., expert) log emission table of shape [.., M, z, outcome]."""
        out = np.empty(c.shape + (3, 3))
        lc, lr = _safe_log(c), _safe_log(r)
        labst = _safe_log(1.0 - c - r)
        lh, lguess = _safe_log(h), _safe_log((1.0 - h) / 2.0)
        out[..., 0, 0], out[..., 0, 1], out[..., 0, 2] = lc, lr, labst
        out[..., 1, 0], out[..., 1, 1], out[..., 1, 2] = lr, lc, labst
        out[..., 2, 0], out[..., 2, 1], out[..., 2, 2] = lguess, lguess, lh
        return out

    def em(
        self,
        states: np.ndarray,
        max_iters: int = EM_MAX_ITERS,
        tol: float = EM_TOL,
    ) -> tuple[np.ndarray, dict, list[float]]:
        """Fit emissions for a batch of candidate state vectors.

        ``states`` has shape [P] or [G, P]; returns (loglik[G], params, trace)
        where the trace is kept for single-candidate fits only.
        """
        squeeze = states.ndim == 1
        states = np.atleast_2d(states)
        G = states.shape[0]
        M = len(self.expert_ids)

        # Pairs with the same prior state and the same tally class are
        # exchangeable (one latent z per expert and pair, shared by repeats),
        # so the E-step runs over (state, class) cells instead of pairs.
        K = self.tallies.shape[0]
        onehot_s = np.eye(3)[states]  # [G, P, 3]
        onehot_k = np.eye(K)[self.tally_class]  # [M, P, K]
        n = np.einsum("gps,mpk->gmsk", onehot_s, onehot_k)

        # Each candidate converges independently; finished rows are frozen and
        # compacted out, so batch results match one-at-a-time fits exactly.
        final_ll = np.full(G, -np.inf)
        final_c = np.full((G, M), self.INIT[0])
        final_r = np.full((G, M), self.INIT[1])
        final_h = np.full((G, M), self.INIT[2])
        live = np.arange(G)
        c, r, h = final_c.copy(), final_r.copy(), final_h.copy()
        prev = np.full(G, -np.inf)

        trace: list[float] = []
        for _ in range(max_iters):
            log_emit = self._log_emissions(c, r, h)  # [live, M, 3, 3]
            site = np.einsum("ko,gmzo->gmkz", self.tallies, log_emit)
            post = site[:, :, None, :, :] + _LOG_PI[None, None, :, None, :]
            norm = _logsumexp(post, axis=4)  # [g, m, s, k]
            ll = np.einsum("gmsk,gmsk->g", n, norm)
            if not np.all(ll >= prev - MONOTONE_SLACK * np.maximum(1.0, np.abs(prev))):
                raise AssertionError("EM log-likelihood decreased")
            if squeeze:
                trace.append(float(ll[0]))
            done = ll - prev < tol * np.maximum(1.0, np.abs(ll))
            prev = ll
            if np.any(done):
                idx = live[done]
                final_ll[idx] = ll[done]
                final_c[idx], final_r[idx], final_h[idx] = c[done], r[done], h[done]
                keep = ~done
                if not np.any(keep):
                    break
                live, n, prev = live[keep], n[keep], prev[keep]
                c, r, h = c[keep], r[keep], h[keep]
                post, norm = post[keep], norm[keep]
            gamma = np.exp(post - norm[..., None])  # [g, m, s, k, z]
            gamma *= n[..., None]  # expected pair count per cell and z
            s = np.einsum("gmskz,ko->gmzo", gamma, self.tallies)
            n_corr = s[:, :, 0, 0] + s[:, :, 1, 1]
            n_rev = s[:, :, 0, 1] + s[:, :, 1, 0]
            n_abst = s[:, :, 0, 2] + s[:, :, 1, 2]
            denom = n_corr + n_rev + n_abst
            ok = denom > 0
            c = np.where(ok, n_corr / np.where(ok, denom, 1.0), c)
            r = np.where(ok, n_rev / np.where(ok, denom, 1.0), r)
            h_num = s[:, :, 2, 2]
            h_den = s[:, :, 2, :].sum(axis=2)
            ok_h = h_den > 0
            h = np.where(ok_h, h_num / np.where(ok_h, h_den, 1.0), h)
        else:
            final_ll[live] = prev
            final_c[live], final_r[live], final_h[live] = c, r, h
        params = {"correct": final_c, "reverse": final_r, "honesty": final_h}
        return (final_ll, params, trace)


class _OrderingData:
    """Flat response arrays for ordering-wise EM, grouped by (expert, pair)."""

    INIT = (5.0, 9.0)  # (mu_plus, sigma2)

    def __init__(self, nodes: Sequence[str], responses: Sequence[Response]):
        self.nodes = tuple(nodes)
        self.expert_ids = tuple(sorted({r.expert_id for r in responses}))
        self.pairs = tuple(sorted({r.query.pair for r in responses}))
        eidx = {e: i for i, e in enumerate(self.expert_ids)}
        pidx = {p: i for i, p in enumerate(self.pairs)}
        groups: dict[tuple[int, int], int] = {}
        gid, ys = [], []
        for r in responses:
            key = (eidx[r.expert_id], pidx[r.query.pair])
            groups.setdefault(key, len(groups))
            gid.append(groups[key])
            ys.append(float(r.value))
        self.y = np.array(ys)
        self.gid = np.array(gid, dtype=int)
        self.n_groups = len(groups)
        self.group_expert = np.zeros(self.n_groups, dtype=int)
        self.group_pair = np.zeros(self.n_groups, dtype=int)
        for (m, p), g in groups.items():
            self.group_expert[g] = m
            self.group_pair[g] = p
        self.resp_expert = self.group_expert[self.gid]
        self.resp_pair = self.group_pair[self.gid]

    def states_for(self, graph: Dag) -> tuple[np.ndarray, np.ndarray]:
        """Reachability state index and difficulty g per observed pair."""
        states = np.empty(len(self.pairs), dtype=int)
        g = np.empty(len(self.pairs))
        for i, (u, v) in enumerate(self.pairs):
            fwd = reachable(graph, u, v)
            bwd = reachable(graph, v, u)
            if fwd is not None:
                states[i], g[i] = 0, 1.0 / (1.0 + fwd)
            elif bwd is not None:
                states[i], g[i] = 1, 1.0 / (1.0 + bwd)
            else:
                states[i], g[i] = 2, G_UNREACHABLE
        return states, g

    def signature(self, graph: Dag) -> tuple:
        states, g = self.states_for(graph)
        return tuple(zip(states.tolist(), g.tolist()))

    def _resp_loglik(self, mu, sigma2, f, g):
        w = f[self.resp_expert] * g[self.resp_pair]  # precision scale per response
        means = np.array([mu, -mu, 0.0])
        dev = self.y[:, None] - means[None, :]
        return (
            -0.5 * np.log(2.0 * math.pi * sigma2 / w)[:, None]
            - dev**2 * w[:, None] / (2.0 * sigma2)
        )

    def _observed(self, rll, log_pi_pair):
        group_ll = np.zeros((self.n_groups, 3))
        np.add.at(group_ll, self.gid, rll)
        post = group_ll + log_pi_pair[self.group_pair]
        norm = _logsumexp(post, axis=1)
        return float(norm.sum()), np.exp(post - norm[:, None])

    def em(
        self,
        states: np.ndarray,
        g: np.ndarray,
        max_iters: int = EM_MAX_ITERS,
        tol: float = EM_TOL,
    ) -> tuple[float, dict, list[float]]:
        mu, sigma2 = self.INIT
        f = np.ones(len(self.expert_ids))
        log_pi = _LOG_PI[states]
        n = len(self.y)
        trace: list[float] = []
        prev = -np.inf
        for _ in range(max_iters):
            rll = self._resp_loglik(mu, sigma2, f, g)
            ll, gamma_group = self._observed(rll, log_pi)
            if ll < prev - MONOTONE_SLACK * max(1.0, abs(prev)):
                raise AssertionError("EM log-likelihood decreased")
            trace.append(ll)
            if ll - prev < tol * max(1.0, abs(ll)):
                prev = ll
                break
            prev = ll
            gam = gamma_group[self.gid]  # [R, 3]
            w = f[self.resp_expert] * g[self.resp_pair]
            # mu update: precision-weighted signed regression, clamped to >= 0.
            num = np.sum(w * (gam[:, 0] - gam[:, 1]) * self.y)
            den = np.sum(w * (gam[:, 0] + gam[:, 1]))
            if den > 0:
                mu = max(num / den, 0.0)
            means = np.array([mu, -mu, 0.0])
            dev2 = (self.y[:, None] - means[None, :]) ** 2
            wdev = (gam * dev2).sum(axis=1)  # E[(y - mu_z)^2] per response
            sigma2 = max(float(np.sum(w * wdev) / n), SIGMA2_FLOOR)
            per_expert_dev = np.zeros(len(self.expert_ids))
            np.add.at(per_expert_dev, self.resp_expert, g[self.resp_pair] * wdev)
            n_m = np.bincount(self.resp_expert, minlength=len(self.expert_ids))
            ok = per_expert_dev > 0
            f = np.where(
                ok, n_m * sigma2 / np.where(ok, per_expert_dev, 1.0), f
            ).clip(*F_BOUNDS)
        params = {"mu_plus": mu, "sigma2": sigma2, "reliability": f, "difficulty": g}
        return (prev, params, trace)


def _single_protocol(responses: Sequence[Response]) -> Protocol:
    protocols = {r.protocol for r in responses}
    if len(protocols) != 1:
        raise ProtocolMismatch("responses mix survey protocols")
    return protocols.pop()


def em_fit(
    responses: KnowledgeSet,
    candidate: Dag,
    max_iters: int = EM_MAX_ITERS,
) -> tuple[MixtureParams, float]:
    """Fit the mixture for one candidate graph; the mixing prior stays fixed.

    Returns the fitted parameters (with the full log-likelihood trace
    attached) and the final observed-data log-likelihood.
    """
    if not responses:
        raise EmptyResponses("no responses to fit")
    protocol = _single_protocol(responses)
    if protocol is Protocol.EDGE:
        data = _EdgewiseData(candidate.nodes, responses)
        states = data.states_for(candidate)
        ll, raw, trace = data.em(states, max_iters=max_iters)
        params = MixtureParams(
            protocol,
            data.expert_ids,
            data.pairs,
            np.exp(_LOG_PI[states]),
            trace,
            correct=raw["correct"][0],
            reverse=raw["reverse"][0],
            honesty=raw["honesty"][0],
        )
        return params, float(ll[0])
    data = _OrderingData(candidate.nodes, responses)
    states, g = data.states_for(candidate)
    ll, raw, trace = data.em(states, g, max_iters=max_iters)
    params = MixtureParams(
        protocol,
        data.expert_ids,
        data.pairs,
        np.exp(_LOG_PI[states]),
        trace,
        mu_plus=raw["mu_plus"],
        sigma2=raw["sigma2"],
        reliability=raw["reliability"],
        difficulty=raw["difficulty"],
    )
    return params, float(ll)


def exhaustive_scores(
    responses: KnowledgeSet,
    graphs: Sequence[Dag],
    lambda_pen: Optional[float] = None,
) -> np.ndarray:
    """Penalized score of every candidate graph, fit as one batch.

    Edge-wise only: the batch shares the count tensor and each candidate row
    converges exactly as a one-graph fit would, so these scores are directly
    comparable with structure_search output.
    """
    if not responses:
        raise EmptyResponses("no responses to score")
    if _single_protocol(responses) is not Protocol.EDGE:
        raise ProtocolMismatch("batched scoring supports edge-wise responses")
    if lambda_pen is None:
        lambda_pen = 0.5 * math.log(len(responses))
    data = _EdgewiseData(graphs[0].nodes, responses)
    states = np.stack([data.states_for(g) for g in graphs])
    ll, _, _ = data.em(states)
    edge_counts = np.array([len(g.edges) for g in graphs])
    return ll - lambda_pen * edge_counts


def aggregate_expert_level(
    estimates: Sequence[Union[Dag, EdgePosterior]],
    weights: Optional[Sequence[float]] = None,
) -> Dag:
    """Weighted per-pair vote over per-expert structures, then projection."""
    if not estimates:
        raise EmptyResponses("no estimates to aggregate")
    nodes = tuple(estimates[0].nodes)
    node_set = set(nodes)
    if weights is None:
        weights = [1.0] * len(estimates)
    w = np.array(list(weights), dtype=float)
    if len(w) != len(estimates) or np.any(w < 0):
        raise ValueError("need one nonnegative weight per estimate")
    if w.sum() == 0:
        raise AllZeroWeights("expert weights sum to zero")
    w = w / w.sum()

    votes = {pair: np.zeros(3) for pair in canonical_pairs(nodes)}  # [F, B, N]
    for est, wi in zip(estimates, w):
        if set(est.nodes) != node_set:
            raise NodeSetMismatch("estimates disagree on the node set")
        for pair in votes:
            if isinstance(est, EdgePosterior):
                p_f, p_n, p_b = est.probs(pair)
                votes[pair] += wi * np.array([p_f, p_b, p_n])
            else:
                rel = est.relation(*pair)
                votes[pair][_state_index(rel)] += wi
    margins = {pair: float(v[0] - v[1]) for pair, v in votes.items()}
    confidence = {pair: float(max(v[0], v[1])) for pair, v in votes.items()}
    return project_to_dag(nodes, margins, confidence)


def _acyclic_moves(graph: Dag) -> list[tuple[int, tuple[str, str], Dag]]:
    """All legal single-edge moves, tagged with tie-break priority.

    Priority: delete 0, reverse 1, add 2; pairs in lexicographic order.
    """
    moves = []
    edges = graph.edges
    for u, v in canonical_pairs(graph.nodes):
        rel = graph.relation(u, v)
        if rel is PairRelation.NONE:
            for a, b in ((u, v), (v, u)):
                if shortest_path_length(edges, b, a) is None:
                    moves.append((2, (u, v), graph.with_edges(add=[(a, b)])))
        else:
            edge = (u, v) if rel is PairRelation.FORWARD else (v, u)
            moves.append((0, (u, v), graph.with_edges(remove=[edge])))
            rest = edges - {edge}
            if shortest_path_length(rest, edge[0], edge[1]) is None:
                moves.append(
                    (1, (u, v), graph.with_edges(remove=[edge], add=[edge[::-1]]))
                )
    moves.sort(key=lambda m: (m[0], m[1]))
    return moves


class _SearchScorer:
    """Cold-init EM log-likelihoods, cached by the candidate's state signature."""

    def __init__(self, nodes, responses, protocol, lambda_pen):
        self.protocol = protocol
        self.lambda_pen = lambda_pen
        self.data = (
            _EdgewiseData(nodes, responses)
            if protocol is Protocol.EDGE
            else _OrderingData(nodes, responses)
        )
        self.cache: dict[tuple, float] = {}

    def _loglik(self, graph: Dag) -> float:
        key = self.data.signature(graph)
        ll = self.cache.get(key)
        if ll is None:
            if self.protocol is Protocol.EDGE:
                ll = float(self.data.em(self.data.states_for(graph))[0][0])
            else:
                states, g = self.data.states_for(graph)
                ll = float(self.data.em(states, g)[0])
            self.cache[key] = ll
        return ll

    def score(self, graph: Dag) -> float:
        return self._loglik(graph) - self.lambda_pen * len(graph.edges)

    def score_all(self, graphs: Sequence[Dag]) -> list[float]:
        """Exact scores for many candidates; edge-wise fits run as one batch."""
        if self.protocol is Protocol.EDGE:
            todo: dict[tuple, int] = {}
            for graph in graphs:
                key = self.data.signature(graph)
                if key not in self.cache and key not in todo:
                    todo[key] = len(todo)
            if todo:
                states = np.array(list(todo))  # signature rows are state vectors
                ll, _, _ = self.data.em(states)
                for key, i in todo.items():
                    self.cache[key] = float(ll[i])
        return [self.score(graph) for graph in graphs]


def structure_search(
    responses: KnowledgeSet,
    init: Dag,
    restarts: int = 2,
    seed: int = 0,
    lambda_pen: Optional[float] = None,
) -> CandidateState:
    """Penalized hill climb over add/delete/reverse moves, best of restarts.

    The score of a graph is its converged EM log-likelihood minus
    lambda_pen times the edge count. Restart 0 climbs from ``init``; each
    further restart climbs from the complete DAG of a random node ordering.
    Every legal move is scored exactly each step (edge-wise moves share one
    batched fit) and the best strictly improving move is taken; ties keep
    the earliest move in delete < reverse < add, then pair order.
    """
    if not responses:
        raise EmptyResponses("no responses to search over")
    protocol = _single_protocol(responses)
    if lambda_pen is None:
        lambda_pen = 0.5 * math.log(len(responses))
    scorer = _SearchScorer(init.nodes, responses, protocol, lambda_pen)
    rng = np.random.default_rng(seed)

    def climb(start: Dag) -> tuple[Dag, float]:
        graph = start
        score = scorer.score(graph)
        while True:
            moves = _acyclic_moves(graph)
            if not moves:
                break
            scores = scorer.score_all([m[2] for m in moves])
            best_i, best = None, score
            for i, s in enumerate(scores):
                if s > best + ACCEPT_EPS:
                    best_i, best = i, s
            if best_i is None:
                break
            graph, score = moves[best_i][2], best
        return graph, score

    starts = [init]
    for _ in range(max(0, restarts - 1)):
        order = [init.nodes[i] for i in rng.permutation(len(init.nodes))]
        position = {n: i for i, n in enumerate(order)}
        edges = {
            (u, v) if position[u] < position[v] else (v, u)
            for u, v in canonical_pairs(init.nodes)
        }
        starts.append(Dag(init.nodes, frozenset(edges)))

    best_graph, best_score = None, -np.inf
    for start in starts:
        graph, score = climb(start)
        if score > best_score + ACCEPT_EPS:
            best_graph, best_score = graph, score
    params, ll = em_fit(responses, best_graph)
    return CandidateState(best_graph, ll - lambda_pen * len(best_graph.edges), params)


def _orient_by_net_votes(graph: Dag, responses: KnowledgeSet) -> Dag:
    """Pick the better-supported orientation of ``graph`` versus its mirror.

    The mixture likelihood is invariant under reversing every edge at once
    (the two directed emission roles swap), so the structure search settles
    the skeleton but not the global orientation. The signed per-pair response
    totals are not invariant, and they anchor the direction: keep whichever
    of the graph and its full reversal agrees more with those totals.
    """
    net: dict[tuple[str, str], float] = {}
    for r in responses:
        net[r.query.pair] = net.get(r.query.pair, 0.0) + r.value

    def agreement(g: Dag) -> float:
        return sum(net.get((a, b), 0.0) - net.get((b, a), 0.0) for a, b in g.edges)

    mirror = Dag(graph.nodes, frozenset((b, a) for (a, b) in graph.edges))
    return mirror if agreement(mirror) > agreement(graph) else graph


def query_level_aggregate(
    nodes: Sequence[str],
    responses: KnowledgeSet,
    restarts: int = 2,
    seed: int = 0,
) -> Dag:
    """Default crowd pipeline: vote-based init, then mixture structure search."""
    if not responses:
        raise EmptyResponses("no responses to aggregate")
    protocol = _single_protocol(responses)
    nodes = tuple(nodes)
    if protocol is Protocol.EDGE:
        by_expert: dict[str, KnowledgeSet] = {}
        for r in responses:
            by_expert.setdefault(r.expert_id, []).append(r)
        graphs = [
            infer_edgewise(nodes, expert_responses)[1]
            for _, expert_responses in sorted(by_expert.items())
        ]
        init = aggregate_expert_level(graphs)
    else:
        init = Dag(nodes)  # ordering answers identify order, not adjacency
    state = structure_search(responses, init, restarts=restarts, seed=seed)
    return _orient_by_net_votes(state.graph, responses)
