"""Single-informant inference: edge posteriors and the latent ordering score.

Edge-wise answers update an independent Dirichlet-categorical posterior per
pair. Ordering-wise answers feed a latent score field phi, one real value per
node, where higher phi means more upstream; answers are modeled as Gaussian
around 10*tanh(phi_u - phi_v) and phi is fit by gradient ascent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .graphs import Dag, PairRelation, canonical_pairs, project_to_dag
from .experts import KnowledgeSet, Protocol, Response

DEFAULT_PSEUDOCOUNTS = (1.0, 1.0, 1.0)
ORDER_AMPLITUDE = 10.0
SIGMA_PHI = 2.0
SIGMA_FLOOR = 0.5
GRAD_TOL = 1e-8
MAX_ASCENT_ITERS = 10_000


class ProtocolMismatch(Exception):
    pass


class NonConvergence(Exception):
    def __init__(self, grad_norm: float):
        super().__init__(f"gradient ascent stalled at sup-norm {grad_norm:.3e}")
        self.grad_norm = grad_norm


def _require_protocol(responses: Sequence[Response], protocol: Protocol) -> None:
    for r in responses:
        if r.protocol is not protocol:
            raise ProtocolMismatch(
                f"expected {protocol.value} responses, found {r.protocol.value}"
            )


@dataclass
class EdgePosterior:
    """Per-pair Dirichlet posterior over (forward, none, backward) outcomes."""

    nodes: tuple[str, ...]
    prior: tuple[float, float, float] = DEFAULT_PSEUDOCOUNTS
    alphas: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = tuple(self.nodes)
        for pair in canonical_pairs(self.nodes):
            self.alphas.setdefault(pair, np.array(self.prior, dtype=float).copy())

    def update(self, pair: tuple[str, str], value: int) -> None:
        idx = {1: 0, 0: 1, -1: 2}[int(np.sign(value))]
        self.alphas[pair][idx] += 1.0

    def probs(self, pair: tuple[str, str]) -> np.ndarray:
        a = self.alphas[pair]
        return a / a.sum()

    def map_relation(self, pair: tuple[str, str]) -> PairRelation:
        p_f, p_n, p_b = self.probs(pair)
        best = max((p_f, PairRelation.FORWARD), (p_n, PairRelation.NONE),
                   (p_b, PairRelation.BACKWARD), key=lambda t: t[0])
        return best[1]

    def to_dag(self) -> Dag:
        weights = {}
        confidence = {}
        for pair in canonical_pairs(self.nodes):
            p_f, _, p_b = self.probs(pair)
            weights[pair] = p_f - p_b
            confidence[pair] = max(p_f, p_b)
        return project_to_dag(self.nodes, weights, confidence)


def infer_edgewise(
    nodes: Sequence[str],
    responses: KnowledgeSet,
    prior_pseudocounts: tuple[float, float, float] = DEFAULT_PSEUDOCOUNTS,
) -> tuple[EdgePosterior, Dag]:
    """Conjugate per-pair update over a ternary transcript, then projection."""
    _require_protocol(responses, Protocol.EDGE)
    posterior = EdgePosterior(tuple(nodes), prior_pseudocounts)
    for r in responses:
        posterior.update(r.query.pair, r.value)
    return posterior, posterior.to_dag()


@dataclass
class ScoreField:
    """Gauge-fixed latent scores (sum zero) plus the fitted noise scale."""

    nodes: tuple[str, ...]
    phi: dict[str, float]
    sigma: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.phi[n] for n in self.nodes])


def _response_arrays(
    nodes: Sequence[str], responses: Sequence[Response]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    index = {n: i for i, n in enumerate(nodes)}
    iu = np.array([index[r.query.u] for r in responses], dtype=int)
    iv = np.array([index[r.query.v] for r in responses], dtype=int)
    y = np.array([r.value for r in responses], dtype=float)
    return iu, iv, y


def score_loglik(
    phi: np.ndarray,
    iu: np.ndarray,
    iv: np.ndarray,
    y: np.ndarray,
    sigma: float,
    sigma_phi: float = SIGMA_PHI,
) -> float:
    """Gaussian log-likelihood of ordering answers plus the Gaussian phi prior."""
    mu = ORDER_AMPLITUDE * np.tanh(phi[iu] - phi[iv])
    data = -0.5 * np.sum((y - mu) ** 2) / sigma**2 - len(y) * 0.5 * math.log(
        2 * math.pi * sigma**2
    )
    prior = -0.5 * np.sum(phi**2) / sigma_phi**2 - len(phi) * 0.5 * math.log(
        2 * math.pi * sigma_phi**2
    )
    return float(data + prior)


def score_grad(
    phi: np.ndarray,
    iu: np.ndarray,
    iv: np.ndarray,
    y: np.ndarray,
    sigma: float,
    sigma_phi: float = SIGMA_PHI,
) -> np.ndarray:
    """Exact gradient of score_loglik with respect to phi."""
    t = np.tanh(phi[iu] - phi[iv])
    resid = (y - ORDER_AMPLITUDE * t) / sigma**2
    coeff = resid * ORDER_AMPLITUDE * (1.0 - t**2)
    grad = np.zeros_like(phi)
    np.add.at(grad, iu, coeff)
    np.add.at(grad, iv, -coeff)
    grad -= phi / sigma_phi**2
    return grad


def infer_scores(
    nodes: Sequence[str],
    responses: KnowledgeSet,
    sigma_phi: float = SIGMA_PHI,
) -> ScoreField:
    """Fit the latent score field by backtracking gradient ascent.

    Starts from phi = 0, halves the step until the objective improves, and
    stops when the gradient sup-norm falls below 1e-8 (or after 10,000
    iterations). The noise scale is refreshed from residuals every 10 steps,
    floored at 0.5. The result is gauge-fixed to sum to zero.
    """
    _require_protocol(responses, Protocol.ORDERING)
    if not responses:
        raise ValueError("need at least one ordering response")
    nodes = tuple(nodes)
    iu, iv, y = _response_arrays(nodes, responses)
    phi = np.zeros(len(nodes))
    sigma = max(float(np.std(y)) if len(y) > 1 else 1.0, SIGMA_FLOOR)
    current = score_loglik(phi, iu, iv, y, sigma, sigma_phi)
    step = 0.1
    grad = score_grad(phi, iu, iv, y, sigma, sigma_phi)
    for it in range(MAX_ASCENT_ITERS):
        if np.max(np.abs(grad)) < GRAD_TOL:
            break
        # Backtracking halving line search; accepted steps never decrease
        # the objective at the current sigma.
        trial_step = step
        for _ in range(60):
            candidate = phi + trial_step * grad
            value = score_loglik(candidate, iu, iv, y, sigma, sigma_phi)
            if value >= current:
                break
            trial_step *= 0.5
        else:
            break  # no improving step at machine precision
        phi, current, step = candidate, value, min(trial_step * 2.0, 1.0)
        if (it + 1) % 10 == 0:
            mu = ORDER_AMPLITUDE * np.tanh(phi[iu] - phi[iv])
            sigma = max(float(np.sqrt(np.mean((y - mu) ** 2))), SIGMA_FLOOR)
            current = score_loglik(phi, iu, iv, y, sigma, sigma_phi)
        grad = score_grad(phi, iu, iv, y, sigma, sigma_phi)
    final_norm = float(np.max(np.abs(grad)))
    if final_norm > 1e-4:
        raise NonConvergence(final_norm)
    phi = phi - phi.mean()  # gauge: scores sum to zero
    return ScoreField(nodes, {n: float(phi[i]) for i, n in enumerate(nodes)}, sigma)


def dump_inference(
    posterior: Optional[EdgePosterior] = None,
    scores: Optional[ScoreField] = None,
) -> str:
    """JSON dump of whatever single-expert inference produced."""
    doc: dict = {}
    if posterior is not None:
        doc["pairs"] = {
            f"{u}|{v}": [float(x) for x in posterior.probs((u, v))]
            for u, v in canonical_pairs(posterior.nodes)
        }
    if scores is not None:
        doc["phi"] = scores.phi
        doc["sigma"] = scores.sigma
    return json.dumps(doc, indent=2, sort_keys=True)
