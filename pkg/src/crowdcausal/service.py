"""HTTP session service for live elicitation: serves adaptively chosen
queries one at a time, folds answers into the posterior, and reports the
evolving structure estimate. Sessions persist as append-only JSON-lines
event logs and rebuild by replay."""

import json
import math
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .design import Criterion, DirichletBelief, GaussianBelief, select_stage
from .experts import Protocol
from .graphs import ASIA_DESCRIPTIONS, ASIA_NODES, canonical_pair, canonical_pairs, project_to_dag
from .inference import SIGMA_PHI, EdgePosterior

TAU_ORDER = 0.75
ORDER_SCALE_CLIP = 0.995


class ServiceError(Exception):
    """Base for session-service errors; subclasses map to HTTP statuses."""

    status = 400


class UnknownSession(ServiceError):
    status = 404


class SessionExhausted(ServiceError):
    status = 409


class NoPendingQuery(ServiceError):
    status = 409


class OutOfRange(ServiceError):
    status = 422


class InvalidNetwork(ServiceError):
    status = 422


class InvalidBudget(ServiceError):
    status = 422


class Unauthorized(ServiceError):
    status = 401


ORDER_QUESTION_TEMPLATE = (
    "How strongly do you believe that {u} is an upstream causal variable of "
    "{v}? Rate with an integer from -10 to 10."
)

EDGE_QUESTION_TEMPLATE = (
    "When the question is presented as {u}--{v}, please use 1 to denote a "
    "direct causal influence from {u} → {v}, use -1 to denote {u} "
    "← {v}, and use 0 to denote no direct causal influence between "
    "{u} and {v}."
)


def _parse_network(spec) -> tuple[tuple[str, ...], dict[str, str]]:
    if isinstance(spec, str):
        if spec.lower() != "asia":
            raise InvalidNetwork(f"unknown network fixture {spec!r}")
        return ASIA_NODES, dict(ASIA_DESCRIPTIONS)
    if not isinstance(spec, Mapping) or "nodes" not in spec:
        raise InvalidNetwork("network must be a fixture name or {nodes, descriptions}")
    nodes = tuple(str(n) for n in spec["nodes"])
    if len(nodes) < 2:
        raise InvalidNetwork("network needs at least two nodes")
    if len(set(nodes)) != len(nodes):
        raise InvalidNetwork("network has duplicate node names")
    descriptions = {str(k): str(v) for k, v in (spec.get("descriptions") or {}).items()}
    unknown = set(descriptions) - set(nodes)
    if unknown:
        raise InvalidNetwork(f"descriptions name unknown nodes: {sorted(unknown)}")
    return nodes, descriptions


@dataclass
class Session:
    """One informant's elicitation run; all mutation happens under `lock`.

    The belief is an EdgePosterior (edge protocol) or a GaussianBelief over
    latent scores (ordering protocol). `answered + remaining == budget`
    always holds, and the estimate is acyclic by construction.
    """

    session_id: str
    nodes: tuple[str, ...]
    descriptions: dict[str, str]
    protocol: Protocol
    criterion: Criterion
    budget: int
    seed: int
    created: float
    updated: float
    belief: Union[EdgePosterior, GaussianBelief] = None
    remaining: int = 0
    answered: list = field(default_factory=list)
    pending: Optional[tuple[str, str]] = None
    entropy_trace: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.belief is None:
            if self.protocol is Protocol.EDGE:
                self.belief = EdgePosterior(self.nodes)
            else:
                self.belief = GaussianBelief.prior(self.nodes, SIGMA_PHI)
        if not self.entropy_trace:
            self.remaining = self.budget
            self.entropy_trace = [self._entropy()]

    # -- belief plumbing ----------------------------------------------------

    def _entropy(self) -> float:
        if self.protocol is Protocol.EDGE:
            total = 0.0
            for pair in canonical_pairs(self.nodes):
                p = self.belief.probs(pair)
                total -= float((p * np.log(p)).sum())
            return total
        return self.belief.entropy()

    def _design_belief(self):
        if self.protocol is Protocol.ORDERING:
            return self.belief
        view = DirichletBelief(self.nodes)
        for pair, alpha in self.belief.alphas.items():
            view.alphas[pair] = alpha.copy()
        return view

    def _pair_confidences(self) -> tuple[dict, dict]:
        """Signed margins and confidences per canonical pair."""
        margins: dict[tuple[str, str], float] = {}
        confidence: dict[tuple[str, str], float] = {}
        if self.protocol is Protocol.EDGE:
            for pair in canonical_pairs(self.nodes):
                p_f, _, p_b = self.belief.probs(pair)
                margins[pair] = float(p_f - p_b)
                confidence[pair] = float(max(p_f, p_b))
            return margins, confidence
        idx = {n: i for i, n in enumerate(self.nodes)}
        for u, v in canonical_pairs(self.nodes):
            d = np.zeros(len(self.nodes))
            d[idx[u]], d[idx[v]] = 1.0, -1.0
            mu = float(d @ self.belief.mean)
            var = float(d @ self.belief.cov @ d)
            if var <= 1e-12:
                p = 0.5 if mu == 0 else (1.0 if mu > 0 else 0.0)
            else:
                p = 0.5 * (1.0 + math.erf(mu / math.sqrt(2.0 * var)))
            margins[(u, v)] = 2.0 * p - 1.0
            confidence[(u, v)] = max(p, 1.0 - p)
        return margins, confidence

    # -- operations (call under lock) ---------------------------------------

    def next_query(self) -> tuple[tuple[str, str], str, int]:
        if self.remaining <= 0:
            raise SessionExhausted(f"session {self.session_id} has no budget left")
        if self.pending is None:
            rng = np.random.default_rng([self.seed, len(self.answered)])
            design = select_stage(
                self.nodes,
                canonical_pairs(self.nodes),
                1,
                self.criterion,
                belief=self._design_belief(),
                history=[pair for pair, _ in self.answered],
                rng=rng,
                stage=len(self.answered) + 1,
            )
            self.pending = design.queries[0].pair
        return self.pending, self.question_text(self.pending), self.remaining

    def question_text(self, pair: tuple[str, str]) -> str:
        u, v = pair
        du = self.descriptions.get(u, u)
        dv = self.descriptions.get(v, v)
        template = (
            EDGE_QUESTION_TEMPLATE
            if self.protocol is Protocol.EDGE
            else ORDER_QUESTION_TEMPLATE
        )
        return template.format(u=du, v=dv)

    def submit(self, value) -> dict:
        if self.pending is None:
            raise NoPendingQuery("no query awaiting an answer; fetch next-query first")
        if isinstance(value, bool) or not isinstance(value, int):
            raise OutOfRange(f"value must be an integer, got {value!r}")
        lo, hi = self.protocol.value_range
        if not lo <= value <= hi:
            raise OutOfRange(f"value {value} outside [{lo}, {hi}]")
        pair = self.pending
        if self.protocol is Protocol.EDGE:
            self.belief.update(pair, value)
        else:
            y = math.atanh(
                max(-ORDER_SCALE_CLIP, min(ORDER_SCALE_CLIP, value / 10.0))
            )
            self.belief.update(pair, y)
        self.answered.append((pair, value))
        self.remaining -= 1
        self.pending = None
        self.entropy_trace.append(self._entropy())
        self.updated = time.time()
        return self.estimate()

    def estimate(self) -> dict:
        margins, confidence = self._pair_confidences()
        threshold = 0.5 if self.protocol is Protocol.EDGE else TAU_ORDER
        dag = project_to_dag(self.nodes, margins, confidence, threshold)
        edges = []
        for u, v in sorted(dag.edges):
            pair = canonical_pair(u, v)
            p = confidence[pair]
            edges.append([u, v, round(float(p), 6)])
        return {
            "edges": edges,
            "entropy": [round(e, 6) for e in self.entropy_trace],
            "answered": len(self.answered),
            "remaining": self.remaining,
        }


class SessionStore:
    """All live sessions, with optional JSON-lines persistence and replay."""

    def __init__(self, log_dir: Optional[Union[str, Path]] = None):
        self.sessions: dict[str, Session] = {}
        self._lock = threading.Lock()
        self.log_dir = Path(log_dir) if log_dir else None
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            for path in sorted(self.log_dir.glob("*.jsonl")):
                events = [
                    json.loads(line)
                    for line in path.read_text().splitlines()
                    if line.strip()
                ]
                if events:
                    session = replay_events(events)
                    self.sessions[session.session_id] = session

    def _append_event(self, session_id: str, event: dict) -> None:
        if self.log_dir is None:
            return
        with (self.log_dir / f"{session_id}.jsonl").open("a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()

    def create(
        self,
        network="asia",
        protocol: str = "edge",
        criterion: str = "eig",
        budget: int = 1,
        seed: int = 0,
    ) -> Session:
        nodes, descriptions = _parse_network(network)
        try:
            protocol = Protocol(protocol)
        except ValueError:
            raise InvalidNetwork(f"unknown protocol {protocol!r}")
        try:
            criterion = Criterion(criterion)
        except ValueError:
            raise InvalidNetwork(f"unknown criterion {criterion!r}")
        if isinstance(budget, bool) or not isinstance(budget, int) or budget < 1:
            raise InvalidBudget(f"budget must be an integer >= 1, got {budget!r}")
        now = time.time()
        session = Session(
            session_id=uuid.uuid4().hex,
            nodes=nodes,
            descriptions=descriptions,
            protocol=protocol,
            criterion=criterion,
            budget=budget,
            seed=int(seed),
            created=now,
            updated=now,
        )
        with self._lock:
            self.sessions[session.session_id] = session
        self._append_event(
            session.session_id,
            {
                "event": "create",
                "session_id": session.session_id,
                "network": {"nodes": list(nodes), "descriptions": descriptions},
                "protocol": protocol.value,
                "criterion": criterion.value,
                "budget": budget,
                "seed": int(seed),
                "ts": now,
            },
        )
        return session

    def get(self, session_id: str) -> Session:
        with self._lock:
            session = self.sessions.get(session_id)
        if session is None:
            raise UnknownSession(f"no session {session_id!r}")
        return session

    def record_response(self, session: Session, pair, value) -> None:
        self._append_event(
            session.session_id,
            {
                "event": "response",
                "pair": list(pair),
                "value": value,
                "ts": session.updated,
            },
        )


def replay_events(events: Sequence[Mapping]) -> Session:
    """Rebuild a session by replaying its event log from scratch.

    The recorded query pairs must match the recomputed ones; a mismatch
    means the log and the selection logic have diverged.
    """
    head = events[0]
    if head.get("event") != "create":
        raise ValueError("event log must start with a create event")
    session = Session(
        session_id=head["session_id"],
        nodes=tuple(head["network"]["nodes"]),
        descriptions=dict(head["network"].get("descriptions") or {}),
        protocol=Protocol(head["protocol"]),
        criterion=Criterion(head["criterion"]),
        budget=int(head["budget"]),
        seed=int(head.get("seed", 0)),
        created=head.get("ts", 0.0),
        updated=head.get("ts", 0.0),
    )
    for event in events[1:]:
        if event.get("event") != "response":
            raise ValueError(f"unexpected event {event.get('event')!r}")
        pair, _, _ = session.next_query()
        logged = tuple(event["pair"])
        if pair != logged:
            raise ValueError(
                f"replay diverged: log says {logged}, selection chose {pair}"
            )
        session.submit(event["value"])
        session.updated = event.get("ts", session.updated)
    return session


def create_app(
    log_dir: Optional[Union[str, Path]] = None,
    auth_token: Optional[str] = None,
):
    """Build the FastAPI app around a session store.

    With `auth_token` set, every request must carry
    ``Authorization: Bearer <token>``. With `log_dir` set, sessions persist
    as one JSON-lines file each and are rebuilt on startup.
    """
    from fastapi import FastAPI, Request
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse
    from pydantic import BaseModel

    store = SessionStore(log_dir)
    app = FastAPI(title="crowdcausal elicitation service")
    app.state.store = store

    class CreateBody(BaseModel):
        network: Union[str, dict] = "asia"
        protocol: str = "edge"
        criterion: str = "eig"
        budget: int
        seed: int = 0

    class ResponseBody(BaseModel):
        value: int

    @app.exception_handler(ServiceError)
    async def service_error(_request: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status,
            content={"error_code": type(exc).__name__, "message": str(exc)},
        )

    @app.exception_handler(RequestValidationError)
    async def validation_error(_request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=422,
            content={"error_code": "ValidationError", "message": str(exc.errors())},
        )

    def guard(request: Request) -> None:
        if auth_token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {auth_token}":
            raise Unauthorized("missing or wrong bearer token")

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateBody, request: Request):
        guard(request)
        session = store.create(
            network=body.network,
            protocol=body.protocol,
            criterion=body.criterion,
            budget=body.budget,
            seed=body.seed,
        )
        return {"session_id": session.session_id}

    @app.get("/sessions/{session_id}/next-query")
    def next_query(session_id: str, request: Request):
        guard(request)
        session = store.get(session_id)
        with session.lock:
            pair, text, remaining = session.next_query()
        return {"pair": list(pair), "question_text": text, "remaining": remaining}

    @app.post("/sessions/{session_id}/responses")
    def submit_response(session_id: str, body: ResponseBody, request: Request):
        guard(request)
        session = store.get(session_id)
        with session.lock:
            pair = session.pending
            summary = session.submit(body.value)
            store.record_response(session, pair, body.value)
        return {"estimate_summary": summary}

    @app.get("/sessions/{session_id}/estimate")
    def get_estimate(session_id: str, request: Request):
        guard(request)
        session = store.get(session_id)
        with session.lock:
            summary = session.estimate()
        return {
            "edges": summary["edges"],
            "entropy": summary["entropy"],
            "answered": summary["answered"],
        }

    return app
