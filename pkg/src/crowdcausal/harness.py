"""Experiment orchestration: config ingestion, seeded replicate runs with
CSV/JSON reports, and a survey adapter for language-model informants with a
replayable mock mode."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import re
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .aggregation import query_level_aggregate
from .design import Criterion, PoolMode, StageRecord, run_sequential
from .experts import (
    ARCHETYPES,
    Expert,
    KnowledgeSet,
    Protocol,
    Query,
    Response,
    all_pair_queries,
    crowd_from_spec,
    elicit,
)
from .graphs import ASIA_DESCRIPTIONS, Dag, load_network, shd
from .inference import infer_edgewise, infer_scores
from .metrics import MetricsReport, behavior_metrics, evaluate, order_metrics

log = logging.getLogger(__name__)

LLM_CREDENTIAL_ENV = "CROWDCAUSAL_LLM_API_KEY"

AGGREGATIONS = ("edgewise", "expert-level", "query-level", "scores")


class ConfigError(Exception):
    """Invalid experiment configuration; carries the offending field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class ExperimentError(Exception):
    """A replicate failed; the message names the replicate and the module."""


class EndpointUnreachable(Exception):
    """The live language-model endpoint could not be reached or used."""


class TranscriptMismatch(Exception):
    """A mock transcript does not line up with the requested survey."""


# ---------------------------------------------------------------------------
# Experiment configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """One end-to-end run: who answers, how, and how answers are combined.

    ``crowd`` entries are archetype names or explicit profile documents.
    Setting ``criterion`` switches elicitation to staged sequential design
    with ``stage_budgets`` queries per stage; otherwise every pair is asked
    ``repeats`` times. Replicate r derives its seed as ``master_seed + r``.
    """

    network: str = "asia"
    crowd: tuple = ("Omniscient",)
    protocol: Protocol = Protocol.EDGE
    aggregation: str = "edgewise"
    criterion: Optional[Criterion] = None
    stage_budgets: tuple = ()
    pool_mode: PoolMode = PoolMode.FIXED
    repeats: int = 1
    restarts: int = 2
    replicates: int = 1
    master_seed: int = 0
    parallelism: int = 1
    individual_baseline: bool = False
    output_dir: str = "results"

    def as_doc(self) -> dict:
        doc = {
            "network": self.network,
            "crowd": list(self.crowd),
            "protocol": self.protocol.value,
            "aggregation": self.aggregation,
            "repeats": self.repeats,
            "restarts": self.restarts,
            "replicates": self.replicates,
            "master_seed": self.master_seed,
            "parallelism": self.parallelism,
            "individual_baseline": self.individual_baseline,
            "output_dir": self.output_dir,
        }
        if self.criterion is not None:
            doc["design"] = {
                "criterion": self.criterion.value,
                "stage_budgets": list(self.stage_budgets),
                "pool_mode": self.pool_mode.value,
            }
        return doc


def _positive_int(doc: Mapping, key: str, default: int) -> int:
    value = doc.get(key, default)
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(key, f"must be an integer >= 1, got {value!r}")
    return value


def config_from_doc(doc: Mapping) -> ExperimentConfig:
    """Validate a plain-JSON document into an ExperimentConfig.

    Raises ConfigError naming the bad field by dotted path. Referenced
    files (network definitions) must exist at load time.
    """
    known = {
        "network", "crowd", "protocol", "aggregation", "design", "repeats",
        "restarts", "replicates", "master_seed", "parallelism",
        "individual_baseline", "output_dir",
    }
    for key in doc:
        if key not in known:
            raise ConfigError(key, "unknown field")

    network = str(doc.get("network", "asia"))
    if network.lower() != "asia" and not Path(network).exists():
        raise ConfigError("network", f"file not found: {network}")

    crowd = doc.get("crowd", ["Omniscient"])
    if not isinstance(crowd, Sequence) or isinstance(crowd, str) or not crowd:
        raise ConfigError("crowd", "must be a nonempty list")
    for i, entry in enumerate(crowd):
        if isinstance(entry, str):
            if entry not in ARCHETYPES:
                raise ConfigError(
                    f"crowd[{i}]",
                    f"unknown archetype {entry!r}; choose from {sorted(ARCHETYPES)}",
                )
        elif isinstance(entry, Mapping):
            dims = {"completeness", "validity", "confidence", "trustworthiness"}
            if "archetype" not in entry and not dims <= set(entry):
                raise ConfigError(
                    f"crowd[{i}]", "needs an archetype or all four dimensions"
                )
        else:
            raise ConfigError(f"crowd[{i}]", "must be a name or a profile object")

    try:
        protocol = Protocol(doc.get("protocol", "edge"))
    except ValueError:
        raise ConfigError("protocol", f"must be one of {[p.value for p in Protocol]}")

    aggregation = doc.get("aggregation", "edgewise" if protocol is Protocol.EDGE else "scores")
    if aggregation not in AGGREGATIONS:
        raise ConfigError("aggregation", f"must be one of {list(AGGREGATIONS)}")
    if protocol is Protocol.ORDERING and aggregation != "scores":
        raise ConfigError("aggregation", "ordering protocol supports only 'scores'")
    if protocol is Protocol.EDGE and aggregation == "scores":
        raise ConfigError("aggregation", "'scores' needs the ordering protocol")

    criterion = None
    stage_budgets: tuple = ()
    pool_mode = PoolMode.FIXED
    design = doc.get("design")
    if design is not None:
        if not isinstance(design, Mapping):
            raise ConfigError("design", "must be an object")
        for key in design:
            if key not in {"criterion", "stage_budgets", "pool_mode"}:
                raise ConfigError(f"design.{key}", "unknown field")
        try:
            criterion = Criterion(design.get("criterion", "eig"))
        except ValueError:
            raise ConfigError(
                "design.criterion", f"must be one of {[c.value for c in Criterion]}"
            )
        budgets = design.get("stage_budgets")
        if (
            not isinstance(budgets, Sequence)
            or not budgets
            or any(not isinstance(b, int) or isinstance(b, bool) or b < 1 for b in budgets)
        ):
            raise ConfigError(
                "design.stage_budgets", "must be a nonempty list of positive integers"
            )
        stage_budgets = tuple(budgets)
        try:
            pool_mode = PoolMode(design.get("pool_mode", "fixed"))
        except ValueError:
            raise ConfigError(
                "design.pool_mode", f"must be one of {[m.value for m in PoolMode]}"
            )
        wanted = "expert-level" if protocol is Protocol.EDGE else "scores"
        if aggregation != wanted:
            raise ConfigError(
                "aggregation", f"sequential design estimates via {wanted!r}"
            )

    config = ExperimentConfig(
        network=network,
        crowd=tuple(json.dumps(e) if isinstance(e, Mapping) else e for e in crowd),
        protocol=protocol,
        aggregation=aggregation,
        criterion=criterion,
        stage_budgets=stage_budgets,
        pool_mode=pool_mode,
        repeats=_positive_int(doc, "repeats", 1),
        restarts=_positive_int(doc, "restarts", 2),
        replicates=_positive_int(doc, "replicates", 1),
        master_seed=int(doc.get("master_seed", 0)),
        parallelism=_positive_int(doc, "parallelism", 1),
        individual_baseline=bool(doc.get("individual_baseline", False)),
        output_dir=str(doc.get("output_dir", "results")),
    )
    return config


def _set_dotted(doc: dict, dotted: str, raw) -> None:
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except (json.JSONDecodeError, ValueError):
            pass
    parts = dotted.split(".")
    here = doc
    for part in parts[:-1]:
        nxt = here.get(part)
        if nxt is None:
            nxt = here[part] = {}
        elif not isinstance(nxt, dict):
            raise ConfigError(dotted, f"{part} is not an object")
        here = nxt
    here[parts[-1]] = raw


def load_config(
    source: Union[str, Path, Mapping],
    overrides: Optional[Mapping[str, object]] = None,
) -> ExperimentConfig:
    """Read a JSON config, apply dotted-path overrides, and validate."""
    if isinstance(source, (str, Path)):
        try:
            doc = json.loads(Path(source).read_text())
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {source}")
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}")
    else:
        doc = json.loads(json.dumps(dict(source)))
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be an object")
    for dotted, raw in (overrides or {}).items():
        _set_dotted(doc, dotted, raw)
    return config_from_doc(doc)


# ---------------------------------------------------------------------------
# Replicate execution


_METRIC_COLUMNS = [f.name for f in fields(MetricsReport)] + [
    "mean_individual_shd",
    "crowd_beats_individual",
]


def _build_crowd(config: ExperimentConfig, truth: Dag, seed: int) -> list[Expert]:
    entries = [
        json.loads(e) if e.lstrip().startswith("{") else {"archetype": e}
        for e in config.crowd
    ]
    return crowd_from_spec(entries, truth, master_seed=seed)


def _merge_behavior(report: MetricsReport, responses: KnowledgeSet) -> MetricsReport:
    bm = behavior_metrics(responses)
    report.abstention_rate = bm.abstention_rate
    report.cycle_injection_rate = bm.cycle_injection_rate
    report.edge_flip_frequency = bm.edge_flip_frequency
    report.inconsistency_count = bm.inconsistency_count
    return report


def _run_replicate(
    config: ExperimentConfig, truth: Dag, seed: int
) -> tuple[dict, list[StageRecord]]:
    experts = _build_crowd(config, truth, seed)
    records: list[StageRecord] = []

    if config.criterion is not None:
        _, estimate, records = run_sequential(
            experts,
            truth,
            config.stage_budgets,
            config.criterion,
            protocol=config.protocol,
            pool_mode=config.pool_mode,
            seed=seed,
        )
        if config.protocol is Protocol.EDGE:
            report = evaluate(estimate, truth)
        else:
            report = order_metrics(estimate.phi, truth)
        return report.as_dict(), records

    queries = all_pair_queries(truth.nodes)
    responses = elicit(experts, queries, config.protocol, repeats=config.repeats)

    if config.aggregation == "scores":
        # Behavior diagnostics are defined for ternary edge answers only.
        scores = infer_scores(truth.nodes, responses)
        return order_metrics(scores.phi, truth).as_dict(), records

    if config.aggregation == "edgewise":
        _, estimate = infer_edgewise(truth.nodes, responses)
    elif config.aggregation == "expert-level":
        from .aggregation import aggregate_expert_level

        by_expert: dict[str, KnowledgeSet] = {}
        for r in responses:
            by_expert.setdefault(r.expert_id, []).append(r)
        maps = [infer_edgewise(truth.nodes, rs)[1] for _, rs in sorted(by_expert.items())]
        estimate = aggregate_expert_level(maps)
    else:  # query-level
        estimate = query_level_aggregate(
            truth.nodes, responses, restarts=config.restarts, seed=seed
        )

    report = evaluate(estimate, truth, responses=responses)
    row = report.as_dict()

    if config.individual_baseline:
        by_expert = {}
        for r in responses:
            by_expert.setdefault(r.expert_id, []).append(r)
        individual = [
            shd(infer_edgewise(truth.nodes, rs)[1], truth)
            for _, rs in sorted(by_expert.items())
        ]
        row["mean_individual_shd"] = float(np.mean(individual))
        row["crowd_beats_individual"] = int(row["shd"] < row["mean_individual_shd"])
    return row, records


def run_experiment(config: ExperimentConfig) -> dict[str, Path]:
    """Run every replicate and write replicates.csv, summary.json, and (for
    sequential designs) design-trace.jsonl under the configured directory.

    Replicate r uses seed ``master_seed + r``; outputs depend only on the
    config and master seed, so re-runs are byte-identical. Failures surface
    as ExperimentError naming the replicate and originating module.
    """
    truth = load_network(config.network)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    def worker(r: int) -> tuple[dict, list[StageRecord]]:
        seed = config.master_seed + r
        try:
            return _run_replicate(config, truth, seed)
        except Exception as exc:
            module = type(exc).__module__
            if module == "builtins":
                tb = exc.__traceback__
                while tb is not None:
                    name = tb.tb_frame.f_globals.get("__name__", "")
                    if name.startswith(__package__):
                        module = name
                    tb = tb.tb_next
            module = module.rsplit(".", maxsplit=1)[-1]
            raise ExperimentError(
                f"replicate {r}: {module}.{type(exc).__name__}: {exc}"
            ) from exc

    indices = range(config.replicates)
    if config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            results = list(pool.map(worker, indices))
    else:
        results = [worker(r) for r in indices]

    rows = []
    trace_lines = []
    for r, (row, records) in zip(indices, results):
        rows.append({"replicate": r, "seed": config.master_seed + r, **row})
        for rec in records:
            trace_lines.append(
                json.dumps({"replicate": r, **rec.as_dict()}, sort_keys=True)
            )

    present = [c for c in _METRIC_COLUMNS if any(c in row for row in rows)]
    columns = ["replicate", "seed"] + present
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([row.get(c, "") for c in columns])
    csv_path = out / "replicates.csv"
    csv_path.write_text(buf.getvalue())

    summary_metrics = {}
    for c in present:
        values = [row[c] for row in rows if c in row]
        summary_metrics[c] = {
            "mean": float(np.mean(values)),
            "std": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
            "count": len(values),
        }
    summary = {
        "config": config.as_doc(),
        "replicates": config.replicates,
        "metrics": summary_metrics,
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    paths = {"replicates": csv_path, "summary": summary_path}
    if trace_lines:
        trace_path = out / "design-trace.jsonl"
        trace_path.write_text("\n".join(trace_lines) + "\n")
        paths["trace"] = trace_path
    return paths


# ---------------------------------------------------------------------------
# Language-model informant adapter


class LlmMode(str, Enum):
    LIVE = "live"
    MOCK = "mock"


SINGLE_STEP_TEMPLATE = (
    "You are an expert in {background}. Based on your expertise, answer the "
    "following survey. For each pair, please answer the question: "
    "‘{question}’ Output [Rating answers]."
)

VERIFICATION_PROMPT = (
    "Please confirm the correctness of the causal relationships step by step "
    "and check the prior knowledge provided by the survey. "
    "Output [Rating answers]."
)

ORDERING_QUESTION = (
    "How strongly do you believe that Factor A is an upstream causal variable "
    "of Factor B (A → B)?"
)

EDGE_INSTRUCTION = (
    "When the question is presented as A--B, please use 1 to denote a direct "
    "causal influence from A → B, use -1 to denote A ← B, and use 0 "
    "to denote no direct causal influence between A and B."
)


@dataclass(frozen=True)
class LlmExpertConfig:
    """How to reach (or replay) a language-model informant.

    Mock mode replays a recorded transcript file and never opens a
    connection; live mode posts chat requests to ``endpoint`` with the
    credential taken from the CROWDCAUSAL_LLM_API_KEY environment variable.
    ``sampling`` entries (temperature and friends) pass through untouched.
    """

    model: str = "mock-model"
    background: str = "the respiratory illness domain"
    endpoint: Optional[str] = None
    timeout: float = 30.0
    mode: LlmMode = LlmMode.MOCK
    transcript: Optional[str] = None
    verification: bool = True
    expert_id: str = "llm"
    sampling: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode is LlmMode.MOCK and not self.transcript:
            raise ConfigError("transcript", "mock mode needs a transcript file")
        if self.mode is LlmMode.LIVE and not self.endpoint:
            raise ConfigError("endpoint", "live mode needs an endpoint URL")


def build_survey_prompt(
    config: LlmExpertConfig,
    queries: Sequence[Query],
    protocol: Protocol,
    descriptions: Optional[Mapping[str, str]] = None,
) -> str:
    """Instantiate the single-step survey prompt for the given pairs."""
    descriptions = descriptions or {}

    def name(node: str) -> str:
        return descriptions.get(node, node)

    question = ORDERING_QUESTION if protocol is Protocol.ORDERING else EDGE_INSTRUCTION
    lines = [SINGLE_STEP_TEMPLATE.format(background=config.background, question=question)]
    lo, hi = protocol.value_range
    lines.append(f"Rate each pair with an integer from {lo} to {hi}.")
    for k, q in enumerate(queries, start=1):
        if protocol is Protocol.EDGE:
            lines.append(f"{k}. {name(q.u)} -- {name(q.v)}")
        else:
            lines.append(
                f"{k}. How strongly do you believe that {name(q.u)} is an "
                f"upstream causal variable of {name(q.v)}?"
            )
    return "\n".join(lines)


def _json_array_ints(reply: str) -> Optional[list[int]]:
    text = reply.strip()
    if not text.startswith("["):
        match = re.search(r"\[[^\[\]]*\]", reply)
        if match is None:
            return None
        text = match.group(0)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        return None
    if isinstance(doc, list) and all(
        isinstance(v, int) and not isinstance(v, bool) for v in doc
    ):
        return doc
    return None


def parse_ratings(reply: str, n_queries: int, protocol: Protocol) -> list[int]:
    """Extract one integer rating per query from a free-form reply.

    A JSON integer array is taken verbatim; otherwise the k-th integer
    token answers the k-th query. Missing or out-of-range entries become
    abstentions (0) with a warning naming the query index.
    """
    lo, hi = protocol.value_range
    values = _json_array_ints(reply)
    if values is None:
        values = [int(tok) for tok in re.findall(r"-?\d+", reply)]
    ratings = []
    for k in range(n_queries):
        if k >= len(values):
            log.warning("query %d: no integer rating found; recording 0", k)
            ratings.append(0)
        elif not lo <= values[k] <= hi:
            log.warning(
                "query %d: rating %d outside [%d, %d]; recording 0",
                k, values[k], lo, hi,
            )
            ratings.append(0)
        else:
            ratings.append(values[k])
    return ratings


def _load_transcript(config: LlmExpertConfig, n_queries: int) -> list[str]:
    path = Path(config.transcript)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("transcript", f"file not found: {path}")
    if isinstance(doc, Mapping):
        recorded = doc.get("queries")
        replies = doc.get("replies", [])
        if recorded is not None and recorded != n_queries:
            raise TranscriptMismatch(
                f"transcript recorded for {recorded} queries, survey has {n_queries}"
            )
    else:
        replies = doc
    if not isinstance(replies, list) or not all(isinstance(r, str) for r in replies):
        raise TranscriptMismatch("transcript replies must be a list of strings")
    return replies


def _post_chat(
    config: LlmExpertConfig, messages: list[dict], token: str
) -> str:
    payload = {"model": config.model, "messages": messages, **dict(config.sampling)}
    request = urllib.request.Request(
        config.endpoint,
        data=json.dumps(payload).encode(),
        headers={
            "Content-Type": "application/json",
            "Authorization": f"Bearer {token}",
        },
    )
    try:
        with urllib.request.urlopen(request, timeout=config.timeout) as resp:
            doc = json.load(resp)
        return doc["choices"][0]["message"]["content"]
    except (urllib.error.URLError, OSError, TimeoutError) as exc:
        raise EndpointUnreachable(f"{config.endpoint}: {exc}")
    except (KeyError, IndexError, TypeError, json.JSONDecodeError) as exc:
        raise EndpointUnreachable(f"malformed reply from {config.endpoint}: {exc}")


def llm_elicit(
    config: LlmExpertConfig,
    queries: Sequence[Query],
    protocol: Protocol,
    descriptions: Optional[Mapping[str, str]] = None,
) -> KnowledgeSet:
    """Survey a language-model informant over the given pairs.

    Sends the single-step survey prompt, then (unless disabled) the
    verification prompt, keeping the second round's answers. Every emitted
    response is inside the protocol range; parse failures abstain.
    """
    if not queries:
        raise ValueError("queries must be nonempty")
    if descriptions is None:
        descriptions = ASIA_DESCRIPTIONS

    rounds = 2 if config.verification else 1
    if config.mode is LlmMode.MOCK:
        replies = _load_transcript(config, len(queries))
        if len(replies) < rounds:
            raise TranscriptMismatch(
                f"transcript holds {len(replies)} replies; survey needs {rounds}"
            )

        def send(_messages: list[dict], turn: int) -> str:
            return replies[turn]

    else:
        token = os.environ.get(LLM_CREDENTIAL_ENV)
        if not token:
            raise EndpointUnreachable(
                f"live mode needs the {LLM_CREDENTIAL_ENV} environment variable"
            )

        def send(messages: list[dict], _turn: int) -> str:
            return _post_chat(config, messages, token)

    messages = [
        {
            "role": "user",
            "content": build_survey_prompt(config, queries, protocol, descriptions),
        }
    ]
    reply = send(messages, 0)
    ratings = parse_ratings(reply, len(queries), protocol)
    if config.verification:
        messages.append({"role": "assistant", "content": reply})
        messages.append({"role": "user", "content": VERIFICATION_PROMPT})
        reply = send(messages, 1)
        ratings = parse_ratings(reply, len(queries), protocol)

    return [
        Response(q, protocol, value, config.expert_id)
        for q, value in zip(queries, ratings)
    ]
