"""Command-line front end: simulate | aggregate | design | iv-demo |
metrics | serve. Each subcommand reads an optional JSON config file whose
keys default the flags; explicit flags win. Failures print one
machine-parseable JSON line to stderr naming the offending flag."""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .graphs import dag_from_json, dag_to_json, load_network
from .harness import ConfigError, load_config, run_experiment

_UNSET = object()


class CliError(Exception):
    """A user-facing failure; `flag` names the flag or config field."""

    def __init__(self, message: str, flag: Optional[str] = None, code: int = 1):
        super().__init__(message)
        self.flag = flag
        self.code = code


def _fail_line(message: str, flag: Optional[str]) -> str:
    return json.dumps({"error": message, "flag": flag})


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        match = re.search(r"argument ([^\s:]+)", message) or re.search(
            r"(--[\w-]+)", message
        )
        flag = match.group(1) if match else None
        print(_fail_line(message, flag), file=sys.stderr)
        raise SystemExit(2)


def _load_doc(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", "--config", 2)
    except json.JSONDecodeError as exc:
        raise CliError(f"config is not valid JSON: {exc}", "--config", 2)
    if not isinstance(doc, dict):
        raise CliError("config top level must be an object", "--config", 2)
    return doc


def _pick(args_value, doc: dict, key: str, default):
    if args_value is not None:
        return args_value
    return doc.get(key, default)


def _write_or_print(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_simulate(args) -> int:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set needs key=value, got {item!r}", "--set", 2)
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    config = load_config(args.config, overrides)
    paths = run_experiment(config)
    print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))
    return 0


def _cmd_aggregate(args) -> int:
    from .aggregation import aggregate_expert_level, query_level_aggregate
    from .experts import KnowledgeSet, transcript_from_csv
    from .inference import infer_edgewise, infer_scores

    doc = _load_doc(args.config)
    transcript = _pick(args.transcript, doc, "transcript", None)
    if transcript is None:
        raise CliError("a transcript CSV is required", "--transcript", 2)
    network = _pick(args.network, doc, "network", "asia")
    strategy = _pick(args.strategy, doc, "strategy", "edgewise")
    restarts = int(_pick(args.restarts, doc, "restarts", 2))
    seed = int(_pick(args.seed, doc, "seed", 0))
    if strategy not in ("edgewise", "expert-level", "query-level", "scores"):
        raise CliError(f"unknown strategy {strategy!r}", "--strategy", 2)

    truth = load_network(network)
    responses = transcript_from_csv(Path(transcript))
    if strategy == "scores":
        scores = infer_scores(truth.nodes, responses)
        payload = json.dumps(
            {"phi": {n: scores.phi[n] for n in truth.nodes}, "sigma": scores.sigma},
            indent=2,
            sort_keys=True,
        )
        _write_or_print(payload, args.out)
        return 0
    if strategy == "edgewise":
        _, estimate = infer_edgewise(truth.nodes, responses)
    elif strategy == "expert-level":
        by_expert: dict[str, KnowledgeSet] = {}
        for r in responses:
            by_expert.setdefault(r.expert_id, []).append(r)
        maps = [
            infer_edgewise(truth.nodes, rs)[1] for _, rs in sorted(by_expert.items())
        ]
        estimate = aggregate_expert_level(maps)
    else:
        estimate = query_level_aggregate(
            truth.nodes, responses, restarts=restarts, seed=seed
        )
    _write_or_print(dag_to_json(estimate), args.out)
    return 0


def _cmd_design(args) -> int:
    from .design import Criterion, DirichletBelief, GaussianBelief, select_stage
    from .experts import Protocol
    from .graphs import canonical_pairs
    from .inference import SIGMA_PHI

    doc = _load_doc(args.config)
    network = _pick(args.network, doc, "network", "asia")
    criterion = _pick(args.criterion, doc, "criterion", "eig")
    protocol = _pick(args.protocol, doc, "protocol", "edge")
    budget = int(_pick(args.budget, doc, "budget", 1))
    seed = int(_pick(args.seed, doc, "seed", 0))
    try:
        criterion = Criterion(criterion)
    except ValueError:
        raise CliError(f"unknown criterion {criterion!r}", "--criterion", 2)
    try:
        protocol = Protocol(protocol)
    except ValueError:
        raise CliError(f"unknown protocol {protocol!r}", "--protocol", 2)

    truth = load_network(network)
    belief = (
        DirichletBelief(truth.nodes)
        if protocol is Protocol.EDGE
        else GaussianBelief.prior(truth.nodes, SIGMA_PHI)
    )
    if budget < 1 or budget > len(canonical_pairs(truth.nodes)):
        raise CliError(
            f"budget must be in [1, {len(canonical_pairs(truth.nodes))}]",
            "--budget",
            2,
        )
    stage = select_stage(
        truth.nodes,
        canonical_pairs(truth.nodes),
        budget,
        criterion,
        belief=belief,
        rng=np.random.default_rng(seed),
    )
    payload = json.dumps(
        {
            "criterion": criterion.value,
            "pairs": [list(p) for p in stage.pairs()],
            "criterion_values": stage.criterion_values,
        },
        indent=2,
        sort_keys=True,
    )
    _write_or_print(payload, args.out)
    return 0


def _cmd_iv_demo(args) -> int:
    import io

    from .iv import (
        DEFAULT_SCENARIO,
        knowledge_filter,
        scenario_from_json,
        simulate_iv,
        tsls,
    )

    doc = _load_doc(args.config)
    scenario_src = _pick(args.scenario, doc, "scenario", "default")
    n = int(_pick(args.n, doc, "n", 10_000))
    seeds = int(_pick(args.seeds, doc, "seeds", 100))
    if seeds < 1:
        raise CliError("need at least one seed", "--seeds", 2)
    if scenario_src == "default":
        scenario = DEFAULT_SCENARIO
    else:
        try:
            scenario = scenario_from_json(Path(scenario_src))
        except FileNotFoundError:
            raise CliError(f"scenario file not found: {scenario_src}", "--scenario", 2)
    flags = [g == 0.0 for g in scenario.gamma]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "subset", "beta_hat", "f_statistic"])
    for s in range(seeds):
        dataset = simulate_iv(scenario, n, np.random.default_rng(s))
        naive = tsls(dataset)
        writer.writerow(
            [s, "|".join(map(str, naive.instruments)), naive.beta_hat, naive.f_statistic]
        )
        if any(flags) and not all(flags):
            filtered = knowledge_filter(flags, dataset)
            writer.writerow(
                [
                    s,
                    "|".join(map(str, filtered.instruments)),
                    filtered.beta_hat,
                    filtered.f_statistic,
                ]
            )
    _write_or_print(buf.getvalue(), args.out)
    return 0


def _cmd_metrics(args) -> int:
    from .metrics import evaluate

    doc = _load_doc(args.config)
    estimate_path = _pick(args.estimate, doc, "estimate", None)
    truth_src = _pick(args.truth, doc, "truth", None)
    if estimate_path is None:
        raise CliError("an estimate file is required", "--estimate", 2)
    if truth_src is None:
        raise CliError("a truth network is required", "--truth", 2)
    try:
        estimate = dag_from_json(Path(estimate_path).read_text())
    except FileNotFoundError:
        raise CliError(f"estimate file not found: {estimate_path}", "--estimate", 2)
    truth = load_network(truth_src)
    report = evaluate(estimate, truth)
    _write_or_print(json.dumps(report.as_dict(), indent=2, sort_keys=True), args.out)
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    doc = _load_doc(args.config)
    host = _pick(args.host, doc, "host", "127.0.0.1")
    port = int(_pick(args.port, doc, "port", 8000))
    log_dir = _pick(args.log_dir, doc, "log_dir", None)
    token = _pick(args.token, doc, "token", os.environ.get("CROWDCAUSAL_SERVICE_TOKEN"))
    app = create_app(log_dir=log_dir, auth_token=token)
    uvicorn.run(app, host=host, port=port)
    return 0


# ---------------------------------------------------------------------------
# Parser assembly


def build_parser() -> _Parser:
    parser = _Parser(prog="crowdcausal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a seeded experiment config")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field by dotted path")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--out", help="override output_dir")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("aggregate", help="aggregate a response transcript")
    p.add_argument("--config")
    p.add_argument("--transcript", help="responses CSV")
    p.add_argument("--network", help="fixture name or network JSON path")
    p.add_argument("--strategy",
                   choices=["edgewise", "expert-level", "query-level", "scores"])
    p.add_argument("--restarts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the estimate here instead of stdout")
    p.set_defaults(fn=_cmd_aggregate)

    p = sub.add_parser("design", help="select a query stage from the prior")
    p.add_argument("--config")
    p.add_argument("--network")
    p.add_argument("--criterion", choices=["eopt", "eig", "random"])
    p.add_argument("--protocol", choices=["edge", "ordering"])
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_design)

    p = sub.add_parser("iv-demo", help="instrumental-variable bias demo")
    p.add_argument("--config")
    p.add_argument("--scenario", help="'default' or a scenario JSON path")
    p.add_argument("--n", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--out", help="write the CSV here instead of stdout")
    p.set_defaults(fn=_cmd_iv_demo)

    p = sub.add_parser("metrics", help="score an estimate against a truth")
    p.add_argument("--config")
    p.add_argument("--estimate", help="estimate network JSON path")
    p.add_argument("--truth", help="fixture name or network JSON path")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_metrics)

    p = sub.add_parser("serve", help="run the elicitation HTTP service")
    p.add_argument("--config")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--log-dir", dest="log_dir")
    p.add_argument("--token")
    p.set_defaults(fn=_cmd_serve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(_fail_line(str(exc), exc.flag), file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        flag = "--config" if exc.path == "config" else exc.path
        print(_fail_line(str(exc), flag), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single-line error contract
        print(_fail_line(f"{type(exc).__name__}: {exc}", None), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
