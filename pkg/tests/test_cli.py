import csv
import io
import json
import subprocess
import sys

import pytest

from crowdcausal.cli import main
from crowdcausal.experts import Protocol, all_pair_queries, elicit, make_crowd, transcript_to_csv
from crowdcausal.graphs import asia_fixture, dag_from_json, dag_to_json, shd

TRUTH = asia_fixture()


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def stderr_doc(err: str) -> dict:
    lines = [line for line in err.splitlines() if line.strip()]
    assert len(lines) == 1, f"expected one stderr line, got {lines!r}"
    return json.loads(lines[0])


@pytest.fixture()
def transcript_csv(tmp_path):
    crowd = make_crowd(["Omniscient", "Omniscient", "Imperfect"], TRUTH, master_seed=0)
    responses = elicit(crowd, all_pair_queries(TRUTH.nodes), Protocol.EDGE)
    path = tmp_path / "transcript.csv"
    transcript_to_csv(responses, path)
    return path


class TestFailureContract:
    def test_usage_errors_exit_2_with_a_json_line(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["simulate"])  # --config is required
        assert exc.value.code == 2
        doc = stderr_doc(capsys.readouterr().err)
        assert doc["flag"] == "--config"
        assert "required" in doc["error"]

    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
        assert "error" in stderr_doc(capsys.readouterr().err)

    def test_missing_config_file_exits_2(self, capsys):
        code, out, err = run_cli(capsys, "simulate", "--config", "no/such.json")
        assert code == 2
        doc = stderr_doc(err)
        assert doc["flag"] == "--config" and "not found" in doc["error"]

    def test_config_validation_errors_name_the_field(self, capsys, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"crowd": ["Sage"]}))
        code, out, err = run_cli(capsys, "simulate", "--config", str(path))
        assert code == 2
        assert stderr_doc(err)["flag"] == "crowd[0]"

    def test_runtime_errors_exit_1(self, capsys, tmp_path):
        estimate = tmp_path / "estimate.json"
        estimate.write_text("{malformed")
        code, out, err = run_cli(
            capsys, "metrics", "--estimate", str(estimate), "--truth", "asia"
        )
        assert code == 1
        assert stderr_doc(err)["error"]

    def test_bad_set_syntax_exits_2(self, capsys, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{}")
        code, _, err = run_cli(
            capsys, "simulate", "--config", str(path), "--set", "replicates"
        )
        assert code == 2
        assert stderr_doc(err)["flag"] == "--set"


class TestSimulate:
    def test_omniscient_run_prints_the_artifact_paths(self, capsys, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"crowd": ["Omniscient"], "replicates": 2}))
        code, out, err = run_cli(
            capsys,
            "simulate", "--config", str(config),
            "--out", str(tmp_path / "results"),
            "--seed", "3",
        )
        assert code == 0 and err == ""
        paths = json.loads(out)
        assert set(paths) == {"replicates", "summary"}
        summary = json.loads((tmp_path / "results" / "summary.json").read_text())
        assert summary["config"]["master_seed"] == 3
        assert summary["metrics"]["shd"]["mean"] == 0.0

    def test_set_overrides_reach_the_config(self, capsys, tmp_path):
        config = tmp_path / "config.json"
        config.write_text("{}")
        code, out, _ = run_cli(
            capsys,
            "simulate", "--config", str(config),
            "--set", "replicates=3",
            "--set", 'crowd=["Imperfect"]',
            "--out", str(tmp_path / "results"),
        )
        assert code == 0
        summary = json.loads((tmp_path / "results" / "summary.json").read_text())
        assert summary["replicates"] == 3
        assert summary["config"]["crowd"] == ["Imperfect"]


class TestAggregate:
    def test_edgewise_estimate_round_trips(self, capsys, transcript_csv):
        code, out, err = run_cli(
            capsys, "aggregate", "--transcript", str(transcript_csv)
        )
        assert code == 0
        estimate = dag_from_json(out)
        assert estimate.nodes == TRUTH.nodes
        # Two truthful voices out of three keep every true edge decisive.
        assert shd(estimate, TRUTH) <= 2

    def test_expert_level_strategy(self, capsys, transcript_csv, tmp_path):
        out_path = tmp_path / "estimate.json"
        code, _, _ = run_cli(
            capsys,
            "aggregate", "--transcript", str(transcript_csv),
            "--strategy", "expert-level",
            "--out", str(out_path),
        )
        assert code == 0
        estimate = dag_from_json(out_path.read_text())
        assert shd(estimate, TRUTH) == 0  # omniscient majority wins every vote

    def test_scores_strategy_needs_ordering_answers(self, capsys, tmp_path):
        crowd = make_crowd(["Omniscient"], TRUTH, master_seed=0)
        responses = elicit(crowd, all_pair_queries(TRUTH.nodes), Protocol.ORDERING)
        path = tmp_path / "transcript.csv"
        transcript_to_csv(responses, path)
        code, out, _ = run_cli(
            capsys, "aggregate", "--transcript", str(path), "--strategy", "scores"
        )
        assert code == 0
        doc = json.loads(out)
        assert set(doc) == {"phi", "sigma"}
        assert set(doc["phi"]) == set(TRUTH.nodes)

    def test_missing_transcript_flag_exits_2(self, capsys):
        code, _, err = run_cli(capsys, "aggregate")
        assert code == 2
        assert stderr_doc(err)["flag"] == "--transcript"

    def test_unknown_strategy_is_a_usage_error(self, capsys, transcript_csv):
        with pytest.raises(SystemExit) as exc:
            main(["aggregate", "--transcript", str(transcript_csv),
                  "--strategy", "consensus"])
        assert exc.value.code == 2
        assert stderr_doc(capsys.readouterr().err)["flag"] == "--strategy"


class TestDesign:
    def test_eig_stage_lists_pairs_and_values(self, capsys):
        code, out, err = run_cli(capsys, "design", "--budget", "4")
        assert code == 0
        doc = json.loads(out)
        assert doc["criterion"] == "eig"
        assert len(doc["pairs"]) == 4 and len(doc["criterion_values"]) == 4
        assert doc["pairs"][0] == ["Bronchitis", "Dyspnea"]

    def test_budget_bounds_are_checked(self, capsys):
        code, _, err = run_cli(capsys, "design", "--budget", "29")
        assert code == 2
        assert stderr_doc(err)["flag"] == "--budget"

    def test_random_design_is_seeded(self, capsys):
        code_a, out_a, _ = run_cli(
            capsys, "design", "--criterion", "random", "--budget", "5", "--seed", "7"
        )
        code_b, out_b, _ = run_cli(
            capsys, "design", "--criterion", "random", "--budget", "5", "--seed", "7"
        )
        assert code_a == code_b == 0 and out_a == out_b


class TestIvDemo:
    def test_default_scenario_emits_paired_rows(self, capsys):
        code, out, err = run_cli(capsys, "iv-demo", "--n", "500", "--seeds", "3")
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out)))
        assert len(rows) == 6  # naive + filtered per seed
        assert rows[0]["subset"] == "0|1|2|3|4"
        assert rows[1]["subset"] == "0|1|2|3"
        assert {row["seed"] for row in rows} == {"0", "1", "2"}

    def test_scenario_file_is_loaded(self, capsys, tmp_path):
        from crowdcausal.iv import DEFAULT_SCENARIO, scenario_to_json

        path = tmp_path / "scenario.json"
        path.write_text(scenario_to_json(DEFAULT_SCENARIO))
        code, out, _ = run_cli(
            capsys, "iv-demo", "--scenario", str(path), "--n", "200", "--seeds", "1"
        )
        assert code == 0 and len(out.splitlines()) == 3

    def test_missing_scenario_file_exits_2(self, capsys):
        code, _, err = run_cli(capsys, "iv-demo", "--scenario", "no/such.json")
        assert code == 2
        assert stderr_doc(err)["flag"] == "--scenario"


class TestMetrics:
    def test_scores_an_estimate_against_the_fixture(self, capsys, tmp_path):
        estimate = tmp_path / "estimate.json"
        estimate.write_text(dag_to_json(TRUTH))
        code, out, err = run_cli(
            capsys, "metrics", "--estimate", str(estimate), "--truth", "asia"
        )
        assert code == 0
        doc = json.loads(out)
        assert doc["shd"] == 0 and doc["edge_precision"] == 1.0

    def test_missing_flags_exit_2(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "metrics", "--truth", "asia")
        assert code == 2 and stderr_doc(err)["flag"] == "--estimate"
        estimate = tmp_path / "estimate.json"
        estimate.write_text(dag_to_json(TRUTH))
        code, _, err = run_cli(capsys, "metrics", "--estimate", str(estimate))
        assert code == 2 and stderr_doc(err)["flag"] == "--truth"


class TestConsoleEntryPoint:
    def test_installed_script_runs(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"crowd": ["Omniscient"]}))
        proc = subprocess.run(
            [
                "crowdcausal", "simulate",
                "--config", str(config),
                "--out", str(tmp_path / "results"),
            ],
            capture_output=True,
            text=True,
            timeout=120,
        )
        assert proc.returncode == 0, proc.stderr
        assert json.loads(proc.stdout)["summary"].endswith("summary.json")

    def test_python_dash_m_also_works(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "crowdcausal", "design", "--budget", "2"],
            capture_output=True,
            text=True,
            timeout=120,
        )
        assert proc.returncode == 0, proc.stderr
        assert len(json.loads(proc.stdout)["pairs"]) == 2
