import csv
import hashlib
import json
import logging

import pytest

from crowdcausal.experts import Protocol, Query, all_pair_queries
from crowdcausal.graphs import ASIA_NODES
from crowdcausal.harness import (
    ConfigError,
    EndpointUnreachable,
    ExperimentConfig,
    ExperimentError,
    LlmExpertConfig,
    LlmMode,
    TranscriptMismatch,
    build_survey_prompt,
    config_from_doc,
    llm_elicit,
    load_config,
    parse_ratings,
    run_experiment,
)


def sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestConfigValidation:
    def test_defaults(self):
        config = config_from_doc({})
        assert config.network == "asia"
        assert config.crowd == ("Omniscient",)
        assert config.protocol is Protocol.EDGE
        assert config.aggregation == "edgewise"
        assert config.replicates == 1

    @pytest.mark.parametrize(
        "doc, path",
        [
            ({"replicates": 0}, "replicates"),
            ({"replicates": True}, "replicates"),
            ({"repeats": -2}, "repeats"),
            ({"parallelism": "many"}, "parallelism"),
            ({"crowd": []}, "crowd"),
            ({"crowd": ["Omniscient", "Sage"]}, "crowd[1]"),
            ({"crowd": [3]}, "crowd[0]"),
            ({"crowd": [{"completeness": 1.0}]}, "crowd[0]"),
            ({"protocol": "votes"}, "protocol"),
            ({"aggregation": "majority"}, "aggregation"),
            ({"protocol": "ordering", "aggregation": "edgewise"}, "aggregation"),
            ({"protocol": "edge", "aggregation": "scores"}, "aggregation"),
            ({"network": "no/such/file.json"}, "network"),
            ({"budget": 4}, "budget"),
            ({"design": {"criterion": "eig"}}, "design.stage_budgets"),
            ({"design": {"criterion": "best", "stage_budgets": [4]}}, "design.criterion"),
            (
                {"design": {"stage_budgets": [4, 0]}},
                "design.stage_budgets",
            ),
            (
                {"design": {"stage_budgets": [4], "pool_mode": "shuffle"}},
                "design.pool_mode",
            ),
            ({"design": {"stage_budgets": [4], "extra": 1}}, "design.extra"),
            ({"design": {"stage_budgets": [4]}}, "aggregation"),
        ],
    )
    def test_bad_fields_name_their_dotted_path(self, doc, path):
        with pytest.raises(ConfigError) as err:
            config_from_doc(doc)
        assert err.value.path == path

    def test_design_mode_requires_the_matching_aggregation(self):
        config = config_from_doc(
            {"aggregation": "expert-level", "design": {"stage_budgets": [4, 4]}}
        )
        assert config.criterion is not None and config.stage_budgets == (4, 4)

    def test_profile_crowd_entries_are_preserved(self):
        entry = {
            "completeness": 0.5,
            "validity": 0.9,
            "confidence": 0.8,
            "trustworthiness": 1.0,
        }
        config = config_from_doc({"crowd": ["Imperfect", entry]})
        assert config.crowd[0] == "Imperfect"
        assert json.loads(config.crowd[1]) == entry

    def test_as_doc_round_trips(self):
        doc = {
            "crowd": ["Imperfect", "Uncertain"],
            "aggregation": "expert-level",
            "design": {"criterion": "eopt", "stage_budgets": [4, 4], "pool_mode": "remove"},
            "replicates": 3,
            "master_seed": 7,
        }
        config = config_from_doc(doc)
        assert config_from_doc(config.as_doc()) == config

    def test_load_config_applies_dotted_overrides(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"crowd": ["Imperfect"]}))
        config = load_config(
            path,
            {"replicates": "5", "design.stage_budgets": "[3, 3]",
             "aggregation": "expert-level"},
        )
        assert config.replicates == 5
        assert config.stage_budgets == (3, 3)

    def test_load_config_failure_paths(self, tmp_path):
        with pytest.raises(ConfigError) as err:
            load_config(tmp_path / "missing.json")
        assert err.value.path == "config"
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(bad)
        listy = tmp_path / "list.json"
        listy.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_config(listy)


class TestRunExperiment:
    def test_omniscient_replicates_score_zero_shd(self, tmp_path):
        config = load_config(
            {"crowd": ["Omniscient"], "replicates": 3, "output_dir": str(tmp_path / "out")}
        )
        paths = run_experiment(config)
        summary = json.loads(paths["summary"].read_text())
        assert summary["metrics"]["shd"]["mean"] == 0.0
        assert summary["metrics"]["edge_precision"]["mean"] == 1.0
        assert summary["replicates"] == 3
        with paths["replicates"].open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert [row["replicate"] for row in rows] == ["0", "1", "2"]

    def test_reruns_are_byte_identical(self, tmp_path):
        doc = {
            "crowd": ["Imperfect", "Uncertain"],
            "replicates": 2,
            "master_seed": 11,
            "individual_baseline": True,
            "output_dir": str(tmp_path / "out"),
        }
        first = run_experiment(load_config(doc))
        snapshot = {k: sha(p) for k, p in first.items()}
        second = run_experiment(load_config(doc))
        assert {k: sha(p) for k, p in second.items()} == snapshot
        # The replicate table does not depend on where it is written.
        moved = run_experiment(load_config(doc | {"output_dir": str(tmp_path / "b")}))
        assert sha(moved["replicates"]) == snapshot["replicates"]

    def test_design_runs_emit_a_stage_trace(self, tmp_path):
        config = load_config(
            {
                "crowd": ["Omniscient"],
                "aggregation": "expert-level",
                "design": {"criterion": "eig", "stage_budgets": [6, 6]},
                "output_dir": str(tmp_path / "out"),
            }
        )
        paths = run_experiment(config)
        lines = [json.loads(l) for l in paths["trace"].read_text().splitlines()]
        assert len(lines) == 2
        assert lines[0]["t"] == 1 and lines[0]["K_t"] == 6
        assert lines[0]["replicate"] == 0
        assert len(lines[0]["pairs"]) == 6

    def test_parallel_run_matches_serial(self, tmp_path):
        doc = {"crowd": ["Imperfect"] * 3, "replicates": 4, "master_seed": 2}
        serial = run_experiment(
            load_config(doc | {"parallelism": 1, "output_dir": str(tmp_path / "s")})
        )
        parallel = run_experiment(
            load_config(doc | {"parallelism": 3, "output_dir": str(tmp_path / "p")})
        )
        assert sha(serial["replicates"]) == sha(parallel["replicates"])

    def test_failures_name_the_replicate_and_module(self, tmp_path, monkeypatch):
        config = load_config(
            {"crowd": ["Omniscient"], "replicates": 2, "output_dir": str(tmp_path / "out")}
        )

        def explode(*_args, **_kwargs):
            raise ValueError("synthetic failure")

        monkeypatch.setattr("crowdcausal.harness._build_crowd", explode)
        with pytest.raises(ExperimentError) as err:
            run_experiment(config)
        assert str(err.value) == "replicate 0: harness.ValueError: synthetic failure"


class TestSurveyPrompt:
    def config(self, **kw):
        kw.setdefault("transcript", "unused.json")
        return LlmExpertConfig(**kw)

    def test_single_step_template_is_embedded(self):
        queries = all_pair_queries(ASIA_NODES)[:3]
        prompt = build_survey_prompt(self.config(), queries, Protocol.ORDERING)
        assert prompt.startswith("You are an expert in the respiratory illness domain.")
        assert "Based on your expertise, answer the following survey." in prompt
        assert (
            "How strongly do you believe that Factor A is an upstream causal "
            "variable of Factor B (A → B)?" in prompt
        )
        assert "Output [Rating answers]." in prompt
        assert "Rate each pair with an integer from -10 to 10." in prompt

    def test_edge_protocol_embeds_the_ternary_instruction(self):
        queries = [Query("Smoking", "LungCancer")]
        prompt = build_survey_prompt(self.config(), queries, Protocol.EDGE)
        assert "use 1 to denote a direct causal influence from A → B" in prompt
        assert "use -1 to denote A ← B" in prompt
        assert "use 0 to denote no direct causal influence" in prompt
        assert "Rate each pair with an integer from -1 to 1." in prompt

    def test_descriptions_replace_raw_node_names(self):
        queries = [Query("Smoking", "LungCancer")]
        prompt = build_survey_prompt(
            self.config(),
            queries,
            Protocol.EDGE,
            descriptions={"Smoking": "smoking habit", "LungCancer": "lung cancer"},
        )
        assert "1. lung cancer -- smoking habit" in prompt  # pairs canonicalize

    def test_queries_are_numbered_in_order(self):
        queries = all_pair_queries(("a", "b", "c"))
        prompt = build_survey_prompt(self.config(), queries, Protocol.EDGE)
        lines = prompt.splitlines()
        assert lines[-3].startswith("1. ") and lines[-1].startswith("3. ")


class TestParseRatings:
    def test_json_array_fast_path(self):
        assert parse_ratings("[1, 0, -1]", 3, Protocol.EDGE) == [1, 0, -1]
        assert parse_ratings("  [5, -5]  ", 2, Protocol.ORDERING) == [5, -5]

    def test_json_array_embedded_in_prose(self):
        reply = "After checking step by step, my answers are [1, -1, 0]."
        assert parse_ratings(reply, 3, Protocol.EDGE) == [1, -1, 0]

    def test_kth_integer_token_fallback(self):
        reply = "1. 7\n2. -3\n3. 0"
        # Token stream is 1,7,2,-3,3,0: positional, not labeled.
        assert parse_ratings(reply, 6, Protocol.ORDERING) == [1, 7, 2, -3, 3, 0]

    def test_missing_entries_abstain_with_a_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert parse_ratings("[1]", 3, Protocol.EDGE) == [1, 0, 0]
        assert "no integer rating found" in caplog.text

    def test_out_of_range_entries_abstain(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert parse_ratings("[2, 1, -9]", 3, Protocol.EDGE) == [0, 1, 0]
        assert "outside [-1, 1]" in caplog.text

    def test_outputs_always_in_protocol_range(self):
        replies = ["[100, -100]", "nothing here", "42 and -42", "[true, false]"]
        for reply in replies:
            for protocol in (Protocol.EDGE, Protocol.ORDERING):
                lo, hi = protocol.value_range
                for v in parse_ratings(reply, 4, protocol):
                    assert lo <= v <= hi


class TestLlmElicitation:
    def write_transcript(self, tmp_path, replies, queries=None):
        path = tmp_path / "transcript.json"
        doc = {"replies": replies}
        if queries is not None:
            doc["queries"] = queries
        path.write_text(json.dumps(doc))
        return str(path)

    def test_mock_replay_keeps_the_verification_round(self, tmp_path):
        transcript = self.write_transcript(tmp_path, ["[1, 1, 1]", "[1, 0, -1]"], queries=3)
        config = LlmExpertConfig(transcript=transcript)
        queries = all_pair_queries(("a", "b", "c"))
        responses = llm_elicit(config, queries, Protocol.EDGE, descriptions={})
        assert [r.value for r in responses] == [1, 0, -1]
        assert all(r.expert_id == "llm" for r in responses)
        assert [r.query for r in responses] == queries

    def test_verification_disabled_keeps_the_first_round(self, tmp_path):
        transcript = self.write_transcript(tmp_path, ["[1, 1, 1]"])
        config = LlmExpertConfig(transcript=transcript, verification=False)
        responses = llm_elicit(config, all_pair_queries(("a", "b", "c")), Protocol.EDGE)
        assert [r.value for r in responses] == [1, 1, 1]

    def test_query_count_mismatch_is_rejected(self, tmp_path):
        transcript = self.write_transcript(tmp_path, ["[1]", "[1]"], queries=5)
        config = LlmExpertConfig(transcript=transcript)
        with pytest.raises(TranscriptMismatch):
            llm_elicit(config, all_pair_queries(("a", "b", "c")), Protocol.EDGE)

    def test_too_few_replies_is_rejected(self, tmp_path):
        transcript = self.write_transcript(tmp_path, ["[1, 1, 1]"])
        config = LlmExpertConfig(transcript=transcript)
        with pytest.raises(TranscriptMismatch):
            llm_elicit(config, all_pair_queries(("a", "b", "c")), Protocol.EDGE)

    def test_malformed_transcripts_are_rejected(self, tmp_path):
        path = tmp_path / "transcript.json"
        path.write_text(json.dumps({"replies": [1, 2]}))
        config = LlmExpertConfig(transcript=str(path))
        with pytest.raises(TranscriptMismatch):
            llm_elicit(config, [Query("a", "b")], Protocol.EDGE)

    def test_config_validation(self):
        with pytest.raises(ConfigError) as err:
            LlmExpertConfig(mode=LlmMode.MOCK, transcript=None)
        assert err.value.path == "transcript"
        with pytest.raises(ConfigError) as err:
            LlmExpertConfig(mode=LlmMode.LIVE, endpoint=None)
        assert err.value.path == "endpoint"

    def test_live_mode_without_a_credential_fails_fast(self, monkeypatch):
        monkeypatch.delenv("CROWDCAUSAL_LLM_API_KEY", raising=False)
        config = LlmExpertConfig(mode=LlmMode.LIVE, endpoint="http://localhost:1/v1/chat")
        with pytest.raises(EndpointUnreachable):
            llm_elicit(config, [Query("a", "b")], Protocol.EDGE)

    def test_empty_query_list_rejected(self, tmp_path):
        transcript = self.write_transcript(tmp_path, ["[1]", "[1]"])
        config = LlmExpertConfig(transcript=transcript)
        with pytest.raises(ValueError):
            llm_elicit(config, [], Protocol.EDGE)
