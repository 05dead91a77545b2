"""Evaluation harness: mode isolation, mean rows, report rendering, persistence."""

from __future__ import annotations

import json

import pytest

from conftest import KEYWORD_POLICY, make_mock_gateway, planted_split
from policyforge import dataset, evaluator, forge, gateway, metrics, prompts

VERDICT_MARKER = "Answer using only one word: True or False"

POLICY_SPEC = evaluator.EvalSpec(
    mode="with_policy", policy_id="p0001", subsets=("train",)
)
VANILLA_SPEC = evaluator.EvalSpec(mode="vanilla", subsets=("train",))


def has_keyword(record: dataset.FounderRecord) -> bool:
    return "patented" in (record.linkedin_profile + " " + record.cb_profile)


def two_subset_split() -> dataset.DatasetSplit:
    return planted_split(
        pos=30,
        neg=30,
        train_pos=10,
        train_neg=10,
        eval_subsets=(("a", 10, 10), ("b", 10, 10)),
    )


class TestEvalSpec:
    @pytest.mark.parametrize(
        "kwargs, match",
        [
            ({"mode": "zero_shot"}, "mode"),
            ({"mode": "with_policy", "policy_id": None}, "policy_id"),
            ({"mode": "vanilla", "subsets": ()}, "subset"),
            ({"mode": "vanilla", "subsets": ("a", "a")}, "unique"),
            ({"mode": "vanilla", "beta": 0.0}, "beta"),
            ({"mode": "vanilla", "max_in_flight": 0}, "max_in_flight"),
            ({"mode": "vanilla", "parse_failure_mode": "retry"}, "parse_failure_mode"),
        ],
    )
    def test_validation(self, kwargs, match):
        with pytest.raises(evaluator.EvalError, match=match):
            evaluator.EvalSpec(**kwargs)

    def test_defaults(self):
        spec = evaluator.EvalSpec(mode="with_policy", policy_id="p0000")
        assert spec.subsets == ("std",)
        assert spec.beta == 0.5
        assert spec.parse_failure_mode == "count_as_false"


class TestEvaluate:
    def test_policy_mode_requires_policy_object(self, mock_gateway, small_split):
        with pytest.raises(evaluator.EvalError, match="not supplied"):
            evaluator.evaluate(POLICY_SPEC, small_split, mock_gateway)

    def test_vanilla_mode_rejects_policy(self, mock_gateway, small_split):
        with pytest.raises(evaluator.EvalError, match="does not accept"):
            evaluator.evaluate(
                VANILLA_SPEC, small_split, mock_gateway, policy=KEYWORD_POLICY
            )

    def test_perfect_signal_scores_perfectly(self, mock_gateway):
        split = planted_split(pos=8, neg=8, correlation=1.0)
        result = evaluator.evaluate(
            POLICY_SPEC, split, mock_gateway, policy=KEYWORD_POLICY
        )
        report = result.per_subset["train"]
        assert report.accuracy == 1.0
        assert report.precision == 1.0
        assert report.recall == 1.0
        assert report.f_beta == 1.0
        assert result.verdicts["train"] == {r.record_id: True for r in split.train if r.success} | {
            r.record_id: False for r in split.train if not r.success
        }

    def test_verdicts_match_text_tally(self, mock_gateway, small_split):
        result = evaluator.evaluate(
            POLICY_SPEC, small_split, mock_gateway, policy=KEYWORD_POLICY
        )
        assert result.verdicts["train"] == {
            r.record_id: has_keyword(r) for r in small_split.train
        }
        flags = [(r.success, has_keyword(r)) for r in small_split.train]
        tp = sum(1 for s, k in flags if s and k)
        fp = sum(1 for s, k in flags if not s and k)
        assert result.per_subset["train"].precision == tp / (tp + fp)

    def test_vanilla_all_false_scores_negative_fraction(self, small_split):
        gw = make_mock_gateway(gateway.MockScript(vanilla_verdict="False"))
        result = evaluator.evaluate(VANILLA_SPEC, small_split, gw)
        report = result.per_subset["train"]
        n_neg = sum(1 for r in small_split.train if not r.success)
        assert report.accuracy == n_neg / len(small_split.train)
        assert report.precision == 0.0
        assert report.recall == 0.0

    def test_vanilla_all_true_scores_base_rate(self, small_split):
        gw = make_mock_gateway(gateway.MockScript(vanilla_verdict="True"))
        result = evaluator.evaluate(VANILLA_SPEC, small_split, gw)
        report = result.per_subset["train"]
        n_pos = sum(1 for r in small_split.train if r.success)
        assert report.precision == n_pos / len(small_split.train)
        assert report.recall == 1.0

    def test_vanilla_prompts_never_mention_a_policy(self, mock_gateway, small_split):
        result = evaluator.evaluate(VANILLA_SPEC, small_split, mock_gateway)
        rows = result.transcripts["train"]
        assert len(rows) == len(small_split.train)
        for row in rows:
            assert "policy" not in row["prompt"].lower()

    def test_policy_prompts_embed_the_policy(self, mock_gateway, small_split):
        result = evaluator.evaluate(
            POLICY_SPEC, small_split, mock_gateway, policy=KEYWORD_POLICY
        )
        for row in result.transcripts["train"]:
            assert KEYWORD_POLICY.raw in row["prompt"]

    def test_accepts_policy_wrapper(self, mock_gateway, small_split):
        wrapped = forge.Policy(
            policy_id="p0001",
            body=KEYWORD_POLICY,
            lineage=forge.Lineage(method=forge.METHOD_INITIAL),
        )
        direct = evaluator.evaluate(
            POLICY_SPEC, small_split, mock_gateway, policy=KEYWORD_POLICY
        )
        via_wrapper = evaluator.evaluate(
            POLICY_SPEC, small_split, mock_gateway, policy=wrapped
        )
        assert via_wrapper.per_subset["train"] == direct.per_subset["train"]

    def test_subset_order_does_not_change_metrics(self, mock_gateway):
        records = planted_split(pos=10, neg=10).train
        split = dataset.DatasetSplit(
            train=(),
            eval_subsets={"fwd": tuple(records), "rev": tuple(reversed(records))},
        )
        spec = evaluator.EvalSpec(
            mode="with_policy", policy_id="p0001", subsets=("fwd", "rev")
        )
        result = evaluator.evaluate(spec, split, mock_gateway, policy=KEYWORD_POLICY)
        assert result.per_subset["fwd"] == result.per_subset["rev"]

    def test_aggregate_row_is_columnwise_mean(self, mock_gateway):
        split = two_subset_split()
        spec = evaluator.EvalSpec(
            mode="with_policy", policy_id="p0001", subsets=("a", "b")
        )
        result = evaluator.evaluate(spec, split, mock_gateway, policy=KEYWORD_POLICY)
        expected = metrics.aggregate(
            [result.per_subset["a"], result.per_subset["b"]]
        )
        assert result.aggregate == expected
        assert result.aggregate.precision == (
            result.per_subset["a"].precision + result.per_subset["b"].precision
        ) / 2

    def test_unknown_subset_name(self, mock_gateway, small_split):
        spec = evaluator.EvalSpec(
            mode="with_policy", policy_id="p0001", subsets=("holdout",)
        )
        with pytest.raises(dataset.SplitError, match="holdout"):
            evaluator.evaluate(spec, small_split, mock_gateway, policy=KEYWORD_POLICY)

    def test_empty_subset_rejected(self, mock_gateway):
        split = dataset.DatasetSplit(train=(), eval_subsets={"hollow": ()})
        spec = evaluator.EvalSpec(
            mode="with_policy", policy_id="p0001", subsets=("hollow",)
        )
        with pytest.raises(evaluator.EvalError, match="empty"):
            evaluator.evaluate(spec, split, mock_gateway, policy=KEYWORD_POLICY)

    def test_total_backend_failure_reraises(self, small_split):
        script = gateway.MockScript(
            failures=(gateway.MockFailure(match=VERDICT_MARKER, mode="permanent"),)
        )
        gw = make_mock_gateway(script)
        with pytest.raises(gateway.GatewayError):
            evaluator.evaluate(POLICY_SPEC, small_split, gw, policy=KEYWORD_POLICY)

    def test_parse_failures_follow_configured_mode(self):
        split = planted_split(pos=4, neg=4, correlation=1.0)
        target = split.train[0]
        marker = target.linkedin_profile.split(".")[0]
        script = gateway.MockScript(
            failures=(gateway.MockFailure(match=marker, mode="unparseable"),)
        )
        gw = make_mock_gateway(script)

        counted = evaluator.evaluate(POLICY_SPEC, split, gw, policy=KEYWORD_POLICY)
        assert counted.failures["train"] == [target.record_id]
        assert counted.verdicts["train"][target.record_id] is False
        assert counted.per_subset["train"].n_scored == len(split.train)

        spec = evaluator.EvalSpec(
            mode="with_policy",
            policy_id="p0001",
            subsets=("train",),
            parse_failure_mode="exclude",
        )
        excluded = evaluator.evaluate(spec, split, gw, policy=KEYWORD_POLICY)
        assert target.record_id not in excluded.verdicts["train"]
        assert excluded.per_subset["train"].n_scored == len(split.train) - 1

    def test_default_eval_ids(self, mock_gateway, small_split):
        with_policy = evaluator.evaluate(
            POLICY_SPEC, small_split, mock_gateway, policy=KEYWORD_POLICY
        )
        assert with_policy.eval_id.startswith("eval-p0001-")
        vanilla = evaluator.evaluate(VANILLA_SPEC, small_split, mock_gateway)
        assert vanilla.eval_id.startswith("eval-vanilla-")

    def test_fingerprint_names_backend_and_model(self, mock_gateway, small_split):
        result = evaluator.evaluate(
            POLICY_SPEC, small_split, mock_gateway, policy=KEYWORD_POLICY,
            model_id="m-test",
        )
        assert result.fingerprint["model_id"] == "m-test"
        assert result.fingerprint["backend"]["kind"] == "mock"


class TestStabilitySuite:
    def test_needs_two_subsets(self, mock_gateway, small_split):
        policy = forge.Policy(
            policy_id="p0001",
            body=KEYWORD_POLICY,
            lineage=forge.Lineage(method=forge.METHOD_INITIAL),
        )
        with pytest.raises(evaluator.EvalError, match="two subsets"):
            evaluator.stability_suite(policy, ["a"], small_split, mock_gateway)

    def test_covers_all_named_subsets(self, mock_gateway):
        split = two_subset_split()
        policy = forge.Policy(
            policy_id="p0007",
            body=KEYWORD_POLICY,
            lineage=forge.Lineage(method=forge.METHOD_INITIAL),
        )
        result = evaluator.stability_suite(policy, ["a", "b"], split, mock_gateway)
        assert result.spec.mode == "with_policy"
        assert result.spec.policy_id == "p0007"
        assert set(result.per_subset) == {"a", "b"}
        assert result.aggregate == metrics.aggregate(list(result.per_subset.values()))


class TestRenderReport:
    def make_result(self, reports: dict[str, metrics.MetricsReport], beta=0.5):
        spec = evaluator.EvalSpec(
            mode="with_policy", policy_id="p0001", subsets=tuple(reports)
        )
        return evaluator.EvalResult(
            spec=spec,
            eval_id="eval-test",
            per_subset=reports,
            verdicts={name: {} for name in reports},
            failures={name: [] for name in reports},
            aggregate=metrics.aggregate(list(reports.values())),
        )

    def test_markdown_golden(self):
        cm = metrics.ConfusionMatrix(tp=20, fp=11, tn=989, fn=80)
        result = self.make_result({"std": metrics.summarize(cm)})
        assert evaluator.render_report(result) == (
            "| Test Set | Accuracy | Precision | Recall | F_0.5 |\n"
            "| --- | --- | --- | --- | --- |\n"
            "| std | 0.917 | 0.645 | 0.200 | 0.446 |\n"
            "| Mean | 0.917 | 0.645 | 0.200 | 0.446 |\n"
        )

    def test_mean_row_averages_subsets(self):
        cm_a = metrics.ConfusionMatrix(tp=4, fp=0, tn=4, fn=0)
        cm_b = metrics.ConfusionMatrix(tp=1, fp=1, tn=3, fn=3)
        result = self.make_result(
            {"a": metrics.summarize(cm_a), "b": metrics.summarize(cm_b)}
        )
        lines = evaluator.render_report(result).splitlines()
        assert lines[2].startswith("| a | 1.000 | 1.000 |")
        assert lines[-1].startswith("| Mean | ")
        assert "0.750" in lines[-1]  # mean precision of 1.0 and 0.5

    def test_beta_label_tracks_spec(self):
        cm = metrics.ConfusionMatrix(tp=1, fp=1, tn=1, fn=1)
        report = metrics.summarize(cm, beta=1.0)
        spec = evaluator.EvalSpec(
            mode="with_policy", policy_id="p0001", subsets=("std",), beta=1.0
        )
        result = evaluator.EvalResult(
            spec=spec,
            eval_id="eval-test",
            per_subset={"std": report},
            verdicts={"std": {}},
            failures={"std": []},
            aggregate=metrics.aggregate([report]),
        )
        assert "| F_1 |" in evaluator.render_report(result).splitlines()[0]

    def test_json_format_round_trips(self):
        cm = metrics.ConfusionMatrix(tp=2, fp=1, tn=5, fn=2)
        result = self.make_result({"std": metrics.summarize(cm)})
        payload = json.loads(evaluator.render_report(result, format="json"))
        assert payload["eval_id"] == "eval-test"
        assert payload["subsets"]["std"]["precision"] == 2 / 3

    def test_unknown_format(self):
        cm = metrics.ConfusionMatrix(tp=1, fp=0, tn=1, fn=0)
        result = self.make_result({"std": metrics.summarize(cm)})
        with pytest.raises(evaluator.EvalError, match="format"):
            evaluator.render_report(result, format="csv")

    def test_empty_result_rejected(self):
        spec = evaluator.EvalSpec(mode="vanilla", subsets=("std",))
        cm = metrics.ConfusionMatrix(tp=1, fp=0, tn=1, fn=0)
        result = evaluator.EvalResult(
            spec=spec,
            eval_id="eval-test",
            per_subset={},
            verdicts={},
            failures={},
            aggregate=metrics.summarize(cm),
        )
        with pytest.raises(evaluator.EvalError, match="no subset"):
            evaluator.render_report(result)


class TestPersistence:
    def test_layout_and_contents(self, mock_gateway, tmp_path):
        split = two_subset_split()
        spec = evaluator.EvalSpec(
            mode="with_policy", policy_id="p0001", subsets=("a", "b")
        )
        result = evaluator.evaluate(
            spec, split, mock_gateway, policy=KEYWORD_POLICY, out_root=tmp_path
        )
        out_dir = tmp_path / "eval" / result.eval_id
        assert sorted(p.name for p in out_dir.iterdir()) == [
            "a.json",
            "b.json",
            "summary.md",
        ]
        payload = json.loads((out_dir / "a.json").read_text(encoding="utf-8"))
        assert payload["subset"] == "a"
        assert payload["eval_id"] == result.eval_id
        assert payload["mode"] == "with_policy"
        assert payload["policy_id"] == "p0001"
        assert payload["report"] == json.loads(result.per_subset["a"].to_json())
        assert payload["verdicts"] == {
            k: bool(v) for k, v in result.verdicts["a"].items()
        }
        assert payload["failures"] == []
        assert len(payload["transcripts"]) == len(split.subset("a"))
        summary = (out_dir / "summary.md").read_text(encoding="utf-8")
        assert summary == evaluator.render_report(result)

    def test_explicit_eval_id_used_for_directory(self, mock_gateway, small_split, tmp_path):
        result = evaluator.evaluate(
            POLICY_SPEC,
            small_split,
            mock_gateway,
            policy=KEYWORD_POLICY,
            out_root=tmp_path,
            eval_id="eval-pinned",
        )
        assert result.eval_id == "eval-pinned"
        assert (tmp_path / "eval" / "eval-pinned" / "summary.md").exists()

    def test_verdict_replay_from_disk(self, mock_gateway, small_split, tmp_path):
        """Persisted verdicts are enough to rebuild the stored report."""
        result = evaluator.evaluate(
            POLICY_SPEC,
            small_split,
            mock_gateway,
            policy=KEYWORD_POLICY,
            out_root=tmp_path,
        )
        payload = json.loads(
            (tmp_path / "eval" / result.eval_id / "train.json").read_text(
                encoding="utf-8"
            )
        )
        labels = {r.record_id: r.success for r in small_split.train}
        predictions = [v for v in payload["verdicts"].values()]
        truth = [labels[k] for k in payload["verdicts"]]
        cm = metrics.confusion(predictions, truth)
        assert metrics.summarize(cm).precision == payload["report"]["precision"]
