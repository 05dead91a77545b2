"""Gateway behaviour: mock determinism, retry taxonomy, bounded fan-out."""

from __future__ import annotations

import json
import time

import pytest

from policyforge import gateway, prompts
from policyforge.gateway import (
    AuthenticationError,
    BackendConfig,
    ChatMessage,
    ChatRequest,
    LLMGateway,
    MockFailure,
    MockScript,
    PermanentBackendError,
    RetryExhaustedError,
    RetryPolicy,
    TransientBackendError,
    build_chat_payload,
    build_chat_payload_bytes,
    iter_responses,
)

from conftest import KEYWORD_POLICY, RECORD_NEG, RECORD_POS, make_mock_gateway


def verdict_request(policy, record) -> ChatRequest:
    return ChatRequest.user(prompts.render_inference(policy, record))


class TestChatRequest:
    def test_user_constructor(self):
        request = ChatRequest.user("hello", temperature=0.3, max_output_tokens=5)
        assert request.model_id == gateway.DEFAULT_MODEL_ID
        assert request.messages[0].role == "user"
        assert request.temperature == 0.3

    def test_empty_messages_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            ChatRequest(model_id="m", messages=())

    def test_first_role_must_open_conversation(self):
        with pytest.raises(ValueError, match="first message role"):
            ChatRequest(
                model_id="m", messages=(ChatMessage(role="assistant", content="x"),)
            )

    def test_unknown_role_rejected(self):
        with pytest.raises(ValueError, match="unknown message role"):
            ChatRequest(
                model_id="m",
                messages=(
                    ChatMessage(role="user", content="x"),
                    ChatMessage(role="robot", content="y"),
                ),
            )

    def test_negative_temperature_rejected(self):
        with pytest.raises(ValueError, match="temperature"):
            ChatRequest.user("x", temperature=-0.1)

    def test_canonical_bytes_stable(self):
        a = ChatRequest.user("Say hello.", max_output_tokens=8)
        b = ChatRequest.user("Say hello.", max_output_tokens=8)
        assert a.canonical_bytes() == b.canonical_bytes()


class TestPayload:
    def test_field_order(self):
        request = ChatRequest.user("x")
        payload = build_chat_payload(request)
        assert list(payload) == ["model", "messages", "temperature", "max_tokens"]

    def test_golden_bytes(self):
        request = ChatRequest.user("Say hello.", max_output_tokens=8)
        expected = (
            b'{"model":"gpt-4o-mini",'
            b'"messages":[{"role":"user","content":"Say hello."}],'
            b'"temperature":0.0,"max_tokens":8}'
        )
        assert build_chat_payload_bytes(request) == expected

    def test_non_ascii_not_escaped(self):
        request = ChatRequest.user("café")
        assert "café".encode("utf-8") in build_chat_payload_bytes(request)


class TestBackendConfig:
    def test_remote_requires_endpoint(self):
        with pytest.raises(ValueError, match="endpoint"):
            BackendConfig(kind="remote")

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            BackendConfig(kind="paper")

    def test_max_in_flight_lower_bound(self):
        with pytest.raises(ValueError, match="max_in_flight"):
            BackendConfig(kind="mock", max_in_flight=0)

    def test_retry_validation(self):
        with pytest.raises(ValueError):
            RetryPolicy(max_attempts=0)
        with pytest.raises(ValueError):
            RetryPolicy(multiplier=0.0)


class TestMockDeterminism:
    def test_same_request_same_content(self, mock_gateway):
        request = verdict_request(KEYWORD_POLICY, RECORD_POS)
        first = mock_gateway.complete(request)
        second = mock_gateway.complete(request)
        assert first.content == second.content

    def test_byte_equal_requests_across_instances(self):
        request = ChatRequest.user(
            prompts.render_update(KEYWORD_POLICY, RECORD_POS, True),
            temperature=0.7,
        )
        a = make_mock_gateway(MockScript(seed=5)).complete(request).content
        b = make_mock_gateway(MockScript(seed=5)).complete(request).content
        assert a == b

    def test_script_seed_changes_generations(self):
        records = [RECORD_POS, RECORD_NEG]
        outputs = {}
        for seed in (1, 2):
            gw = make_mock_gateway(MockScript(seed=seed, echo_prob=0.5, append_prob=0.25))
            outputs[seed] = [
                gw.complete(
                    ChatRequest.user(prompts.render_update(KEYWORD_POLICY, r, r.success))
                ).content
                for r in records
                for _ in range(4)
            ]
        assert outputs[1] != outputs[2]

    def test_fingerprint_tracks_script(self):
        a = make_mock_gateway(MockScript(seed=1)).fingerprint()
        b = make_mock_gateway(MockScript(seed=1)).fingerprint()
        c = make_mock_gateway(MockScript(seed=2)).fingerprint()
        assert a == b
        assert a != c
        assert a["kind"] == "mock"


class TestMockVerdictRule:
    def test_keyword_hit_predicts_true(self, mock_gateway):
        response = mock_gateway.complete(verdict_request(KEYWORD_POLICY, RECORD_POS))
        # RECORD_POS has no planted keyword; force one via a custom record.
        assert response.content == "False"

    def test_planted_keyword_true_and_absent_false(self, mock_gateway):
        from policyforge.dataset import FounderRecord

        hit = FounderRecord(
            record_id="h",
            linkedin_profile="Runs a shop. Holds a patented way to sort data.",
            cb_profile="A shop. Never raised.",
            success=True,
        )
        miss = FounderRecord(
            record_id="m",
            linkedin_profile="Runs a shop in town.",
            cb_profile="A shop. Never raised.",
            success=False,
        )
        assert mock_gateway.complete(verdict_request(KEYWORD_POLICY, hit)).content == "True"
        assert (
            mock_gateway.complete(verdict_request(KEYWORD_POLICY, miss)).content
            == "False"
        )

    def test_keyword_in_cb_profile_counts(self, mock_gateway):
        from policyforge.dataset import FounderRecord

        record = FounderRecord(
            record_id="c",
            linkedin_profile="Runs a shop in town.",
            cb_profile="A shop. Holds a patented way to sort data.",
            success=True,
        )
        assert (
            mock_gateway.complete(verdict_request(KEYWORD_POLICY, record)).content
            == "True"
        )

    def test_min_keyword_hits_two(self):
        from policyforge.dataset import FounderRecord

        gw = make_mock_gateway(MockScript(min_keyword_hits=2))
        policy = prompts.PolicyText(
            rules=("Favor patented robotics work.",),
            raw="1. Favor patented robotics work.",
        )
        one_hit = FounderRecord(
            record_id="1",
            linkedin_profile="Holds a patented way to sort data.",
            cb_profile="A shop.",
            success=True,
        )
        two_hits = FounderRecord(
            record_id="2",
            linkedin_profile="Holds a patented way to sort data. Built robotics kits.",
            cb_profile="A shop.",
            success=True,
        )
        assert gw.complete(verdict_request(policy, one_hit)).content == "False"
        assert gw.complete(verdict_request(policy, two_hits)).content == "True"

    def test_stopwords_and_short_words_are_not_keywords(self, mock_gateway):
        from policyforge.dataset import FounderRecord

        policy = prompts.PolicyText(
            rules=("Favor founders with depth.",),
            raw="1. Favor founders with depth.",
        )
        record = FounderRecord(
            record_id="s",
            linkedin_profile="Many founders here show depth in all work.",
            cb_profile="A shop.",
            success=True,
        )
        assert (
            mock_gateway.complete(verdict_request(policy, record)).content == "False"
        )

    def test_vanilla_prompt_uses_scripted_verdict(self):
        gw_false = make_mock_gateway(MockScript(vanilla_verdict="False"))
        gw_true = make_mock_gateway(MockScript(vanilla_verdict="True"))
        request = ChatRequest.user(prompts.render_vanilla(RECORD_POS))
        assert gw_false.complete(request).content == "False"
        assert gw_true.complete(request).content == "True"


class TestMockGenerations:
    def test_initial_policy_prompt_yields_default_policy(self, mock_gateway):
        request = ChatRequest.user(
            prompts.render_initial_policy([(RECORD_POS, True), (RECORD_NEG, False)])
        )
        response = mock_gateway.complete(request)
        assert response.content == gateway.DEFAULT_INITIAL_POLICY
        parsed = prompts.parse_policy(response.content)
        assert len(parsed.rules) == 4

    def test_canned_template_overrides_default(self):
        script = MockScript(canned={"initial_policy": ["1. Only canned rule."]})
        gw = make_mock_gateway(script)
        request = ChatRequest.user(
            prompts.render_initial_policy([(RECORD_POS, True), (RECORD_NEG, False)])
        )
        assert gw.complete(request).content == "1. Only canned rule."

    def test_canned_template_policy_substitution(self):
        script = MockScript(canned={"policy_update": ["{policy}"]})
        gw = make_mock_gateway(script)
        request = ChatRequest.user(
            prompts.render_update(KEYWORD_POLICY, RECORD_POS, True)
        )
        assert gw.complete(request).content == KEYWORD_POLICY.raw

    def test_update_output_is_parseable_policy(self, mock_gateway):
        request = ChatRequest.user(
            prompts.render_update(KEYWORD_POLICY, RECORD_POS, True),
            temperature=0.7,
        )
        content = mock_gateway.complete(request).content
        prompts.parse_policy(content)

    def test_reflection_is_one_sentence_with_verb(self, mock_gateway):
        request = ChatRequest.user(prompts.render_reflection(RECORD_NEG, False))
        content = mock_gateway.complete(request).content
        assert content.startswith("The founder failed because")
        assert content.count(".") == 1

    def test_synthesis_merges_and_dedups(self, mock_gateway):
        a = prompts.PolicyText(
            rules=("Alpha rule.", "Shared rule."),
            raw="1. Alpha rule.\n2. Shared rule.",
        )
        b = prompts.PolicyText(
            rules=("Shared rule.", "Beta rule."),
            raw="1. Shared rule.\n2. Beta rule.",
        )
        request = ChatRequest.user(prompts.render_synthesis([a, b]))
        merged = prompts.parse_policy(mock_gateway.complete(request).content)
        assert merged.rules == ("Alpha rule.", "Shared rule.", "Beta rule.")

    def test_synthesis_caps_below_rule_limit(self, mock_gateway):
        policies = []
        for block in range(3):
            rules = tuple(f"Rule {block}-{i}." for i in range(10))
            raw = "\n".join(f"{i}. {r}" for i, r in enumerate(rules, 1))
            policies.append(prompts.PolicyText(rules=rules, raw=raw))
        request = ChatRequest.user(prompts.render_synthesis(policies))
        merged = prompts.parse_policy(mock_gateway.complete(request).content)
        assert len(merged.rules) == prompts.MAX_POLICY_RULES - 1

    def test_reflection_fold_adds_reflection_keywords(self, mock_gateway):
        reflections = [
            "The founder succeeded because the background centers on robotics."
        ]
        request = ChatRequest.user(
            prompts.render_reflection_fold(KEYWORD_POLICY, reflections)
        )
        folded = prompts.parse_policy(mock_gateway.complete(request).content)
        assert "Favor people whose work shows robotics." in folded.rules
        # Scaffold words from the reflection sentence never become rules.
        assert all("because" not in r for r in folded.rules)


class TestFailuresAndRetries:
    def fast_retry(self, attempts=3):
        return RetryPolicy(max_attempts=attempts, base_backoff_s=0.0, multiplier=2.0)

    def test_transient_failure_exhausts_retries(self):
        script = MockScript(failures=(MockFailure(match="BOOM", mode="transient"),))
        gw = make_mock_gateway(script, retry=self.fast_retry(3))
        calls = []
        inner = gw._backend.send
        gw._backend.send = lambda req: (calls.append(1), inner(req))[1]
        with pytest.raises(RetryExhaustedError) as err:
            gw.complete(ChatRequest.user("BOOM please"))
        assert err.value.attempts == 3
        assert isinstance(err.value.last, TransientBackendError)
        assert len(calls) == 3

    def test_permanent_failure_not_retried(self):
        script = MockScript(failures=(MockFailure(match="BOOM", mode="permanent"),))
        gw = make_mock_gateway(script, retry=self.fast_retry(3))
        calls = []
        inner = gw._backend.send
        gw._backend.send = lambda req: (calls.append(1), inner(req))[1]
        with pytest.raises(PermanentBackendError):
            gw.complete(ChatRequest.user("BOOM please"))
        assert len(calls) == 1

    def test_unparseable_mode_returns_prose(self):
        script = MockScript(failures=(MockFailure(match="BOOM", mode="unparseable"),))
        gw = make_mock_gateway(script)
        response = gw.complete(ChatRequest.user("BOOM please"))
        with pytest.raises(prompts.VerdictParseError):
            prompts.parse_verdict(response.content)

    def test_backoff_schedule(self, monkeypatch):
        delays = []
        monkeypatch.setattr(gateway.time, "sleep", delays.append)
        script = MockScript(failures=(MockFailure(match="BOOM", mode="transient"),))
        gw = make_mock_gateway(
            script, retry=RetryPolicy(max_attempts=3, base_backoff_s=0.5, multiplier=2.0)
        )
        with pytest.raises(RetryExhaustedError):
            gw.complete(ChatRequest.user("BOOM please"))
        assert delays == [0.5, 1.0]

    def test_unknown_failure_mode_rejected(self):
        with pytest.raises(ValueError, match="failure mode"):
            MockFailure(match="x", mode="sometimes")

    def test_successful_response_records_attempts(self, mock_gateway):
        response = mock_gateway.complete(ChatRequest.user(prompts.render_vanilla(RECORD_POS)))
        assert response.attempts == 1


class TestCompleteMany:
    def build_batch(self, n):
        from policyforge.dataset import FounderRecord

        requests = []
        expected = []
        for i in range(n):
            planted = i % 2 == 0
            profile = "Runs a shop."
            if planted:
                profile += " Holds a patented way to sort data."
            record = FounderRecord(
                record_id=f"b{i}",
                linkedin_profile=profile,
                cb_profile=f"Shop {i}. Never raised.",
                success=planted,
            )
            requests.append(verdict_request(KEYWORD_POLICY, record))
            expected.append("True" if planted else "False")
        return requests, expected

    def test_order_preserved_under_jitter(self):
        script = MockScript(latency_jitter_ms=(0.1, 2.0))
        gw = make_mock_gateway(script, max_in_flight=8)
        requests, expected = self.build_batch(60)
        results = gw.complete_many(requests)
        assert [r.content for r in results] == expected
        assert gw.stats.peak_in_flight <= 8

    def test_single_worker_serializes(self):
        gw = make_mock_gateway(MockScript(latency_jitter_ms=(0.05, 0.2)), max_in_flight=1)
        requests, expected = self.build_batch(12)
        results = gw.complete_many(requests)
        assert [r.content for r in results] == expected
        assert gw.stats.peak_in_flight == 1
        assert gw.stats.dispatch_order == sorted(gw.stats.dispatch_order)

    def test_positional_failure_capture(self):
        from policyforge.dataset import FounderRecord

        script = MockScript(failures=(MockFailure(match="POISON", mode="permanent"),))
        gw = make_mock_gateway(script, retry=RetryPolicy(max_attempts=2, base_backoff_s=0.0))
        requests, _ = self.build_batch(6)
        poison = FounderRecord(
            record_id="p",
            linkedin_profile="POISON pill profile.",
            cb_profile="A shop.",
            success=False,
        )
        requests[3] = verdict_request(KEYWORD_POLICY, poison)
        results = gw.complete_many(requests)
        assert isinstance(results[3], PermanentBackendError)
        for i, result in enumerate(results):
            if i != 3:
                assert hasattr(result, "content")

    def test_empty_batch_rejected(self, mock_gateway):
        with pytest.raises(ValueError):
            mock_gateway.complete_many([])

    def test_iter_responses_splits_results(self):
        script = MockScript(failures=(MockFailure(match="POISON", mode="permanent"),))
        gw = make_mock_gateway(script, retry=RetryPolicy(max_attempts=1, base_backoff_s=0.0))
        results = gw.complete_many(
            [ChatRequest.user(prompts.render_vanilla(RECORD_POS)), ChatRequest.user("POISON")]
        )
        triples = list(iter_responses(results))
        assert triples[0][1].content == "False"
        assert triples[0][2] is None
        assert triples[1][1] is None
        assert isinstance(triples[1][2], PermanentBackendError)

    def test_completed_counter(self):
        gw = make_mock_gateway()
        requests, _ = self.build_batch(10)
        gw.complete_many(requests)
        assert gw.stats.completed == 10
        assert gw.stats.in_flight == 0


class TestRateLimit:
    def test_token_bucket_paces_requests(self):
        gw = make_mock_gateway(rate_limit_per_s=40.0)
        request = ChatRequest.user(prompts.render_vanilla(RECORD_POS))
        started = time.perf_counter()
        gw.complete_many([request] * 45)
        elapsed = time.perf_counter() - started
        assert elapsed >= 0.1

    def test_invalid_rate_rejected(self):
        with pytest.raises(ValueError):
            gateway._TokenBucket(0.0)


class TestMockScriptFile:
    def test_from_file_round_trip(self, tmp_path):
        payload = {
            "seed": 9,
            "min_keyword_hits": 2,
            "vanilla_verdict": "True",
            "latency_jitter_ms": [0.1, 0.5],
            "stopwords": ["founder", "policy"],
            "canned": {"initial_policy": ["1. Canned."]},
            "failures": [{"match": "BOOM", "mode": "transient"}],
        }
        path = tmp_path / "script.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        script = MockScript.from_file(path)
        assert script.seed == 9
        assert script.min_keyword_hits == 2
        assert script.vanilla_verdict == "True"
        assert script.latency_jitter_ms == (0.1, 0.5)
        assert script.stopwords == frozenset({"founder", "policy"})
        assert script.canned == {"initial_policy": ["1. Canned."]}
        assert script.failures == (MockFailure(match="BOOM", mode="transient"),)

    def test_fingerprint_stable_across_loads(self, tmp_path):
        payload = {"seed": 3, "vanilla_verdict": "False"}
        path = tmp_path / "script.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        assert MockScript.from_file(path).fingerprint() == MockScript.from_file(
            path
        ).fingerprint()
