"""Provider-agnostic chat completion gateway.

Two backends share one interface: a remote OpenAI-compatible HTTP backend
and a scripted mock whose replies are a pure function of (script, request
bytes). The gateway layers retries with exponential backoff, an optional
request-rate token bucket, and bounded concurrent fan-out on top of either
backend. Batch calls preserve input order and capture per-request failures
positionally instead of raising.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import requests

from policyforge import prompts

logger = logging.getLogger(__name__)

DEFAULT_MODEL_ID = "gpt-4o-mini"
GEN_TEMPERATURE = 0.7
VERDICT_TEMPERATURE = 0.0
GEN_MAX_TOKENS = 1024
VERDICT_MAX_TOKENS = 8


class GatewayError(Exception):
    """Base class for all backend/transport failures."""


class AuthenticationError(GatewayError):
    """Missing or rejected credential; never retried."""


class MalformedResponseError(GatewayError):
    """Provider returned a payload we cannot interpret; never retried."""


class PermanentBackendError(GatewayError):
    """Non-retryable provider rejection (4xx other than 429)."""


class TransientBackendError(GatewayError):
    """Retryable failure: 429, 5xx, or a transport timeout."""


class RetryExhaustedError(GatewayError):
    """All attempts failed; carries the last underlying failure."""

    def __init__(self, attempts: int, last: Exception) -> None:
        super().__init__(f"gave up after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_output_tokens: int = 256

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError(
                f"first message role must be system or user, got {self.messages[0].role!r}"
            )
        for msg in self.messages:
            if msg.role not in ("system", "user", "assistant"):
                raise ValueError(f"unknown message role {msg.role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")

    @classmethod
    def user(
        cls,
        prompt: str,
        model_id: str = DEFAULT_MODEL_ID,
        temperature: float = 0.0,
        max_output_tokens: int = 256,
    ) -> "ChatRequest":
        """The common case: one monolithic user message."""
        return cls(
            model_id=model_id,
            messages=(ChatMessage(role="user", content=prompt),),
            temperature=temperature,
            max_output_tokens=max_output_tokens,
        )

    def canonical_bytes(self) -> bytes:
        return build_chat_payload_bytes(self)


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int
    completion_tokens: int
    latency_s: float
    attempts: int = 1


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_s: float = 0.5
    multiplier: float = 2.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_backoff_s < 0 or self.multiplier <= 0:
            raise ValueError("invalid backoff configuration")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    endpoint: str = ""
    credential_env: str = "LLM_API_KEY"
    max_in_flight: int = 8
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout_s: float = 60.0
    rate_limit_per_s: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("remote", "mock"):
            raise ValueError(f"backend kind must be remote or mock, got {self.kind!r}")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote backend requires an endpoint URL")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


def build_chat_payload(request: ChatRequest) -> dict:
    """OpenAI-compatible chat.completions request body."""
    return {
        "model": request.model_id,
        "messages": [{"role": m.role, "content": m.content} for m in request.messages],
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    }


def build_chat_payload_bytes(request: ChatRequest) -> bytes:
    """Canonical serialized body; key order is fixed by construction."""
    return json.dumps(
        build_chat_payload(request), separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


# -- Mock backend --------------------------------------------------------

# Words the keyword rule ignores: scaffolding vocabulary that the mock's
# own generated rules and the prompt templates introduce.
DEFAULT_STOPWORDS = frozenset(
    {
        "founder",
        "founders",
        "people",
        "policy",
        "policies",
        "profile",
        "profiles",
        "mention",
        "mentions",
    }
)

DEFAULT_INITIAL_POLICY = (
    "1. Favor people with deep domain skill and a clear plan.\n"
    "2. Favor people with a strong formal degree from a top school.\n"
    "3. Favor people who held a chief role at a large firm.\n"
    "4. Avoid people with short stints and no line of focus."
)

_WORD_RE = re.compile(r"[a-zA-Z]+")


def _long_words(text: str, min_len: int, stopwords: frozenset[str]) -> list[str]:
    seen: dict[str, None] = {}
    for word in _WORD_RE.findall(text.lower()):
        if len(word) >= min_len and word not in stopwords:
            seen.setdefault(word, None)
    return sorted(seen)


@dataclass(frozen=True)
class MockFailure:
    """Deterministic failure injection: any prompt containing `match` fails."""

    match: str
    mode: str = "permanent"  # "permanent" | "transient" | "unparseable"

    def __post_init__(self) -> None:
        if self.mode not in ("permanent", "transient", "unparseable"):
            raise ValueError(f"unknown failure mode {self.mode!r}")


@dataclass(frozen=True)
class MockScript:
    """Declarative behaviour of the scripted backend.

    Replies are a pure function of (script, request bytes): byte-equal
    requests always produce byte-equal content. Verdict prompts apply a
    keyword-containment rule; generation prompts either use a canned
    template for their prompt kind or a default editing behaviour driven
    by a request-hash PRNG.
    """

    seed: int = 0
    min_keyword_hits: int = 1
    keyword_min_len: int = 6
    stopwords: frozenset[str] = DEFAULT_STOPWORDS
    canned: dict = field(default_factory=dict)  # prompt kind -> list of templates
    echo_prob: float = 0.25
    append_prob: float = 0.55
    vanilla_verdict: str = "False"
    latency_jitter_ms: tuple[float, float] = (0.0, 0.0)
    failures: tuple[MockFailure, ...] = ()

    @classmethod
    def from_file(cls, path: str | Path) -> "MockScript":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        failures = tuple(
            MockFailure(match=f["match"], mode=f.get("mode", "permanent"))
            for f in payload.pop("failures", [])
        )
        if "stopwords" in payload:
            payload["stopwords"] = frozenset(payload["stopwords"])
        if "latency_jitter_ms" in payload:
            payload["latency_jitter_ms"] = tuple(payload["latency_jitter_ms"])
        return cls(failures=failures, **payload)

    def fingerprint(self) -> str:
        blob = json.dumps(
            {
                "seed": self.seed,
                "min_keyword_hits": self.min_keyword_hits,
                "keyword_min_len": self.keyword_min_len,
                "stopwords": sorted(self.stopwords),
                "canned": self.canned,
                "echo_prob": self.echo_prob,
                "append_prob": self.append_prob,
                "vanilla_verdict": self.vanilla_verdict,
                "failures": [(f.match, f.mode) for f in self.failures],
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class MockBackend:
    """Deterministic scripted stand-in for a hosted model."""

    def __init__(self, script: MockScript | None = None) -> None:
        self.script = script or MockScript()

    def send(self, request: ChatRequest) -> ChatResponse:
        prompt = request.messages[-1].content
        for failure in self.script.failures:
            if failure.match in prompt:
                if failure.mode == "transient":
                    raise TransientBackendError(f"scripted transient failure: {failure.match!r}")
                if failure.mode == "unparseable":
                    return self._respond(request, "I cannot answer that.")
                raise PermanentBackendError(f"scripted permanent failure: {failure.match!r}")
        rng = self._rng(request)
        if self.script.latency_jitter_ms != (0.0, 0.0):
            lo, hi = self.script.latency_jitter_ms
            time.sleep(rng.uniform(lo, hi) / 1000.0)
        content = self._generate(prompt, rng)
        return self._respond(request, content)

    def _respond(self, request: ChatRequest, content: str) -> ChatResponse:
        prompt_chars = sum(len(m.content) for m in request.messages)
        return ChatResponse(
            content=content,
            prompt_tokens=max(1, prompt_chars // 4),
            completion_tokens=max(1, len(content) // 4),
            latency_s=0.0,
        )

    def _rng(self, request: ChatRequest) -> random.Random:
        digest = hashlib.sha256(
            str(self.script.seed).encode("utf-8") + b"\x1f" + request.canonical_bytes()
        ).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def _generate(self, prompt: str, rng: random.Random) -> str:
        kind = prompts.classify_prompt(prompt)
        canned = self.script.canned.get(kind)
        if canned:
            template = canned[rng.randrange(len(canned))]
            return self._fill(template, prompt)
        if kind == prompts.PromptKind.INFERENCE_WITH_POLICY.value:
            return self._verdict(prompt)
        if kind == prompts.PromptKind.INFERENCE_VANILLA.value:
            return self.script.vanilla_verdict
        if kind == prompts.PromptKind.INITIAL_POLICY.value:
            return DEFAULT_INITIAL_POLICY
        if kind == prompts.PromptKind.POLICY_UPDATE.value:
            return self._update(prompt, rng)
        if kind == prompts.PromptKind.REFLECTION.value:
            return self._reflection(prompt)
        if kind == "synthesis":
            return self._synthesis(prompt)
        if kind == "reflection_fold":
            return self._reflection_fold(prompt)
        raise MalformedResponseError(f"mock cannot handle prompt kind {kind!r}")

    # - segment extraction helpers (template structure is a fixed interface) -

    @staticmethod
    def _between(text: str, start: str, end: str) -> str:
        i = text.index(start) + len(start)
        j = text.index(end, i)
        return text[i:j]

    def _profiles(self, prompt: str) -> str:
        linkedin = self._between(
            prompt, "Founder's LinkedIn Profile: ", "\nCrunchbase information: "
        )
        after = prompt.index("Crunchbase information: ") + len("Crunchbase information: ")
        cb = prompt[after:].split("\n", 1)[0]
        return linkedin + " " + cb

    def _policy_block(self, prompt: str) -> str:
        if "Here is a policy to assist you: " in prompt:
            return self._between(
                prompt, "Here is a policy to assist you: ", "\n\nGiven the founder's profile:"
            )
        block = self._between(
            prompt, "established the following policy: ", "\n\nRecently,"
        )
        return block[:-1] if block.endswith(".") else block

    def _fill(self, template: str, prompt: str) -> str:
        out = template
        if "{policy}" in out:
            out = out.replace("{policy}", self._policy_block(prompt))
        return out

    def _verdict(self, prompt: str) -> str:
        policy = self._policy_block(prompt)
        profile = self._profiles(prompt)
        keywords = set(
            _long_words(policy, self.script.keyword_min_len, self.script.stopwords)
        )
        present = set(
            _long_words(profile, self.script.keyword_min_len, self.script.stopwords)
        )
        hits = len(keywords & present)
        return "True" if hits >= self.script.min_keyword_hits else "False"

    def _update(self, prompt: str, rng: random.Random) -> str:
        policy = self._policy_block(prompt)
        profile = self._profiles(prompt)
        try:
            rules = list(prompts.parse_policy(policy).rules)
        except prompts.PromptError:
            return policy
        words = _long_words(profile, self.script.keyword_min_len, self.script.stopwords)
        action = rng.random()
        if action < self.script.echo_prob or not words:
            return policy
        new_rule = f"Favor people whose work shows {rng.choice(words)}."
        if action < self.script.echo_prob + self.script.append_prob and len(rules) < prompts.MAX_POLICY_RULES:
            rules.append(new_rule)
        else:
            rules[rng.randrange(len(rules))] = new_rule
        return "\n".join(f"{i}. {rule}" for i, rule in enumerate(rules, start=1))

    def _reflection(self, prompt: str) -> str:
        profile = self._profiles(prompt)
        verb = "succeeded" if "why this founder succeeded." in prompt else "failed"
        words = _long_words(profile, self.script.keyword_min_len, self.script.stopwords)
        focus = words[0] if words else "steady work"
        return f"The founder {verb} because the background centers on {focus}."

    def _synthesis(self, prompt: str) -> str:
        merged: list[str] = []
        body = prompt.split(prompts.SYNTHESIS_HEADER, 1)[1]
        body = body.split("Merge these candidates", 1)[0]
        for chunk in re.split(r"Candidate policy \d+:\n", body):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                for rule in prompts.parse_policy(chunk).rules:
                    if rule not in merged:
                        merged.append(rule)
            except prompts.PromptError:
                continue
        merged = merged[: prompts.MAX_POLICY_RULES - 1]
        return "\n".join(f"{i}. {rule}" for i, rule in enumerate(merged, start=1))

    def _reflection_fold(self, prompt: str) -> str:
        policy = self._between(
            prompt, "established the following policy: ", "\n\nReviewers studied"
        )
        policy = policy[:-1] if policy.endswith(".") else policy
        reflections = self._between(
            prompt,
            "noted the following reflections:\n\n",
            "\nUse these reflections to revise",
        )
        try:
            rules = list(prompts.parse_policy(policy).rules)
        except prompts.PromptError:
            return policy
        existing = " ".join(rules).lower()
        for word in _long_words(
            reflections, self.script.keyword_min_len, self.script.stopwords
        ):
            if word in ("founder", "background", "centers", "because", "succeeded", "failed"):
                continue
            if word not in existing and len(rules) < prompts.MAX_POLICY_RULES:
                rules.append(f"Favor people whose work shows {word}.")
        return "\n".join(f"{i}. {rule}" for i, rule in enumerate(rules, start=1))


# -- Remote backend ------------------------------------------------------


class RemoteBackend:
    """OpenAI-compatible chat completions over HTTP."""

    def __init__(self, config: BackendConfig) -> None:
        self.config = config
        self._session = requests.Session()

    def send(self, request: ChatRequest) -> ChatResponse:
        credential = os.environ.get(self.config.credential_env)
        if not credential:
            raise AuthenticationError(
                f"environment variable {self.config.credential_env} is not set"
            )
        url = self.config.endpoint.rstrip("/") + "/chat/completions"
        started = time.perf_counter()
        try:
            http_response = self._session.post(
                url,
                data=build_chat_payload_bytes(request),
                headers={
                    "Authorization": f"Bearer {credential}",
                    "Content-Type": "application/json",
                },
                timeout=self.config.timeout_s,
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransientBackendError(f"transport failure: {exc}") from exc
        latency = time.perf_counter() - started

        status = http_response.status_code
        if status in (401, 403):
            raise AuthenticationError(f"provider rejected credential (HTTP {status})")
        if status == 429 or status >= 500:
            raise TransientBackendError(f"HTTP {status} from provider")
        if status != 200:
            raise PermanentBackendError(f"HTTP {status} from provider")

        try:
            payload = http_response.json()
            content = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"cannot parse provider response: {exc}") from exc
        if not isinstance(content, str):
            raise MalformedResponseError("provider content is not text")
        usage = payload.get("usage") or {}
        return ChatResponse(
            content=content,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            latency_s=latency,
        )


# -- Gateway -------------------------------------------------------------


class _TokenBucket:
    """Request-count rate limiter; blocks callers until a token is free."""

    def __init__(self, rate_per_s: float) -> None:
        if rate_per_s <= 0:
            raise ValueError("rate_per_s must be > 0")
        self._rate = rate_per_s
        self._capacity = max(1.0, rate_per_s)
        self._tokens = self._capacity
        self._updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(
                    self._capacity, self._tokens + (now - self._updated) * self._rate
                )
                self._updated = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self._rate
            time.sleep(wait)


class TrafficStats:
    """Thread-safe dispatch/completion instrumentation."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0
        self.dispatch_order: list[int] = []
        self.dispatch_times: list[float] = []
        self.completed = 0

    def started(self, index: int) -> None:
        with self._lock:
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            self.dispatch_order.append(index)
            self.dispatch_times.append(time.perf_counter())

    def finished(self) -> None:
        with self._lock:
            self.in_flight -= 1
            self.completed += 1

    def reset(self) -> None:
        with self._lock:
            self.in_flight = 0
            self.peak_in_flight = 0
            self.dispatch_order = []
            self.dispatch_times = []
            self.completed = 0


class LLMGateway:
    """Retrying, rate-limited, concurrency-bounded chat client."""

    def __init__(
        self,
        config: BackendConfig,
        mock_script: MockScript | None = None,
    ) -> None:
        self.config = config
        if config.kind == "mock":
            self._backend = MockBackend(mock_script)
        else:
            self._backend = RemoteBackend(config)
        self._limiter = (
            _TokenBucket(config.rate_limit_per_s) if config.rate_limit_per_s else None
        )
        self.stats = TrafficStats()

    @property
    def mock_script(self) -> MockScript | None:
        backend = self._backend
        return backend.script if isinstance(backend, MockBackend) else None

    def fingerprint(self) -> dict:
        info: dict = {"kind": self.config.kind}
        if self.config.kind == "remote":
            info["endpoint"] = self.config.endpoint
        else:
            info["script"] = self._backend.script.fingerprint()
        return info

    def complete(self, request: ChatRequest, _index: int = 0) -> ChatResponse:
        """Single completion with retry/backoff around transient failures."""
        self.stats.started(_index)
        try:
            return self._complete_with_retry(request)
        finally:
            self.stats.finished()

    def _complete_with_retry(self, request: ChatRequest) -> ChatResponse:
        retry = self.config.retry
        last: Exception | None = None
        for attempt in range(1, retry.max_attempts + 1):
            if self._limiter is not None:
                self._limiter.acquire()
            try:
                started = time.perf_counter()
                response = self._backend.send(request)
                latency = response.latency_s or (time.perf_counter() - started)
                return replace(response, attempts=attempt, latency_s=latency)
            except TransientBackendError as exc:
                last = exc
                if attempt < retry.max_attempts:
                    delay = retry.base_backoff_s * (retry.multiplier ** (attempt - 1))
                    logger.debug("transient failure (attempt %d): %s", attempt, exc)
                    time.sleep(delay)
        assert last is not None
        raise RetryExhaustedError(retry.max_attempts, last)

    def complete_many(
        self, requests_batch: Sequence[ChatRequest]
    ) -> list[ChatResponse | GatewayError]:
        """Bounded parallel fan-out; results aligned to input positions.

        Failures are returned in place, never raised, so one bad request
        cannot poison a batch.
        """
        if not requests_batch:
            raise ValueError("complete_many requires a non-empty request list")

        def run(indexed: tuple[int, ChatRequest]) -> ChatResponse | GatewayError:
            index, request = indexed
            try:
                return self.complete(request, _index=index)
            except GatewayError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            return list(pool.map(run, enumerate(requests_batch)))


def iter_responses(
    results: Iterable[ChatResponse | GatewayError],
) -> Iterable[tuple[int, ChatResponse | None, GatewayError | None]]:
    """Split positional batch results into (index, response, error) triples."""
    for index, result in enumerate(results):
        if isinstance(result, ChatResponse):
            yield index, result, None
        else:
            yield index, None, result
