"""Policy search engine.

Induces an initial rule policy from labeled examples, then refines it by
hill climbing on training-set precision: a sequential pass proposes one
candidate per training case and keeps it only when it scores strictly
higher, a parallel pass generates candidates concurrently, selects the
top fraction, and synthesizes them into a merged policy. Every candidate
is scored, ledger-recorded, and reproducible from its stored transcript;
the final answer is the argmax over the whole ledger, not the last
survivor.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from policyforge import metrics, prompts
from policyforge.dataset import DatasetSplit, FounderRecord
from policyforge.gateway import (
    DEFAULT_MODEL_ID,
    GEN_MAX_TOKENS,
    GEN_TEMPERATURE,
    VERDICT_MAX_TOKENS,
    VERDICT_TEMPERATURE,
    ChatRequest,
    GatewayError,
    LLMGateway,
    iter_responses,
)

logger = logging.getLogger(__name__)

METHOD_INITIAL = "initial"
METHOD_SEQUENTIAL = "sequential_update"
METHOD_PARALLEL = "parallel_synthesis"
METHOD_REFLECTION = "reflection_fold"
METHOD_EXPERT = "expert_edit"
_METHODS = (
    METHOD_INITIAL,
    METHOD_SEQUENTIAL,
    METHOD_PARALLEL,
    METHOD_REFLECTION,
    METHOD_EXPERT,
)

OVERLENGTH_REMINDER = (
    "\nReminder: your policy must be well-structured and have fewer than 20 rows.\n"
)


class ForgeError(Exception):
    """Search-engine precondition or generation failure."""


class LedgerError(ForgeError):
    """Ledger integrity violation (duplicate initial, dangling parent, ...)."""


@dataclass(frozen=True)
class Lineage:
    method: str
    parent_id: str | None = None
    round: int = 0
    source_record_id: str | None = None

    def __post_init__(self) -> None:
        if self.method not in _METHODS:
            raise ForgeError(f"unknown lineage method {self.method!r}")
        if self.method == METHOD_INITIAL and self.parent_id is not None:
            raise ForgeError("the initial policy cannot have a parent")
        if self.method != METHOD_INITIAL and self.parent_id is None:
            raise ForgeError(f"method {self.method!r} requires a parent policy")


@dataclass(frozen=True)
class Policy:
    policy_id: str
    body: prompts.PolicyText
    lineage: Lineage
    score: float | None = None


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "loop"  # sequential | parallel | loop
    rounds: int = 4
    scoring_set: str = "train"
    train_order_seed: int = 0
    top_fraction: float = 0.10
    overlength_handling: str = "reprompt_then_truncate"  # | truncate
    parse_failure_mode: str = "count_as_false"  # | exclude

    def __post_init__(self) -> None:
        if self.strategy not in ("sequential", "parallel", "loop"):
            raise ForgeError(f"unknown strategy {self.strategy!r}")
        if self.rounds < 1:
            raise ForgeError("rounds must be >= 1")
        if not 0 < self.top_fraction <= 1:
            raise ForgeError("top_fraction must be in (0, 1]")
        if self.overlength_handling not in ("reprompt_then_truncate", "truncate"):
            raise ForgeError(f"unknown overlength_handling {self.overlength_handling!r}")
        if self.parse_failure_mode not in ("count_as_false", "exclude"):
            raise ForgeError(f"unknown parse_failure_mode {self.parse_failure_mode!r}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ForgeError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class ScoreResult:
    """Outcome of scoring one policy body against one record set."""

    score: float  # precision on the scoring set
    report: metrics.MetricsReport
    cm: metrics.ConfusionMatrix
    verdicts: dict[str, bool]
    n_parse_failures: int
    rows: list[dict] = field(default_factory=list)
    transcript_id: str | None = None  # policy whose transcript holds the traffic

    def confusion_json(self) -> dict:
        return {"tp": self.cm.tp, "fp": self.cm.fp, "tn": self.cm.tn, "fn": self.cm.fn}


class ScoreCache:
    """Reuse scores for identical (policy body, record set, backend) triples."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._store: dict[str, ScoreResult] = {}
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(
        body: prompts.PolicyText,
        records: Sequence[FounderRecord],
        backend_fingerprint: dict,
        model_id: str,
        parse_failure_mode: str,
    ) -> str:
        blob = "\x1f".join(
            (
                body.raw,
                ",".join(r.record_id for r in records),
                json.dumps(backend_fingerprint, sort_keys=True),
                model_id,
                parse_failure_mode,
            )
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def get(self, key: str) -> ScoreResult | None:
        with self._lock:
            result = self._store.get(key)
            if result is None:
                self.misses += 1
            else:
                self.hits += 1
            return result

    def put(self, key: str, result: ScoreResult) -> None:
        with self._lock:
            self._store[key] = result


# -- Run ledger ----------------------------------------------------------


class RunLedger:
    """Append-only record of every policy a run produced.

    On disk a run is one directory: `run.json` (config and backend
    fingerprint), `policies/<policy_id>.txt` (raw bodies),
    `ledger.jsonl` (ordered entries), and `transcripts/<policy_id>.jsonl`
    (request/response traffic for audit and replay). A ledger opened
    without a root keeps everything in memory, for tests.
    """

    def __init__(self, run_id: str, root: str | Path | None = None) -> None:
        if not run_id:
            raise LedgerError("run_id must be non-empty")
        self.run_id = run_id
        self.run_dir: Path | None = None
        self.header: dict = {}
        self._entries: list[dict] = []
        self._policies: dict[str, Policy] = {}
        self._scores: dict[str, float] = {}
        self._seq = 0
        self._has_initial = False
        self._lock = threading.Lock()
        if root is not None:
            self.run_dir = Path(root) / run_id
            (self.run_dir / "policies").mkdir(parents=True, exist_ok=True)
            (self.run_dir / "transcripts").mkdir(parents=True, exist_ok=True)

    # - persistence -

    def write_header(self, payload: dict) -> None:
        self.header = dict(payload)
        self.header.setdefault("run_id", self.run_id)
        self.header.setdefault("created_ts", time.time())
        if self.run_dir is not None:
            (self.run_dir / "run.json").write_text(
                json.dumps(self.header, indent=2, sort_keys=True) + "\n",
                encoding="utf-8",
            )

    @classmethod
    def open(cls, run_dir: str | Path) -> "RunLedger":
        """Rebuild ledger state from disk, for resume and reporting."""
        run_dir = Path(run_dir)
        header_path = run_dir / "run.json"
        if not header_path.exists():
            raise LedgerError(f"not a run directory (no run.json): {run_dir}")
        header = json.loads(header_path.read_text(encoding="utf-8"))
        ledger = cls(header.get("run_id", run_dir.name), root=run_dir.parent)
        ledger.header = header
        ledger_path = run_dir / "ledger.jsonl"
        if not ledger_path.exists():
            return ledger
        with ledger_path.open(encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    ledger._restore(json.loads(line))
        return ledger

    def _restore(self, entry: dict) -> None:
        self._entries.append(entry)
        kind = entry.get("type")
        if kind == "policy":
            policy_id = entry["policy_id"]
            raw = self._read_body(policy_id)
            lineage = Lineage(
                method=entry["method"],
                parent_id=entry.get("parent"),
                round=entry.get("round", 0),
                source_record_id=entry.get("source_record_id"),
            )
            score = entry.get("score")
            self._policies[policy_id] = Policy(
                policy_id=policy_id,
                body=prompts.parse_policy(raw),
                lineage=lineage,
                score=score,
            )
            if score is not None:
                self._scores.setdefault(policy_id, score)
            if entry["method"] == METHOD_INITIAL:
                self._has_initial = True
            self._seq = max(self._seq, int(policy_id.lstrip("p")) + 1)
        elif kind == "score":
            policy_id = entry["policy_id"]
            self._scores.setdefault(policy_id, entry["score"])
            existing = self._policies.get(policy_id)
            if existing is not None and existing.score is None:
                self._policies[policy_id] = dataclasses.replace(
                    existing, score=entry["score"]
                )

    def _read_body(self, policy_id: str) -> str:
        assert self.run_dir is not None
        return (self.run_dir / "policies" / f"{policy_id}.txt").read_text(
            encoding="utf-8"
        )

    def _append(self, entry: dict) -> None:
        # caller holds the lock
        self._entries.append(entry)
        if self.run_dir is not None:
            with (self.run_dir / "ledger.jsonl").open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(entry, ensure_ascii=False) + "\n")

    def append_transcript(self, policy_id: str, rows: Sequence[dict]) -> None:
        if self.run_dir is None or not rows:
            return
        path = self.run_dir / "transcripts" / f"{policy_id}.jsonl"
        with path.open("a", encoding="utf-8") as handle:
            for row in rows:
                handle.write(json.dumps(row, ensure_ascii=False) + "\n")

    # - recording -

    def record_policy(
        self,
        body: prompts.PolicyText,
        lineage: Lineage,
        result: ScoreResult | None = None,
        gen_rows: Sequence[dict] | None = None,
        extra: dict | None = None,
    ) -> Policy:
        """Mint a policy id, persist the body/entry/transcript, return the Policy."""
        with self._lock:
            if lineage.method == METHOD_INITIAL:
                if self._has_initial:
                    raise LedgerError("run already has an initial policy")
            elif lineage.parent_id not in self._policies:
                raise LedgerError(
                    f"parent policy {lineage.parent_id!r} is not in this ledger"
                )
            policy_id = f"p{self._seq:04d}"
            self._seq += 1

            rows = list(gen_rows or [])
            scoring_transcript = None
            if result is not None:
                if result.transcript_id is None and result.rows:
                    rows.extend(result.rows)
                    result.transcript_id = policy_id
                scoring_transcript = result.transcript_id

            if self.run_dir is not None:
                (self.run_dir / "policies" / f"{policy_id}.txt").write_text(
                    body.raw, encoding="utf-8"
                )
            self.append_transcript(policy_id, rows)

            entry = {
                "type": "policy",
                "policy_id": policy_id,
                "parent": lineage.parent_id,
                "method": lineage.method,
                "round": lineage.round,
                "source_record_id": lineage.source_record_id,
                "score": None if result is None else result.score,
                "n_rules": len(body.rules),
            }
            if result is not None:
                entry["confusion"] = result.confusion_json()
                entry["n_parse_failures"] = result.n_parse_failures
                entry["verdicts"] = dict(result.verdicts)
                entry["scoring_transcript"] = scoring_transcript
            if extra:
                entry.update(extra)
            entry["ts"] = time.time()
            self._append(entry)

            policy = Policy(
                policy_id=policy_id,
                body=body,
                lineage=lineage,
                score=None if result is None else result.score,
            )
            self._policies[policy_id] = policy
            if result is not None:
                self._scores.setdefault(policy_id, result.score)
            if lineage.method == METHOD_INITIAL:
                self._has_initial = True
            return policy

    def record_score(self, policy_id: str, result: ScoreResult) -> Policy:
        """Attach a score to a policy recorded without one (append-only amend)."""
        with self._lock:
            if policy_id not in self._policies:
                raise LedgerError(f"unknown policy {policy_id!r}")
            if result.transcript_id is None and result.rows:
                result.transcript_id = policy_id
                self.append_transcript(policy_id, result.rows)
            self._append(
                {
                    "type": "score",
                    "policy_id": policy_id,
                    "score": result.score,
                    "confusion": result.confusion_json(),
                    "n_parse_failures": result.n_parse_failures,
                    "verdicts": dict(result.verdicts),
                    "scoring_transcript": result.transcript_id,
                    "ts": time.time(),
                }
            )
            self._scores.setdefault(policy_id, result.score)
            updated = dataclasses.replace(
                self._policies[policy_id], score=result.score
            )
            self._policies[policy_id] = updated
            return updated

    def record_round_end(self, round_no: int, strategy: str, incumbent_id: str) -> None:
        with self._lock:
            self._append(
                {
                    "type": "round_end",
                    "round": round_no,
                    "strategy": strategy,
                    "incumbent": incumbent_id,
                    "ts": time.time(),
                }
            )

    def record_run_end(self, best: Policy) -> None:
        with self._lock:
            self._append(
                {
                    "type": "run_end",
                    "best": best.policy_id,
                    "best_score": best.score,
                    "ts": time.time(),
                }
            )

    # - queries -

    def entries(self) -> list[dict]:
        with self._lock:
            return list(self._entries)

    def policy_entries(self) -> list[dict]:
        return [e for e in self.entries() if e["type"] == "policy"]

    def load_policy(self, policy_id: str) -> Policy:
        with self._lock:
            if policy_id not in self._policies:
                raise LedgerError(f"unknown policy {policy_id!r}")
            return self._policies[policy_id]

    def has_policy(self, policy_id: str) -> bool:
        with self._lock:
            return policy_id in self._policies

    def rounds_completed(self) -> int:
        return sum(1 for e in self.entries() if e["type"] == "round_end")

    def last_incumbent_id(self) -> str | None:
        for entry in reversed(self.entries()):
            if entry["type"] == "round_end":
                return entry["incumbent"]
        return None

    def best_policy(self) -> Policy:
        """Argmax score over every scored entry; exact ties go to the earliest."""
        with self._lock:
            best_id: str | None = None
            best_score = -math.inf
            seen: set[str] = set()
            for entry in self._entries:
                if entry["type"] not in ("policy", "score"):
                    continue
                score = entry.get("score")
                policy_id = entry["policy_id"]
                if score is None or policy_id in seen:
                    continue
                seen.add(policy_id)
                if score > best_score:
                    best_score = score
                    best_id = policy_id
            if best_id is None:
                raise LedgerError("ledger has no scored policies")
            return self._policies[best_id]


# -- Scoring -------------------------------------------------------------


def _gen_request(prompt: str, model_id: str) -> ChatRequest:
    return ChatRequest.user(
        prompt,
        model_id=model_id,
        temperature=GEN_TEMPERATURE,
        max_output_tokens=GEN_MAX_TOKENS,
    )


def _verdict_request(prompt: str, model_id: str) -> ChatRequest:
    return ChatRequest.user(
        prompt,
        model_id=model_id,
        temperature=VERDICT_TEMPERATURE,
        max_output_tokens=VERDICT_MAX_TOKENS,
    )


def score_policy(
    policy: Policy | prompts.PolicyText,
    scoring_set: Sequence[FounderRecord],
    gateway: LLMGateway,
    *,
    config: TrainConfig | None = None,
    cache: ScoreCache | None = None,
    model_id: str = DEFAULT_MODEL_ID,
) -> ScoreResult:
    """Precision of a policy's verdicts over a record set.

    Every record is turned into an inference prompt and fanned out through
    the gateway; verdicts are parsed strictly. Per-record failures follow
    config.parse_failure_mode; a batch where every position failed is an
    error.
    """
    if not scoring_set:
        raise ForgeError("scoring set must be non-empty")
    body = policy.body if isinstance(policy, Policy) else policy
    config = config or TrainConfig()

    cache_key = None
    if cache is not None:
        cache_key = ScoreCache.key(
            body, scoring_set, gateway.fingerprint(), model_id, config.parse_failure_mode
        )
        hit = cache.get(cache_key)
        if hit is not None:
            return hit

    rendered = [prompts.render_inference(body, record) for record in scoring_set]
    results = gateway.complete_many(
        [_verdict_request(p, model_id) for p in rendered]
    )
    if all(isinstance(r, GatewayError) for r in results):
        raise ForgeError(
            f"all {len(results)} scoring requests failed; first: {results[0]}"
        )

    rows: list[dict] = []
    verdicts: dict[str, bool] = {}
    predictions: list[bool] = []
    labels: list[bool] = []
    n_parse_failures = 0
    for index, response, error in iter_responses(results):
        record = scoring_set[index]
        failed = False
        if error is not None:
            rows.append(
                {
                    "kind": "verdict",
                    "record_id": record.record_id,
                    "prompt": rendered[index],
                    "error": str(error),
                }
            )
            failed = True
        else:
            rows.append(
                {
                    "kind": "verdict",
                    "record_id": record.record_id,
                    "prompt": rendered[index],
                    "response": response.content,
                }
            )
            try:
                verdict = prompts.parse_verdict(response.content).value
            except prompts.VerdictParseError:
                failed = True
        if failed:
            n_parse_failures += 1
            if config.parse_failure_mode == "exclude":
                continue
            verdict = False
        verdicts[record.record_id] = verdict
        predictions.append(verdict)
        labels.append(record.success)

    if not predictions:
        raise ForgeError("no scorable verdicts remained after exclusions")
    cm = metrics.confusion(predictions, labels)
    report = metrics.summarize(cm, n_parse_failures=n_parse_failures)
    result = ScoreResult(
        score=report.precision,
        report=report,
        cm=cm,
        verdicts=verdicts,
        n_parse_failures=n_parse_failures,
        rows=rows,
    )
    if cache is not None and cache_key is not None:
        cache.put(cache_key, result)
    return result


def replay_score(entry: dict, scoring_set: Sequence[FounderRecord]) -> float:
    """Recompute a ledger entry's score from its stored verdicts."""
    verdicts = entry.get("verdicts")
    if verdicts is None:
        raise ForgeError(f"entry for {entry.get('policy_id')!r} stores no verdicts")
    labels = {r.record_id: r.success for r in scoring_set}
    predictions = []
    truth = []
    for record_id, verdict in verdicts.items():
        predictions.append(verdict)
        truth.append(labels[record_id])
    cm = metrics.confusion(predictions, truth)
    return metrics.summarize(cm).precision


# -- Generation helpers --------------------------------------------------


def _request_policy_body(
    gateway: LLMGateway,
    prompt: str,
    config: TrainConfig,
    model_id: str,
    rows: list[dict],
) -> prompts.PolicyText:
    """Generate and parse a policy, applying the over-length handling."""
    response = gateway.complete(_gen_request(prompt, model_id))
    rows.append({"kind": "generation", "prompt": prompt, "response": response.content})
    return _parse_candidate(gateway, prompt, response.content, config, model_id, rows)


def _ensure_scored(
    policy: Policy,
    scoring_set: Sequence[FounderRecord],
    gateway: LLMGateway,
    config: TrainConfig,
    ledger: RunLedger,
    cache: ScoreCache | None,
    model_id: str,
) -> Policy:
    if policy.score is not None:
        return policy
    result = score_policy(
        policy, scoring_set, gateway, config=config, cache=cache, model_id=model_id
    )
    if ledger.has_policy(policy.policy_id):
        return ledger.record_score(policy.policy_id, result)
    return dataclasses.replace(policy, score=result.score)


# -- Search operations ---------------------------------------------------


def seed_examples(
    train: Sequence[FounderRecord], per_class: int = 20
) -> list[tuple[FounderRecord, bool]]:
    """First `per_class` records of each outcome class, in train order."""
    positives = [r for r in train if r.success][:per_class]
    negatives = [r for r in train if not r.success][:per_class]
    if not positives or not negatives:
        raise ForgeError("training set must contain both outcome classes")
    return [(r, r.success) for r in positives + negatives]


def induce_initial(
    seed_examples: Sequence[tuple[FounderRecord, bool]],
    gateway: LLMGateway,
    *,
    ledger: RunLedger,
    config: TrainConfig | None = None,
    scoring_set: Sequence[FounderRecord] | None = None,
    cache: ScoreCache | None = None,
    model_id: str = DEFAULT_MODEL_ID,
) -> Policy:
    """Produce the run's root policy from labeled seed cases.

    Both outcome classes must be present. When a scoring set is given the
    policy enters the ledger already scored.
    """
    config = config or TrainConfig()
    prompt = prompts.render_initial_policy(seed_examples)
    rows: list[dict] = []
    body = _request_policy_body(gateway, prompt, config, model_id, rows)
    result = None
    if scoring_set:
        result = score_policy(
            body, scoring_set, gateway, config=config, cache=cache, model_id=model_id
        )
    return ledger.record_policy(
        body, Lineage(method=METHOD_INITIAL), result=result, gen_rows=rows
    )


def sequential_pass(
    incumbent: Policy,
    train_points: Sequence[tuple[FounderRecord, bool]],
    gateway: LLMGateway,
    config: TrainConfig,
    *,
    ledger: RunLedger,
    cache: ScoreCache | None = None,
    scoring_set: Sequence[FounderRecord] | None = None,
    round_no: int = 1,
    model_id: str = DEFAULT_MODEL_ID,
) -> Policy:
    """One greedy pass: per point, propose a candidate and keep it only if
    it scores strictly higher. Equal scores retain the incumbent."""
    if not train_points:
        return incumbent
    scoring_set = scoring_set if scoring_set is not None else [r for r, _ in train_points]
    incumbent = _ensure_scored(
        incumbent, scoring_set, gateway, config, ledger, cache, model_id
    )
    for record, outcome in train_points:
        prompt = prompts.render_update(incumbent.body, record, outcome)
        rows: list[dict] = []
        try:
            body = _request_policy_body(gateway, prompt, config, model_id, rows)
        except (GatewayError, prompts.PromptError) as exc:
            logger.warning("skipping update for %s: %s", record.record_id, exc)
            continue
        result = score_policy(
            body, scoring_set, gateway, config=config, cache=cache, model_id=model_id
        )
        candidate = ledger.record_policy(
            body,
            Lineage(
                method=METHOD_SEQUENTIAL,
                parent_id=incumbent.policy_id,
                round=round_no,
                source_record_id=record.record_id,
            ),
            result=result,
            gen_rows=rows,
        )
        if candidate.score > incumbent.score:
            incumbent = candidate
    return incumbent


def select_top(scored: Sequence[tuple[int, float]], top_fraction: float) -> list[int]:
    """Indices of the top max(1, ceil(top_fraction * N)) scores.

    Ties are broken toward the earlier index, so selection is stable under
    reordering of equal-scored candidates.
    """
    if not scored:
        return []
    if not 0 < top_fraction <= 1:
        raise ForgeError("top_fraction must be in (0, 1]")
    k = max(1, math.ceil(top_fraction * len(scored)))
    ranked = sorted(scored, key=lambda pair: (-pair[1], pair[0]))
    return [index for index, _ in ranked[:k]]


def parallel_pass(
    incumbent: Policy,
    train_points: Sequence[tuple[FounderRecord, bool]],
    gateway: LLMGateway,
    config: TrainConfig,
    *,
    ledger: RunLedger,
    cache: ScoreCache | None = None,
    scoring_set: Sequence[FounderRecord] | None = None,
    round_no: int = 1,
    model_id: str = DEFAULT_MODEL_ID,
) -> Policy:
    """Concurrent candidate generation, top-fraction selection, synthesis.

    The synthesized policy is scored and returned regardless of whether it
    beats the incumbent; the refine loop's final argmax arbitrates. If the
    synthesis step fails, the best-scoring candidate is returned instead.
    """
    if not train_points:
        return incumbent
    scoring_set = scoring_set if scoring_set is not None else [r for r, _ in train_points]
    incumbent = _ensure_scored(
        incumbent, scoring_set, gateway, config, ledger, cache, model_id
    )

    update_prompts = [
        prompts.render_update(incumbent.body, record, outcome)
        for record, outcome in train_points
    ]
    generations = gateway.complete_many(
        [_gen_request(p, model_id) for p in update_prompts]
    )

    candidates: list[tuple[int, Policy]] = []
    for index, response, error in iter_responses(generations):
        record, _ = train_points[index]
        if error is not None:
            logger.warning("candidate generation failed for %s: %s", record.record_id, error)
            continue
        rows = [
            {
                "kind": "generation",
                "prompt": update_prompts[index],
                "response": response.content,
            }
        ]
        try:
            body = _parse_candidate(gateway, update_prompts[index], response.content, config, model_id, rows)
        except prompts.PromptError as exc:
            logger.warning("unusable candidate for %s: %s", record.record_id, exc)
            continue
        result = score_policy(
            body, scoring_set, gateway, config=config, cache=cache, model_id=model_id
        )
        candidate = ledger.record_policy(
            body,
            Lineage(
                method=METHOD_SEQUENTIAL,
                parent_id=incumbent.policy_id,
                round=round_no,
                source_record_id=record.record_id,
            ),
            result=result,
            gen_rows=rows,
        )
        candidates.append((index, candidate))

    if not candidates:
        return incumbent

    selected_indices = select_top(
        [(index, candidate.score) for index, candidate in candidates],
        config.top_fraction,
    )
    by_index = dict(candidates)
    selected = [by_index[i] for i in selected_indices]

    synthesis_prompt = prompts.render_synthesis([c.body for c in selected])
    rows = []
    try:
        body = _request_policy_body(gateway, synthesis_prompt, config, model_id, rows)
    except (GatewayError, prompts.PromptError) as exc:
        logger.warning("synthesis failed, falling back to best candidate: %s", exc)
        return selected[0]
    result = score_policy(
        body, scoring_set, gateway, config=config, cache=cache, model_id=model_id
    )
    return ledger.record_policy(
        body,
        Lineage(
            method=METHOD_PARALLEL,
            parent_id=incumbent.policy_id,
            round=round_no,
        ),
        result=result,
        gen_rows=rows,
        extra={"merged_from": [c.policy_id for c in selected]},
    )


def _parse_candidate(
    gateway: LLMGateway,
    prompt: str,
    content: str,
    config: TrainConfig,
    model_id: str,
    rows: list[dict],
) -> prompts.PolicyText:
    """Parse an already-generated candidate, applying over-length handling."""
    try:
        return prompts.parse_policy(content)
    except prompts.OverLengthPolicyError:
        if config.overlength_handling == "truncate":
            return prompts.truncate_policy(content)
    reminded = prompt + OVERLENGTH_REMINDER
    retry = gateway.complete(_gen_request(reminded, model_id))
    rows.append({"kind": "generation", "prompt": reminded, "response": retry.content})
    try:
        return prompts.parse_policy(retry.content)
    except prompts.OverLengthPolicyError:
        return prompts.truncate_policy(retry.content)


def _round_strategy(strategy: str, round_no: int, rounds: int) -> str:
    if strategy != "loop":
        return strategy
    return "parallel" if round_no <= rounds // 2 else "sequential"


def _round_order(
    train_points: Sequence[tuple[FounderRecord, bool]], seed: int, round_no: int
) -> list[tuple[FounderRecord, bool]]:
    order = list(train_points)
    random.Random(f"{seed}:{round_no}").shuffle(order)
    return order


def refine_loop(
    initial: Policy,
    split: DatasetSplit,
    gateway: LLMGateway,
    config: TrainConfig,
    *,
    ledger: RunLedger,
    cache: ScoreCache | None = None,
    model_id: str = DEFAULT_MODEL_ID,
    start_round: int = 1,
    incumbent: Policy | None = None,
    round_hook=None,
) -> tuple[Policy, RunLedger]:
    """Run the configured rounds and return the ledger-wide argmax policy.

    Loop strategy runs parallel passes for the first half of the rounds
    and sequential passes for the rest. Training order is reshuffled
    deterministically each round from train_order_seed. `start_round` and
    `incumbent` support resuming an interrupted run. `round_hook`, when
    given, is called as hook(round_no, incumbent) after each round and may
    return a replacement incumbent (expert-edit checkpoints plug in here).
    """
    if start_round < 1 or start_round > config.rounds + 1:
        raise ForgeError(
            f"start_round {start_round} out of range for {config.rounds} rounds"
        )
    cache = cache if cache is not None else ScoreCache()
    scoring_set = split.subset(config.scoring_set)
    train_points = [(record, record.success) for record in split.train]
    current = incumbent if incumbent is not None else initial
    current = _ensure_scored(
        current, scoring_set, gateway, config, ledger, cache, model_id
    )

    for round_no in range(start_round, config.rounds + 1):
        strategy = _round_strategy(config.strategy, round_no, config.rounds)
        order = _round_order(train_points, config.train_order_seed, round_no)
        run_pass = sequential_pass if strategy == "sequential" else parallel_pass
        current = run_pass(
            current,
            order,
            gateway,
            config,
            ledger=ledger,
            cache=cache,
            scoring_set=scoring_set,
            round_no=round_no,
            model_id=model_id,
        )
        if round_hook is not None:
            replacement = round_hook(round_no, current)
            if replacement is not None:
                current = replacement
        ledger.record_round_end(round_no, strategy, current.policy_id)

    best = ledger.best_policy()
    ledger.record_run_end(best)
    return best, ledger


def select_representatives(
    policy: Policy,
    records: Sequence[FounderRecord],
    gateway: LLMGateway,
    *,
    config: TrainConfig | None = None,
    cache: ScoreCache | None = None,
    model_id: str = DEFAULT_MODEL_ID,
    cap: int = 10,
) -> list[tuple[FounderRecord, bool]]:
    """Misclassified records under the policy, in scoring order, capped."""
    if cap < 1:
        raise ForgeError("cap must be >= 1")
    result = score_policy(
        policy, records, gateway, config=config, cache=cache, model_id=model_id
    )
    chosen: list[tuple[FounderRecord, bool]] = []
    for record in records:
        verdict = result.verdicts.get(record.record_id)
        if verdict is not None and verdict != record.success:
            chosen.append((record, record.success))
        if len(chosen) >= cap:
            break
    return chosen


def reflect_and_fold(
    policy: Policy,
    representatives: Sequence[tuple[FounderRecord, bool]],
    gateway: LLMGateway,
    *,
    ledger: RunLedger,
    config: TrainConfig | None = None,
    cache: ScoreCache | None = None,
    scoring_set: Sequence[FounderRecord] | None = None,
    round_no: int = 0,
    model_id: str = DEFAULT_MODEL_ID,
) -> Policy:
    """One reflection per representative case, folded into a revised policy.

    The folded policy is scored and recorded whether or not it improves;
    the ledger argmax decides what ultimately wins.
    """
    if not representatives:
        raise ForgeError("reflection needs at least one representative case")
    config = config or TrainConfig()
    scoring_set = (
        scoring_set if scoring_set is not None else [r for r, _ in representatives]
    )

    reflection_prompts = [
        prompts.render_reflection(record, outcome)
        for record, outcome in representatives
    ]
    results = gateway.complete_many(
        [_gen_request(p, model_id) for p in reflection_prompts]
    )
    reflections: list[str] = []
    rows: list[dict] = []
    for index, response, error in iter_responses(results):
        record, _ = representatives[index]
        if error is not None:
            logger.warning("reflection failed for %s: %s", record.record_id, error)
            continue
        reflections.append(response.content)
        rows.append(
            {
                "kind": "reflection",
                "record_id": record.record_id,
                "prompt": reflection_prompts[index],
                "response": response.content,
            }
        )
    if not reflections:
        raise ForgeError("every reflection request failed")

    fold_prompt = prompts.render_reflection_fold(policy.body, reflections)
    body = _request_policy_body(gateway, fold_prompt, config, model_id, rows)
    result = score_policy(
        body, scoring_set, gateway, config=config, cache=cache, model_id=model_id
    )
    return ledger.record_policy(
        body,
        Lineage(
            method=METHOD_REFLECTION, parent_id=policy.policy_id, round=round_no
        ),
        result=result,
        gen_rows=rows,
    )


def expert_checkpoint(
    policy: Policy,
    edited_body_path: str | Path,
    *,
    gateway: LLMGateway,
    ledger: RunLedger,
    scoring_set: Sequence[FounderRecord],
    config: TrainConfig | None = None,
    cache: ScoreCache | None = None,
    round_no: int = 0,
    model_id: str = DEFAULT_MODEL_ID,
    force: bool = False,
) -> Policy:
    """Score a hand-edited policy file and adopt it only if it wins.

    The edited candidate is ledger-recorded either way; adoption follows
    the same strictly-better rule as the search unless `force` is set.
    """
    path = Path(edited_body_path)
    if not path.exists():
        raise ForgeError(f"edited policy file not found: {path}")
    body = prompts.parse_policy(path.read_text(encoding="utf-8"))
    config = config or TrainConfig()
    policy = _ensure_scored(
        policy, scoring_set, gateway, config, ledger, cache, model_id
    )
    result = score_policy(
        body, scoring_set, gateway, config=config, cache=cache, model_id=model_id
    )
    edited = ledger.record_policy(
        body,
        Lineage(method=METHOD_EXPERT, parent_id=policy.policy_id, round=round_no),
        result=result,
    )
    if force or edited.score > policy.score:
        return edited
    return policy
