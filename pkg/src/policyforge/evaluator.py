"""Evaluation harness for vanilla and policy-guided inference.

Runs verdict prompts over named evaluation subsets, computes per-subset
metrics plus a mean row, and persists both machine-readable results and a
markdown table. Per-record verdicts and full prompt/response transcripts
are stored so every report can be recomputed, and audited for prompt
content, without re-querying a backend.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from policyforge import metrics, prompts
from policyforge.dataset import DatasetSplit
from policyforge.forge import Policy
from policyforge.gateway import (
    DEFAULT_MODEL_ID,
    VERDICT_TEMPERATURE,
    ChatRequest,
    GatewayError,
    LLMGateway,
    VERDICT_MAX_TOKENS,
    iter_responses,
)


class EvalError(Exception):
    """Evaluation precondition or configuration failure."""


@dataclass(frozen=True)
class EvalSpec:
    mode: str = "with_policy"  # vanilla | with_policy
    policy_id: str | None = None
    subsets: tuple[str, ...] = ("std",)
    beta: float = 0.5
    max_in_flight: int = 8
    parse_failure_mode: str = "count_as_false"  # | exclude

    def __post_init__(self) -> None:
        if self.mode not in ("vanilla", "with_policy"):
            raise EvalError(f"unknown eval mode {self.mode!r}")
        if self.mode == "with_policy" and not self.policy_id:
            raise EvalError("with_policy evaluation requires a policy_id")
        if not self.subsets:
            raise EvalError("at least one subset name is required")
        if len(set(self.subsets)) != len(self.subsets):
            raise EvalError("subset names must be unique")
        if self.beta <= 0:
            raise EvalError("beta must be > 0")
        if self.max_in_flight < 1:
            raise EvalError("max_in_flight must be >= 1")
        if self.parse_failure_mode not in ("count_as_false", "exclude"):
            raise EvalError(f"unknown parse_failure_mode {self.parse_failure_mode!r}")


@dataclass
class EvalResult:
    spec: EvalSpec
    eval_id: str
    per_subset: dict[str, metrics.MetricsReport]
    verdicts: dict[str, dict[str, bool]]
    failures: dict[str, list[str]]
    aggregate: metrics.MetricsReport
    fingerprint: dict = field(default_factory=dict)
    transcripts: dict[str, list[dict]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "eval_id": self.eval_id,
            "mode": self.spec.mode,
            "policy_id": self.spec.policy_id,
            "beta": self.spec.beta,
            "fingerprint": self.fingerprint,
            "subsets": {
                name: json.loads(report.to_json())
                for name, report in self.per_subset.items()
            },
            "aggregate": json.loads(self.aggregate.to_json()),
        }


def _default_eval_id(spec: EvalSpec) -> str:
    tag = spec.policy_id if spec.mode == "with_policy" else "vanilla"
    digest = hashlib.sha256(",".join(spec.subsets).encode("utf-8")).hexdigest()[:8]
    return f"eval-{tag}-{digest}"


def evaluate(
    spec: EvalSpec,
    split: DatasetSplit,
    gateway: LLMGateway,
    *,
    policy: Policy | prompts.PolicyText | None = None,
    out_root: str | Path | None = None,
    eval_id: str | None = None,
    model_id: str = DEFAULT_MODEL_ID,
) -> EvalResult:
    """Collect verdicts for every named subset and report metrics.

    Vanilla mode rejects a supplied policy outright so no policy text can
    leak into its prompts. A subset where every request fails re-raises
    the first backend error.
    """
    if spec.mode == "with_policy":
        if policy is None:
            raise EvalError(f"policy {spec.policy_id!r} was not supplied")
    elif policy is not None:
        raise EvalError("vanilla evaluation does not accept a policy")
    body = policy.body if isinstance(policy, Policy) else policy
    eval_id = eval_id or _default_eval_id(spec)

    per_subset: dict[str, metrics.MetricsReport] = {}
    verdicts: dict[str, dict[str, bool]] = {}
    failures: dict[str, list[str]] = {}
    transcripts: dict[str, list[dict]] = {}
    for name in spec.subsets:
        records = split.subset(name)
        if not records:
            raise EvalError(f"subset {name!r} is empty")
        rendered = [
            prompts.render_vanilla(r) if spec.mode == "vanilla" else prompts.render_inference(body, r)
            for r in records
        ]
        results = gateway.complete_many(
            [
                ChatRequest.user(
                    p,
                    model_id=model_id,
                    temperature=VERDICT_TEMPERATURE,
                    max_output_tokens=VERDICT_MAX_TOKENS,
                )
                for p in rendered
            ]
        )
        if all(isinstance(r, GatewayError) for r in results):
            raise results[0]

        subset_verdicts: dict[str, bool] = {}
        subset_failures: list[str] = []
        rows: list[dict] = []
        predictions: list[bool] = []
        labels: list[bool] = []
        for index, response, error in iter_responses(results):
            record = records[index]
            row = {"record_id": record.record_id, "prompt": rendered[index]}
            failed = False
            if error is not None:
                row["error"] = str(error)
                failed = True
            else:
                row["response"] = response.content
                try:
                    verdict = prompts.parse_verdict(response.content).value
                except prompts.VerdictParseError:
                    failed = True
            rows.append(row)
            if failed:
                subset_failures.append(record.record_id)
                if spec.parse_failure_mode == "exclude":
                    continue
                verdict = False
            subset_verdicts[record.record_id] = verdict
            predictions.append(verdict)
            labels.append(record.success)

        if not predictions:
            raise EvalError(f"no scorable verdicts for subset {name!r}")
        cm = metrics.confusion(predictions, labels)
        per_subset[name] = metrics.summarize(
            cm, beta=spec.beta, n_parse_failures=len(subset_failures)
        )
        verdicts[name] = subset_verdicts
        failures[name] = subset_failures
        transcripts[name] = rows

    result = EvalResult(
        spec=spec,
        eval_id=eval_id,
        per_subset=per_subset,
        verdicts=verdicts,
        failures=failures,
        aggregate=metrics.aggregate(list(per_subset.values())),
        fingerprint={
            "backend": gateway.fingerprint(),
            "model_id": model_id,
            "temperature": VERDICT_TEMPERATURE,
        },
        transcripts=transcripts,
    )
    if out_root is not None:
        persist(result, out_root)
    return result


def stability_suite(
    policy: Policy,
    subset_names: Sequence[str],
    split: DatasetSplit,
    gateway: LLMGateway,
    *,
    beta: float = 0.5,
    out_root: str | Path | None = None,
    eval_id: str | None = None,
    model_id: str = DEFAULT_MODEL_ID,
) -> EvalResult:
    """Evaluate one policy across several disjoint subsets with a mean row."""
    if len(subset_names) < 2:
        raise EvalError("stability suite needs at least two subsets")
    spec = EvalSpec(
        mode="with_policy",
        policy_id=policy.policy_id,
        subsets=tuple(subset_names),
        beta=beta,
    )
    return evaluate(
        spec,
        split,
        gateway,
        policy=policy,
        out_root=out_root,
        eval_id=eval_id,
        model_id=model_id,
    )


def render_report(result: EvalResult, format: str = "markdown") -> str:
    """Report table: one row per subset plus a Mean row.

    Markdown columns follow the fixed order Test Set | Accuracy |
    Precision | Recall | F_beta, values at three decimals.
    """
    if not result.per_subset:
        raise EvalError("result holds no subset reports")
    if format == "json":
        return json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n"
    if format != "markdown":
        raise EvalError(f"unknown report format {format!r}")

    f_label = f"F_{result.spec.beta:g}"
    lines = [
        f"| Test Set | Accuracy | Precision | Recall | {f_label} |",
        "| --- | --- | --- | --- | --- |",
    ]
    for name, report in result.per_subset.items():
        lines.append(_row(name, report))
    lines.append(_row("Mean", result.aggregate))
    return "\n".join(lines) + "\n"


def _row(name: str, report: metrics.MetricsReport) -> str:
    return (
        f"| {name} | {report.accuracy:.3f} | {report.precision:.3f} "
        f"| {report.recall:.3f} | {report.f_beta:.3f} |"
    )


def persist(result: EvalResult, out_root: str | Path) -> Path:
    """Write eval/<eval_id>/<subset>.json files and a summary.md table."""
    out_dir = Path(out_root) / "eval" / result.eval_id
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in result.spec.subsets:
        payload = {
            "subset": name,
            "eval_id": result.eval_id,
            "mode": result.spec.mode,
            "policy_id": result.spec.policy_id,
            "beta": result.spec.beta,
            "fingerprint": result.fingerprint,
            "report": json.loads(result.per_subset[name].to_json()),
            "verdicts": result.verdicts[name],
            "failures": result.failures[name],
            "transcripts": result.transcripts.get(name, []),
        }
        (out_dir / f"{name}.json").write_text(
            json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    (out_dir / "summary.md").write_text(render_report(result), encoding="utf-8")
    return out_dir
