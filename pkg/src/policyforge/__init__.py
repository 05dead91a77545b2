"""Induce, refine, and evaluate natural-language decision policies.

A policy is a short numbered list of plain-text rules embedded into
classification prompts. The package searches policy space by hill
climbing on training-set precision, with an LLM acting as both the
policy generator and the classifier, and evaluates the result on
heavily imbalanced founder-outcome data.
"""

from __future__ import annotations

from importlib import resources

from policyforge.config import AppConfig, ConfigError, load_config
from policyforge.dataset import (
    DataError,
    DatasetSplit,
    FounderRecord,
    SignalSpec,
    SplitSpec,
    load_records,
    make_split,
    sanitize,
    save_records,
    synth_fixture,
)
from policyforge.evaluator import EvalResult, EvalSpec, evaluate, render_report, stability_suite
from policyforge.forge import (
    ForgeError,
    Lineage,
    Policy,
    RunLedger,
    ScoreCache,
    TrainConfig,
    expert_checkpoint,
    induce_initial,
    parallel_pass,
    refine_loop,
    reflect_and_fold,
    score_policy,
    sequential_pass,
)
from policyforge.gateway import (
    BackendConfig,
    ChatRequest,
    ChatResponse,
    GatewayError,
    LLMGateway,
    MockScript,
    RetryPolicy,
)
from policyforge.metrics import ConfusionMatrix, MetricsReport, base_rate, f_beta, lift
from policyforge.prompts import PolicyText, PromptKind, Verdict, parse_policy, parse_verdict

__version__ = "0.1.0"


def example_policy() -> PolicyText:
    """The bundled 18-rule reference policy."""
    text = (
        resources.files("policyforge").joinpath("data/example_policy.txt").read_text("utf-8")
    )
    return parse_policy(text)


__all__ = [
    "AppConfig",
    "BackendConfig",
    "ChatRequest",
    "ChatResponse",
    "ConfigError",
    "ConfusionMatrix",
    "DataError",
    "DatasetSplit",
    "EvalResult",
    "EvalSpec",
    "ForgeError",
    "FounderRecord",
    "GatewayError",
    "LLMGateway",
    "Lineage",
    "MetricsReport",
    "MockScript",
    "Policy",
    "PolicyText",
    "PromptKind",
    "RetryPolicy",
    "RunLedger",
    "ScoreCache",
    "SignalSpec",
    "SplitSpec",
    "TrainConfig",
    "Verdict",
    "base_rate",
    "evaluate",
    "example_policy",
    "expert_checkpoint",
    "f_beta",
    "induce_initial",
    "lift",
    "load_config",
    "load_records",
    "make_split",
    "parallel_pass",
    "parse_policy",
    "parse_verdict",
    "refine_loop",
    "reflect_and_fold",
    "render_report",
    "sanitize",
    "save_records",
    "score_policy",
    "sequential_pass",
    "stability_suite",
    "synth_fixture",
]
