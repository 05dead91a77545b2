"""Prompt templates and strict output parsing.

The five core templates are a frozen interface: tests pin their rendered
form byte-for-byte against golden files, and the scripted mock backend
recognises prompts by their fixed marker sentences. Change a template and
you change the wire contract.

Two further templates (candidate synthesis and reflection folding) are
used by the refinement engine; they reuse the same constraint wording.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Sequence

if TYPE_CHECKING:
    from policyforge.dataset import FounderRecord

MAX_POLICY_RULES = 20


class PromptError(Exception):
    """Raised when a prompt cannot be rendered or an output cannot be parsed."""


class VerdictParseError(PromptError):
    """Model output whose first token is neither True nor False."""


class EmptyPolicyError(PromptError):
    """Model output with no non-empty lines."""


class OverLengthPolicyError(PromptError):
    """Policy output exceeding the rule cap; carries the offending count."""

    def __init__(self, count: int) -> None:
        super().__init__(f"policy has {count} rules, limit is {MAX_POLICY_RULES}")
        self.count = count


class PromptKind(str, Enum):
    INFERENCE_WITH_POLICY = "inference_with_policy"
    INFERENCE_VANILLA = "inference_vanilla"
    INITIAL_POLICY = "initial_policy"
    POLICY_UPDATE = "policy_update"
    REFLECTION = "reflection"


@dataclass(frozen=True)
class PolicyText:
    """An ordered rule list plus the raw text it was parsed from."""

    rules: tuple[str, ...]
    raw: str


@dataclass(frozen=True)
class Verdict:
    """A normalized True/False answer plus the raw model text."""

    value: bool
    raw: str


_EXPERT_HEADER = (
    "You are an expert in venture capital, specializing in evaluating startup founders.\n"
    "Your task is to distinguish successful founders from unsuccessful ones.\n"
)

_PROFILE_BLOCK = (
    "Given the founder's profile:\n"
    "Founder's LinkedIn Profile: {linkedin}\n"
    "Crunchbase information: {cb}\n"
)

_DECIDE_FOOTER = (
    "Based on this information, determine if the founder will succeed.\n"
    "Answer using only one word: True or False\n"
)

INFERENCE_WITH_POLICY_TEMPLATE = (
    _EXPERT_HEADER
    + "Here is a policy to assist you: {policy}\n"
    + "\n"
    + _PROFILE_BLOCK
    + "\n"
    + _DECIDE_FOOTER
)

INFERENCE_VANILLA_TEMPLATE = (
    _EXPERT_HEADER + "\n" + _PROFILE_BLOCK + "\n" + _DECIDE_FOOTER
)

POLICY_UPDATE_TEMPLATE = (
    "You are an expert in venture capital tasked with distinguishing successful "
    "founders from unsuccessful ones.\n"
    "Based on past experience, you have established the following policy: {policy}.\n"
    "\n"
    "Recently, a new case was discovered:\n"
    "Founder's LinkedIn Profile: {linkedin}\n"
    "Crunchbase information: {cb}\n"
    "The founder was eventually {outcome}.\n"
    "\n"
    "Summarize this new case to refine and expand the existing policy.\n"
    "Provide only the updated policies as your response.\n"
    "Your policy should be well-structured and have fewer than 20 rows.\n"
)

REFLECTION_TEMPLATE = (
    _EXPERT_HEADER
    + "\n"
    + _PROFILE_BLOCK
    + "The founder was eventually {outcome}.\n"
    + "\n"
    + "In ONE SENTENCE, using the founder's background,\n"
    + "clearly explain the key reason why this founder {verb}.\n"
)

INITIAL_POLICY_HEADER = (
    "You are an expert in venture capital tasked with distinguishing successful "
    "founders from unsuccessful ones.\n"
    "Below are labeled cases of startup founders and their eventual outcomes.\n"
)

INITIAL_POLICY_FOOTER = (
    "Based on these cases, produce a policy for distinguishing successful "
    "founders from unsuccessful ones.\n"
    "Provide only the policies as your response.\n"
    "Your policy should be well-structured and have fewer than 20 rows.\n"
)

SYNTHESIS_HEADER = (
    "You are an expert in venture capital tasked with distinguishing successful "
    "founders from unsuccessful ones.\n"
    "The following candidate policies scored well against past cases:\n"
)

SYNTHESIS_FOOTER = (
    "Merge these candidates into a single well-structured policy with fewer than 20 rows.\n"
    "Provide only the updated policies as your response.\n"
)

REFLECTION_FOLD_HEADER = (
    "You are an expert in venture capital tasked with distinguishing successful "
    "founders from unsuccessful ones.\n"
    "Based on past experience, you have established the following policy: {policy}.\n"
    "\n"
    "Reviewers studied representative cases and noted the following reflections:\n"
)

REFLECTION_FOLD_FOOTER = (
    "Use these reflections to revise and expand the existing policy.\n"
    "Provide only the updated policies as your response.\n"
    "Your policy should be well-structured and have fewer than 20 rows.\n"
)


def render_inference(policy: PolicyText, record: "FounderRecord") -> str:
    return INFERENCE_WITH_POLICY_TEMPLATE.format(
        policy=policy.raw,
        linkedin=record.linkedin_profile,
        cb=record.cb_profile,
    )


def render_vanilla(record: "FounderRecord") -> str:
    return INFERENCE_VANILLA_TEMPLATE.format(
        linkedin=record.linkedin_profile,
        cb=record.cb_profile,
    )


def render_initial_policy(examples: Sequence[tuple["FounderRecord", bool]]) -> str:
    """Embed every labeled example; both classes must be present."""
    if not examples:
        raise PromptError("initial policy prompt needs at least one example")
    outcomes = {outcome for _, outcome in examples}
    if len(outcomes) < 2:
        raise PromptError(
            "initial policy prompt needs both successful and unsuccessful examples"
        )
    parts = [INITIAL_POLICY_HEADER, "\n"]
    for i, (record, outcome) in enumerate(examples, start=1):
        status = "successful" if outcome else "unsuccessful"
        parts.append(
            f"Case {i}:\n"
            f"Founder's LinkedIn Profile: {record.linkedin_profile}\n"
            f"Crunchbase information: {record.cb_profile}\n"
            f"The founder was eventually {status}.\n\n"
        )
    parts.append(INITIAL_POLICY_FOOTER)
    return "".join(parts)


def render_update(policy: PolicyText, record: "FounderRecord", outcome: bool) -> str:
    return POLICY_UPDATE_TEMPLATE.format(
        policy=policy.raw,
        linkedin=record.linkedin_profile,
        cb=record.cb_profile,
        outcome="successful" if outcome else "unsuccessful",
    )


def render_reflection(record: "FounderRecord", outcome: bool) -> str:
    return REFLECTION_TEMPLATE.format(
        linkedin=record.linkedin_profile,
        cb=record.cb_profile,
        outcome="successful" if outcome else "unsuccessful",
        verb="succeeded" if outcome else "failed",
    )


def render_synthesis(policies: Sequence[PolicyText]) -> str:
    if not policies:
        raise PromptError("synthesis prompt needs at least one candidate policy")
    parts = [SYNTHESIS_HEADER, "\n"]
    for i, policy in enumerate(policies, start=1):
        parts.append(f"Candidate policy {i}:\n{policy.raw}\n\n")
    parts.append(SYNTHESIS_FOOTER)
    return "".join(parts)


def render_reflection_fold(policy: PolicyText, reflections: Sequence[str]) -> str:
    if not reflections:
        raise PromptError("reflection fold needs at least one reflection")
    parts = [REFLECTION_FOLD_HEADER.format(policy=policy.raw), "\n"]
    for i, reflection in enumerate(reflections, start=1):
        parts.append(f"{i}. {reflection.strip()}\n")
    parts.append("\n")
    parts.append(REFLECTION_FOLD_FOOTER)
    return "".join(parts)


_TRAILING_PUNCT = ".,;:!?\"')]}"
_ENUM_MARKER = re.compile(r"^\s*(?:\d+[.)]\s*|[-*•]\s+)")


def parse_verdict(raw: str) -> Verdict:
    """Normalize a model answer into True/False.

    Only the first whitespace-delimited token counts; hedged prose that
    merely mentions "true" somewhere is rejected rather than guessed.
    """
    tokens = raw.split()
    if not tokens:
        raise VerdictParseError(f"empty verdict output: {raw!r}")
    token = tokens[0].rstrip(_TRAILING_PUNCT).casefold()
    if token == "true":
        return Verdict(value=True, raw=raw)
    if token == "false":
        return Verdict(value=False, raw=raw)
    raise VerdictParseError(f"first token {tokens[0]!r} is neither True nor False")


def parse_policy(raw: str) -> PolicyText:
    """Split model output into rules, tolerating enumeration markers.

    Markers ("1.", "-", "*", bullets) are stripped from the counted rules
    but the raw text is preserved untouched.
    """
    lines = [line.strip() for line in raw.splitlines()]
    rules = []
    for line in lines:
        if not line:
            continue
        rule = _ENUM_MARKER.sub("", line).strip()
        if rule:
            rules.append(rule)
    if not rules:
        raise EmptyPolicyError(f"no rules found in policy output: {raw!r}")
    if len(rules) > MAX_POLICY_RULES:
        raise OverLengthPolicyError(len(rules))
    return PolicyText(rules=tuple(rules), raw=raw)


def truncate_policy(raw: str, limit: int = MAX_POLICY_RULES) -> PolicyText:
    """Keep the first `limit` rule-bearing lines of an over-length policy."""
    kept: list[str] = []
    count = 0
    for line in raw.splitlines():
        stripped = _ENUM_MARKER.sub("", line.strip()).strip()
        if stripped:
            if count >= limit:
                break
            count += 1
        kept.append(line)
    return parse_policy("\n".join(kept))


def classify_prompt(prompt: str) -> str:
    """Identify a rendered prompt by its fixed marker sentences.

    Returns one of the PromptKind values, or "synthesis" / "reflection_fold"
    for the refinement-engine templates. Used by the scripted mock backend
    to dispatch behaviour.
    """
    if "Merge these candidates into a single well-structured policy" in prompt:
        return "synthesis"
    if "Use these reflections to revise and expand the existing policy" in prompt:
        return "reflection_fold"
    if "Summarize this new case to refine and expand the existing policy" in prompt:
        return PromptKind.POLICY_UPDATE.value
    if "clearly explain the key reason why this founder" in prompt:
        return PromptKind.REFLECTION.value
    if "Based on these cases, produce a policy" in prompt:
        return PromptKind.INITIAL_POLICY.value
    if "Here is a policy to assist you:" in prompt:
        return PromptKind.INFERENCE_WITH_POLICY.value
    if "Answer using only one word: True or False" in prompt:
        return PromptKind.INFERENCE_VANILLA.value
    raise PromptError("prompt does not match any known template")
