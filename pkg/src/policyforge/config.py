"""Declarative app configuration with strict validation.

One JSON file describes a whole workflow: data location, split shape,
backend, training, and evaluation defaults. Unknown keys are rejected at
every nesting level so typos fail loudly instead of silently reverting to
defaults. CLI flags override individual fields after load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from policyforge.dataset import SplitError, SplitSpec
from policyforge.forge import ForgeError, TrainConfig
from policyforge.gateway import DEFAULT_MODEL_ID, BackendConfig, RetryPolicy


class ConfigError(Exception):
    """Malformed or contradictory configuration."""


DEFAULT_SPLIT = SplitSpec(
    seed=0,
    train_pos=120,
    train_neg=120,
    eval_subsets=(("std", 100, 1000), ("realistic", 40, 2000)),
)


@dataclass(frozen=True)
class EvalDefaults:
    beta: float = 0.5
    subsets: tuple[str, ...] = ("std",)
    max_in_flight: int = 8
    parse_failure_mode: str = "count_as_false"

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ConfigError("eval beta must be > 0")
        if self.max_in_flight < 1:
            raise ConfigError("eval max_in_flight must be >= 1")
        if self.parse_failure_mode not in ("count_as_false", "exclude"):
            raise ConfigError(
                f"unknown eval parse_failure_mode {self.parse_failure_mode!r}"
            )


@dataclass(frozen=True)
class AppConfig:
    data_path: str | None = None
    output_root: str = "runs"
    model_id: str = DEFAULT_MODEL_ID
    mock_script: str | None = None
    split: SplitSpec = field(default_factory=lambda: DEFAULT_SPLIT)
    backend: BackendConfig = field(default_factory=BackendConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalDefaults = field(default_factory=EvalDefaults)


def _check_keys(payload: dict, allowed: set[str], context: str) -> None:
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")


def _parse_split(payload: dict) -> SplitSpec:
    _check_keys(payload, {"seed", "train_pos", "train_neg", "eval_subsets"}, "split")
    subsets = payload.get("eval_subsets", [list(s) for s in DEFAULT_SPLIT.eval_subsets])
    try:
        eval_subsets = tuple((str(n), int(p), int(g)) for n, p, g in subsets)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"split eval_subsets must be [name, pos, neg] triples: {exc}")
    return SplitSpec(
        seed=int(payload.get("seed", DEFAULT_SPLIT.seed)),
        train_pos=int(payload.get("train_pos", DEFAULT_SPLIT.train_pos)),
        train_neg=int(payload.get("train_neg", DEFAULT_SPLIT.train_neg)),
        eval_subsets=eval_subsets,
    )


def _parse_backend(payload: dict) -> BackendConfig:
    allowed = {f.name for f in fields(BackendConfig)}
    _check_keys(payload, allowed, "backend")
    payload = dict(payload)
    retry_payload = payload.pop("retry", None)
    retry = RetryPolicy()
    if retry_payload is not None:
        _check_keys(
            retry_payload,
            {"max_attempts", "base_backoff_s", "multiplier"},
            "backend.retry",
        )
        retry = RetryPolicy(**retry_payload)
    return BackendConfig(retry=retry, **payload)


def _parse_train(payload: dict) -> TrainConfig:
    return TrainConfig.from_json(payload)


def _parse_eval(payload: dict) -> EvalDefaults:
    allowed = {f.name for f in fields(EvalDefaults)}
    _check_keys(payload, allowed, "eval")
    payload = dict(payload)
    if "subsets" in payload:
        payload["subsets"] = tuple(payload["subsets"])
    return EvalDefaults(**payload)


def from_dict(payload: dict) -> AppConfig:
    _check_keys(
        payload,
        {
            "data_path",
            "output_root",
            "model_id",
            "mock_script",
            "split",
            "backend",
            "train",
            "eval",
        },
        "config",
    )
    try:
        return AppConfig(
            data_path=payload.get("data_path"),
            output_root=payload.get("output_root", "runs"),
            model_id=payload.get("model_id", DEFAULT_MODEL_ID),
            mock_script=payload.get("mock_script"),
            split=_parse_split(payload.get("split", {})),
            backend=_parse_backend(payload.get("backend", {})),
            train=_parse_train(payload.get("train", {})),
            eval=_parse_eval(payload.get("eval", {})),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, ForgeError, SplitError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc


def load_config(path: str | Path | None) -> AppConfig:
    """Read a config file, or return pure defaults when no path is given."""
    if path is None:
        return AppConfig()
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        payload = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    return from_dict(payload)


def override(config: AppConfig, **changes) -> AppConfig:
    """Apply non-None flag overrides onto a loaded config."""
    effective = {k: v for k, v in changes.items() if v is not None}
    return replace(config, **effective) if effective else config
