"""scikit-learn compatible facade over the policy search engine.

`PolicyClassifier.fit` induces and refines a policy from (linkedin,
crunchbase) text pairs; `predict` runs policy-guided verdict prompts.
All hyperparameters follow the sklearn convention: stored verbatim in
__init__, validated at fit time, discoverable via get_params.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from policyforge import prompts
from policyforge.dataset import DatasetSplit, FounderRecord
from policyforge.forge import (
    RunLedger,
    ScoreCache,
    TrainConfig,
    induce_initial,
    refine_loop,
    seed_examples,
)
from policyforge.gateway import (
    DEFAULT_MODEL_ID,
    VERDICT_MAX_TOKENS,
    VERDICT_TEMPERATURE,
    BackendConfig,
    ChatRequest,
    LLMGateway,
    MockScript,
    iter_responses,
)


def validate_text_pairs(X) -> list[tuple[str, str]]:
    """Coerce X into (linkedin, crunchbase) string pairs.

    Accepts any sequence (or 2D array) of two-element text rows; anything
    else raises ValueError with the offending row index.
    """
    if isinstance(X, str):
        raise ValueError("X must be a sequence of (linkedin, crunchbase) pairs")
    if hasattr(X, "tolist"):
        X = X.tolist()
    pairs: list[tuple[str, str]] = []
    for index, row in enumerate(X):
        if isinstance(row, str) or not hasattr(row, "__len__") or len(row) != 2:
            raise ValueError(
                f"row {index} is not a (linkedin, crunchbase) pair: {row!r}"
            )
        linkedin, cb = row[0], row[1]
        if not isinstance(linkedin, str) or not isinstance(cb, str):
            raise ValueError(f"row {index} must contain two strings")
        if not linkedin.strip() or not cb.strip():
            raise ValueError(f"row {index} has an empty profile field")
        pairs.append((linkedin, cb))
    if not pairs:
        raise ValueError("X is empty")
    return pairs


def validate_labels(y, n_rows: int) -> list[bool]:
    """Coerce y into booleans aligned with the rows of X."""
    if hasattr(y, "tolist"):
        y = y.tolist()
    labels = list(y)
    if len(labels) != n_rows:
        raise ValueError(f"X has {n_rows} rows but y has {len(labels)} labels")
    coerced: list[bool] = []
    for index, value in enumerate(labels):
        if isinstance(value, bool):
            coerced.append(value)
        elif isinstance(value, (int, np.integer)) and value in (0, 1):
            coerced.append(bool(value))
        else:
            raise ValueError(f"label {index} is not boolean-like: {value!r}")
    return coerced


def _records_from(pairs: list[tuple[str, str]], labels: list[bool] | None) -> list[FounderRecord]:
    return [
        FounderRecord(
            record_id=f"x{index:05d}",
            linkedin_profile=linkedin,
            cb_profile=cb,
            success=bool(labels[index]) if labels is not None else False,
        )
        for index, (linkedin, cb) in enumerate(pairs)
    ]


class PolicyClassifier(BaseEstimator, ClassifierMixin):
    """Binary classifier driven by an induced natural-language policy.

    fit() runs the full induce-and-refine search on the training pairs;
    predict() reuses the best policy found. With the default mock backend
    the whole estimator is deterministic and offline.
    """

    def __init__(
        self,
        rounds: int = 2,
        strategy: str = "loop",
        top_fraction: float = 0.10,
        train_order_seed: int = 0,
        backend: str = "mock",
        endpoint: str = "",
        credential_env: str = "LLM_API_KEY",
        model_id: str = DEFAULT_MODEL_ID,
        max_in_flight: int = 8,
        mock_script: MockScript | None = None,
        seed_per_class: int = 20,
    ) -> None:
        self.rounds = rounds
        self.strategy = strategy
        self.top_fraction = top_fraction
        self.train_order_seed = train_order_seed
        self.backend = backend
        self.endpoint = endpoint
        self.credential_env = credential_env
        self.model_id = model_id
        self.max_in_flight = max_in_flight
        self.mock_script = mock_script
        self.seed_per_class = seed_per_class

    def _make_gateway(self) -> LLMGateway:
        backend_config = BackendConfig(
            kind=self.backend,
            endpoint=self.endpoint,
            credential_env=self.credential_env,
            max_in_flight=self.max_in_flight,
        )
        return LLMGateway(backend_config, mock_script=self.mock_script)

    def fit(self, X, y) -> "PolicyClassifier":
        pairs = validate_text_pairs(X)
        labels = validate_labels(y, len(pairs))
        if len(set(labels)) < 2:
            raise ValueError("y must contain both classes")
        config = TrainConfig(
            strategy=self.strategy,
            rounds=self.rounds,
            train_order_seed=self.train_order_seed,
            top_fraction=self.top_fraction,
        )
        records = _records_from(pairs, labels)
        gateway = self._make_gateway()
        ledger = RunLedger("fit")
        initial = induce_initial(
            seed_examples(records, per_class=self.seed_per_class),
            gateway,
            ledger=ledger,
            config=config,
            scoring_set=records,
            model_id=self.model_id,
        )
        best, _ = refine_loop(
            initial,
            DatasetSplit(train=tuple(records)),
            gateway,
            config,
            ledger=ledger,
            cache=ScoreCache(),
            model_id=self.model_id,
        )
        self.best_policy_ = best
        self.ledger_ = ledger
        self.classes_ = np.array([False, True])
        self.n_features_in_ = 2
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "best_policy_"):
            raise NotFittedError("fit the classifier before calling predict")
        pairs = validate_text_pairs(X)
        records = _records_from(pairs, None)
        gateway = self._make_gateway()
        requests = [
            ChatRequest.user(
                prompts.render_inference(self.best_policy_.body, record),
                model_id=self.model_id,
                temperature=VERDICT_TEMPERATURE,
                max_output_tokens=VERDICT_MAX_TOKENS,
            )
            for record in records
        ]
        results = gateway.complete_many(requests)
        verdicts: list[bool] = []
        for _, response, error in iter_responses(results):
            if error is not None:
                verdicts.append(False)
                continue
            try:
                verdicts.append(prompts.parse_verdict(response.content).value)
            except prompts.VerdictParseError:
                verdicts.append(False)
        return np.array(verdicts, dtype=bool)
