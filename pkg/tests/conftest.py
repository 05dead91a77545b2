"""Shared fixtures: hand-built records, planted-keyword splits, mock gateways."""

from __future__ import annotations

import pytest

from policyforge import dataset, forge, gateway, prompts

# Fixed records used by the golden prompt files. Keep in sync with
# tests/fixtures/prompts/*.txt, which embed these profiles verbatim.
RECORD_POS = dataset.FounderRecord(
    record_id="r-pos",
    linkedin_profile=(
        "Jordan Vale. CTO at Acme Robotics. Ten years in autonomous systems."
    ),
    cb_profile="Acme Robotics. Raised a seed round in 2019.",
    success=True,
)
RECORD_NEG = dataset.FounderRecord(
    record_id="r-neg",
    linkedin_profile="Sam Osei. Sales lead at Brightline Media.",
    cb_profile="Brightline Media. Closed in 2021.",
    success=False,
)

TWO_RULE_POLICY = prompts.PolicyText(
    rules=("Favor repeat founders.", "Favor technical depth."),
    raw="1. Favor repeat founders.\n2. Favor technical depth.",
)

# One rule whose only long word is the planted fixture keyword, so the
# mock verdict rule predicts True exactly on records carrying it.
KEYWORD_POLICY = prompts.PolicyText(
    rules=("Favor people whose work shows patented.",),
    raw="1. Favor people whose work shows patented.",
)


def make_mock_gateway(
    script: gateway.MockScript | None = None, **config
) -> gateway.LLMGateway:
    cfg = gateway.BackendConfig(kind="mock", **config)
    return gateway.LLMGateway(cfg, mock_script=script or gateway.MockScript())


def planted_split(
    *,
    fixture_seed: int = 11,
    pos: int = 30,
    neg: int = 30,
    correlation: float = 0.9,
    keyword: str = "patented",
    split_seed: int = 0,
    train_pos: int | None = None,
    train_neg: int | None = None,
    eval_subsets: tuple = (),
) -> dataset.DatasetSplit:
    records = dataset.synth_fixture(
        seed=fixture_seed,
        pos=pos,
        neg=neg,
        signal=dataset.SignalSpec(keyword=keyword, correlation=correlation),
    )
    spec = dataset.SplitSpec(
        seed=split_seed,
        train_pos=pos if train_pos is None else train_pos,
        train_neg=neg if train_neg is None else train_neg,
        eval_subsets=eval_subsets,
    )
    return dataset.make_split(records, spec)


@pytest.fixture
def mock_gateway() -> gateway.LLMGateway:
    return make_mock_gateway()


@pytest.fixture
def fixed_records() -> tuple[dataset.FounderRecord, dataset.FounderRecord]:
    return RECORD_POS, RECORD_NEG


@pytest.fixture
def small_split() -> dataset.DatasetSplit:
    return planted_split()


@pytest.fixture(scope="session")
def default_shape_run(tmp_path_factory):
    """A full loop run at the default scale: 120/120 train, 4 rounds.

    Shared read-only across tests that assert ledger shape; nothing may
    mutate the returned ledger.
    """
    root = tmp_path_factory.mktemp("default-shape")
    split = planted_split(pos=120, neg=120)
    config = forge.TrainConfig(strategy="loop", rounds=4, train_order_seed=3)
    gw = make_mock_gateway(gateway.MockScript(seed=5))
    ledger = forge.RunLedger("shape", root=root)
    ledger.write_header({"train": config.to_json()})
    initial = forge.induce_initial(
        forge.seed_examples(split.train),
        gw,
        ledger=ledger,
        scoring_set=split.subset("train"),
    )
    best, _ = forge.refine_loop(initial, split, gw, config, ledger=ledger)
    return {
        "split": split,
        "config": config,
        "ledger": ledger,
        "initial": initial,
        "best": best,
        "run_dir": ledger.run_dir,
    }
