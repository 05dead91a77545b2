"""Command-line entry point for the full workflow.

Subcommands mirror the pipeline stages: split the data, induce an initial
policy, train (refine) it, fold in reflections, accept expert edits,
evaluate, and report. Exit codes: 0 success, 1 user or configuration
error, 2 backend or transport error. Credential values are read from the
environment by the gateway and are never printed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from policyforge import dataset, evaluator, forge, prompts
from policyforge.config import AppConfig, ConfigError, load_config
from policyforge.dataset import DataError
from policyforge.evaluator import EvalError, EvalSpec
from policyforge.forge import ForgeError, RunLedger, TrainConfig
from policyforge.gateway import GatewayError, LLMGateway, MockScript

EXIT_OK = 0
EXIT_USER = 1
EXIT_BACKEND = 2


class UsageError(Exception):
    """Bad flags or missing prerequisites; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; this workflow reserves 2
    # for backend failures, so route parse errors through UsageError.
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument(
        "--backend", choices=("remote", "mock"), help="override backend kind"
    )
    common.add_argument("--seed", type=int, help="split seed / training order seed")
    common.add_argument(
        "--max-in-flight", type=int, dest="max_in_flight", help="concurrency bound"
    )

    parser = _Parser(prog="policyforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", parents=[common], help="materialize the data split")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("induce", parents=[common], help="induce the initial policy")
    p.add_argument("--run-id", dest="run_id", help="run directory name")
    p.set_defaults(func=cmd_induce)

    p = sub.add_parser("train", parents=[common], help="run the refinement loop")
    p.add_argument("--run-id", dest="run_id", help="run directory name")
    p.add_argument(
        "--strategy", choices=("sequential", "parallel", "loop"), help="round strategy"
    )
    p.add_argument("--rounds", type=int, help="number of refinement rounds")
    p.add_argument(
        "--resume", action="store_true", help="continue an interrupted run"
    )
    p.add_argument(
        "--wait-for-edit",
        dest="wait_for_edit",
        metavar="PATH",
        help="after each round, poll PATH for an edited policy file and score it",
    )
    p.add_argument(
        "--wait-timeout",
        dest="wait_timeout",
        type=float,
        default=30.0,
        help="seconds to wait for the edit file each round",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reflect", parents=[common], help="fold reflections into a policy")
    p.add_argument("--run-id", dest="run_id", required=True)
    p.add_argument("--policy-id", dest="policy_id", help="defaults to the run's best")
    p.add_argument("--cap", type=int, default=10, help="max representative cases")
    p.set_defaults(func=cmd_reflect)

    p = sub.add_parser(
        "expert-edit", parents=[common], help="score and maybe adopt an edited policy"
    )
    p.add_argument("--run-id", dest="run_id", required=True)
    p.add_argument("--policy-id", dest="policy_id", help="defaults to the run's best")
    p.add_argument("--file", required=True, help="edited policy text file")
    p.add_argument(
        "--force", action="store_true", help="adopt even when the score does not improve"
    )
    p.set_defaults(func=cmd_expert_edit)

    p = sub.add_parser("evaluate", parents=[common], help="run evaluation subsets")
    p.add_argument("--run-id", dest="run_id", help="run whose policy to evaluate")
    p.add_argument("--policy-id", dest="policy_id", help="defaults to the run's best")
    p.add_argument(
        "--policy-file", dest="policy_file", help="evaluate a policy text file directly"
    )
    p.add_argument(
        "--vanilla", action="store_true", help="no-policy baseline prompts"
    )
    p.add_argument(
        "--subset",
        action="append",
        dest="subsets",
        metavar="NAME",
        help="subset to evaluate (repeatable)",
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="summarize a run ledger")
    p.add_argument("--run-id", dest="run_id", required=True)
    p.set_defaults(func=cmd_report)

    return parser


# -- shared helpers ------------------------------------------------------


def _load_records(cfg: AppConfig) -> list[dataset.FounderRecord]:
    if not cfg.data_path:
        raise UsageError("config has no data_path; point it at a CSV or JSONL file")
    return [dataset.sanitize(raw) for raw in dataset.load_records(cfg.data_path)]


def _manifest_path(cfg: AppConfig) -> Path:
    return Path(cfg.output_root) / "split.json"


def _load_split(cfg: AppConfig) -> dataset.DatasetSplit:
    manifest = _manifest_path(cfg)
    if not manifest.exists():
        raise UsageError(f"no split manifest at {manifest}; run `policyforge split` first")
    split, _ = dataset.load_manifest(manifest, _load_records(cfg))
    return split


def _build_gateway(cfg: AppConfig, args: argparse.Namespace) -> LLMGateway:
    backend = cfg.backend
    changes: dict = {}
    if args.backend:
        changes["kind"] = args.backend
    if args.max_in_flight:
        changes["max_in_flight"] = args.max_in_flight
    if changes:
        backend = dataclasses.replace(backend, **changes)
    script = None
    if backend.kind == "mock" and cfg.mock_script:
        script = MockScript.from_file(cfg.mock_script)
    return LLMGateway(backend, mock_script=script)


def _train_config(cfg: AppConfig, args: argparse.Namespace) -> TrainConfig:
    changes: dict = {}
    if getattr(args, "strategy", None):
        changes["strategy"] = args.strategy
    if getattr(args, "rounds", None):
        changes["rounds"] = args.rounds
    if args.seed is not None:
        changes["train_order_seed"] = args.seed
    return dataclasses.replace(cfg.train, **changes) if changes else cfg.train


def _default_run_id(train_cfg: TrainConfig) -> str:
    return f"run-{train_cfg.strategy}-r{train_cfg.rounds}-s{train_cfg.train_order_seed}"


def _open_ledger(cfg: AppConfig, run_id: str) -> RunLedger:
    run_dir = Path(cfg.output_root) / run_id
    if not (run_dir / "run.json").exists():
        raise UsageError(f"unknown run {run_id!r} (no run directory at {run_dir})")
    return RunLedger.open(run_dir)


def _resolve_policy(ledger: RunLedger, policy_id: str | None) -> forge.Policy:
    if policy_id:
        return ledger.load_policy(policy_id)
    return ledger.best_policy()


def _header_payload(
    run_id: str, cfg: AppConfig, train_cfg: TrainConfig, gateway: LLMGateway
) -> dict:
    return {
        "run_id": run_id,
        "model_id": cfg.model_id,
        "backend": gateway.fingerprint(),
        "train": train_cfg.to_json(),
    }


def _ensure_initial(
    ledger: RunLedger,
    split: dataset.DatasetSplit,
    gateway: LLMGateway,
    train_cfg: TrainConfig,
    cfg: AppConfig,
    cache: forge.ScoreCache,
) -> forge.Policy:
    for entry in ledger.policy_entries():
        if entry["method"] == forge.METHOD_INITIAL:
            return ledger.load_policy(entry["policy_id"])
    return forge.induce_initial(
        forge.seed_examples(split.train),
        gateway,
        ledger=ledger,
        config=train_cfg,
        scoring_set=split.subset(train_cfg.scoring_set),
        cache=cache,
        model_id=cfg.model_id,
    )


# -- commands ------------------------------------------------------------


def cmd_split(cfg: AppConfig, args: argparse.Namespace) -> int:
    spec = cfg.split
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    records = _load_records(cfg)
    split = dataset.make_split(records, spec)
    out_root = Path(cfg.output_root)
    out_root.mkdir(parents=True, exist_ok=True)
    dataset.save_manifest(split, spec, _manifest_path(cfg))
    pos = sum(1 for r in split.train if r.success)
    print(f"train: {pos}/{len(split.train) - pos}")
    for name, _, _ in spec.eval_subsets:
        subset = split.subset(name)
        sub_pos = sum(1 for r in subset if r.success)
        print(f"{name}: {sub_pos}/{len(subset) - sub_pos}")
    print(f"manifest: {_manifest_path(cfg)}")
    return EXIT_OK


def cmd_induce(cfg: AppConfig, args: argparse.Namespace) -> int:
    split = _load_split(cfg)
    gateway = _build_gateway(cfg, args)
    train_cfg = _train_config(cfg, args)
    run_id = args.run_id or _default_run_id(train_cfg)
    run_dir = Path(cfg.output_root) / run_id
    if (run_dir / "run.json").exists():
        ledger = RunLedger.open(run_dir)
    else:
        ledger = RunLedger(run_id, root=cfg.output_root)
        ledger.write_header(_header_payload(run_id, cfg, train_cfg, gateway))
    initial = _ensure_initial(ledger, split, gateway, train_cfg, cfg, forge.ScoreCache())
    score = "unscored" if initial.score is None else f"{initial.score:.4f}"
    print(
        f"initial policy {initial.policy_id}: {len(initial.body.rules)} rules, "
        f"score {score} (run {run_id})"
    )
    return EXIT_OK


def cmd_train(cfg: AppConfig, args: argparse.Namespace) -> int:
    split = _load_split(cfg)
    gateway = _build_gateway(cfg, args)
    train_cfg = _train_config(cfg, args)
    run_id = args.run_id or _default_run_id(train_cfg)
    run_dir = Path(cfg.output_root) / run_id
    cache = forge.ScoreCache()

    start_round = 1
    incumbent = None
    if (run_dir / "run.json").exists():
        ledger = RunLedger.open(run_dir)
        completed = ledger.rounds_completed()
        finished = any(e["type"] == "run_end" for e in ledger.entries())
        if not args.resume:
            if finished:
                best = ledger.best_policy()
                print(f"run {run_id} already complete; best {best.policy_id} score {best.score:.4f}")
                return EXIT_OK
            raise UsageError(
                f"run directory {run_dir} exists; pass --resume to continue it"
            )
        start_round = completed + 1
        incumbent_id = ledger.last_incumbent_id()
        if incumbent_id is not None:
            incumbent = ledger.load_policy(incumbent_id)
    elif args.resume:
        raise UsageError(f"nothing to resume: no run directory at {run_dir}")
    else:
        ledger = RunLedger(run_id, root=cfg.output_root)
        ledger.write_header(_header_payload(run_id, cfg, train_cfg, gateway))

    initial = _ensure_initial(ledger, split, gateway, train_cfg, cfg, cache)
    if start_round > train_cfg.rounds:
        best = ledger.best_policy()
        print(f"best policy: {best.policy_id} score {best.score:.4f} (run {run_id})")
        return EXIT_OK

    round_hook = None
    if args.wait_for_edit:
        scoring = split.subset(train_cfg.scoring_set)

        def round_hook(round_no: int, current: forge.Policy) -> forge.Policy:
            return _poll_edit(
                Path(args.wait_for_edit),
                args.wait_timeout,
                current,
                gateway,
                ledger,
                scoring,
                train_cfg,
                cache,
                cfg.model_id,
                round_no,
            )

    best, _ = forge.refine_loop(
        initial,
        split,
        gateway,
        train_cfg,
        ledger=ledger,
        cache=cache,
        model_id=cfg.model_id,
        start_round=start_round,
        incumbent=incumbent,
        round_hook=round_hook,
    )
    print(f"best policy: {best.policy_id} score {best.score:.4f} (run {run_id})")
    return EXIT_OK


def _poll_edit(
    edit_path: Path,
    timeout_s: float,
    current: forge.Policy,
    gateway: LLMGateway,
    ledger: RunLedger,
    scoring_set,
    train_cfg: TrainConfig,
    cache: forge.ScoreCache,
    model_id: str,
    round_no: int,
) -> forge.Policy:
    """Wait for an edited policy file, score it, consume it."""
    deadline = time.monotonic() + timeout_s
    while not edit_path.exists():
        if time.monotonic() >= deadline:
            print(f"round {round_no}: no edit file at {edit_path}, continuing")
            return current
        time.sleep(0.2)
    adopted = forge.expert_checkpoint(
        current,
        edit_path,
        gateway=gateway,
        ledger=ledger,
        scoring_set=scoring_set,
        config=train_cfg,
        cache=cache,
        round_no=round_no,
        model_id=model_id,
    )
    edit_path.unlink()
    if adopted.policy_id != current.policy_id:
        print(f"round {round_no}: adopted expert edit {adopted.policy_id}")
    else:
        print(f"round {round_no}: expert edit scored lower, keeping {current.policy_id}")
    return adopted


def cmd_reflect(cfg: AppConfig, args: argparse.Namespace) -> int:
    split = _load_split(cfg)
    gateway = _build_gateway(cfg, args)
    ledger = _open_ledger(cfg, args.run_id)
    policy = _resolve_policy(ledger, args.policy_id)
    cache = forge.ScoreCache()
    scoring = split.subset(cfg.train.scoring_set)
    representatives = forge.select_representatives(
        policy, scoring, gateway, config=cfg.train, cache=cache,
        model_id=cfg.model_id, cap=args.cap,
    )
    if not representatives:
        print(f"policy {policy.policy_id} misclassifies nothing; no reflections needed")
        return EXIT_OK
    folded = forge.reflect_and_fold(
        policy,
        representatives,
        gateway,
        ledger=ledger,
        config=cfg.train,
        cache=cache,
        scoring_set=scoring,
        model_id=cfg.model_id,
    )
    print(
        f"folded policy {folded.policy_id}: score {folded.score:.4f} "
        f"(from {policy.policy_id} at {policy.score:.4f})"
    )
    return EXIT_OK


def cmd_expert_edit(cfg: AppConfig, args: argparse.Namespace) -> int:
    split = _load_split(cfg)
    gateway = _build_gateway(cfg, args)
    ledger = _open_ledger(cfg, args.run_id)
    policy = _resolve_policy(ledger, args.policy_id)
    adopted = forge.expert_checkpoint(
        policy,
        args.file,
        gateway=gateway,
        ledger=ledger,
        scoring_set=split.subset(cfg.train.scoring_set),
        config=cfg.train,
        model_id=cfg.model_id,
        force=args.force,
    )
    if adopted.policy_id == policy.policy_id:
        print(f"edit scored lower; keeping {policy.policy_id} score {policy.score:.4f}")
    else:
        print(f"adopted {adopted.policy_id} score {adopted.score:.4f}")
    return EXIT_OK


def cmd_evaluate(cfg: AppConfig, args: argparse.Namespace) -> int:
    split = _load_split(cfg)
    gateway = _build_gateway(cfg, args)
    subsets = tuple(args.subsets) if args.subsets else tuple(cfg.eval.subsets)

    policy = None
    if args.vanilla:
        if args.policy_id or args.policy_file or args.run_id:
            raise UsageError("--vanilla cannot be combined with a policy source")
        spec = EvalSpec(
            mode="vanilla",
            subsets=subsets,
            beta=cfg.eval.beta,
            max_in_flight=cfg.eval.max_in_flight,
            parse_failure_mode=cfg.eval.parse_failure_mode,
        )
    else:
        if args.policy_file:
            body = prompts.parse_policy(
                Path(args.policy_file).read_text(encoding="utf-8")
            )
            policy_id = Path(args.policy_file).stem
            policy = body
        elif args.run_id:
            ledger = _open_ledger(cfg, args.run_id)
            resolved = _resolve_policy(ledger, args.policy_id)
            policy = resolved
            policy_id = resolved.policy_id
        else:
            raise UsageError("pass --run-id, --policy-file, or --vanilla")
        spec = EvalSpec(
            mode="with_policy",
            policy_id=policy_id,
            subsets=subsets,
            beta=cfg.eval.beta,
            max_in_flight=cfg.eval.max_in_flight,
            parse_failure_mode=cfg.eval.parse_failure_mode,
        )

    result = evaluator.evaluate(
        spec,
        split,
        gateway,
        policy=policy,
        out_root=cfg.output_root,
        model_id=cfg.model_id,
    )
    sys.stdout.write(evaluator.render_report(result))
    print(f"eval written under {Path(cfg.output_root) / 'eval' / result.eval_id}")
    return EXIT_OK


def cmd_report(cfg: AppConfig, args: argparse.Namespace) -> int:
    ledger = _open_ledger(cfg, args.run_id)
    entries = ledger.entries()
    policies = [e for e in entries if e["type"] == "policy"]
    by_method: dict[str, int] = {}
    for entry in policies:
        by_method[entry["method"]] = by_method.get(entry["method"], 0) + 1
    best = ledger.best_policy()

    lines = [
        f"# Run {ledger.run_id}",
        "",
        f"- policies: {len(policies)}",
        f"- rounds completed: {ledger.rounds_completed()}",
        *(f"- {method}: {count}" for method, count in sorted(by_method.items())),
        f"- best: {best.policy_id} (method {best.lineage.method}, "
        f"round {best.lineage.round}, score {best.score:.4f})",
        "",
        "## Best policy",
        "",
        "```",
        best.body.raw.rstrip("\n"),
        "```",
        "",
    ]
    text = "\n".join(lines)
    assert ledger.run_dir is not None
    (ledger.run_dir / "report.md").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
        return args.func(cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except GatewayError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (
        ConfigError,
        DataError,
        ForgeError,
        EvalError,
        prompts.PromptError,
        OSError,
        json.JSONDecodeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
