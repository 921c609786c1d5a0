"""Command-line front end: test sets, training, evaluation, tracing.

Every command resolves one RunConfig (defaults < --config file < --system
< --seed < --set overrides) and, when it writes anywhere, drops the fully
resolved config plus a manifest next to its outputs so the run can be
reproduced from the artifacts alone.

Exit codes: 0 success, 1 usage/config errors, 2 runtime or solver failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import (
    RunConfig,
    apply_overrides,
    config_hash,
    load_config,
    save_config,
)
from .core import run_episode
from .harness import (
    build_testset,
    compare,
    evaluate_policy,
    load_testset,
    save_testset,
    write_per_episode_csv,
)
from .mpc import MpcSolveError
from .policy import load_policy_params, make_policy
from .rl import train
from .systems import build_system, generate_forecast

__all__ = ["main"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(sub):
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--system", choices=["pendulum", "battery"],
                     help="override the configured system")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config key, e.g. mpc.horizon=10")


def build_parser() -> _Parser:
    parser = _Parser(prog="etmpc", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command")

    gen = subs.add_parser("gen-testset", help="freeze an evaluation test set")
    _add_config_flags(gen)
    gen.add_argument("--seed", type=int, help="master seed (default from config)")
    gen.add_argument("--episodes", type=int, help="episode count (default 100)")
    gen.add_argument("--out", required=True, help="output directory")

    tr = subs.add_parser("train", help="train the recomputation policy")
    _add_config_flags(tr)
    tr.add_argument("--testset", help="frozen test set JSON for checkpoint evals")
    tr.add_argument("--out", required=True, help="output directory")

    ev = subs.add_parser("eval", help="evaluate one policy on a test set")
    _add_config_flags(ev)
    ev.add_argument("--policy", required=True,
                    help="always | never | periodic:<t> | params JSON file")
    ev.add_argument("--testset", required=True, help="test set JSON file")
    ev.add_argument("--repeats", type=int,
                    help="override repeat count (default: 5 stochastic, 1 fixed)")
    ev.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    ev.add_argument("--deterministic", action="store_true",
                    help="use the argmax head of a learned policy")
    ev.add_argument("--out", help="optional output directory")

    cp = subs.add_parser("compare", help="compare several policies, paired")
    _add_config_flags(cp)
    cp.add_argument("--policies", required=True,
                    help="comma-separated list, e.g. always,never,periodic:20,rl.json")
    cp.add_argument("--testset", required=True, help="test set JSON file")
    cp.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    cp.add_argument("--deterministic", action="store_true")
    cp.add_argument("--out", help="optional output directory")

    tc = subs.add_parser("trace", help="dump one episode step by step")
    _add_config_flags(tc)
    tc.add_argument("--policy", required=True)
    tc.add_argument("--seed", type=int, required=True, help="episode seed")
    tc.add_argument("--steps", type=int, help="episode length override")
    tc.add_argument("--deterministic", action="store_true")
    tc.add_argument("--out", help="optional output directory")

    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "system", None):
        cfg.system = args.system
    if getattr(args, "seed", None) is not None and args.command == "gen-testset":
        cfg.master_seed = args.seed
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg


def _write_metadata(out_dir: Path, cfg: RunConfig, command: str, outputs) -> None:
    save_config(cfg, out_dir / "config_resolved.json")
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "outputs": sorted(set(outputs) | {"config_resolved.json"}),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _policy_from_spec(spec: str, deterministic: bool):
    if spec.endswith(".json"):
        params = load_policy_params(spec)
        return Path(spec).stem, make_policy(
            "logistic", params=params, deterministic=deterministic
        )
    return spec, make_policy(spec)


def _cmd_gen_testset(args) -> int:
    cfg = _resolve_config(args)
    testset = build_testset(cfg, n=args.episodes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_testset(testset, out / "testset.json")
    _write_metadata(out, cfg, "gen-testset", ["testset.json"])
    print(
        f"wrote {out / 'testset.json'}: {len(testset.episode_seeds)} episodes "
        f"of {testset.episode_steps} steps (config {testset.config_hash})"
    )
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    system = build_system(cfg.system, cfg)
    testset = load_testset(args.testset) if args.testset else build_testset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(system, testset=testset, out_dir=out, log=print)
    outputs = ["curve.csv", "params_final.json"]
    outputs += [Path(p).name for p in result.checkpoint_paths]
    _write_metadata(out, cfg, "train", outputs)
    final = result.curve[-1]
    print(
        f"trained {result.episodes_run} episodes; final test G "
        f"{final.mean_return:.4f}, recompute fraction "
        f"{final.recompute_fraction:.3f}, {result.clip_events} clipped updates"
    )
    if result.diverged:
        print("training diverged; last finite parameters kept", file=sys.stderr)
        return 2
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    system = build_system(cfg.system, cfg)
    testset = load_testset(args.testset)
    label, policy = _policy_from_spec(args.policy, args.deterministic)
    report = evaluate_policy(
        system, policy, testset,
        repeats=args.repeats, workers=args.workers, label=label,
    )
    print(
        f"{label}: mean G {report.mean_return:.4f} (std {report.std_return:.4f}), "
        f"recompute fraction {report.recompute_fraction:.4f}, "
        f"{len(report.per_episode)} episodes x {report.repeats} repeats"
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(
            "policy,mean_G,std_G,recompute_fraction,failed\n"
            + report.to_csv_row() + "\n"
        )
        write_per_episode_csv(report, testset, out / "per_episode.csv")
        _write_metadata(out, cfg, "eval", ["eval.csv", "per_episode.csv"])
    if report.n_failed:
        print(f"{report.n_failed} episodes failed", file=sys.stderr)
        return 2
    return 0


def _cmd_compare(args) -> int:
    cfg = _resolve_config(args)
    system = build_system(cfg.system, cfg)
    testset = load_testset(args.testset)
    specs = [s for s in args.policies.split(",") if s]
    if len(specs) < 2:
        raise UsageError("--policies needs at least two comma-separated entries")
    policies = [_policy_from_spec(s, args.deterministic) for s in specs]
    table = compare(system, policies, testset, workers=args.workers)
    print(table.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(table.to_csv())
        _write_metadata(out, cfg, "compare", ["comparison.csv"])
    failures = sum(r.n_failed for r in table.reports)
    if failures:
        print(f"{failures} episodes failed across policies", file=sys.stderr)
        return 2
    return 0


def _write_market_trace(system, record, steps: int, path: Path) -> None:
    """Per-step truth vs. the active plan's forecast; the forecast columns
    snap back to the truth at every recompute (lead-0 contract)."""
    env = system.make_env(record.seed, steps)
    horizon = system.horizon
    anchors = record.recompute_steps()
    forecasts = {
        k: generate_forecast(
            env.market, k, horizon, env.forecast_rng(k), system.config.market
        )
        for k in anchors
    }
    lines = ["step,p_true,lambda_true,p_forecast,lambda_forecast,recompute"]
    active = anchors[0]
    for entry in record.steps:
        i = entry.step
        if entry.recompute:
            active = i
        fc = forecasts[active][i - active]
        lines.append(
            f"{i},{env.market.p_true[i]:.6f},{env.market.lambda_true[i]:.6f},"
            f"{fc[0]:.6f},{fc[1]:.6f},{entry.recompute}"
        )
    path.write_text("\n".join(lines) + "\n")


def _cmd_trace(args) -> int:
    cfg = _resolve_config(args)
    system = build_system(cfg.system, cfg)
    label, policy = _policy_from_spec(args.policy, args.deterministic)
    steps = args.steps if args.steps else cfg.harness.episode_steps
    record = run_episode(system, policy, steps, args.seed)
    print(
        f"seed {args.seed}, policy {label}: G {record.return_value(1.0):.4f}, "
        f"recomputes at {record.recompute_steps()}"
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "episode.jsonl").write_text(record.to_jsonl())
        outputs = ["episode.jsonl"]
        if system.name == "battery":
            _write_market_trace(system, record, steps, out / "trace_market.csv")
            outputs.append("trace_market.csv")
        _write_metadata(out, cfg, "trace", outputs)
    if record.failed:
        print(f"episode failed: {record.failure}", file=sys.stderr)
        return 2
    return 0


_COMMANDS = {
    "gen-testset": _cmd_gen_testset,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
    "trace": _cmd_trace,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required (see --help)")
        return _COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse --help
        return 0 if exc.code in (0, None) else 1
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MpcSolveError, RuntimeError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
