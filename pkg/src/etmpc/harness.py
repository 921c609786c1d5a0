"""Frozen test sets, paired policy evaluation, and baseline comparison.

Every policy is judged on identical episode randomness: the test set
freezes the environment seeds, and stochastic policies get their own
sampling streams per repeat so the frozen episodes stay frozen. Returns
are undiscounted costs (gamma = 1), lower is better.
"""

from __future__ import annotations

import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict, config_hash
from .core import run_episode
from .policy import PolicyParams, make_policy
from .systems import build_system

__all__ = [
    "TestSet",
    "EvalReport",
    "ComparisonTable",
    "derive_seed",
    "build_testset",
    "save_testset",
    "load_testset",
    "evaluate_policy",
    "compare",
]


def derive_seed(master_seed: int, *key: int) -> int:
    """Splittable counter scheme: one independent seed per (purpose, index)."""
    words = np.random.SeedSequence(
        entropy=master_seed, spawn_key=tuple(key)
    ).generate_state(2)
    return int(words[0]) + (int(words[1]) << 32)


@dataclass
class TestSet:
    """Immutable bundle of evaluation episodes plus the config they bind to."""

    system: str
    master_seed: int
    episode_steps: int
    episode_seeds: list
    config_hash: str


def build_testset(cfg: RunConfig, n: int | None = None,
                  master_seed: int | None = None) -> TestSet:
    if n is None:
        n = cfg.harness.testset_episodes
    if master_seed is None:
        master_seed = cfg.master_seed
    return TestSet(
        system=cfg.system,
        master_seed=master_seed,
        episode_steps=cfg.harness.episode_steps,
        episode_seeds=[derive_seed(master_seed, 0, i) for i in range(n)],
        config_hash=config_hash(cfg),
    )


def save_testset(testset: TestSet, path) -> None:
    payload = {
        "system": testset.system,
        "master_seed": testset.master_seed,
        "episode_steps": testset.episode_steps,
        "config_hash": testset.config_hash,
        "episode_seeds": testset.episode_seeds,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_testset(path) -> TestSet:
    payload = json.loads(Path(path).read_text())
    return TestSet(
        system=payload["system"],
        master_seed=payload["master_seed"],
        episode_steps=payload["episode_steps"],
        episode_seeds=list(payload["episode_seeds"]),
        config_hash=payload["config_hash"],
    )


@dataclass
class EvalReport:
    """Aggregate returns for one policy over a frozen test set."""

    policy: str
    repeats: int
    mean_return: float
    std_return: float  # across repeat means; 0 for a single repeat
    recompute_fraction: float
    per_episode: list  # per-episode return averaged over repeats (nan if failed)
    per_repeat_means: list
    n_failed: int = 0

    def to_csv_row(self) -> str:
        return (
            f"{self.policy},{self.mean_return:.6f},{self.std_return:.6f},"
            f"{self.recompute_fraction:.4f},{self.n_failed}"
        )


def _policy_is_stochastic(policy) -> bool:
    return policy.kind == "logistic" and not getattr(policy, "deterministic", False)


def _policy_payload(policy):
    """Pickle-friendly description so workers can rebuild the policy."""
    if policy.kind == "logistic":
        p = policy.params
        return ("logistic", {
            "theta": p.theta.tolist(),
            "feature_mean": p.feature_mean.tolist(),
            "feature_std": p.feature_std.tolist(),
            "feature_names": list(p.feature_names),
        }, policy.deterministic)
    if policy.kind == "periodic":
        return (f"periodic:{policy.period}", None, False)
    return (policy.kind, None, False)


_WORKER = {}


def _worker_init(config_dict, payload):
    cfg = config_from_dict(config_dict)
    spec, params_dict, deterministic = payload
    params = None if params_dict is None else PolicyParams(**params_dict)
    _WORKER["system"] = build_system(cfg.system, cfg)
    _WORKER["policy"] = make_policy(spec, params=params, deterministic=deterministic)


def _worker_episode(job):
    seed, steps, repeat = job
    rec = run_episode(_WORKER["system"], _WORKER["policy"], steps, seed, repeat)
    return (
        repeat,
        rec.return_value(1.0),
        rec.recompute_fraction(),
        rec.failed,
        rec.failure,
    )


def evaluate_policy(system, policy, testset: TestSet,
                    repeats: int | None = None, workers: int = 1,
                    label: str | None = None) -> EvalReport:
    """Run the frozen episodes under one policy and aggregate returns.

    Stochastic policies default to the configured repeat count (5);
    deterministic ones to a single pass. Failed episodes are excluded
    from means but counted, never silently dropped.
    """
    if config_hash(system.config) != testset.config_hash:
        raise ValueError(
            f"test set was generated under config {testset.config_hash} "
            f"but the current config hashes to {config_hash(system.config)}; "
            "regenerate the test set or restore the config"
        )
    if repeats is None:
        if _policy_is_stochastic(policy):
            repeats = system.config.harness.eval_repeats_stochastic
        else:
            repeats = 1
    n = len(testset.episode_seeds)
    steps = testset.episode_steps
    returns = np.full((repeats, n), np.nan)
    fractions = np.full((repeats, n), np.nan)
    failed = np.zeros((repeats, n), dtype=bool)

    jobs = [
        (seed, steps, r)
        for r in range(repeats)
        for seed in testset.episode_seeds
    ]
    if workers > 1:
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_worker_init,
            initargs=(system.config.to_dict(), _policy_payload(policy)),
        ) as pool:
            results = list(pool.map(_worker_episode, jobs, chunksize=4))
        for (seed, _, r), (rep, ret, frac, fail, _) in zip(jobs, results):
            j = testset.episode_seeds.index(seed)
            returns[rep, j] = ret
            fractions[rep, j] = frac
            failed[rep, j] = fail
    else:
        for r in range(repeats):
            for j, seed in enumerate(testset.episode_seeds):
                rec = run_episode(system, policy, steps, seed, repeat=r)
                returns[r, j] = rec.return_value(1.0)
                fractions[r, j] = rec.recompute_fraction()
                failed[r, j] = rec.failed

    ok = ~failed
    per_episode = [
        float(np.mean(returns[ok[:, j], j])) if np.any(ok[:, j]) else float("nan")
        for j in range(n)
    ]
    per_repeat = [
        float(np.mean(returns[r][ok[r]])) if np.any(ok[r]) else float("nan")
        for r in range(repeats)
    ]
    finite_repeats = [m for m in per_repeat if np.isfinite(m)]
    mean_return = float(np.mean(returns[ok])) if np.any(ok) else float("nan")
    std_return = (
        float(np.std(finite_repeats, ddof=1)) if len(finite_repeats) > 1 else 0.0
    )
    return EvalReport(
        policy=label if label is not None else policy.kind,
        repeats=repeats,
        mean_return=mean_return,
        std_return=std_return,
        recompute_fraction=float(np.mean(fractions[ok])) if np.any(ok) else float("nan"),
        per_episode=per_episode,
        per_repeat_means=per_repeat,
        n_failed=int(failed.sum()),
    )


@dataclass
class ComparisonTable:
    """Per-policy aggregates over one shared test set."""

    reports: list
    rel_gaps: list = field(default_factory=list)

    def __post_init__(self):
        if not self.rel_gaps:
            best = min(r.mean_return for r in self.reports)
            scale = abs(best) if best != 0.0 else 1.0
            self.rel_gaps = [
                (r.mean_return - best) / scale for r in self.reports
            ]

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("policy,mean_G,std_G,recompute_fraction,failed,rel_gap\n")
        for report, gap in zip(self.reports, self.rel_gaps):
            out.write(f"{report.to_csv_row()},{gap:.6f}\n")
        return out.getvalue()

    def to_text(self) -> str:
        head = f"{'policy':<16}{'mean G':>12}{'std':>10}{'recomp':>9}{'gap':>9}"
        lines = [head, "-" * len(head)]
        for report, gap in zip(self.reports, self.rel_gaps):
            flag = " *FAILED" if report.n_failed else ""
            lines.append(
                f"{report.policy:<16}{report.mean_return:>12.4f}"
                f"{report.std_return:>10.4f}{report.recompute_fraction:>9.3f}"
                f"{gap:>9.3f}{flag}"
            )
        return "\n".join(lines)


def compare(system, policies, testset: TestSet, workers: int = 1) -> ComparisonTable:
    """Evaluate labelled policies on one shared test set.

    policies: list of (label, policy) pairs; needs at least two entries
    for a comparison to mean anything.
    """
    if len(policies) < 2:
        raise ValueError("comparison needs at least two policies")
    reports = [
        evaluate_policy(system, pol, testset, workers=workers, label=label)
        for label, pol in policies
    ]
    return ComparisonTable(reports=reports)


def write_per_episode_csv(report: EvalReport, testset: TestSet, path) -> None:
    lines = ["episode,seed,mean_G"]
    for j, seed in enumerate(testset.episode_seeds):
        lines.append(f"{j},{seed},{report.per_episode[j]:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")
