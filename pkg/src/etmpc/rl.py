"""Policy-gradient learning of when to recompute: features + GPOMDP.

The trainer warms up with always-recompute episodes to freeze feature
normalization, then alternates batches of stochastic episodes with
gradient steps theta <- theta - alpha * g. Checkpoints are evaluated on
a frozen test set at a fixed episode interval so learning curves from
different runs line up.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import run_episode
from .features import RunningStats, augment_raw, feature_dim
from .features import build_features as _normalize_features
from .harness import build_testset, derive_seed, evaluate_policy
from .policy import (
    LogisticRecompute,
    PolicyParams,
    init_policy_params,
    save_policy_params,
)

__all__ = [
    "CurvePoint",
    "TrainResult",
    "RunningStats",
    "augment_raw",
    "feature_dim",
    "build_features",
    "discounted_cost_to_go",
    "gpomdp_gradient",
    "curve_to_csv",
    "train",
]


def build_features(system, aug_state, eps, feature_mean, feature_std):
    """Full policy input for one decision point, normalized and biased."""
    raw = system.raw_features(
        aug_state.x_current, eps, aug_state.steps_since, aug_state.params_current
    )
    return _normalize_features(raw, feature_mean, feature_std)


def discounted_cost_to_go(record, gamma: float) -> np.ndarray:
    """q[t] = sum_{t'>=t} gamma^t' c_t' + gamma^T R_T, discount from step 0."""
    n = len(record.steps)
    q = np.empty(n)
    acc = gamma**n * record.terminal_cost
    for t in range(n - 1, -1, -1):
        acc += gamma**t * record.steps[t].rl_cost
        q[t] = acc
    return q


def gpomdp_gradient(batch, gamma: float, n_params: int | None = None) -> np.ndarray:
    """Batch policy-gradient estimate over recorded episodes.

    g = (1/M) sum_episodes sum_{t in decision points} score_t (q_t - b_t)
    with the per-time baseline b_t = batch mean of the discounted
    cost-to-go. Only sampled decisions carry score terms; the forced
    recomputes contribute through the costs alone.
    """
    if not batch:
        raise ValueError("gpomdp_gradient needs a non-empty batch")
    for rec in batch:
        if rec.failed:
            raise ValueError(
                f"failed episode (seed {rec.seed}) cannot enter a gradient batch"
            )
    qs = [discounted_cost_to_go(rec, gamma) for rec in batch]
    max_t = max(len(q) for q in qs)
    sums = np.zeros(max_t)
    counts = np.zeros(max_t)
    for q in qs:
        sums[: len(q)] += q
        counts[: len(q)] += 1
    baseline = sums / counts

    grad = None
    for rec, q in zip(batch, qs):
        for entry in rec.decision_entries():
            if entry.score is None:
                raise ValueError(
                    "decision point without a score: records must come from "
                    "a stochastic policy"
                )
            term = entry.score * (q[entry.step] - baseline[entry.step])
            grad = term if grad is None else grad + term
    if grad is None:
        if n_params is None:
            raise ValueError("batch has no decision points; pass n_params")
        grad = np.zeros(n_params)
    return grad / len(batch)


@dataclass
class CurvePoint:
    episode: int
    mean_return: float
    std_return: float  # spread across test episodes
    recompute_fraction: float


@dataclass
class TrainResult:
    params: PolicyParams
    curve: list
    diverged: bool = False
    episodes_run: int = 0
    clip_events: int = 0
    checkpoint_paths: list = field(default_factory=list)


def curve_to_csv(curve) -> str:
    lines = ["episode,mean_return,std_return,recompute_fraction"]
    for pt in curve:
        lines.append(
            f"{pt.episode},{pt.mean_return:.6f},{pt.std_return:.6f},"
            f"{pt.recompute_fraction:.4f}"
        )
    return "\n".join(lines) + "\n"


class _WarmupCollector:
    """Always-recompute behavior that still asks for (identity) features,
    so the executor hands back raw augmented vectors for normalization."""

    kind = "warmup"
    needs_features = True

    def __init__(self, n_raw: int):
        self.params = init_policy_params(n_raw, bias_weight=0.0)

    def action(self, features, step, rng) -> int:
        return 1

    def score(self, features, action):
        return None


def _feature_names(system):
    raws = list(system.raw_feature_names)
    return tuple(raws + [f"{name}^2" for name in raws])


def _checkpoint_eval(system, params, testset, episode) -> CurvePoint:
    # Single stochastic pass: same env seeds and policy stream at every
    # checkpoint, so curve points are paired across training.
    report = evaluate_policy(
        system, LogisticRecompute(params), testset, repeats=1
    )
    finite = [g for g in report.per_episode if np.isfinite(g)]
    std = float(np.std(finite, ddof=1)) if len(finite) > 1 else 0.0
    return CurvePoint(
        episode=episode,
        mean_return=report.mean_return,
        std_return=std,
        recompute_fraction=report.recompute_fraction,
    )


def train(system, testset=None, out_dir=None, log=None) -> TrainResult:
    """Run the full training loop for the configured episode budget.

    Deterministic per (config, master seed). Warm-up episodes count
    toward the budget; evaluation happens whenever the episode counter
    crosses a multiple of rl.eval_interval, plus once after warm-up and
    once at the end. Non-finite parameters abort with the curve so far.
    """
    cfg = system.config
    rl_cfg = cfg.rl
    steps = cfg.harness.episode_steps
    master = cfg.master_seed
    if testset is None:
        testset = build_testset(cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    say = log if log is not None else (lambda msg: None)

    n_raw = len(system.raw_feature_names)
    stats = RunningStats(2 * n_raw)
    collector = _WarmupCollector(n_raw)
    for i in range(rl_cfg.warmup_episodes):
        rec = run_episode(system, collector, steps, derive_seed(master, 2, i))
        if rec.failed:
            say(f"warmup episode {i} failed: {rec.failure}")
            continue
        for entry in rec.decision_entries():
            stats.update(entry.features[:-1])
    mean, std = stats.frozen()
    theta = np.zeros(2 * n_raw + 1)
    theta[-1] = rl_cfg.init_bias
    params = PolicyParams(
        theta=theta,
        feature_mean=mean,
        feature_std=std,
        feature_names=_feature_names(system),
    )

    curve = []
    checkpoints = []
    clip_events = 0
    diverged = False
    episodes_done = rl_cfg.warmup_episodes
    last_eval = -1

    def checkpoint(current_params, episode):
        nonlocal last_eval
        point = _checkpoint_eval(system, current_params, testset, episode)
        curve.append(point)
        last_eval = episode
        say(
            f"episode {episode}: test G {point.mean_return:.4f} "
            f"(recompute {point.recompute_fraction:.3f})"
        )
        if out_dir is not None:
            path = out_dir / f"checkpoint_ep{episode:05d}.json"
            save_policy_params(current_params, path)
            checkpoints.append(str(path))
            (out_dir / "curve.csv").write_text(curve_to_csv(curve))

    checkpoint(params, episodes_done)

    while episodes_done < rl_cfg.total_episodes and not diverged:
        batch = []
        for j in range(rl_cfg.batch_size):
            seed = derive_seed(master, 1, episodes_done + j)
            rec = run_episode(system, LogisticRecompute(params), steps, seed)
            if rec.failed:
                say(f"training episode {episodes_done + j} failed: {rec.failure}")
            else:
                batch.append(rec)
        episodes_done += rl_cfg.batch_size

        if batch:
            grad = gpomdp_gradient(batch, rl_cfg.gamma, n_params=len(params.theta))
            norm = float(np.linalg.norm(grad))
            if norm > rl_cfg.grad_clip:
                grad = grad * (rl_cfg.grad_clip / norm)
                clip_events += 1
                say(f"episode {episodes_done}: gradient clipped ({norm:.2f})")
            theta_new = params.theta - rl_cfg.learning_rate * grad
            if not np.all(np.isfinite(theta_new)):
                diverged = True
                say(f"episode {episodes_done}: parameters diverged, aborting")
                break
            params = PolicyParams(
                theta=theta_new,
                feature_mean=mean,
                feature_std=std,
                feature_names=params.feature_names,
            )
        else:
            say(f"episode {episodes_done}: batch empty, update skipped")

        if (
            episodes_done // rl_cfg.eval_interval > last_eval // rl_cfg.eval_interval
            or episodes_done >= rl_cfg.total_episodes
        ):
            checkpoint(params, episodes_done)

    if last_eval < episodes_done and diverged:
        # Divergence aborts before the boundary eval; close the curve with
        # the last finite parameters.
        checkpoint(params, episodes_done)

    if out_dir is not None:
        save_policy_params(params, out_dir / "params_final.json")
    return TrainResult(
        params=params,
        curve=curve,
        diverged=diverged,
        episodes_run=episodes_done,
        clip_events=clip_events,
        checkpoint_paths=checkpoints,
    )
