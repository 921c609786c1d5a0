"""Closed-loop executor: fly stored plans, replan when the policy says so.

One episode step works through a fixed order: at step 0 a plan is solved
unconditionally and its first input applied; afterwards the recomputation
policy is queried at plan offsets 1..N-1 and a recompute is forced once
the offset would reach N. Between recomputes the stored input is corrected
by LQR feedback on the prediction error (plan minus plant) and clamped to
the input bounds. Costs are logged per step for the learning layer, plus a
terminal cost, so the undiscounted return is the plain sum of the record.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .features import build_features
from .lqr import compensate
from .mpc import MpcSolveError, PlanState, shift_warm_start, solve_ocp
from .systems import rl_step_cost, rl_terminal_cost

__all__ = [
    "AugmentedState",
    "ClosedLoopSim",
    "EpisodeRecord",
    "StepEntry",
    "clamp_input",
    "compute_prediction_error",
    "episode_return",
    "make_sim",
    "run_episode",
    "step_closed_loop",
]


@dataclass
class AugmentedState:
    """Markov state at a decision point: where we are vs. where the plan is.

    params_current carries the battery's observed (production, price)
    pair; the pendulum passes an empty array.
    """

    x_current: np.ndarray
    x_anchor: np.ndarray
    steps_since: int
    params_current: np.ndarray

    def __post_init__(self):
        self.x_current = np.asarray(self.x_current, dtype=float)
        self.x_anchor = np.asarray(self.x_anchor, dtype=float)
        self.params_current = np.asarray(self.params_current, dtype=float)
        if self.steps_since < 0:
            raise ValueError(f"steps_since must be >= 0, got {self.steps_since}")
        if self.steps_since == 0 and not np.array_equal(
            self.x_anchor, self.x_current
        ):
            raise ValueError("fresh plan requires x_anchor == x_current")


@dataclass
class StepEntry:
    """One executed step. action/features/score only exist where the
    policy was actually sampled; forced recomputes leave them None."""

    step: int
    state: np.ndarray
    input: np.ndarray
    rl_cost: float
    recompute: int
    action: int | None = None
    features: np.ndarray | None = None
    score: np.ndarray | None = None


@dataclass
class EpisodeRecord:
    """Everything the harness and the trainer need from one episode."""

    system: str
    seed: int
    repeat: int
    policy_kind: str
    steps: list
    terminal_state: np.ndarray
    terminal_cost: float
    failed: bool = False
    failure: str = ""

    def return_value(self, gamma: float = 1.0) -> float:
        """Discounted return; gamma=1 gives the plain sum of logged costs."""
        total = 0.0
        for entry in self.steps:
            total += gamma**entry.step * entry.rl_cost
        return total + gamma ** len(self.steps) * self.terminal_cost

    def recompute_fraction(self) -> float:
        return sum(e.recompute for e in self.steps) / len(self.steps)

    def recompute_steps(self):
        return [e.step for e in self.steps if e.recompute]

    def decision_entries(self):
        """Steps where the policy was sampled (score credit applies)."""
        return [e for e in self.steps if e.action is not None]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"meta": {
            "system": self.system,
            "seed": self.seed,
            "repeat": self.repeat,
            "policy": self.policy_kind,
            "failed": self.failed,
            "failure": self.failure,
        }})]
        for e in self.steps:
            lines.append(json.dumps({
                "step": e.step,
                "state": e.state.tolist(),
                "input": e.input.tolist(),
                "cost": e.rl_cost,
                "recompute": e.recompute,
                "action": e.action,
                "features": None if e.features is None else e.features.tolist(),
                "score": None if e.score is None else e.score.tolist(),
            }))
        lines.append(json.dumps({"terminal": {
            "state": self.terminal_state.tolist(),
            "cost": None if self.failed else self.terminal_cost,
        }}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EpisodeRecord":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if len(rows) < 2 or "meta" not in rows[0] or "terminal" not in rows[-1]:
            raise ValueError("episode stream needs a meta line, steps, terminal")
        meta, terminal = rows[0]["meta"], rows[-1]["terminal"]
        steps = []
        for row in rows[1:-1]:
            steps.append(StepEntry(
                step=row["step"],
                state=np.array(row["state"], dtype=float),
                input=np.array(row["input"], dtype=float),
                rl_cost=row["cost"],
                recompute=row["recompute"],
                action=row["action"],
                features=None if row["features"] is None
                else np.array(row["features"], dtype=float),
                score=None if row["score"] is None
                else np.array(row["score"], dtype=float),
            ))
        cost = terminal["cost"]
        return cls(
            system=meta["system"],
            seed=meta["seed"],
            repeat=meta["repeat"],
            policy_kind=meta["policy"],
            steps=steps,
            terminal_state=np.array(terminal["state"], dtype=float),
            terminal_cost=float("nan") if cost is None else cost,
            failed=meta["failed"],
            failure=meta["failure"],
        )


def episode_return(record: EpisodeRecord, gamma: float = 1.0) -> float:
    return record.return_value(gamma)


def compute_prediction_error(plan: PlanState, x_measured, i: int) -> np.ndarray:
    """Plan-minus-plant deviation at step i, read off the stored trajectory."""
    offset = i - plan.anchor_time
    horizon = plan.u_mpc.shape[0]
    if not 0 <= offset <= horizon - 1:
        raise ValueError(
            f"step {i} is outside plan coverage "
            f"[{plan.anchor_time}, {plan.anchor_time + horizon - 1}]"
        )
    return plan.x_hat[offset] - np.asarray(x_measured, dtype=float)


def clamp_input(u, lo, hi) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ValueError("lower input bound exceeds upper")
    return np.minimum(np.maximum(u, lo), hi)


@dataclass
class ClosedLoopSim:
    """Mutable loop state threaded through step_closed_loop."""

    system: object
    env: object
    policy_rng: np.random.Generator
    x: np.ndarray
    u_prev: np.ndarray
    t: int = 0
    plan: PlanState | None = None
    cold_retries: int = 0
    last_entry: StepEntry | None = field(default=None, repr=False)


def make_sim(system, env, repeat: int = 0) -> ClosedLoopSim:
    return ClosedLoopSim(
        system=system,
        env=env,
        policy_rng=env.policy_rng(repeat),
        x=env.x0.copy(),
        u_prev=np.full(system.n_u, float(system.config.mpc.u_prev_init)),
    )


def _solve_plan(sim: ClosedLoopSim, anchor: int) -> PlanState:
    """Replan at ``anchor``: shifted warm start, cold retry if it stalls.

    A shifted start occasionally strands the SQP on a poor local path in
    violent episodes; the cold solve then usually converges. Keep whichever
    converged, else the lower-KKT iterate.
    """
    system = sim.system
    cfg = system.config.mpc
    spec = system.make_ocp_spec(sim.env, anchor, sim.u_prev)
    kwargs = dict(
        anchor_time=anchor,
        kkt_tol=cfg.kkt_tol,
        gap_tol=cfg.gap_tol,
        max_iterations=cfg.max_iterations,
        damping=cfg.damping,
        backtrack_factor=cfg.backtrack_factor,
        max_backtracks=cfg.max_backtracks,
    )
    warm = None
    if sim.plan is not None and sim.plan.solution is not None:
        warm = shift_warm_start(spec, sim.plan.solution, anchor - sim.plan.anchor_time)
    plan = None
    if warm is not None:
        try:
            plan = solve_ocp(spec, sim.x, warm_start=warm, **kwargs)
        except MpcSolveError:
            plan = None
        if plan is not None and plan.solution.converged:
            return plan
    cold = solve_ocp(spec, sim.x, warm_start=None, **kwargs)
    if warm is not None:
        sim.cold_retries += 1
    if plan is None or cold.solution.converged:
        return cold
    return cold if cold.solution.kkt < plan.solution.kkt else plan


def step_closed_loop(sim: ClosedLoopSim, policy):
    """Advance the plant one step; returns (sim, step_cost, recompute_flag).

    Policies that carry ``needs_features`` must expose normalization
    statistics through ``.params`` (the logistic policy does); baselines
    are queried with features=None and never touch the RNG.
    """
    system = sim.system
    i = sim.t
    x = sim.x
    horizon = system.horizon
    params_now = system.observe_params(sim.env, i)

    action = None
    features = None
    score = None
    if sim.plan is None:
        recompute = 1
    else:
        offset = i - sim.plan.anchor_time
        if offset >= horizon:
            recompute = 1
        else:
            eps = compute_prediction_error(sim.plan, x, i)
            if policy.needs_features:
                aug = AugmentedState(
                    x_current=x,
                    x_anchor=sim.plan.x_hat[0],
                    steps_since=offset,
                    params_current=params_now,
                )
                raw = system.raw_features(
                    aug.x_current, eps, aug.steps_since, aug.params_current
                )
                features = build_features(
                    raw, policy.params.feature_mean, policy.params.feature_std
                )
            action = policy.action(features, i, sim.policy_rng)
            score = policy.score(features, action)
            recompute = int(action)

    if recompute:
        try:
            sim.plan = _solve_plan(sim, i)
        except MpcSolveError as exc:
            raise MpcSolveError(f"step {i}: {exc}") from exc
        u = clamp_input(sim.plan.u_mpc[0], system.input_low, system.input_high)
    else:
        u = clamp_input(
            sim.plan.u_mpc[offset] + compensate(system.gain, eps),
            system.input_low,
            system.input_high,
        )

    cost = rl_step_cost(system, x, u, recompute, params_now)
    x_next = system.plant_step(x, u, i, recompute, sim.env)

    sim.last_entry = StepEntry(
        step=i,
        state=x.copy(),
        input=u.copy(),
        rl_cost=cost,
        recompute=recompute,
        action=action,
        features=features,
        score=score,
    )
    sim.x = np.asarray(x_next, dtype=float)
    sim.u_prev = u
    sim.t = i + 1
    return sim, cost, recompute


def run_episode(system, policy, length: int, seed: int, repeat: int = 0) -> EpisodeRecord:
    """One full episode; deterministic given (config, policy params, seed).

    repeat selects an independent policy-sampling stream over the same
    plant realization, so stochastic policies can be re-evaluated on a
    frozen episode. Solver failure marks the episode failed rather than
    raising; the partial record keeps what ran.
    """
    if length < 1:
        raise ValueError(f"episode length must be >= 1, got {length}")
    env = system.make_env(seed, length)
    sim = make_sim(system, env, repeat)
    entries = []
    failed = False
    failure = ""
    try:
        for _ in range(length):
            sim, _, _ = step_closed_loop(sim, policy)
            entries.append(sim.last_entry)
    except MpcSolveError as exc:
        failed = True
        failure = str(exc)
    return EpisodeRecord(
        system=system.name,
        seed=seed,
        repeat=repeat,
        policy_kind=policy.kind,
        steps=entries,
        terminal_state=sim.x.copy(),
        terminal_cost=float("nan") if failed else rl_terminal_cost(system, sim.x),
        failed=failed,
        failure=failure,
    )
