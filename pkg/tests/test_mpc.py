"""Planner checks against independent optima.

The main oracle is the backward Riccati recursion for unconstrained
LTI-quadratic instances, written out here from scratch. The 2-step scalar
instance below is also solved fully by hand:

    x+ = x + u, stage x^2 + u^2, terminal x^2, N = 2, start x = 1.
    P2 = 1; K1 = 1/2, P1 = 3/2; K0 = 3/5, P0 = 8/5.
    u* = (-0.6, -0.2), states (1, 0.4, 0.2), J* = 1.6.
"""

import numpy as np
import pytest

from etmpc.config import RunConfig, config_from_dict
from etmpc.mpc import (
    MpcSolveError,
    NlpSolution,
    OcpSpec,
    kkt_residual,
    quadratic_stage,
    quadratic_terminal,
    rollout,
    shift_warm_start,
    solve_ocp,
)
from etmpc.systems import build_system

BIG = 1e9


def lti_spec(a, b, q, r, qf, horizon, u_lo=None, u_hi=None, du_weight=None,
             u_prev=None):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    n_x, n_u = b.shape
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    qf = np.atleast_2d(np.asarray(qf, dtype=float))

    def dynamics(xs, us, ps):
        return xs @ a.T + us @ b.T

    def dynamics_jac(xs, us, ps):
        n = xs.shape[0]
        return (np.broadcast_to(a, (n, n_x, n_x)),
                np.broadcast_to(b, (n, n_x, n_u)))

    stage_cost, stage_grad, stage_hess = quadratic_stage(q, r)
    terminal_cost, terminal_grad, terminal_hess = quadratic_terminal(qf)
    return OcpSpec(
        horizon=horizon,
        n_x=n_x,
        n_u=n_u,
        dynamics=dynamics,
        stage_cost=stage_cost,
        terminal_cost=terminal_cost,
        u_lower=np.full(n_u, -BIG) if u_lo is None else np.asarray(u_lo, float),
        u_upper=np.full(n_u, BIG) if u_hi is None else np.asarray(u_hi, float),
        du_weight=du_weight,
        u_prev=u_prev,
        dynamics_jac=dynamics_jac,
        stage_grad=stage_grad,
        stage_hess=stage_hess,
        terminal_grad=terminal_grad,
        terminal_hess=terminal_hess,
    )


def riccati_oracle(a, b, q, r, qf, horizon, x0):
    """Finite-horizon LQR by backward recursion; returns (inputs, cost)."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    q, r, qf = np.atleast_2d(q), np.atleast_2d(r), np.atleast_2d(qf)
    p = qf.copy()
    gains = []
    for _ in range(horizon):
        k = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
        p = q + a.T @ p @ a - a.T @ p @ b @ k
        gains.append(k)
    gains.reverse()
    x = np.asarray(x0, dtype=float)
    inputs = np.empty((horizon, b.shape[1]))
    for i, k in enumerate(gains):
        inputs[i] = -k @ x
        x = a @ x + b @ inputs[i]
    cost = float(np.asarray(x0) @ p @ np.asarray(x0))
    return inputs, cost


def test_two_step_scalar_hand_solution():
    spec = lti_spec(1.0, 1.0, 1.0, 1.0, 1.0, horizon=2)
    plan = solve_ocp(spec, np.array([1.0]), kkt_tol=1e-10)
    sol = plan.solution
    assert sol.converged
    np.testing.assert_allclose(sol.inputs[:, 0], [-0.6, -0.2], atol=1e-8)
    np.testing.assert_allclose(sol.states[:, 0], [1.0, 0.4, 0.2], atol=1e-8)
    assert abs(sol.objective - 1.6) < 1e-8
    assert sol.kkt <= 1e-6


def test_riccati_equivalence_random_instances():
    rng = np.random.default_rng(2024)
    for trial in range(20):
        n_x = int(rng.integers(1, 5))
        n_u = int(rng.integers(1, 3))
        horizon = int(rng.integers(2, 11))
        a = rng.normal(size=(n_x, n_x))
        a *= 0.95 / max(np.abs(np.linalg.eigvals(a)).max(), 0.5)
        b = rng.normal(size=(n_x, n_u))
        m = rng.normal(size=(n_x, n_x))
        q = m.T @ m + 0.1 * np.eye(n_x)
        mr = rng.normal(size=(n_u, n_u))
        r = mr.T @ mr + 0.5 * np.eye(n_u)
        qf = 2.0 * q
        x0 = rng.normal(size=n_x)

        spec = lti_spec(a, b, q, r, qf, horizon)
        plan = solve_ocp(spec, x0, kkt_tol=1e-9)
        sol = plan.solution
        oracle_u, oracle_j = riccati_oracle(a, b, q, r, qf, horizon, x0)
        assert sol.converged, f"trial {trial} did not converge"
        scale = max(1.0, np.abs(oracle_u[0]).max())
        np.testing.assert_allclose(
            sol.inputs[0], oracle_u[0], atol=1e-6 * scale,
            err_msg=f"trial {trial}",
        )
        assert abs(sol.objective - oracle_j) < 1e-6 * max(1.0, abs(oracle_j))


def test_shooting_gaps_closed_at_convergence():
    spec = lti_spec(
        [[1.0, 0.1], [0.0, 1.0]], [[0.0], [0.1]],
        np.eye(2), [[0.1]], np.eye(2), horizon=8,
    )
    plan = solve_ocp(spec, np.array([1.0, -0.5]))
    sol = plan.solution
    resim = rollout(spec, sol.states[0], sol.inputs)
    assert np.max(np.abs(resim - sol.states)) <= 1e-8
    np.testing.assert_array_equal(sol.states[0], [1.0, -0.5])


def test_one_step_input_rate_penalty():
    # N=1 with du weight d and previous input p:
    # J(u) = 1 + u^2 + (1+u)^2 + d (u-p)^2, minimized at u = (d p - 1)/(2+d).
    spec = lti_spec(1.0, 1.0, 1.0, 1.0, 1.0, horizon=1,
                    du_weight=[[3.0]], u_prev=[0.5])
    plan = solve_ocp(spec, np.array([1.0]))
    sol = plan.solution
    assert sol.converged
    assert abs(sol.inputs[0, 0] - 0.1) < 1e-8
    assert abs(sol.objective - 2.70) < 1e-8


def test_active_input_bounds_are_exact():
    spec = lti_spec(1.0, 1.0, 1.0, 0.01, 1.0, horizon=4,
                    u_lo=[-1.0], u_hi=[1.0])
    plan = solve_ocp(spec, np.array([5.0]))
    sol = plan.solution
    assert sol.converged
    assert sol.inputs[0, 0] == -1.0
    assert np.all(sol.inputs >= -1.0) and np.all(sol.inputs <= 1.0)


def test_clipped_lqr_differs_from_constrained_optimum():
    # Saturating the unconstrained solution is not optimal: the constrained
    # planner anticipates the bound. Both are compared against brute force.
    a, b, q, r, qf = 1.0, 1.0, 1.0, 0.01, 1.0
    spec = lti_spec(a, b, q, r, qf, horizon=3, u_lo=[-1.0], u_hi=[1.0])
    plan = solve_ocp(spec, np.array([2.5]))

    def cost_of(u):
        x = 2.5
        total = 0.0
        for k in range(3):
            total += q * x * x + r * u[k] * u[k]
            x = a * x + b * u[k]
        return total + qf * x * x

    grid = np.linspace(-1, 1, 81)
    best = min(
        cost_of((u0, u1, u2)) for u0 in grid for u1 in grid for u2 in grid
    )
    assert plan.solution.objective <= best + 1e-6


def test_pendulum_equilibrium_stays_at_rest():
    cfg = RunConfig()
    system = build_system("pendulum", cfg)
    env = system.make_env(env_seed=0, length=10)
    spec = system.make_ocp_spec(env, 0, np.zeros(1))
    plan = solve_ocp(spec, np.zeros(4))
    sol = plan.solution
    assert sol.converged
    assert np.max(np.abs(sol.inputs)) < 1e-7
    assert abs(sol.objective) < 1e-12


def test_pendulum_swing_recovery():
    cfg = RunConfig()
    system = build_system("pendulum", cfg)
    env = system.make_env(env_seed=0, length=10)
    spec = system.make_ocp_spec(env, 0, np.zeros(1))
    x_bar = np.array([0.0, 0.5, 0.3, -0.2])
    plan = solve_ocp(spec, x_bar)
    sol = plan.solution
    assert sol.converged
    assert sol.kkt <= 1e-6
    resim = rollout(spec, x_bar, sol.inputs)
    assert np.max(np.abs(resim - sol.states)) <= 1e-8
    assert np.all(np.abs(sol.inputs) <= 25.0)
    assert abs(sol.states[-1, 2]) < 0.05
    # Planning must beat doing nothing.
    idle = rollout(spec, x_bar, np.zeros((20, 1)))
    assert sol.objective < np.sum(idle[:-1, 2] ** 2) + idle[-1, 2] ** 2


def test_fd_fallback_matches_analytic_jacobians():
    cfg = RunConfig()
    system = build_system("pendulum", cfg)
    env = system.make_env(env_seed=0, length=10)
    full = system.make_ocp_spec(env, 0, np.zeros(1))
    bare = OcpSpec(
        horizon=8,
        n_x=4,
        n_u=1,
        dynamics=full.dynamics,
        stage_cost=full.stage_cost,
        terminal_cost=full.terminal_cost,
        u_lower=full.u_lower,
        u_upper=full.u_upper,
        du_weight=full.du_weight,
    )
    ref = OcpSpec(
        horizon=8,
        n_x=4,
        n_u=1,
        dynamics=full.dynamics,
        stage_cost=full.stage_cost,
        terminal_cost=full.terminal_cost,
        u_lower=full.u_lower,
        u_upper=full.u_upper,
        du_weight=full.du_weight,
        dynamics_jac=full.dynamics_jac,
        stage_grad=full.stage_grad,
        stage_hess=full.stage_hess,
        terminal_grad=full.terminal_grad,
        terminal_hess=full.terminal_hess,
    )
    x_bar = np.array([0.0, 0.2, 0.25, -0.1])
    plan_fd = solve_ocp(bare, x_bar)
    plan_an = solve_ocp(ref, x_bar)
    assert plan_fd.solution.converged and plan_an.solution.converged
    np.testing.assert_allclose(
        plan_fd.solution.inputs[0], plan_an.solution.inputs[0], atol=1e-4
    )


def test_kkt_residual_flags_suboptimal_point():
    spec = lti_spec(1.0, 1.0, 1.0, 1.0, 1.0, horizon=2)
    x_bar = np.array([1.0])
    plan = solve_ocp(spec, x_bar)
    assert kkt_residual(spec, x_bar, plan.solution) <= 1e-6

    zero_point = NlpSolution(
        states=rollout(spec, x_bar, np.zeros((2, 1))),
        inputs=np.zeros((2, 1)),
        objective=np.nan,
        kkt=np.inf,
        iterations=0,
        converged=False,
    )
    assert kkt_residual(spec, x_bar, zero_point) > 1e-2


def test_kkt_residual_zero_at_analytic_optimum():
    spec = lti_spec(1.0, 1.0, 1.0, 1.0, 1.0, horizon=2)
    x_bar = np.array([1.0])
    inputs = np.array([[-0.6], [-0.2]])
    point = NlpSolution(
        states=rollout(spec, x_bar, inputs),
        inputs=inputs,
        objective=1.6,
        kkt=np.nan,
        iterations=0,
        converged=True,
    )
    assert kkt_residual(spec, x_bar, point) < 1e-10


def test_kkt_residual_respects_active_bounds():
    # At the constrained optimum the projected gradient vanishes even though
    # the raw gradient does not.
    spec = lti_spec(1.0, 1.0, 1.0, 0.01, 1.0, horizon=4,
                    u_lo=[-1.0], u_hi=[1.0])
    x_bar = np.array([5.0])
    plan = solve_ocp(spec, x_bar)
    assert plan.solution.inputs[0, 0] == -1.0
    assert kkt_residual(spec, x_bar, plan.solution) <= 1e-6


def test_battery_lp_vertex_solution():
    # Three steps with strictly decreasing prices (1.2, 1.0, 0.8), no
    # terminal value, starting SoC 0.15: the unique optimum sells at full
    # rate first, then exactly down to empty, then holds.
    # Revenue delta*(360*1.2 + 180*1.0) = 1.7.
    ratio = 1.0 / 3600.0
    delta = 10.0 / 3600.0
    prices = np.array([[0.0, 1.2], [0.0, 1.0], [0.0, 0.8]])

    def dynamics(xs, us, ps):
        return xs - ratio * us

    def dynamics_jac(xs, us, ps):
        n = xs.shape[0]
        return np.ones((n, 1, 1)), np.full((n, 1, 1), -ratio)

    def stage_cost(xs, us, ps):
        return -delta * ps[:, 1] * us[:, 0]

    def stage_grad(xs, us, ps):
        return np.zeros_like(xs), (-delta * ps[:, 1])[:, None]

    def stage_hess(xs, us, ps):
        n = xs.shape[0]
        return np.zeros((n, 1, 1)), np.zeros((n, 1, 1))

    spec = OcpSpec(
        horizon=3,
        n_x=1,
        n_u=1,
        dynamics=dynamics,
        stage_cost=stage_cost,
        terminal_cost=lambda x: 0.0,
        u_lower=np.array([-360.0]),
        u_upper=np.array([360.0]),
        params=prices,
        dynamics_jac=dynamics_jac,
        stage_grad=stage_grad,
        stage_hess=stage_hess,
        terminal_grad=lambda x: np.zeros(1),
        terminal_hess=lambda x: np.zeros((1, 1)),
        soft_constraint=lambda xs: np.stack([-xs[:, 0], xs[:, 0] - 1.0], axis=1),
        soft_jac=lambda xs: np.tile(np.array([[-1.0], [1.0]]), (xs.shape[0], 1, 1)),
        soft_weight=1e3,
        n_soft=2,
    )
    plan = solve_ocp(spec, np.array([0.15]))
    sol = plan.solution
    assert sol.converged
    np.testing.assert_allclose(sol.inputs[:, 0], [360.0, 180.0, 0.0], atol=1e-3)
    assert abs(sol.objective - (-1.7)) < 1e-4
    assert sol.max_soft_violation < 1e-6
    assert np.min(sol.states) >= -1e-6


def test_battery_system_spec_keeps_soc_feasible():
    cfg = config_from_dict({"system": "battery"})
    system = build_system("battery", cfg)
    rng = np.random.default_rng(5)
    for trial in range(8):
        env = system.make_env(env_seed=trial, length=40)
        spec = system.make_ocp_spec(env, 0, np.zeros(1))
        x0 = np.array([rng.uniform(0.0, 1.0)])
        plan = solve_ocp(spec, x0)
        sol = plan.solution
        assert sol.converged, f"trial {trial}"
        assert np.all(sol.inputs >= -360.0 - 1e-9)
        assert np.all(sol.inputs <= 360.0 + 1e-9)
        assert sol.max_soft_violation <= 2e-2
        assert np.all(sol.states[1:] >= -2e-2)
        assert np.all(sol.states[1:] <= 1.0 + 2e-2)


def test_warm_start_shift_identity():
    spec = lti_spec(1.0, 1.0, 1.0, 1.0, 1.0, horizon=2)
    plan = solve_ocp(spec, np.array([1.0]))
    shifted = shift_warm_start(spec, plan.solution, 0)
    np.testing.assert_array_equal(shifted.inputs, plan.solution.inputs)
    np.testing.assert_array_equal(shifted.states, plan.solution.states)


def test_warm_start_shift_structure():
    cfg = RunConfig()
    system = build_system("pendulum", cfg)
    env = system.make_env(env_seed=0, length=10)
    spec = system.make_ocp_spec(env, 0, np.zeros(1))
    plan = solve_ocp(spec, np.array([0.0, 0.3, 0.2, 0.0]))
    sol = plan.solution
    shifted = shift_warm_start(spec, sol, 3)
    n = spec.horizon
    np.testing.assert_array_equal(shifted.inputs[: n - 3], sol.inputs[3:])
    np.testing.assert_array_equal(shifted.inputs[n - 3 :],
                                  np.tile(sol.inputs[-1], (3, 1)))
    np.testing.assert_array_equal(shifted.states[0], sol.states[3])
    resim = rollout(spec, shifted.states[0], shifted.inputs)
    np.testing.assert_allclose(resim, shifted.states, atol=1e-7)
    assert not shifted.converged


def test_warm_start_shift_rejects_bad_offset():
    spec = lti_spec(1.0, 1.0, 1.0, 1.0, 1.0, horizon=2)
    plan = solve_ocp(spec, np.array([1.0]))
    with pytest.raises(ValueError):
        shift_warm_start(spec, plan.solution, 3)
    with pytest.raises(ValueError):
        shift_warm_start(spec, plan.solution, -1)


def test_warm_start_cuts_iterations():
    cfg = RunConfig()
    system = build_system("pendulum", cfg)
    env = system.make_env(env_seed=1, length=10)
    rng = np.random.default_rng(7)
    cold_iters, warm_iters = [], []
    for _ in range(6):
        x_bar = np.array([
            0.0, rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(-1, 1),
        ])
        spec = system.make_ocp_spec(env, 0, np.zeros(1))
        plan = solve_ocp(spec, x_bar)
        # Advance one noise-free plant step along the plan.
        x_next = system.model_step(x_bar, plan.solution.inputs[0], np.zeros(0))
        spec2 = system.make_ocp_spec(env, 1, plan.solution.inputs[0])
        warm = shift_warm_start(spec2, plan.solution, 1)
        plan_warm = solve_ocp(spec2, x_next, warm_start=warm)
        plan_cold = solve_ocp(spec2, x_next)
        assert plan_warm.solution.converged and plan_cold.solution.converged
        np.testing.assert_allclose(
            plan_warm.solution.inputs[0],
            plan_cold.solution.inputs[0],
            atol=1e-4,
        )
        warm_iters.append(plan_warm.solution.iterations)
        cold_iters.append(plan_cold.solution.iterations)
    assert np.mean(warm_iters) < np.mean(cold_iters)


def brute_force_box_qp(h, g, lo, hi):
    # Enumerate all lo/free/hi activity patterns; the problem is strictly
    # convex so the first KKT-consistent pattern is the unique optimum.
    import itertools

    n = len(g)
    for pattern in itertools.product((-1, 0, 1), repeat=n):
        d = np.array([
            lo[i] if p == -1 else hi[i] if p == 1 else 0.0
            for i, p in enumerate(pattern)
        ])
        free = np.array([i for i, p in enumerate(pattern) if p == 0], dtype=int)
        if free.size:
            fixed_part = h[free] @ d - h[np.ix_(free, free)] @ d[free]
            d[free] = np.linalg.solve(
                h[np.ix_(free, free)], -(g[free] + fixed_part)
            )
            if np.any(d[free] < lo[free] - 1e-10) or np.any(
                d[free] > hi[free] + 1e-10
            ):
                continue
        grad = h @ d + g
        ok = True
        for i, p in enumerate(pattern):
            if p == -1 and grad[i] < -1e-8:
                ok = False
            elif p == 1 and grad[i] > 1e-8:
                ok = False
        if ok:
            return d
    raise AssertionError("no KKT-consistent pattern found")


def test_box_qp_matches_active_set_enumeration():
    from etmpc.mpc import _solve_box_qp

    rng = np.random.default_rng(11)
    for trial in range(30):
        n = int(rng.integers(2, 7))
        root = rng.normal(size=(n, n))
        h = root @ root.T + 0.1 * np.eye(n)
        g = rng.normal(size=n) * 3
        lo = -rng.uniform(0.1, 2.0, size=n)
        hi = rng.uniform(0.1, 2.0, size=n)
        d = _solve_box_qp(h, g, lo, hi)
        assert d is not None, f"trial {trial} did not certify"
        expected = brute_force_box_qp(h, g, lo, hi)
        np.testing.assert_allclose(d, expected, atol=1e-8)
        assert np.all(d >= lo - 1e-12) and np.all(d <= hi + 1e-12)


def test_iteration_budget_exhaustion_is_flagged():
    cfg = RunConfig()
    system = build_system("pendulum", cfg)
    env = system.make_env(env_seed=0, length=10)
    spec = system.make_ocp_spec(env, 0, np.zeros(1))
    plan = solve_ocp(spec, np.array([0.0, 0.5, 0.4, -0.3]), max_iterations=1)
    assert not plan.solution.converged
    assert plan.solution.iterations == 1
    assert np.all(np.isfinite(plan.solution.inputs))


def test_non_finite_dynamics_raises():
    def bad_dynamics(xs, us, ps):
        out = xs + us
        out[..., 0] = np.nan
        return out

    stage_cost, stage_grad, stage_hess = quadratic_stage(
        np.eye(1), np.eye(1)
    )
    terminal_cost, terminal_grad, terminal_hess = quadratic_terminal(np.eye(1))
    spec = OcpSpec(
        horizon=3,
        n_x=1,
        n_u=1,
        dynamics=bad_dynamics,
        stage_cost=stage_cost,
        terminal_cost=terminal_cost,
        u_lower=np.array([-1.0]),
        u_upper=np.array([1.0]),
    )
    with pytest.raises(MpcSolveError):
        solve_ocp(spec, np.array([1.0]))


def test_plan_state_bookkeeping():
    spec = lti_spec(1.0, 1.0, 1.0, 1.0, 1.0, horizon=2)
    plan = solve_ocp(spec, np.array([1.0]), anchor_time=17)
    assert plan.anchor_time == 17
    np.testing.assert_array_equal(plan.x_hat, plan.solution.states)
    np.testing.assert_array_equal(plan.u_mpc, plan.solution.inputs)


def test_quadratic_cost_helpers():
    q = np.array([[2.0, 0.5], [0.5, 1.0]])
    r = np.array([[0.3]])
    stage_cost, stage_grad, stage_hess = quadratic_stage(q, r)
    xs = np.array([[1.0, -2.0], [0.5, 0.0]])
    us = np.array([[2.0], [-1.0]])
    ps = np.zeros((2, 0))
    vals = stage_cost(xs, us, ps)
    expect0 = xs[0] @ q @ xs[0] + us[0] @ r @ us[0]
    assert abs(vals[0] - expect0) < 1e-12
    gx, gu = stage_grad(xs, us, ps)
    np.testing.assert_allclose(gx[0], 2 * q @ xs[0], atol=1e-12)
    np.testing.assert_allclose(gu[1], 2 * r @ us[1], atol=1e-12)
    hx, hu = stage_hess(xs, us, ps)
    np.testing.assert_allclose(hx[0], 2 * q, atol=1e-12)
    np.testing.assert_allclose(hu[1], 2 * r, atol=1e-12)

    terminal_cost, terminal_grad, terminal_hess = quadratic_terminal(q)
    x = np.array([1.0, 3.0])
    assert abs(terminal_cost(x) - x @ q @ x) < 1e-12
    np.testing.assert_allclose(terminal_grad(x), 2 * q @ x, atol=1e-12)
    np.testing.assert_allclose(terminal_hess(x), 2 * q, atol=1e-12)
