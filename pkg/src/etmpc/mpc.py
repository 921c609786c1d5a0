"""Plan generation: a multiple-shooting SQP for the finite-horizon OCP.

The problem solved at every recomputation instant is

    min  sum_k [ l(x_k, u_k, p_k) + (u_k - u_{k-1})' D (u_k - u_{k-1}) ]
         + m(x_N)
    s.t. x_0 = x_bar,  x_{k+1} = f(x_k, u_k, p_k),
         u_lo <= u_k <= u_hi,  H(x_k) <= 0 (softened, L1 penalty)

transcribed with states and inputs both as decision variables. Each SQP
iteration linearizes the shooting constraints, condenses the state
increments out of the quadratic subproblem, and solves a small
box-constrained subproblem: a plain linear solve when no inequality is
active, cvxopt's interior point when one is, and a HiGHS simplex solve
when the problem carries no curvature at all (the storage trading OCP is
such an LP; simplex lands exactly on a vertex with exact duals, which an
interior point cannot). Steps are accepted by backtracking on an L1 merit
function. Input bounds are enforced exactly; state constraints enter
through slack variables with a linear penalty, so the penalty is exact
and the subproblem stays smooth.

The Gauss-Newton Hessian uses the cost curvature blocks only (no
constraint curvature, no x-u cross terms) and is damped in the input
space to stay positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from cvxopt import matrix as _cvx_matrix
from cvxopt import solvers as _cvx_solvers
from scipy.optimize import linprog as _linprog

_cvx_solvers.options["show_progress"] = False
_cvx_solvers.options["abstol"] = 1e-10
_cvx_solvers.options["reltol"] = 1e-9
_cvx_solvers.options["feastol"] = 1e-9

__all__ = [
    "OcpSpec",
    "NlpSolution",
    "PlanState",
    "MpcSolveError",
    "solve_ocp",
    "shift_warm_start",
    "kkt_residual",
    "rollout",
    "quadratic_stage",
    "quadratic_terminal",
]


class MpcSolveError(RuntimeError):
    """Raised when the OCP solve cannot produce a usable plan."""


@dataclass
class OcpSpec:
    """Data defining one OCP instance.

    All evaluation callables are batched over the leading axis: states
    arrive as (B, n_x), inputs as (B, n_u), parameters as (B, n_p).
    Derivative callables are optional; central finite differences with
    ``fd_step`` fill the gaps. ``stage_hess``/``terminal_hess`` supply
    literal second derivatives (Gauss-Newton blocks), e.g. 2Q for a
    quadratic form x'Qx.
    """

    horizon: int
    n_x: int
    n_u: int
    dynamics: Callable
    stage_cost: Callable
    terminal_cost: Callable
    u_lower: np.ndarray
    u_upper: np.ndarray
    params: np.ndarray | None = None
    du_weight: np.ndarray | None = None
    u_prev: np.ndarray | None = None
    dynamics_jac: Optional[Callable] = None
    # Optional fused evaluation returning (next_states, A, B) in one pass;
    # saves re-deriving shared intermediates for integrator-style models.
    dynamics_with_jac: Optional[Callable] = None
    stage_grad: Optional[Callable] = None
    stage_hess: Optional[Callable] = None
    terminal_grad: Optional[Callable] = None
    terminal_hess: Optional[Callable] = None
    soft_constraint: Optional[Callable] = None
    soft_jac: Optional[Callable] = None
    soft_weight: float = 1e3
    n_soft: int = 0
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.u_lower = np.broadcast_to(
            np.asarray(self.u_lower, dtype=float), (self.n_u,)
        ).copy()
        self.u_upper = np.broadcast_to(
            np.asarray(self.u_upper, dtype=float), (self.n_u,)
        ).copy()
        if np.any(self.u_lower > self.u_upper):
            raise ValueError("input bounds are inverted")
        if self.params is None:
            self.params = np.zeros((self.horizon, 0))
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape[0] != self.horizon:
            raise ValueError(
                f"params has {self.params.shape[0]} rows, horizon is {self.horizon}"
            )
        if self.du_weight is None:
            self.du_weight = np.zeros((self.n_u, self.n_u))
        self.du_weight = np.atleast_2d(np.asarray(self.du_weight, dtype=float))
        if self.du_weight.shape != (self.n_u, self.n_u):
            raise ValueError("du_weight must be (n_u, n_u)")
        if self.u_prev is None:
            self.u_prev = np.zeros(self.n_u)
        self.u_prev = np.asarray(self.u_prev, dtype=float).reshape(self.n_u)
        if self.soft_constraint is not None:
            if self.soft_weight <= 0:
                raise ValueError("soft_weight must be positive")
            if self.n_soft < 1:
                raise ValueError("n_soft must be set with soft_constraint")


@dataclass
class NlpSolution:
    """Decision variables plus convergence diagnostics for one solve."""

    states: np.ndarray
    inputs: np.ndarray
    objective: float
    kkt: float
    iterations: int
    converged: bool
    lam: np.ndarray | None = field(default=None, repr=False)
    nu: np.ndarray | None = field(default=None, repr=False)
    max_soft_violation: float = 0.0


@dataclass
class PlanState:
    """A stored plan: predicted states, inputs, and when it was solved."""

    x_hat: np.ndarray
    u_mpc: np.ndarray
    anchor_time: int
    solution: NlpSolution | None = field(default=None, repr=False)


# --------------------------------------------------------------------------
# Derivative fallbacks


def _fd_dynamics_jac(spec: OcpSpec, xs, us, ps):
    """Central finite differences of the dynamics, batched."""
    b = xs.shape[0]
    h = spec.fd_step
    a_mats = np.empty((b, spec.n_x, spec.n_x))
    b_mats = np.empty((b, spec.n_x, spec.n_u))
    for j in range(spec.n_x):
        dx = np.zeros(spec.n_x)
        dx[j] = h
        a_mats[:, :, j] = (
            spec.dynamics(xs + dx, us, ps) - spec.dynamics(xs - dx, us, ps)
        ) / (2 * h)
    for j in range(spec.n_u):
        du = np.zeros(spec.n_u)
        du[j] = h
        b_mats[:, :, j] = (
            spec.dynamics(xs, us + du, ps) - spec.dynamics(xs, us - du, ps)
        ) / (2 * h)
    return a_mats, b_mats


def _fd_stage_grad(spec: OcpSpec, xs, us, ps):
    b = xs.shape[0]
    h = spec.fd_step
    gx = np.empty((b, spec.n_x))
    gu = np.empty((b, spec.n_u))
    for j in range(spec.n_x):
        dx = np.zeros(spec.n_x)
        dx[j] = h
        gx[:, j] = (
            spec.stage_cost(xs + dx, us, ps) - spec.stage_cost(xs - dx, us, ps)
        ) / (2 * h)
    for j in range(spec.n_u):
        du = np.zeros(spec.n_u)
        du[j] = h
        gu[:, j] = (
            spec.stage_cost(xs, us + du, ps) - spec.stage_cost(xs, us - du, ps)
        ) / (2 * h)
    return gx, gu


def _fd_stage_hess(spec: OcpSpec, xs, us, ps):
    """Diagonal curvature by second differences; crude but only a model."""
    b = xs.shape[0]
    h = 1e-4
    base = spec.stage_cost(xs, us, ps)
    hxx = np.zeros((b, spec.n_x, spec.n_x))
    huu = np.zeros((b, spec.n_u, spec.n_u))
    for j in range(spec.n_x):
        dx = np.zeros(spec.n_x)
        dx[j] = h
        second = (
            spec.stage_cost(xs + dx, us, ps)
            - 2 * base
            + spec.stage_cost(xs - dx, us, ps)
        ) / h**2
        hxx[:, j, j] = np.maximum(second, 0.0)
    for j in range(spec.n_u):
        du = np.zeros(spec.n_u)
        du[j] = h
        second = (
            spec.stage_cost(xs, us + du, ps)
            - 2 * base
            + spec.stage_cost(xs, us - du, ps)
        ) / h**2
        huu[:, j, j] = np.maximum(second, 0.0)
    return hxx, huu


def _fd_terminal_grad(spec: OcpSpec, x):
    h = spec.fd_step
    g = np.empty(spec.n_x)
    for j in range(spec.n_x):
        dx = np.zeros(spec.n_x)
        dx[j] = h
        g[j] = (spec.terminal_cost(x + dx) - spec.terminal_cost(x - dx)) / (2 * h)
    return g


def _fd_terminal_hess(spec: OcpSpec, x):
    h = 1e-4
    base = spec.terminal_cost(x)
    out = np.zeros((spec.n_x, spec.n_x))
    for j in range(spec.n_x):
        dx = np.zeros(spec.n_x)
        dx[j] = h
        out[j, j] = max(
            (spec.terminal_cost(x + dx) - 2 * base + spec.terminal_cost(x - dx))
            / h**2,
            0.0,
        )
    return out


def _fd_soft_jac(spec: OcpSpec, xs):
    b = xs.shape[0]
    h = spec.fd_step
    out = np.empty((b, spec.n_soft, spec.n_x))
    for j in range(spec.n_x):
        dx = np.zeros(spec.n_x)
        dx[j] = h
        out[:, :, j] = (
            spec.soft_constraint(xs + dx) - spec.soft_constraint(xs - dx)
        ) / (2 * h)
    return out


# --------------------------------------------------------------------------
# Problem evaluation helpers


def rollout(spec: OcpSpec, x0: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Forward-simulate the model: returns (N+1, n_x) states."""
    n = spec.horizon
    states = np.empty((n + 1, spec.n_x))
    states[0] = x0
    for k in range(n):
        states[k + 1] = spec.dynamics(
            states[k][None, :], inputs[k][None, :], spec.params[k][None, :]
        )[0]
    return states


def _du_value(spec: OcpSpec, inputs: np.ndarray) -> float:
    """Value of the input-change penalty."""
    d = spec.du_weight
    du = inputs - np.vstack([spec.u_prev[None, :], inputs[:-1]])
    return float(np.einsum("ki,ij,kj->", du, d, du))


def _du_grad(spec: OcpSpec, inputs: np.ndarray) -> np.ndarray:
    """Gradient of the input-change penalty, flattened to (N * n_u,)."""
    d = spec.du_weight
    du = inputs - np.vstack([spec.u_prev[None, :], inputs[:-1]])
    grad = 2.0 * du @ d
    grad[:-1] -= 2.0 * du[1:] @ d
    return grad.ravel()


def _du_hessian(spec: OcpSpec) -> np.ndarray:
    """Constant banded Hessian of the input-change penalty."""
    n, m = spec.horizon, spec.n_u
    hess = np.zeros((n * m, n * m))
    two_d = 2.0 * spec.du_weight
    for k in range(n):
        sl = slice(k * m, (k + 1) * m)
        hess[sl, sl] += two_d
        if k + 1 < n:
            nxt = slice((k + 1) * m, (k + 2) * m)
            hess[sl, sl] += two_d
            hess[sl, nxt] -= two_d
            hess[nxt, sl] -= two_d
    return hess


def _soft_values(spec: OcpSpec, states: np.ndarray):
    """Constraint rows H(x_k) for k = 1..N, or None."""
    if spec.soft_constraint is None:
        return None
    return spec.soft_constraint(states[1:])


def _objective(spec: OcpSpec, states, inputs):
    stage = spec.stage_cost(states[:-1], inputs, spec.params)
    value = float(np.sum(stage)) + float(spec.terminal_cost(states[-1]))
    value += _du_value(spec, inputs)
    soft = _soft_values(spec, states)
    if soft is not None:
        value += spec.soft_weight * float(np.sum(np.maximum(soft, 0.0)))
    return value


def _gaps(spec: OcpSpec, states, inputs):
    preds = spec.dynamics(states[:-1], inputs, spec.params)
    return states[1:] - preds


# --------------------------------------------------------------------------
# KKT residual


def _kkt_with_multipliers(spec, states, inputs, lam, a_mats, b_mats, gu_all):
    """Projected stationarity in u plus shooting gaps, given multipliers.

    ``lam[k]`` multiplies the constraint x_{k+1} - f(x_k, u_k, p_k) = 0.
    """
    r_u = gu_all - np.einsum("kij,kj->ki", np.swapaxes(b_mats, 1, 2), lam)
    proj = inputs - np.clip(inputs - r_u, spec.u_lower, spec.u_upper)
    gaps = _gaps(spec, states, inputs)
    return max(float(np.abs(proj).max()), float(np.abs(gaps).max()))


def _backward_multipliers(n, a_mats, gx_all, gm, hxx_all, hm, delta_x,
                          soft_jacs, nu_full):
    """Shooting multipliers from stationarity in the states.

    With ``delta_x`` given, these are the QP-step multipliers (gradients
    taken at the stepped point to second order); with ``delta_x=None``
    they belong to the current iterate and feed the convergence test.
    """
    n_x = gx_all.shape[1]
    lam = np.empty((n, n_x))
    top = gm if delta_x is None else hm @ delta_x[n] + gm
    if nu_full is not None and soft_jacs is not None:
        top = top + soft_jacs[n - 1].T @ nu_full[n - 1]
    lam[n - 1] = -top
    for k in range(n - 1, 0, -1):
        contrib = (
            gx_all[k] if delta_x is None
            else hxx_all[k] @ delta_x[k] + gx_all[k]
        )
        if nu_full is not None and soft_jacs is not None:
            contrib = contrib + soft_jacs[k - 1].T @ nu_full[k - 1]
        lam[k - 1] = a_mats[k].T @ lam[k] - contrib
    return lam


def kkt_residual(spec: OcpSpec, x_bar: np.ndarray, point: NlpSolution) -> float:
    """First-order optimality measure at an arbitrary primal point.

    Shooting-constraint multipliers are reconstructed by the adjoint
    recursion (stationarity in the states determines them uniquely), so
    only the input stationarity, the shooting gaps, and the initial
    condition contribute. Soft-constraint multipliers are taken at the
    penalty bound where a row is violated and zero otherwise; points
    exactly on a soft boundary may therefore report a conservative
    value, which the solver avoids by checking with its QP multipliers.
    """
    states = np.asarray(point.states, dtype=float)
    inputs = np.asarray(point.inputs, dtype=float)
    n = spec.horizon
    xs, us, ps = states[:-1], inputs, spec.params
    if spec.dynamics_with_jac is not None:
        _, a_mats, b_mats = spec.dynamics_with_jac(xs, us, ps)
    elif spec.dynamics_jac is not None:
        a_mats, b_mats = spec.dynamics_jac(xs, us, ps)
    else:
        a_mats, b_mats = _fd_dynamics_jac(spec, xs, us, ps)
    if spec.stage_grad is not None:
        gx_all, gu_all = spec.stage_grad(xs, us, ps)
    else:
        gx_all, gu_all = _fd_stage_grad(spec, xs, us, ps)
    gm = (
        spec.terminal_grad(states[-1])
        if spec.terminal_grad is not None
        else _fd_terminal_grad(spec, states[-1])
    )
    gu_all = gu_all + _du_grad(spec, inputs).reshape(n, spec.n_u)

    soft_term = np.zeros((n + 1, spec.n_x))
    if spec.soft_constraint is not None:
        h_vals = _soft_values(spec, states)
        jac = (
            spec.soft_jac(states[1:])
            if spec.soft_jac is not None
            else _fd_soft_jac(spec, states[1:])
        )
        nu_local = spec.soft_weight * (h_vals > 0).astype(float)
        soft_term[1:] = np.einsum("krj,kr->kj", jac, nu_local)

    lam = np.empty((n, spec.n_x))
    lam[n - 1] = -(gm + soft_term[n])
    for k in range(n - 1, 0, -1):
        lam[k - 1] = a_mats[k].T @ lam[k] - gx_all[k] - soft_term[k]
    res = _kkt_with_multipliers(spec, states, inputs, lam, a_mats, b_mats, gu_all)
    init_violation = float(np.abs(states[0] - x_bar).max())
    return max(res, init_violation)


# --------------------------------------------------------------------------
# The SQP itself


def _solve_qp_cvxopt(h_mat, g_vec, spec, inputs, soft_rows):
    """Box-constrained QP, optionally with soft-constraint slacks.

    Returns (delta_u, slacks, nu) where nu are the multipliers of the
    linearized soft rows.
    """
    n, m = spec.horizon, spec.n_u
    n_u_vars = n * m
    lo = np.tile(spec.u_lower, n)
    hi = np.tile(spec.u_upper, n)
    flat_u = inputs.ravel()

    if soft_rows is None:
        n_vars = n_u_vars
        p_full = h_mat
        q_full = g_vec
        g_rows = np.vstack([-np.eye(n_u_vars), np.eye(n_u_vars)])
        h_rhs = np.concatenate([flat_u - lo, hi - flat_u])
    else:
        rows, rhs = soft_rows  # rows: (n_rows, n_u_vars), H x + rows du <= 0
        n_rows = rows.shape[0]
        n_vars = n_u_vars + n_rows
        p_full = np.zeros((n_vars, n_vars))
        p_full[:n_u_vars, :n_u_vars] = h_mat
        p_full[n_u_vars:, n_u_vars:] = 1e-9 * np.eye(n_rows)
        q_full = np.concatenate([g_vec, spec.soft_weight * np.ones(n_rows)])
        g_rows = np.zeros((2 * n_u_vars + 2 * n_rows, n_vars))
        h_rhs = np.empty(2 * n_u_vars + 2 * n_rows)
        g_rows[:n_u_vars, :n_u_vars] = -np.eye(n_u_vars)
        h_rhs[:n_u_vars] = flat_u - lo
        g_rows[n_u_vars : 2 * n_u_vars, :n_u_vars] = np.eye(n_u_vars)
        h_rhs[n_u_vars : 2 * n_u_vars] = hi - flat_u
        sl = slice(2 * n_u_vars, 2 * n_u_vars + n_rows)
        g_rows[sl, :n_u_vars] = rows
        g_rows[sl, n_u_vars:] = -np.eye(n_rows)
        h_rhs[sl] = -rhs
        g_rows[2 * n_u_vars + n_rows :, n_u_vars:] = -np.eye(n_rows)
        h_rhs[2 * n_u_vars + n_rows :] = 0.0

    try:
        sol = _cvx_solvers.qp(
            _cvx_matrix(p_full), _cvx_matrix(q_full), _cvx_matrix(g_rows), _cvx_matrix(h_rhs)
        )
    except (ValueError, ArithmeticError) as exc:  # pragma: no cover
        raise MpcSolveError(f"QP subproblem failed: {exc}") from exc
    if sol["status"] not in ("optimal", "unknown"):
        raise MpcSolveError(f"QP subproblem status {sol['status']!r}")
    z = np.asarray(sol["x"]).ravel()
    duals = np.asarray(sol["z"]).ravel()
    delta_u = z[:n_u_vars]
    if soft_rows is None:
        return delta_u, None, None
    n_rows = soft_rows[0].shape[0]
    slacks = z[n_u_vars:]
    nu = duals[2 * n_u_vars : 2 * n_u_vars + n_rows]
    return delta_u, slacks, nu


def _solve_box_qp(h_mat, g_vec, lo, hi, tol=1e-11, max_iterations=100):
    """Projected-Newton solve of min 0.5 d'Hd + g'd subject to lo <= d <= hi.

    H must be positive definite. Variables judged binding (at a bound with
    the gradient pushing outward) are frozen; the rest take a Newton step,
    followed by a projected Armijo backtrack. Binding variables land on
    their bounds exactly. Returns None when the tolerance is not reached,
    so the caller can fall back to an interior-point solve.
    """
    n = g_vec.shape[0]
    d = np.clip(np.zeros(n), lo, hi)
    grad = h_mat @ d + g_vec
    scale = max(1.0, float(np.abs(g_vec).max()))
    for _ in range(max_iterations):
        binding = ((d <= lo + 1e-12) & (grad > 0.0)) | (
            (d >= hi - 1e-12) & (grad < 0.0)
        )
        proj_grad = np.where(binding, 0.0, grad)
        if float(np.abs(proj_grad).max()) <= tol * scale:
            return d
        free = np.where(~binding)[0]
        p = np.zeros(n)
        try:
            p[free] = -np.linalg.solve(
                h_mat[np.ix_(free, free)], grad[free]
            )
        except np.linalg.LinAlgError:
            return None
        value = 0.5 * float(d @ (grad + g_vec))
        step = 1.0
        accepted = False
        for _ in range(30):
            d_new = np.clip(d + step * p, lo, hi)
            hd_new = h_mat @ d_new
            value_new = 0.5 * float(d_new @ hd_new) + float(g_vec @ d_new)
            if value_new <= value + 1e-4 * float(grad @ (d_new - d)):
                d = d_new
                grad = hd_new + g_vec
                accepted = True
                break
            step *= 0.5
        if not accepted:
            return None
    return None


def _solve_lp_highs(g_vec, spec, inputs, soft_rows):
    """Curvature-free subproblem via simplex: exact vertices, exact duals."""
    n, m = spec.horizon, spec.n_u
    n_u_vars = n * m
    lo = np.tile(spec.u_lower, n) - inputs.ravel()
    hi = np.tile(spec.u_upper, n) - inputs.ravel()

    if soft_rows is None:
        res = _linprog(g_vec, bounds=np.stack([lo, hi], axis=1),
                       method="highs")
        if not res.success:
            raise MpcSolveError(f"LP subproblem failed: {res.message}")
        return np.asarray(res.x), None, None

    rows, rhs = soft_rows
    n_rows = rows.shape[0]
    cost = np.concatenate([g_vec, spec.soft_weight * np.ones(n_rows)])
    a_ub = np.hstack([rows, -np.eye(n_rows)])
    b_ub = -rhs
    bounds = np.vstack([
        np.stack([lo, hi], axis=1),
        np.tile([0.0, np.inf], (n_rows, 1)),
    ])
    res = _linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if not res.success:
        raise MpcSolveError(f"LP subproblem failed: {res.message}")
    z = np.asarray(res.x)
    nu = -np.asarray(res.ineqlin.marginals)
    return z[:n_u_vars], z[n_u_vars:], nu


def solve_ocp(
    spec: OcpSpec,
    x_bar: np.ndarray,
    warm_start: NlpSolution | None = None,
    anchor_time: int = 0,
    kkt_tol: float = 1e-6,
    gap_tol: float = 1e-8,
    max_iterations: int = 100,
    damping: float = 1e-6,
    backtrack_factor: float = 0.5,
    max_backtracks: int = 20,
) -> PlanState:
    """Solve the OCP from ``x_bar``, optionally from a shifted warm start.

    Returns a PlanState whose first predicted state equals ``x_bar``
    exactly and whose inputs respect the box bounds exactly. Raises
    MpcSolveError when the model produces non-finite values.
    """
    x_bar = np.asarray(x_bar, dtype=float).reshape(spec.n_x)
    n, m = spec.horizon, spec.n_u

    if warm_start is not None:
        inputs = np.clip(warm_start.inputs.copy(), spec.u_lower, spec.u_upper)
        states = warm_start.states.copy()
        states[0] = x_bar
    else:
        inputs = np.clip(np.zeros((n, m)), spec.u_lower, spec.u_upper)
        states = rollout(spec, x_bar, inputs)
    if not np.all(np.isfinite(states)):
        raise MpcSolveError("non-finite state in the initial trajectory")

    mu = 1.0  # L1 merit weight on the shooting gaps
    lam = None
    nu_full = None
    converged = False
    kkt_val = np.inf
    iterations = 0
    objective = _objective(spec, states, inputs)
    du_hess = _du_hessian(spec)

    for _ in range(max_iterations):
        iterations += 1
        xs, us, ps = states[:-1], inputs, spec.params
        if spec.dynamics_with_jac is not None:
            preds, a_mats, b_mats = spec.dynamics_with_jac(xs, us, ps)
        else:
            preds = spec.dynamics(xs, us, ps)
            if spec.dynamics_jac is not None:
                a_mats, b_mats = spec.dynamics_jac(xs, us, ps)
            else:
                a_mats, b_mats = _fd_dynamics_jac(spec, xs, us, ps)
        if not np.all(np.isfinite(preds)):
            raise MpcSolveError("dynamics returned non-finite values")
        gaps = states[1:] - preds
        if spec.stage_grad is not None:
            gx_all, gu_all = spec.stage_grad(xs, us, ps)
        else:
            gx_all, gu_all = _fd_stage_grad(spec, xs, us, ps)
        gm = (
            spec.terminal_grad(states[-1])
            if spec.terminal_grad is not None
            else _fd_terminal_grad(spec, states[-1])
        )
        du_grad = _du_grad(spec, inputs)
        gu_total = gu_all + du_grad.reshape(n, m)

        h_vals = None
        soft_jacs = None
        if spec.soft_constraint is not None:
            h_vals = _soft_values(spec, states)
            soft_jacs = (
                spec.soft_jac(states[1:])
                if spec.soft_jac is not None
                else _fd_soft_jac(spec, states[1:])
            )
            if nu_full is None:
                # No dual estimate yet: the penalty subgradient.
                nu_full = spec.soft_weight * (h_vals > 0).astype(float)

        # Optimality is judged at the current iterate, before any
        # subproblem is solved; soft-row duals come from the latest
        # subproblem (or the penalty subgradient on the first pass).
        lam = _backward_multipliers(
            n, a_mats, gx_all, gm, None, None, None, soft_jacs, nu_full
        )
        kkt_val = _kkt_with_multipliers(
            spec, states, inputs, lam, a_mats, b_mats, gu_total
        )
        gap_inf = float(np.abs(gaps).max()) if gaps.size else 0.0
        if kkt_val <= kkt_tol and gap_inf <= gap_tol:
            converged = True
            break

        if spec.stage_hess is not None:
            hxx_all, huu_all = spec.stage_hess(xs, us, ps)
        else:
            hxx_all, huu_all = _fd_stage_hess(spec, xs, us, ps)
        hm = (
            spec.terminal_hess(states[-1])
            if spec.terminal_hess is not None
            else _fd_terminal_hess(spec, states[-1])
        )

        # Condense: delta_x = M delta_u + d, with x_0 pinned to x_bar.
        m_mats = np.zeros((n + 1, spec.n_x, n * m))
        d_vecs = np.zeros((n + 1, spec.n_x))
        for k in range(n):
            m_mats[k + 1] = a_mats[k] @ m_mats[k]
            m_mats[k + 1][:, k * m : (k + 1) * m] += b_mats[k]
            d_vecs[k + 1] = a_mats[k] @ d_vecs[k] - gaps[k]

        h_stack = np.concatenate([hxx_all, hm[None, :, :]], axis=0)
        g_stack = np.vstack([gx_all, gm[None, :]])
        hd_plus_g = np.einsum("kij,kj->ki", h_stack, d_vecs) + g_stack
        hm_prod = np.einsum("kij,kjl->kil", h_stack, m_mats)
        h_cond = np.einsum("kij,kil->jl", m_mats, hm_prod)
        g_cond = np.einsum("kij,ki->j", m_mats, hd_plus_g)
        h_cond = h_cond + du_hess
        for k in range(n):
            sl = slice(k * m, (k + 1) * m)
            h_cond[sl, sl] += huu_all[k]
        g_cond = g_cond + du_grad + gu_all.ravel()
        # Damping exists to keep the Gauss-Newton Hessian positive definite.
        # A problem with no curvature at all is a bounded LP; damping it
        # would turn the step into a crawling proximal iteration instead.
        curvature_free = not np.any(h_cond)
        if not curvature_free:
            h_cond[np.diag_indices_from(h_cond)] += damping
        h_cond = 0.5 * (h_cond + h_cond.T)

        soft_rows = None
        if spec.soft_constraint is not None:
            rows = np.einsum("krj,kjl->krl", soft_jacs, m_mats[1:]).reshape(
                -1, n * m
            )
            rhs = (
                h_vals + np.einsum("krj,kj->kr", soft_jacs, d_vecs[1:])
            ).ravel()
            soft_rows = (rows, rhs)

        # Subproblem solve: simplex when there is no curvature at all,
        # projected Newton for a box-only QP, interior point otherwise.
        slacks = None
        nu_vec = None
        if curvature_free:
            delta_u, slacks, nu_vec = _solve_lp_highs(
                g_cond, spec, inputs, soft_rows
            )
        elif soft_rows is None:
            delta_u = _solve_box_qp(
                h_cond,
                g_cond,
                np.tile(spec.u_lower, n) - inputs.ravel(),
                np.tile(spec.u_upper, n) - inputs.ravel(),
            )
            if delta_u is None:
                delta_u, slacks, nu_vec = _solve_qp_cvxopt(
                    h_cond, g_cond, spec, inputs, None
                )
        else:
            delta_u, slacks, nu_vec = _solve_qp_cvxopt(
                h_cond, g_cond, spec, inputs, soft_rows
            )

        delta_x = np.einsum("kij,j->ki", m_mats, delta_u) + d_vecs

        if nu_vec is not None:
            nu_full = nu_vec.reshape(n, spec.n_soft)

        lam_step = _backward_multipliers(
            n, a_mats, gx_all, gm, hxx_all, hm, delta_x, soft_jacs, nu_full
        )

        # L1 merit line search along (delta_x, delta_u).
        mu = max(mu, 2.0 * float(np.abs(lam_step).max()) if lam_step.size else 1.0)
        gaps_l1 = float(np.abs(gaps).sum())
        merit_now = objective + mu * gaps_l1
        smooth_dir = (
            float(np.einsum("ki,ki->", gx_all, delta_x[:-1]))
            + float(gm @ delta_x[-1])
            + float(gu_total.ravel() @ delta_u)
        )
        descent = smooth_dir - mu * gaps_l1
        if h_vals is not None and slacks is not None:
            descent += spec.soft_weight * (
                float(np.sum(slacks)) - float(np.sum(np.maximum(h_vals, 0.0)))
            )
        step = 1.0
        accepted = False
        delta_u_shaped = delta_u.reshape(n, m)
        for _ in range(max_backtracks + 1):
            trial_u = np.clip(
                inputs + step * delta_u_shaped, spec.u_lower, spec.u_upper
            )
            trial_x = states + step * delta_x
            trial_obj = _objective(spec, trial_x, trial_u)
            trial_gaps = float(np.abs(_gaps(spec, trial_x, trial_u)).sum())
            trial_merit = trial_obj + mu * trial_gaps
            if np.isfinite(trial_merit) and (
                trial_merit <= merit_now + 1e-4 * step * min(descent, 0.0)
                and trial_merit < merit_now + 1e-12 * max(1.0, abs(merit_now))
            ):
                states, inputs, objective = trial_x, trial_u, trial_obj
                accepted = True
                break
            step *= backtrack_factor
        if not accepted:
            # A step too small for the merit comparison to resolve in double
            # precision is pure refinement: take it in full and re-test
            # optimality. Anything larger is a genuine stall.
            tiny = float(np.abs(delta_u).max()) <= 1e-6 * max(
                1.0, float(np.abs(inputs).max())
            )
            if tiny and gap_inf <= gap_tol:
                inputs = np.clip(
                    inputs + delta_u_shaped, spec.u_lower, spec.u_upper
                )
                states = states + delta_x
                objective = _objective(spec, states, inputs)
                continue
            break  # stalled: keep the current iterate and report as-is

    inputs = np.clip(inputs, spec.u_lower, spec.u_upper)
    states[0] = x_bar
    soft = _soft_values(spec, states)
    max_violation = float(np.maximum(soft, 0.0).max()) if soft is not None else 0.0
    solution = NlpSolution(
        states=states,
        inputs=inputs,
        objective=_objective(spec, states, inputs),
        kkt=kkt_val,
        iterations=iterations,
        converged=converged,
        lam=lam,
        nu=nu_full,
        max_soft_violation=max_violation,
    )
    return PlanState(
        x_hat=solution.states,
        u_mpc=solution.inputs,
        anchor_time=anchor_time,
        solution=solution,
    )


def shift_warm_start(
    spec: OcpSpec, prev: NlpSolution, n_applied: int
) -> NlpSolution:
    """Shift a previous solution left by the number of applied inputs.

    The vacated tail repeats the last input and forward-simulates the
    states under the (possibly new) parameters, so the result is a
    dynamics-consistent initial guess except where the old body already
    carried gaps. ``n_applied = 0`` returns an unshifted copy.
    """
    n = spec.horizon
    if not 0 <= n_applied <= n:
        raise ValueError(f"n_applied must lie in [0, {n}], got {n_applied}")
    if prev.states.shape[0] != n + 1 or prev.inputs.shape[0] != n:
        raise ValueError("previous solution horizon does not match the spec")
    if n_applied == 0:
        return NlpSolution(
            states=prev.states.copy(),
            inputs=prev.inputs.copy(),
            objective=prev.objective,
            kkt=prev.kkt,
            iterations=0,
            converged=prev.converged,
        )
    inputs = np.vstack(
        [prev.inputs[n_applied:], np.repeat(prev.inputs[-1][None, :], n_applied, axis=0)]
    )
    states = np.empty((n + 1, spec.n_x))
    keep = n + 1 - n_applied
    states[:keep] = prev.states[n_applied:]
    for k in range(keep - 1, n):
        states[k + 1] = spec.dynamics(
            states[k][None, :], inputs[k][None, :], spec.params[k][None, :]
        )[0]
    return NlpSolution(
        states=states,
        inputs=inputs,
        objective=np.nan,
        kkt=np.inf,
        iterations=0,
        converged=False,
    )


# --------------------------------------------------------------------------
# Cost helpers for quadratic problems (test benches, pendulum stage cost)


def quadratic_stage(q: np.ndarray, r: np.ndarray):
    """Batched callables for l(x, u) = x'Qx + u'Ru (parameters ignored)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))

    def cost(xs, us, ps):
        return np.einsum("ki,ij,kj->k", xs, q, xs) + np.einsum(
            "ki,ij,kj->k", us, r, us
        )

    def grad(xs, us, ps):
        return 2.0 * xs @ q, 2.0 * us @ r

    def hess(xs, us, ps):
        b = xs.shape[0]
        return (
            np.broadcast_to(2.0 * q, (b, q.shape[0], q.shape[1])),
            np.broadcast_to(2.0 * r, (b, r.shape[0], r.shape[1])),
        )

    return cost, grad, hess


def quadratic_terminal(qf: np.ndarray):
    """Callables for m(x) = x'Q_f x."""
    qf = np.atleast_2d(np.asarray(qf, dtype=float))

    def cost(x):
        return float(x @ qf @ x)

    def grad(x):
        return 2.0 * qf @ x

    def hess(x):
        return 2.0 * qf

    return cost, grad, hess
