"""Linear-quadratic compensation for tracking a stored MPC plan.

Between plan recomputations the executed input is the stored MPC input
plus a correction ``-K @ eps`` on the prediction error, where K comes
from a discrete algebraic Riccati equation on the linearized error
dynamics. Synthesis happens once per system at startup; the per-step
work is a single matrix-vector product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LtiModel",
    "LqrGain",
    "c2d_zoh",
    "c2d_euler",
    "solve_dare",
    "dare_residual",
    "lqr_gain",
    "compensate",
]


@dataclass
class LtiModel:
    """State matrix, input matrix, and whether time is already discrete."""

    a: np.ndarray
    b: np.ndarray
    discrete: bool = False

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.b = np.atleast_2d(np.asarray(self.b, dtype=float))
        n = self.a.shape[0]
        if self.a.shape != (n, n):
            raise ValueError(f"A must be square, got {self.a.shape}")
        if self.b.shape[0] != n:
            raise ValueError(
                f"B has {self.b.shape[0]} rows, expected {n} to match A"
            )

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_u(self) -> int:
        return self.b.shape[1]


def _expm_taylor(m: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring on the Taylor series."""
    norm = np.linalg.norm(m, np.inf)
    squarings = 0
    if norm > 0.5:
        squarings = int(np.ceil(np.log2(norm))) + 1
    scaled = m / (2.0**squarings)
    n = m.shape[0]
    term = np.eye(n)
    total = np.eye(n)
    for k in range(1, 60):
        term = term @ scaled / k
        total = total + term
        if np.linalg.norm(term, np.inf) < tol * max(1.0, np.linalg.norm(total, np.inf)):
            break
    else:  # pragma: no cover - the scaled norm is <= 1, series converges fast
        raise RuntimeError("matrix exponential series did not converge")
    for _ in range(squarings):
        total = total @ total
    return total


def c2d_zoh(model: LtiModel, dt: float) -> LtiModel:
    """Zero-order-hold discretization via exp([[A, B], [0, 0]] dt).

    The lower block rows of the augmented exponential are [0, I], so the
    top rows directly yield (A_d, B_d).
    """
    if model.discrete:
        raise ValueError("c2d_zoh expects a continuous-time model")
    if dt <= 0:
        raise ValueError("dt must be positive")
    n, m = model.n_x, model.n_u
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = model.a
    aug[:n, n:] = model.b
    phi = _expm_taylor(aug * dt)
    return LtiModel(a=phi[:n, :n], b=phi[:n, n:], discrete=True)


def c2d_euler(model: LtiModel, dt: float) -> LtiModel:
    """Forward-Euler discretization, kept behind a config switch."""
    if model.discrete:
        raise ValueError("c2d_euler expects a continuous-time model")
    if dt <= 0:
        raise ValueError("dt must be positive")
    return LtiModel(
        a=np.eye(model.n_x) + dt * model.a, b=dt * model.b, discrete=True
    )


def solve_dare(
    a: np.ndarray,
    b: np.ndarray,
    q: np.ndarray,
    r: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Fixed-point iteration for the discrete algebraic Riccati equation.

    Iterates P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA from P = Q until the
    infinity norm of the update drops below ``tol``. Raises RuntimeError
    if the limit is hit, which signals a model that the configured cost
    cannot stabilize.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    p = q.copy()
    for _ in range(int(max_iter)):
        bpa = b.T @ p @ a
        gain = np.linalg.solve(r + b.T @ p @ b, bpa)
        p_next = q + a.T @ p @ a - bpa.T @ gain
        p_next = 0.5 * (p_next + p_next.T)
        if np.linalg.norm(p_next - p, np.inf) < tol:
            return p_next
        p = p_next
    raise RuntimeError(
        f"DARE iteration did not converge within {max_iter} steps"
    )


def dare_residual(a, b, q, r, p) -> float:
    """Infinity norm of P - (Q + A'PA - A'PB (R + B'PB)^-1 B'PA)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    bpa = b.T @ p @ a
    rhs = q + a.T @ p @ a - bpa.T @ np.linalg.solve(r + b.T @ p @ b, bpa)
    return float(np.linalg.norm(p - rhs, np.inf))


@dataclass
class LqrGain:
    """Synthesized feedback gain with its Riccati certificate."""

    k: np.ndarray
    p: np.ndarray
    model: LtiModel = field(repr=False)

    def __post_init__(self):
        if self.k.shape != (self.model.n_u, self.model.n_x):
            raise ValueError("gain shape does not match the model")


def lqr_gain(
    model: LtiModel,
    q: np.ndarray,
    r: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> LqrGain:
    """Infinite-horizon gain K = (R + B'PB)^-1 B'PA for a discrete model.

    The closed loop A - BK is checked at construction: every eigenvalue
    must lie strictly inside the unit circle, except modes that carry no
    cost weight (P annihilates them), which may sit on the circle. The
    cart position channel of the pendulum error model is the one such
    mode in this codebase: Q deliberately ignores it.
    """
    if not model.discrete:
        raise ValueError("lqr_gain expects a discrete-time model")
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    p = solve_dare(model.a, model.b, q, r, tol=tol, max_iter=max_iter)
    k = np.linalg.solve(r + model.b.T @ p @ model.b, model.b.T @ p @ model.a)
    closed = model.a - model.b @ k
    eigvals, eigvecs = np.linalg.eig(closed)
    for lam, vec in zip(eigvals, eigvecs.T):
        if abs(lam) < 1.0 - 1e-9:
            continue
        if abs(lam) > 1.0 + 1e-9:
            raise RuntimeError(
                f"closed-loop mode at |lambda| = {abs(lam):.6f} is unstable"
            )
        # Marginal mode: tolerable only if the cost cannot see it.
        seen = np.linalg.norm(p @ vec) / max(np.linalg.norm(vec), 1e-300)
        if seen > 1e-8 * max(1.0, np.linalg.norm(p, np.inf)):
            raise RuntimeError(
                "closed-loop mode on the unit circle carries cost weight"
            )
    return LqrGain(k=k, p=p, model=model)


def compensate(gain: LqrGain, eps: np.ndarray) -> np.ndarray:
    """Correction input -K @ eps for prediction error eps = plan - plant."""
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (gain.model.n_x,):
        raise ValueError(
            f"eps has shape {eps.shape}, expected ({gain.model.n_x},)"
        )
    return -(gain.k @ eps)
