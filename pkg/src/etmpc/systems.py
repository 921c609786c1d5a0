"""Benchmark systems: cart pendulum stabilization and battery storage trading.

Each system bundles everything an episode needs: the plant (simulated
truth), the prediction model handed to the planner, the error-feedback
gain, exogenous signal generation, costs for learning, and the raw
feature vector for the recompute policy.

Conventions shared by both systems:
  - plant states are 1-d float arrays, inputs are 1-d float arrays,
  - dynamics callables used by the planner are batched: states (B, n_x),
    inputs (B, n_u), per-stage parameters (B, n_p),
  - exogenous randomness flows through an EpisodeEnv built from a single
    integer seed, so an episode is a pure function of (config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import MarketConfig, RunConfig
from .lqr import LqrGain, LtiModel, c2d_euler, c2d_zoh, dare_residual, lqr_gain
from .mpc import OcpSpec, quadratic_stage, quadratic_terminal

__all__ = [
    "EpisodeEnv",
    "MarketSeries",
    "PendulumSystem",
    "BatterySystem",
    "build_system",
    "euler_step",
    "euler_step_jac",
    "euler_step_with_jac",
    "generate_forecast",
    "generate_market",
    "ou_step",
    "pendulum_derivs",
    "pendulum_derivs_jac",
    "pendulum_derivs_with_jac",
    "rk4_step",
    "rk4_step_jac",
    "rk4_step_with_jac",
    "rl_step_cost",
    "rl_terminal_cost",
]


# ---------------------------------------------------------------------------
# Cart pendulum continuous dynamics


def pendulum_derivs(x, u, params):
    """Continuous-time state derivative of the inverted pendulum on a cart.

    State is (cart position, cart velocity, pole angle from upright, pole
    angular rate). Accepts a single state (4,) with input (1,) or batches
    (B, 4) with (B, 1); returns the same shape as ``x``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    m = params.pole_mass
    big_m = params.cart_mass
    length = params.pole_length
    g = params.gravity

    v = x[..., 1]
    beta = x[..., 2]
    omega = x[..., 3]
    force = u[..., 0]

    s = np.sin(beta)
    c = np.cos(beta)
    pole_term = force + m * length * omega**2 * s

    v_dot = (m * g * s * c - (4.0 / 3.0) * pole_term) / (
        m * c**2 - (4.0 / 3.0) * big_m
    )
    w_dot = (big_m * g * s - c * pole_term) / (
        (4.0 / 3.0) * big_m * length - m * length * c**2
    )

    out = np.empty_like(x)
    out[..., 0] = v
    out[..., 1] = v_dot
    out[..., 2] = omega
    out[..., 3] = w_dot
    return out


def pendulum_derivs_jac(x, u, params):
    """Analytic Jacobians of ``pendulum_derivs`` w.r.t. state and input.

    Returns (A, B) with shapes (..., 4, 4) and (..., 4, 1).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    m = params.pole_mass
    big_m = params.cart_mass
    length = params.pole_length
    g = params.gravity

    beta = x[..., 2]
    omega = x[..., 3]
    force = u[..., 0]

    s = np.sin(beta)
    c = np.cos(beta)
    pole_term = force + m * length * omega**2 * s

    # v_dot = num_v / den_v
    num_v = m * g * s * c - (4.0 / 3.0) * pole_term
    den_v = m * c**2 - (4.0 / 3.0) * big_m
    dnum_v_dbeta = m * g * (c**2 - s**2) - (4.0 / 3.0) * m * length * omega**2 * c
    dden_v_dbeta = -2.0 * m * c * s
    dv_dbeta = (dnum_v_dbeta * den_v - num_v * dden_v_dbeta) / den_v**2
    dv_domega = -(4.0 / 3.0) * 2.0 * m * length * omega * s / den_v
    dv_du = -(4.0 / 3.0) / den_v

    # w_dot = num_w / den_w
    num_w = big_m * g * s - c * pole_term
    den_w = (4.0 / 3.0) * big_m * length - m * length * c**2
    dnum_w_dbeta = big_m * g * c + s * pole_term - c * (m * length * omega**2 * c)
    dden_w_dbeta = 2.0 * m * length * c * s
    dw_dbeta = (dnum_w_dbeta * den_w - num_w * dden_w_dbeta) / den_w**2
    dw_domega = -c * 2.0 * m * length * omega * s / den_w
    dw_du = -c / den_w

    batch = x.shape[:-1]
    a_mat = np.zeros(batch + (4, 4))
    b_mat = np.zeros(batch + (4, 1))
    a_mat[..., 0, 1] = 1.0
    a_mat[..., 1, 2] = dv_dbeta
    a_mat[..., 1, 3] = dv_domega
    a_mat[..., 2, 3] = 1.0
    a_mat[..., 3, 2] = dw_dbeta
    a_mat[..., 3, 3] = dw_domega
    b_mat[..., 1, 0] = dv_du
    b_mat[..., 3, 0] = dw_du
    return a_mat, b_mat


def pendulum_derivs_with_jac(x, u, params):
    """State derivative and both Jacobians sharing the trigonometry.

    Equivalent to ``(pendulum_derivs(...),) + pendulum_derivs_jac(...)``
    but evaluates sin/cos and the shared rational terms once.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    m = params.pole_mass
    big_m = params.cart_mass
    length = params.pole_length
    g = params.gravity

    v = x[..., 1]
    beta = x[..., 2]
    omega = x[..., 3]
    force = u[..., 0]

    s = np.sin(beta)
    c = np.cos(beta)
    pole_term = force + m * length * omega**2 * s

    num_v = m * g * s * c - (4.0 / 3.0) * pole_term
    den_v = m * c**2 - (4.0 / 3.0) * big_m
    num_w = big_m * g * s - c * pole_term
    den_w = (4.0 / 3.0) * big_m * length - m * length * c**2
    v_dot = num_v / den_v
    w_dot = num_w / den_w

    out = np.empty_like(x)
    out[..., 0] = v
    out[..., 1] = v_dot
    out[..., 2] = omega
    out[..., 3] = w_dot

    dnum_v_dbeta = m * g * (c**2 - s**2) - (4.0 / 3.0) * m * length * omega**2 * c
    dden_v_dbeta = -2.0 * m * c * s
    dnum_w_dbeta = big_m * g * c + s * pole_term - c * (m * length * omega**2 * c)
    dden_w_dbeta = 2.0 * m * length * c * s
    two_mlws = 2.0 * m * length * omega * s

    batch = x.shape[:-1]
    a_mat = np.zeros(batch + (4, 4))
    b_mat = np.zeros(batch + (4, 1))
    a_mat[..., 0, 1] = 1.0
    a_mat[..., 1, 2] = (dnum_v_dbeta - v_dot * dden_v_dbeta) / den_v
    a_mat[..., 1, 3] = -(4.0 / 3.0) * two_mlws / den_v
    a_mat[..., 2, 3] = 1.0
    a_mat[..., 3, 2] = (dnum_w_dbeta - w_dot * dden_w_dbeta) / den_w
    a_mat[..., 3, 3] = -c * two_mlws / den_w
    b_mat[..., 1, 0] = -(4.0 / 3.0) / den_v
    b_mat[..., 3, 0] = -c / den_w
    return out, a_mat, b_mat


# ---------------------------------------------------------------------------
# Fixed-step integrators


def rk4_step(f, x, u, dt):
    """One classical Runge-Kutta step of x' = f(x, u) with zero-order-hold u."""
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_with_jac(f, jac, x, u, dt, fjac=None):
    """RK4 step and its Jacobians in one pass, sharing the stage values.

    ``jac(x, u)`` must return continuous-time (A, B); the Jacobians are
    the exact derivatives of ``rk4_step`` via the chain rule through all
    four stages, not a discretization of (A, B). A fused callable
    ``fjac(x, u) -> (f, A, B)`` replaces the separate evaluations.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    eye = np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n))
    if fjac is None:
        def fjac(xs, us):
            a, b = jac(xs, us)
            return f(xs, us), a, b

    k1, a1, b1 = fjac(x, u)
    x2 = x + 0.5 * dt * k1
    k2, a2, b2 = fjac(x2, u)
    x3 = x + 0.5 * dt * k2
    k3, a3, b3 = fjac(x3, u)
    x4 = x + dt * k3
    k4, a4, b4 = fjac(x4, u)

    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    dk2x = a2 @ (eye + 0.5 * dt * a1)
    dk2u = a2 @ (0.5 * dt * b1) + b2
    dk3x = a3 @ (eye + 0.5 * dt * dk2x)
    dk3u = a3 @ (0.5 * dt * dk2u) + b3
    dk4x = a4 @ (eye + dt * dk3x)
    dk4u = a4 @ (dt * dk3u) + b4

    a_step = eye + (dt / 6.0) * (a1 + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    b_step = (dt / 6.0) * (b1 + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return x_next, a_step, b_step


def rk4_step_jac(f, jac, x, u, dt):
    """Jacobians of the RK4 map; see ``rk4_step_with_jac``."""
    _, a_step, b_step = rk4_step_with_jac(f, jac, x, u, dt)
    return a_step, b_step


def euler_step(f, x, u, dt):
    """One explicit Euler step."""
    return x + dt * f(x, u)


def euler_step_with_jac(f, jac, x, u, dt, fjac=None):
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    eye = np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n))
    if fjac is not None:
        dx, a_c, b_c = fjac(x, u)
        return x + dt * dx, eye + dt * a_c, dt * b_c
    a_c, b_c = jac(x, u)
    return x + dt * f(x, u), eye + dt * a_c, dt * b_c


def euler_step_jac(f, jac, x, u, dt):
    _, a_step, b_step = euler_step_with_jac(f, jac, x, u, dt)
    return a_step, b_step


# ---------------------------------------------------------------------------
# Market signals (battery system)


def ou_step(value, theta, mu, sigma, dt, noise):
    """One Euler-Maruyama step of an Ornstein-Uhlenbeck process."""
    return value + theta * (mu - value) * dt + sigma * math.sqrt(dt) * noise


@dataclass
class MarketSeries:
    """Realized exogenous signals plus the piecewise-constant base levels.

    Base levels are kept so forecasts can be anchored to the prevailing
    regime rather than the noisy instantaneous value.
    """

    p_true: np.ndarray
    lambda_true: np.ndarray
    p_base: np.ndarray
    lambda_base: np.ndarray

    def __len__(self):
        return len(self.p_true)


def _piecewise_levels(length, rng, low, high, dur_low, dur_high):
    out = np.empty(length)
    i = 0
    while i < length:
        level = rng.uniform(low, high)
        duration = int(rng.integers(dur_low, dur_high + 1))
        out[i : i + duration] = level
        i += duration
    return out


def _ou_path(length, rng, theta, sigma, dt):
    noise = rng.standard_normal(length)
    path = np.empty(length)
    value = 0.0
    for i in range(length):
        value = ou_step(value, theta, 0.0, sigma, dt, noise[i])
        path[i] = value
    return path


def generate_market(length, rng, params: MarketConfig):
    """Sample a production/price trajectory of the given length.

    Production: piecewise-constant levels U(p_level_low, p_level_high) kW,
    each held for an integer number of steps drawn uniformly from the
    duration range, plus an additive OU perturbation started at zero.
    Price: the same construction with fixed segment length, and a floor so
    prices stay positive.
    """
    p_base = _piecewise_levels(
        length, rng, params.p_level_low, params.p_level_high,
        params.p_duration_low, params.p_duration_high,
    )
    lambda_base = _piecewise_levels(
        length, rng, params.price_low, params.price_high,
        params.price_segment_steps, params.price_segment_steps,
    )
    p_noise = _ou_path(length, rng, params.ou_theta, params.ou_sigma_p, params.ou_dt)
    lam_noise = _ou_path(
        length, rng, params.ou_theta, params.ou_sigma_price, params.ou_dt
    )
    return MarketSeries(
        p_true=p_base + p_noise,
        lambda_true=np.maximum(lambda_base + lam_noise, params.price_floor),
        p_base=p_base,
        lambda_base=lambda_base,
    )


def generate_forecast(series, anchor, horizon, rng, params: MarketConfig):
    """Forecast (production, price) over ``horizon`` steps from ``anchor``.

    Lead 0 is the exact realized value. Later leads hold the base level at
    the anchor and add an independently sampled OU deviation scaled by
    lead/horizon, so forecast error grows with lead time. Returns an array
    of shape (horizon, 2) with columns (production kW, price per kWh).
    """
    if anchor < 0 or anchor + horizon > len(series):
        raise ValueError(
            f"forecast window [{anchor}, {anchor + horizon}) exceeds series "
            f"length {len(series)}"
        )
    out = np.empty((horizon, 2))
    out[0, 0] = series.p_true[anchor]
    out[0, 1] = series.lambda_true[anchor]
    p_state = 0.0
    lam_state = 0.0
    for j in range(1, horizon):
        p_state = ou_step(
            p_state, params.forecast_theta, 0.0, params.forecast_sigma_p,
            params.ou_dt, rng.standard_normal(),
        )
        lam_state = ou_step(
            lam_state, params.forecast_theta, 0.0, params.forecast_sigma_price,
            params.ou_dt, rng.standard_normal(),
        )
        scale = j / horizon
        out[j, 0] = series.p_base[anchor] + scale * p_state
        out[j, 1] = max(series.lambda_base[anchor] + scale * lam_state,
                        params.price_floor)
    return out


# ---------------------------------------------------------------------------
# Episode environment


@dataclass
class EpisodeEnv:
    """All per-episode randomness, fixed once at construction.

    Streams are split from the episode seed with disjoint spawn keys:
    (0,) initial state, (1,) plant noise, (2,) market realization,
    (3, anchor) the forecast drawn when replanning at ``anchor``. The
    forecast stream depends only on the anchor step, so two policies that
    replan at the same step see the same forecast.
    """

    env_seed: int
    length: int
    x0: np.ndarray
    noise_rng: np.random.Generator
    market: MarketSeries | None = None

    def forecast_rng(self, anchor):
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.env_seed, spawn_key=(3, anchor))
        )

    def policy_rng(self, repeat=0):
        # Separate stream per evaluation repeat: the plant realization is
        # shared, only the policy's coin flips change.
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.env_seed, spawn_key=(4, repeat))
        )


def _stream(env_seed, *key):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=env_seed, spawn_key=key)
    )


# ---------------------------------------------------------------------------
# Pendulum system


class PendulumSystem:
    """Stabilize an inverted pendulum on a cart under angular-rate noise."""

    name = "pendulum"
    n_x = 4
    n_u = 1
    n_params = 0
    needs_market = False
    raw_feature_names = (
        "cart_pos", "cart_vel", "angle", "rate",
        "err_cart_pos", "err_cart_vel", "err_angle", "err_rate",
        "steps_since_frac",
    )

    def __init__(self, config: RunConfig):
        self.config = config
        p = config.pendulum
        self.params = p
        self.horizon = config.mpc.horizon
        self.input_low = -p.input_limit
        self.input_high = p.input_limit
        self.lqr_q = np.diag(p.lqr_q)
        self.lqr_r = np.array([[p.lqr_r]])

        if config.mpc.integrator == "rk4":
            self._step = rk4_step
            self._step_jac = rk4_step_jac
            self._step_with_jac = rk4_step_with_jac
        else:
            self._step = euler_step
            self._step_jac = euler_step_jac
            self._step_with_jac = euler_step_with_jac

        self._f = lambda xs, us: pendulum_derivs(xs, us, p)
        self._jac = lambda xs, us: pendulum_derivs_jac(xs, us, p)
        self._fjac = lambda xs, us: pendulum_derivs_with_jac(xs, us, p)

        # Error feedback design: linearize about the upright equilibrium.
        # The deviation fed back is (plan minus plant), whose input response
        # carries the opposite sign of the plant's, hence -B.
        a_c, b_c = pendulum_derivs_jac(np.zeros(4), np.zeros(1), p)
        err_model = LtiModel(a=a_c, b=-b_c)
        if config.mpc.lqr_discretization == "zoh":
            disc = c2d_zoh(err_model, p.dt)
        else:
            disc = c2d_euler(err_model, p.dt)
        self.gain = lqr_gain(disc, self.lqr_q, self.lqr_r)

        q_stage = np.diag([0.0, 0.0, 1.0, 0.0])
        self._stage = quadratic_stage(q_stage, np.zeros((1, 1)))
        self._terminal = quadratic_terminal(q_stage)
        self._du_weight = np.array([[p.du_weight]])

    def initial_state(self, rng):
        p = self.params
        return np.array([
            0.0,
            rng.uniform(-p.velocity_init, p.velocity_init),
            rng.uniform(-p.angle_init, p.angle_init),
            rng.uniform(-p.rate_init, p.rate_init),
        ])

    def make_env(self, env_seed, length):
        x0 = self.initial_state(_stream(env_seed, 0))
        return EpisodeEnv(
            env_seed=env_seed,
            length=length,
            x0=x0,
            noise_rng=_stream(env_seed, 1),
        )

    def observe_params(self, env, k):
        return np.zeros(0)

    def plant_step(self, x, u, k, recompute, env):
        nxt = self._step(self._f, x, u, self.params.dt)
        nxt = np.array(nxt, dtype=float)
        nxt[3] += self.params.noise_std * env.noise_rng.standard_normal()
        return nxt

    def model_step(self, x, u, params_k):
        """Noise-free prediction model; identical to the plant's mean."""
        return self._step(self._f, x, u, self.params.dt)

    def step_cost(self, x, u, recompute, k, env):
        return float(x[2] ** 2 + self.params.compute_cost * recompute)

    def terminal_cost(self, x):
        return float(x[2] ** 2)

    def raw_features(self, x, eps, steps_since, params_now):
        out = np.empty(9)
        out[:4] = x
        out[4:8] = eps
        out[8] = steps_since / self.horizon
        return out

    def make_ocp_spec(self, env, anchor, u_prev):
        dt = self.params.dt
        dynamics = lambda xs, us, ps: self._step(self._f, xs, us, dt)
        dynamics_jac = lambda xs, us, ps: self._step_jac(self._f, self._jac, xs, us, dt)
        dynamics_with_jac = lambda xs, us, ps: self._step_with_jac(
            self._f, self._jac, xs, us, dt, fjac=self._fjac
        )
        stage_cost, stage_grad, stage_hess = self._stage
        terminal_cost, terminal_grad, terminal_hess = self._terminal
        return OcpSpec(
            horizon=self.horizon,
            n_x=4,
            n_u=1,
            dynamics=dynamics,
            stage_cost=stage_cost,
            terminal_cost=terminal_cost,
            u_lower=np.array([self.input_low]),
            u_upper=np.array([self.input_high]),
            du_weight=self._du_weight,
            u_prev=np.asarray(u_prev, dtype=float),
            dynamics_jac=dynamics_jac,
            dynamics_with_jac=dynamics_with_jac,
            stage_grad=stage_grad,
            stage_hess=stage_hess,
            terminal_grad=terminal_grad,
            terminal_hess=terminal_hess,
            fd_step=self.config.mpc.fd_step,
        )


# ---------------------------------------------------------------------------
# Battery system


class BatterySystem:
    """Trade energy against a price signal subject to storage limits.

    Input convention: u > 0 sells (discharges), u < 0 buys. The plant adds
    local production P and the standby draw of a recompute; the planner's
    model ignores both the standby draw and the physical saturation, which
    the soft state constraints stand in for.
    """

    name = "battery"
    n_x = 1
    n_u = 1
    n_params = 2
    needs_market = True
    raw_feature_names = (
        "soc", "err_soc", "steps_since_frac", "price_rel", "production",
    )

    def __init__(self, config: RunConfig):
        self.config = config
        b = config.battery
        self.params = b
        self.horizon = config.mpc.horizon
        self.input_low = -b.input_limit
        self.input_high = b.input_limit
        self.ratio = b.delta_hours / b.capacity_kwh
        self.lqr_q = np.array([[b.lqr_q]])
        self.lqr_r = np.array([[b.lqr_r]])

        # SoC error responds to a correction with gain -delta/C; feeding back
        # the (plan minus plant) deviation flips it to +delta/C.
        err_model = LtiModel(
            a=np.array([[1.0]]), b=np.array([[self.ratio]]), discrete=True
        )
        self.gain = lqr_gain(err_model, self.lqr_q, self.lqr_r)

        self._terminal_weight = b.lambda_bar * b.capacity_kwh

    def initial_state(self, rng):
        return np.array([rng.uniform(self.params.soc_init_low,
                                     self.params.soc_init_high)])

    def make_env(self, env_seed, length):
        x0 = self.initial_state(_stream(env_seed, 0))
        market = generate_market(
            length + self.horizon, _stream(env_seed, 2), self.config.market
        )
        return EpisodeEnv(
            env_seed=env_seed,
            length=length,
            x0=x0,
            noise_rng=_stream(env_seed, 1),
            market=market,
        )

    def observe_params(self, env, k):
        return np.array([env.market.p_true[k], env.market.lambda_true[k]])

    def plant_step(self, x, u, k, recompute, env):
        p_k = env.market.p_true[k]
        draw = self.params.compute_power_kw * recompute
        soc = x[0] - self.ratio * (u[0] - p_k - draw)
        return np.array([min(max(soc, 0.0), 1.0)])

    def model_step(self, x, u, params_k):
        return x - self.ratio * (u - params_k[:1])

    def step_cost(self, x, u, recompute, k, env):
        return float(-env.market.lambda_true[k] * u[0] * self.params.delta_hours)

    def terminal_cost(self, x):
        return float(-self._terminal_weight * x[0])

    def raw_features(self, x, eps, steps_since, params_now):
        lam_bar = self.params.lambda_bar
        return np.array([
            x[0],
            eps[0],
            steps_since / self.horizon,
            (params_now[1] - lam_bar) / lam_bar,
            params_now[0],
        ])

    def make_ocp_spec(self, env, anchor, u_prev):
        forecast = generate_forecast(
            env.market, anchor, self.horizon, env.forecast_rng(anchor),
            self.config.market,
        )
        ratio = self.ratio
        delta = self.params.delta_hours
        terminal_weight = self._terminal_weight

        def dynamics(xs, us, ps):
            return xs - ratio * (us - ps[:, :1])

        def dynamics_jac(xs, us, ps):
            n = xs.shape[0]
            a = np.ones((n, 1, 1))
            b = np.full((n, 1, 1), -ratio)
            return a, b

        def stage_cost(xs, us, ps):
            return -ps[:, 1] * us[:, 0] * delta

        def stage_grad(xs, us, ps):
            return np.zeros_like(xs), (-ps[:, 1] * delta)[:, None]

        def stage_hess(xs, us, ps):
            n = xs.shape[0]
            return np.zeros((n, 1, 1)), np.zeros((n, 1, 1))

        def terminal_cost_fn(x):
            return -terminal_weight * x[0]

        def terminal_grad(x):
            return np.array([-terminal_weight])

        def terminal_hess(x):
            return np.zeros((1, 1))

        def soft_constraint(xs):
            return np.stack([-xs[:, 0], xs[:, 0] - 1.0], axis=1)

        def soft_jac(xs):
            n = xs.shape[0]
            jac = np.empty((n, 2, 1))
            jac[:, 0, 0] = -1.0
            jac[:, 1, 0] = 1.0
            return jac

        return OcpSpec(
            horizon=self.horizon,
            n_x=1,
            n_u=1,
            dynamics=dynamics,
            stage_cost=stage_cost,
            terminal_cost=terminal_cost_fn,
            u_lower=np.array([self.input_low]),
            u_upper=np.array([self.input_high]),
            params=forecast,
            du_weight=np.array([[self.params.du_weight]]),
            u_prev=np.asarray(u_prev, dtype=float),
            dynamics_jac=dynamics_jac,
            stage_grad=stage_grad,
            stage_hess=stage_hess,
            terminal_grad=terminal_grad,
            terminal_hess=terminal_hess,
            soft_constraint=soft_constraint,
            soft_jac=soft_jac,
            soft_weight=self.params.soft_weight,
            n_soft=2,
            fd_step=self.config.mpc.fd_step,
        )


# ---------------------------------------------------------------------------
# Shared helpers


def rl_step_cost(system, x, u, recompute, params_now):
    """Per-step learning cost under observed conditions.

    For the battery the observed price enters through ``params_now``
    (production, price); the pendulum ignores it.
    """
    if system.name == "battery":
        return float(-params_now[1] * u[0] * system.params.delta_hours)
    return float(x[2] ** 2 + system.params.compute_cost * recompute)


def rl_terminal_cost(system, x):
    return system.terminal_cost(x)


def build_system(name, config: RunConfig):
    """Construct a benchmark system and certify its error-feedback design."""
    if name == "pendulum":
        system = PendulumSystem(config)
    elif name == "battery":
        system = BatterySystem(config)
    else:
        raise ValueError(f"unknown system '{name}' (expected pendulum or battery)")
    res = dare_residual(
        system.gain.model.a, system.gain.model.b, system.lqr_q, system.lqr_r,
        system.gain.p,
    )
    if res >= 1e-9:
        raise RuntimeError(
            f"error-feedback Riccati solution for {name} has residual {res:.2e}"
        )
    return system
