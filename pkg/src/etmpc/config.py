"""Run configuration: one nested structure, JSON on disk, flags on top.

Every quantity that affects episode dynamics lives here so that an
episode is a pure function of (config, policy parameters, seed). The
environment fingerprint hashes exactly the subtree that defines the
closed-loop process; training hyperparameters are excluded on purpose
so a test set stays valid across learning-rate sweeps.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields


@dataclass
class PendulumConfig:
    """Cart pendulum parameters plus its controller weights."""

    pole_mass: float = 0.1
    cart_mass: float = 1.1
    pole_length: float = 1.0
    gravity: float = 9.81
    dt: float = 0.1
    noise_std: float = 1.0
    input_limit: float = 25.0
    # Initial state draw: eta = 0, v ~ U(+-velocity_init),
    # beta ~ U(+-angle_init), omega ~ U(+-rate_init).
    velocity_init: float = 1.0
    angle_init: float = 0.78
    rate_init: float = 1.0
    du_weight: float = 1e-4
    compute_cost: float = 5e-5
    lqr_q: tuple[float, ...] = (0.0, 1.0, 10.0, 10.0)
    lqr_r: float = 0.1


@dataclass
class BatteryConfig:
    """Storage unit trading on a synthetic spot market."""

    capacity_kwh: float = 10.0
    delta_hours: float = 10.0 / 3600.0
    compute_power_kw: float = 0.1
    lambda_bar: float = 0.5
    soc_init_low: float = 0.2
    soc_init_high: float = 0.8
    du_weight: float = 0.0
    soft_weight: float = 1e3
    lqr_q: float = 1.0
    lqr_r: float = 0.1

    @property
    def input_limit(self) -> float:
        # Single-step trade capped at 10% of capacity.
        return 0.1 * self.capacity_kwh / self.delta_hours


@dataclass
class MarketConfig:
    """Synthetic production and price processes (base segments + OU)."""

    p_level_low: float = -2.0
    p_level_high: float = 2.0
    p_duration_low: int = 30
    p_duration_high: int = 120
    price_low: float = 0.2
    price_high: float = 0.8
    price_segment_steps: int = 360
    ou_theta: float = 0.15
    ou_mu: float = 0.0
    ou_sigma_p: float = 0.3
    ou_sigma_price: float = 0.05
    ou_dt: float = 1.0
    price_floor: float = 0.01
    forecast_theta: float = 0.15
    forecast_sigma_p: float = 0.3
    forecast_sigma_price: float = 0.05


@dataclass
class MpcConfig:
    horizon: int = 20
    kkt_tol: float = 1e-6
    gap_tol: float = 1e-8
    max_iterations: int = 100
    damping: float = 1e-6
    fd_step: float = 1e-6
    backtrack_factor: float = 0.5
    max_backtracks: int = 20
    integrator: str = "rk4"  # "rk4" or "euler", plant and model alike
    u_prev_init: float = 0.0
    lqr_discretization: str = "zoh"  # "zoh" or "euler"


@dataclass
class RlConfig:
    gamma: float = 0.975
    learning_rate: float = 0.05
    batch_size: int = 10
    total_episodes: int = 1500
    eval_interval: int = 150
    warmup_episodes: int = 50
    grad_clip: float = 10.0
    init_bias: float = -4.0
    eval_repeats: int = 1


@dataclass
class HarnessConfig:
    testset_episodes: int = 100
    episode_steps: int = 100
    eval_repeats_stochastic: int = 5
    workers: int = 0  # 0 means use all available cores


@dataclass
class RunConfig:
    system: str = "pendulum"
    master_seed: int = 0
    pendulum: PendulumConfig = field(default_factory=PendulumConfig)
    battery: BatteryConfig = field(default_factory=BatteryConfig)
    market: MarketConfig = field(default_factory=MarketConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    def __post_init__(self):
        if self.system not in ("pendulum", "battery"):
            raise ValueError(f"unknown system {self.system!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {
    "pendulum": PendulumConfig,
    "battery": BatteryConfig,
    "market": MarketConfig,
    "mpc": MpcConfig,
    "rl": RlConfig,
    "harness": HarnessConfig,
}


def _build_section(cls, data: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys under {path}: {sorted(unknown)}")
    kwargs = dict(data)
    if "lqr_q" in kwargs and isinstance(kwargs["lqr_q"], list):
        kwargs["lqr_q"] = tuple(kwargs["lqr_q"])
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    """Rebuild a RunConfig from parsed JSON, rejecting unknown keys."""
    data = dict(data)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(cls, data.pop(name), name)
    top_known = {"system", "master_seed"}
    unknown = set(data) - top_known
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs.update(data)
    return RunConfig(**kwargs)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json() + "\n")


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings on top of a config.

    Values are parsed as JSON where possible so numbers and booleans
    come out typed; anything unparseable stays a string.
    """
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ValueError(f"unknown config section {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)


def environment_fingerprint(cfg: RunConfig) -> dict:
    """The config subtree that pins down episode dynamics."""
    sys_section = cfg.pendulum if cfg.system == "pendulum" else cfg.battery
    fp = {
        "system": cfg.system,
        "episode_steps": cfg.harness.episode_steps,
        "params": dataclasses.asdict(sys_section),
        "mpc": dataclasses.asdict(cfg.mpc),
    }
    if cfg.system == "battery":
        fp["market"] = dataclasses.asdict(cfg.market)
    return fp


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(environment_fingerprint(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
