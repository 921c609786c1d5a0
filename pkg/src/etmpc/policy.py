"""Recomputation policies: the learned logistic head and fixed baselines.

Action 1 means "solve a fresh plan now", action 0 means "keep flying the
stored one". The logistic policy models the probability of *trusting* the
plan, pi(0 | s) = sigma(theta . s); the three baselines ignore features
and randomness entirely.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "SCHEMA_VERSION",
    "PolicyParams",
    "AlwaysRecompute",
    "NeverRecompute",
    "PeriodicRecompute",
    "LogisticRecompute",
    "sigmoid",
    "prob_no_recompute",
    "log_prob_grad",
    "sample_action",
    "init_policy_params",
    "save_policy_params",
    "load_policy_params",
    "make_policy",
]

SCHEMA_VERSION = 1


def sigmoid(z: float) -> float:
    """Overflow-safe logistic function for scalar arguments."""
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def prob_no_recompute(theta: np.ndarray, features: np.ndarray) -> float:
    """pi(0 | s) = sigma(theta . s): probability of keeping the plan."""
    return sigmoid(float(np.dot(theta, features)))


def log_prob_grad(
    theta: np.ndarray, features: np.ndarray, action: int
) -> np.ndarray:
    """Score function d/dtheta of log pi(action | s).

    log pi(0) = log sigma(z) has gradient s * pi(1); log pi(1) has
    gradient -s * pi(0). Their probability-weighted sum is exactly zero.
    """
    if action not in (0, 1):
        raise ValueError(f"action must be 0 or 1, got {action!r}")
    features = np.asarray(features, dtype=float)
    p0 = prob_no_recompute(theta, features)
    if action == 0:
        return features * (1.0 - p0)
    return -features * p0


@dataclass
class PolicyParams:
    """Logistic-policy weights plus the frozen feature normalization.

    theta spans the normalized feature vector (raws, squares, bias);
    feature_mean/feature_std cover everything but the bias.
    """

    theta: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    feature_names: tuple = ()
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.feature_mean = np.asarray(self.feature_mean, dtype=float)
        self.feature_std = np.asarray(self.feature_std, dtype=float)
        self.feature_names = tuple(self.feature_names)
        if self.theta.shape != (self.feature_mean.shape[0] + 1,):
            raise ValueError(
                f"theta length {self.theta.shape[0]} does not match "
                f"{self.feature_mean.shape[0]} normalized components + bias"
            )
        if self.feature_std.shape != self.feature_mean.shape:
            raise ValueError("normalization mean/std shapes differ")
        if not (
            np.all(np.isfinite(self.theta))
            and np.all(np.isfinite(self.feature_mean))
            and np.all(np.isfinite(self.feature_std))
        ):
            raise ValueError("policy parameters must be finite")
        if np.any(self.feature_std <= 0.0):
            raise ValueError("normalization std must be positive")


def init_policy_params(
    n_raw: int, feature_names=(), bias_weight: float = -4.0
) -> PolicyParams:
    """Fresh parameters: identity normalization, theta = 0 except the bias.

    bias_weight = -4 puts pi(0|s) near 0.018 at the start of training, so
    the untrained policy recomputes almost every step.
    """
    n_aug = 2 * n_raw
    theta = np.zeros(n_aug + 1)
    theta[-1] = bias_weight
    return PolicyParams(
        theta=theta,
        feature_mean=np.zeros(n_aug),
        feature_std=np.ones(n_aug),
        feature_names=feature_names,
    )


def save_policy_params(params: PolicyParams, path) -> None:
    payload = {
        "schema_version": params.schema_version,
        "theta": params.theta.tolist(),
        "feature_mean": params.feature_mean.tolist(),
        "feature_std": params.feature_std.tolist(),
        "feature_names": list(params.feature_names),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_policy_params(path) -> PolicyParams:
    payload = json.loads(Path(path).read_text())
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(
            f"policy file schema {version!r} unsupported "
            f"(expected {SCHEMA_VERSION})"
        )
    return PolicyParams(
        theta=np.array(payload["theta"], dtype=float),
        feature_mean=np.array(payload["feature_mean"], dtype=float),
        feature_std=np.array(payload["feature_std"], dtype=float),
        feature_names=tuple(payload.get("feature_names", ())),
    )


class AlwaysRecompute:
    """Standard MPC: a fresh solve every step."""

    kind = "always"
    needs_features = False

    def action(self, features, step, rng) -> int:
        return 1

    def score(self, features, action):
        return None


class NeverRecompute:
    """Plan once, fly it until the forced recompute at the horizon end."""

    kind = "never"
    needs_features = False

    def action(self, features, step, rng) -> int:
        return 0

    def score(self, features, action):
        return None


class PeriodicRecompute:
    """Recompute on a fixed schedule: step index divisible by the period."""

    kind = "periodic"
    needs_features = False

    def __init__(self, period: int):
        if period < 1:
            raise ValueError(f"period must be >= 1, got {period}")
        self.period = int(period)

    def action(self, features, step, rng) -> int:
        return 1 if step % self.period == 0 else 0

    def score(self, features, action):
        return None


class LogisticRecompute:
    """Bernoulli policy on pi(1|s) = 1 - sigma(theta . s).

    In deterministic mode the action is the argmax and no score is
    reported (there is no sampled action to credit).
    """

    kind = "logistic"
    needs_features = True

    def __init__(self, params: PolicyParams, deterministic: bool = False):
        self.params = params
        self.deterministic = bool(deterministic)

    def action(self, features, step, rng) -> int:
        p0 = prob_no_recompute(self.params.theta, features)
        if self.deterministic:
            return int(p0 < 0.5)
        return int(rng.random() >= p0)

    def score(self, features, action):
        if self.deterministic:
            return None
        return log_prob_grad(self.params.theta, features, action)


def sample_action(policy, features, step: int, rng) -> int:
    """Draw (or decide) the recompute action for one decision point."""
    return policy.action(features, step, rng)


def make_policy(spec: str, params: PolicyParams | None = None,
                deterministic: bool = False):
    """Parse a policy name: always | never | periodic:<t> | logistic."""
    name, _, arg = spec.partition(":")
    if name == "always":
        return AlwaysRecompute()
    if name == "never":
        return NeverRecompute()
    if name == "periodic":
        if not arg:
            raise ValueError("periodic policy needs a period, e.g. periodic:20")
        return PeriodicRecompute(int(arg))
    if name == "logistic":
        if params is None:
            raise ValueError("logistic policy needs PolicyParams")
        return LogisticRecompute(params, deterministic=deterministic)
    raise ValueError(f"unknown policy {spec!r}")
