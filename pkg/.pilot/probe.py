import time
import numpy as np
from etmpc.config import RunConfig
from etmpc.harness import build_testset, evaluate_policy
from etmpc.policy import PolicyParams, init_policy_params
from etmpc.systems import build_system

cfg = RunConfig(system="pendulum")
system = build_system("pendulum", cfg)
testset = build_testset(cfg, master_seed=0)

IDENT = init_policy_params(9)  # identity normalization -> features are raw


class SingleKeep:
    kind = "probe"
    needs_features = False

    def __init__(self, at):
        self.at = at

    def action(self, features, step, rng):
        return 0 if step == self.at else 1

    def score(self, features, action):
        return None


class Threshold:
    """Keep when angle small, prediction error small, plan not too old."""

    kind = "probe"
    needs_features = True
    params = IDENT

    def __init__(self, beta_thr, eps_thr, max_age_frac=1.0, warm_steps=0):
        self.beta_thr = beta_thr
        self.eps_thr = eps_thr
        self.max_age_frac = max_age_frac
        self.warm_steps = warm_steps

    def action(self, features, step, rng):
        x = features[:4]
        eps = features[4:8]
        age = features[8]
        if step < self.warm_steps:
            return 1
        if (
            abs(x[2]) < self.beta_thr
            and np.linalg.norm(eps) < self.eps_thr
            and age < self.max_age_frac
        ):
            return 0
        return 1

    def score(self, features, action):
        return None


ALWAYS_G = 10.0846

for name, pol in [
    ("keep@50", SingleKeep(50)),
    ("keep@10", SingleKeep(10)),
    ("thr b.3 e.3 warm30", Threshold(0.3, 0.3, 1.0, 30)),
    ("thr b.2 e.2 warm30", Threshold(0.2, 0.2, 1.0, 30)),
    ("thr b.3 e.5 age.5 warm25", Threshold(0.3, 0.5, 0.5, 25)),
    ("thr b.5 e1.0 warm25", Threshold(0.5, 1.0, 1.0, 25)),
]:
    t0 = time.monotonic()
    rep = evaluate_policy(system, pol, testset)
    dt = time.monotonic() - t0
    print(
        f"{name}: G {rep.mean_return:.4f} (dG {rep.mean_return - ALWAYS_G:+.4f}) "
        f"frac {rep.recompute_fraction:.3f} failed {rep.n_failed} ({dt:.0f}s)",
        flush=True,
    )
