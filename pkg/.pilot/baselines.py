import time
import numpy as np
from etmpc.config import RunConfig
from etmpc.harness import build_testset, evaluate_policy
from etmpc.policy import AlwaysRecompute, NeverRecompute, PeriodicRecompute
from etmpc.systems import build_system

cfg = RunConfig(system="pendulum")
system = build_system("pendulum", cfg)
testset = build_testset(cfg, master_seed=0)

for name, pol in [
    ("never", NeverRecompute()),
    ("periodic:2", PeriodicRecompute(2)),
    ("periodic:5", PeriodicRecompute(5)),
    ("periodic:10", PeriodicRecompute(10)),
    ("periodic:20", PeriodicRecompute(20)),
]:
    t0 = time.monotonic()
    rep = evaluate_policy(system, pol, testset)
    dt = time.monotonic() - t0
    print(
        f"{name}: G {rep.mean_return:.4f} std {rep.std_return:.4f} "
        f"frac {rep.recompute_fraction:.3f} failed {rep.n_failed} ({dt:.0f}s)",
        flush=True,
    )
