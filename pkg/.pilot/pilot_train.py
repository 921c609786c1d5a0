import time
import numpy as np
from etmpc.config import RunConfig
from etmpc.harness import build_testset, evaluate_policy
from etmpc.policy import AlwaysRecompute
from etmpc.rl import train
from etmpc.systems import build_system

cfg = RunConfig(system="pendulum")
cfg.rl.total_episodes = 1000
cfg.master_seed = 0
system = build_system("pendulum", cfg)
testset = build_testset(cfg, master_seed=0)

t0 = time.monotonic()
always = evaluate_policy(system, AlwaysRecompute(), testset)
t1 = time.monotonic()
print(f"always: G {always.mean_return:.4f} frac {always.recompute_fraction} ({t1-t0:.0f}s)", flush=True)

result = train(system, testset=testset, out_dir="/root/pkg/.pilot/seed0", log=print)
t2 = time.monotonic()
print(f"train wall {t2-t1:.0f}s diverged={result.diverged} clips={result.clip_events}")
for pt in result.curve:
    print(f"  ep {pt.episode}: G {pt.mean_return:.4f} std {pt.std_return:.4f} frac {pt.recompute_fraction:.3f}")
final = result.curve[-1]
print(f"gate: frac {final.mean_return:.4f}", flush=True)
ratio = final.mean_return / always.mean_return
print(f"G ratio vs always: {ratio:.4f} (need <= 1.10); frac {final.recompute_fraction:.3f} (need <= 0.35)")
