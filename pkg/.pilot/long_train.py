import sys
import time
from etmpc.config import RunConfig
from etmpc.harness import build_testset
from etmpc.rl import train
from etmpc.systems import build_system

seed = int(sys.argv[1])
episodes = int(sys.argv[2])
out = sys.argv[3]

cfg = RunConfig(system="pendulum")
cfg.rl.total_episodes = episodes
cfg.rl.eval_interval = 300
cfg.master_seed = seed
system = build_system("pendulum", cfg)
testset = build_testset(cfg, master_seed=0)

t0 = time.monotonic()
result = train(system, testset=testset, out_dir=out, log=lambda m: print(m, flush=True))
print(f"wall {time.monotonic()-t0:.0f}s diverged={result.diverged} clips={result.clip_events}", flush=True)
for pt in result.curve:
    print(f"  ep {pt.episode}: G {pt.mean_return:.4f} frac {pt.recompute_fraction:.3f}", flush=True)
