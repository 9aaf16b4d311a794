"""Plain fine-tuning vs post-only vs the full two-stage recipe, for one seed.

This is one seed of the acceptance comparison at full size: 200 robot
episodes, 3000 mid steps and 1000 post steps. It takes about 20 minutes on one core.

    python demos/paradigm_comparison.py [seed]
"""
import sys
import time

from frappe_lite import data, env
from frappe_lite.alignment import distill_teacher, make_teachers
from frappe_lite.training import TrainConfig, evaluate_run, run_paradigm

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = TrainConfig(seed=seed, lr=1e-3, log_every=0)
ds = data.TrajectoryDataset(data.generate_episodes("robot", 200, seed), "robot")
teachers = make_teachers()
distilled = distill_teacher(teachers, ds.obs, steps=1000, seed=seed)


def sampler(s):
    return data.uniform_sampler(ds, s, cfg.batch_size)


names = {0: "plain fine-tune (action loss only)", 3: "post-only (experts on a raw backbone)",
         6: "mid-train then post-train"}
for paradigm in (0, 3, 6):
    t0 = time.perf_counter()
    run = run_paradigm(paradigm, sampler, distilled, teachers, cfg)
    rate = evaluate_run(run, 50, env.EASY, seed=1000 + seed)
    print(f"paradigm {paradigm} {names[paradigm]:<40} Easy success {rate:.2f}  ({time.perf_counter() - t0:.0f}s)",
          flush=True)
