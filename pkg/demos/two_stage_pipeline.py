"""Mid-training then post-training on a small toy dataset, printing the loss curves.

Sizes are cut down so this finishes in a few minutes; pass a step count
to train longer.

    python demos/two_stage_pipeline.py [mid_steps]
"""
import sys
import time

import numpy as np

from frappe_lite import data, env
from frappe_lite.alignment import distill_teacher, make_teachers
from frappe_lite.policy import PolicyModel
from frappe_lite.training import TrainConfig, mid_train, post_train

mid_steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
cfg = TrainConfig(seed=0, lr=1e-3, log_every=0, mid_steps=mid_steps, post_steps=mid_steps // 3)
t0 = time.perf_counter()

ds = data.TrajectoryDataset(data.generate_episodes("robot", 60, seed=0), "robot")
print(f"{len(ds)} training chunks from 60 scripted episodes")

teachers = make_teachers()
distilled = distill_teacher(teachers, ds.obs, steps=300, seed=0)
print(f"distilled teacher: loss {distilled.history[0]:.3f} -> {distilled.history[-1]:.4f}")


def curve(res, key, points=6):
    s = res.series(key)
    at = np.linspace(0, len(s) - 1, points).astype(int)
    w = max(1, len(s) // 20)
    return "  ".join(f"{s[max(0, i - w):i + 1].mean():.4f}" for i in at)


model = PolicyModel(seed=0)
mid = mid_train(model, distilled, data.uniform_sampler(ds, 0, cfg.batch_size), cfg)
print(f"\nmid-training, {cfg.mid_steps} steps (full parameters, one distilled teacher)")
print("  action:", curve(mid, "loss_action"))
print("  align: ", curve(mid, "loss_align"))

experts, post = post_train(model, teachers, data.uniform_sampler(ds, 1, cfg.batch_size), cfg)
print(f"\npost-training, {cfg.post_steps} steps (prefix banks, LoRA and router only)")
for i in range(len(teachers)):
    print(f"  align expert {i}:", curve(post, f"loss_align_{i}"))
w = np.array([[h[f"w_{i}"] for i in range(3)] for h in post.history[-50:]]).mean(axis=0)
print("  mean router weights, last 50 steps:", np.round(w, 3))
print("  frozen registry unchanged:", post.frozen_hash_before == post.frozen_hash_after)

print("\nEasy success over 20 episodes")
print("  mid-trained policy:  ", env.evaluate(model.as_policy(), env.EASY, 20, seed=99))
print("  with the expert mix: ", env.evaluate(model.as_policy(experts), env.EASY, 20, seed=99))
print(f"\n{time.perf_counter() - t0:.0f}s")
