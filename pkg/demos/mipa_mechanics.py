"""The mixture-of-prefix-and-LoRA pieces, one at a time.

LoRA merge equivalence, router smoothing, the load-balance penalty, and the
fact that freshly initialized experts leave the base policy untouched.

    python demos/mipa_mechanics.py
"""
import math

import numpy as np

from frappe_lite import env
from frappe_lite.autograd import Tensor, no_grad
from frappe_lite.mipa import ExpertSet, load_balance_loss, lora_forward, merge_lora, smooth_weights
from frappe_lite.policy import PolicyModel

rng = np.random.default_rng(0)

# LoRA: adapter path vs merged weight
W, A, U = rng.standard_normal((16, 12)), rng.standard_normal((4, 16)), rng.standard_normal((12, 4)) * 0.1
xs = rng.standard_normal((3, 16))
adapter = lora_forward(Tensor(W), Tensor(A), Tensor(U), Tensor(xs), alpha=8.0).data
merged = xs @ merge_lora(W, A, U, alpha=8.0)
print(f"LoRA adapter vs merged weight: max |diff| = {np.abs(adapter - merged).max():.1e}")

# smoothing keeps every expert alive
print("smooth (1,0,0), eps=0.1 ->", np.round(smooth_weights(np.array([1.0, 0.0, 0.0]), 0.1), 6))

# balance loss: log-sum-exp squared, zero when the logits sum to probability 1
for g in ([0.0, 0.0, 0.0], [-math.log(3)] * 3, [1.0, 2.0, 3.0]):
    print(f"load balance {np.round(g, 4)!s:<26} -> {float(load_balance_loss(Tensor(g)).data):.5f}")

# untrained experts: LoRA up-matrices are zero, so every stream equals the base policy
model = PolicyModel(seed=0)
experts = ExpertSet(model, seed=1, prefix_init=model.prefix.data)
state = env.sample_layout(rng, env.EASY)
args = (env.render(state)[None], state.proprio()[None], np.array([state.instruction]),
        rng.standard_normal((1, 8, 3)).astype(np.float32), np.array([10]))
with no_grad():
    base = model.forward(*args, with_prefix=False).latents.data[0]
    out = experts.run(model, *args)
same = all(out.latents.data[i].tobytes() == base.tobytes() for i in range(3))
print(f"3 expert streams bit-identical to the base forward at init: {same}")
print(f"router weights at init: {np.round(out.weights.data[0], 4)}")
total = model.num_parameters() + experts.num_parameters()
print(f"trainable in post-training: {experts.num_parameters():,} of {total:,} ({experts.num_parameters() / total:.1%})")
