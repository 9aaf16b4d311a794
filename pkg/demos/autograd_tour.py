"""A short walk through the tape-based autograd engine.

Builds a small two-layer regression by hand, checks its gradients against
finite differences, then runs the per-op gradcheck sweep that the CLI's
``gradcheck --scope ops`` reports.

    python demos/autograd_tour.py
"""
import time

import numpy as np

from frappe_lite.autograd import GraphError, Tensor, gradcheck, ops
from frappe_lite.autograd.checks import check_ops

rng = np.random.default_rng(0)

# a 2-layer MLP written directly against the op set
x = Tensor(rng.standard_normal((8, 5)))
y = rng.standard_normal((8, 1))
w1 = Tensor(rng.standard_normal((5, 16)) * 0.4, requires_grad=True)
w2 = Tensor(rng.standard_normal((16, 1)) * 0.4, requires_grad=True)

loss = ops.mean(ops.square(ops.gelu(x @ w1) @ w2 - y))
loss.backward()
print(f"loss {float(loss.data):.4f}   |dL/dw1| {np.linalg.norm(w1.grad):.4f}   |dL/dw2| {np.linalg.norm(w2.grad):.4f}")

# the tape is consumed by backward; replaying it is an error
try:
    loss.backward()
except GraphError as exc:
    print("second backward ->", exc)

# finite differences against the analytic gradient (float64 shadow path)
err = gradcheck(lambda w: ops.mean(ops.square(ops.gelu(x @ w) @ w2 - y)), Tensor(w1.data.astype(np.float64)), eps=1e-6)
print(f"gradcheck on w1: max relative error {err:.2e}")

# every registered op, 10 random instances each
t0 = time.time()
report = check_ops(seed=0)
worst = max(report, key=report.get)
print(f"{len(report)} ops checked in {time.time() - t0:.1f}s; worst is {worst} at {report[worst]:.2e}")
