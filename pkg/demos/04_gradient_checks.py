"""
Trusting the autodiff engine
============================

Every op and every loss graph is checked against central finite
differences. Then one backward rule is deliberately broken to show the
check notices.
"""

import numpy as np

from pcm3 import tensor as T
from pcm3.verify import GRAD_TOL, run_suite

for r in run_suite(seeds=(0, 1)):
    print(f"{'ok ' if r.passed else 'BAD'} {r.name:<28} {r.value:.2e}")

with T.inject_grad_fault("log_softmax"):
    broken = [r.name for r in run_suite(seeds=(0,)) if not r.passed]
print(f"\nwith a scaled log_softmax backward, {len(broken)} checks exceed {GRAD_TOL:g}:")
print("  " + ", ".join(broken))

# A tiny graph by hand: d/dx sum(tanh(x @ w)) at one point.
x = T.Tensor(np.array([[0.5, -1.0]]), requires_grad=True)
w = T.Tensor(np.array([[1.0], [2.0]]), requires_grad=True)
T.backward(T.sum(T.tanh(T.matmul(x, w))))
print("\ngrad x", x.grad, " expected", (1 - np.tanh(-1.5) ** 2) * np.array([1.0, 2.0]))
