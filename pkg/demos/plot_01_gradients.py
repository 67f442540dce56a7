"""
Checking gradients on the tape
==============================

Every operation in the package records a backward rule on a tape. Here we
compare those rules against central differences, first for a tiny function
and then for the unrolled architecture gradient.
"""

import numpy as np

from fdarts.autograd import GradientTape, Tensor, grad_check
from fdarts.nn import sigmoid
from fdarts.verification import quadratic_analytic, quadratic_hypergradient, run_suite, xi_sweep

# a scalar function and its gradient from the tape
x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
with GradientTape() as tape:
    loss = (sigmoid(x) * x).sum()
(g,) = tape.gradient(loss, [x])
print("tape gradient:", g)
print("worst relative error vs central differences:", grad_check(lambda t: (sigmoid(t) * t).sum(), x))

###############################################################################
# The bilevel quadratic
# ---------------------
# With L_train = (w - a)^2 and L_val = w^2 the one-step unrolled gradient has a
# closed form, so the finite-difference Hessian-vector product can be checked
# exactly.

for w, a, xi in [(1.0, 0.0, 0.1), (0.5, 2.0, 0.05), (-1.0, 0.3, 0.2)]:
    print(f"w={w:+.1f} a={a:+.1f} xi={xi:.2f}  pipeline {quadratic_hypergradient(w, a, xi):+.6f}"
          f"  closed form {quadratic_analytic(w, a, xi):+.6f}")

# shrinking xi closes the gap to the first-order gradient
for row in xi_sweep()["rows"]:
    print(f"xi={row['xi']:<8g} gap to first order {row['gap']:.6f}")

###############################################################################
# The whole suite, as printed by ``fdarts gradcheck``

failed = [r.name for r in run_suite() if not r.passed]
print("suite failures:", failed or "none")
