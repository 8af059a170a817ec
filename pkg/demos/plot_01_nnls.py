"""
Non-negative least squares
==========================

Solve a small NNLS problem, inspect the active set and check optimality.
"""

import numpy as np

from hybridinv.linalg_nnls import kkt_report, nnls_solve

# A random overdetermined system; the unconstrained solution has a negative entry
rng = np.random.default_rng(64)
A = rng.normal(size=(6, 4))
y = rng.normal(size=6)
print("unconstrained:", np.linalg.lstsq(A, y, rcond=None)[0])

# The active-set solver clamps it and reports how many inner solves it took
sol = nnls_solve(A, y)
print("weights:", sol.weights)
print("support:", sol.support, "iterations:", sol.iterations)
print("residual norm:", sol.residual_norm)

# KKT conditions: primal feasibility, dual feasibility, complementary slackness
rep = kkt_report(A, y, sol.weights, 1e-8)
print("KKT passed:", rep.passed, "max dual violation:", rep.max_dual_violation)
