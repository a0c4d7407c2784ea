"""A scalar LQ problem whose optimum is known in closed form.

With A = B = G = 0 and unit weights the state, control and adjoint are all
multiples of exp(t - T). We solve it on a deterministic chain and watch the
discrete solution track the exact one as N grows.
"""

import numpy as np

from bsee_control import closed_form_lq, lq_problem, solve_optimal_control

exact = closed_form_lq(c=1.0, horizon=1.0)

print("   N        y(0)   |y(0)-e^-1|        J(u*)")
for N in (16, 64, 256):
    p = lq_problem(steps=N, coercivity_lambda=1.0)
    u, lam, rep = solve_optimal_control(p)
    y0 = lam.y.level(0)[0, 0]
    print(f"{N:>4}  {y0:.8f}   {abs(y0 - exact['y'](0.0)):.2e}   {rep.cost.total:.8f}")

# at N = 256, compare the whole trajectories
t = p.lattice.grid.times[:-1]
y = lam.y.data[:-1, 0]
print("\n     t      y(t)    exact     u(t)     k(t)")
for i in range(0, 256, 64):
    print(f"{t[i]:6.3f}  {y[i]:.5f}  {exact['y'](t[i]):.5f}  {u.data[i, 0]:.5f}  {lam.k.data[i, 0]:.5f}")
print(f"\nsup |u - y| / sup |y| = {np.abs(u.data[:, 0] - y).max() / np.abs(y).max():.2e}")
print("the control equals the state and k = -2y, up to O(dt)")
