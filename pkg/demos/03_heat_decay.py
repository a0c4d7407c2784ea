"""Uncontrolled backward heat equation against its exact decay.

With diffusion 1/2 and terminal profile sin(pi x), the solution at time 0 is
exp(-pi^2 T / 2) sin(pi x). The finite-difference discretisation should be
second order in space; the sweep compares with the time-discrete exact
solution so that only the spatial error remains.
"""

import numpy as np

from bsee_control.config import load
from bsee_control.experiment import convergence_sweep, run

cfg = load("heat_decay")
out = run(cfg, suites=[], reference=True)
rec = out.report["checks"][0]
y0 = np.array(out.report["summary"]["y0"])
x = np.arange(1, y0.size + 1) / (y0.size + 1)
print(f"meshN={cfg.mesh_n}, N={cfg.steps}: relative L2 error {rec['value']:.2e}")
print("    x     y(0,x)    exact")
for j in range(7, y0.size, 16):
    print(f"{x[j]:.3f}  {y0[j]:.6f}  {np.exp(-np.pi ** 2 * cfg.horizon / 2) * np.sin(np.pi * x[j]):.6f}")

rows, _ = convergence_sweep(cfg, [8, 16, 32, 64], "mesh")
print("\nmeshN     error     order")
for r in rows:
    print(f"{r.level:>5}  {r.error:.3e}  {'' if np.isnan(r.order) else f'{r.order:.3f}'}")
