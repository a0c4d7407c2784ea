"""Decoupled solvers: backward induction for the state equation and forward
stepping for the adjoint equation.

State (backward), per node of level i::

    z_i = (y_{i+1}^+ - y_{i+1}^-) / (2 sqrt(dt))
    (I + dt A_i) y_i = E_i[y_{i+1}] - dt (B_i z_i + D_i u_i + G_i + f0_i)
    y_N = xi

Adjoint (forward), for each child reached with increment dW::

    (I + dt A*_i) kappa_i = k_i - dt b_i
    k_{i+1} = kappa_i - (B*_i kappa_i + g_i) dW
    k_0 = -h_y(y_0)

where ``b`` and ``g`` are the drift and diffusion loads. ``kappa_i`` equals
E_i[k_{i+1}]; with this placement the adjoint step is the exact transpose of
the state step, so the discrete cost gradient is E sum dt (D* kappa + l_u, v).
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .lattice import AdaptedProcess, TripleProcess
from .problem import LevelOperators, SolverError

RESIDUAL_TOL = 1e-10


@dataclass
class BseeInput:
    operators: LevelOperators
    u: Optional[AdaptedProcess] = None
    f0: Optional[AdaptedProcess] = None


@dataclass
class SeeInput:
    operators: LevelOperators
    initial_map: Callable
    drift_load: AdaptedProcess
    diffusion_load: AdaptedProcess


def _check_input(ops, proc, dim, name, last):
    if proc is None:
        return
    if proc.lattice is not ops.lattice:
        raise SolverError(f"{name} lives on another lattice")
    if proc.dim != dim:
        raise SolverError(f"{name} has dimension {proc.dim}, expected {dim}")
    if proc.last < last:
        raise SolverError(f"{name} must cover levels 0..{last}")


def bsee_static_load(ops, u=None, f0=None):
    """D u + G + f0 on the rows of levels 0..N-1 (the part not involving z)."""
    lat = ops.lattice
    rows = lat.prefix(lat.steps - 1)
    F = np.array(ops.coeffs.G.values(lat, rows), dtype=float)
    if u is not None:
        F += ops.apply("D", rows, u.data[rows])
    if f0 is not None:
        F += f0.data[rows]
    return F


def solve_bsee(inp):
    """Backward induction; returns (y on 0..N, z on 0..N-1)."""
    ops = inp.operators
    lat = ops.lattice
    N, dt = lat.steps, lat.grid.dt
    _check_input(ops, inp.u, ops.m, "u", N - 1)
    _check_input(ops, inp.f0, ops.n, "f0", N - 1)
    F = bsee_static_load(ops, inp.u, inp.f0)
    if lat.deterministic:
        return _bsee_chain(ops, F)
    y = np.empty((lat.n_rows(N), ops.n))
    z = np.zeros((lat.n_rows(N - 1), ops.n))
    y[lat.rows(N)] = ops.xi()
    b_zero = ops.b_zero
    for i in range(N - 1, -1, -1):
        rows = lat.rows(i)
        nxt = y[lat.rows(i + 1)]
        rhs = lat.expect_next(nxt) - dt * F[rows]
        if not lat.deterministic:
            zi = lat.martingale(nxt)
            z[rows] = zi
            if not b_zero:
                rhs -= dt * ops.apply_level("B", i, zi)
        y[rows] = ops.solve_step(i, rhs)
    return AdaptedProcess(lat, y), AdaptedProcess(lat, z, N - 1)


def solve_see(inp, y0):
    """Forward stepping of the adjoint-type equation from k_0 = initial_map(y0)."""
    ops = inp.operators
    lat = ops.lattice
    N, dt = lat.steps, lat.grid.dt
    if inp.drift_load is None or inp.diffusion_load is None:
        raise SolverError("drift and diffusion loads are required")
    _check_input(ops, inp.drift_load, ops.n, "drift_load", N - 1)
    _check_input(ops, inp.diffusion_load, ops.n, "diffusion_load", N - 1)
    k = np.empty((lat.n_rows(N), ops.n))
    k0 = np.asarray(inp.initial_map(np.asarray(y0, dtype=float)), dtype=float)
    k[lat.rows(0)] = k0.reshape(1, ops.n)
    drift, diff = inp.drift_load.data, inp.diffusion_load.data
    if lat.deterministic:
        return _see_chain(ops, k, drift)
    b_zero = ops.b_zero
    for i in range(N):
        rows = lat.rows(i)
        kappa = ops.solve_step(i, k[rows] - dt * drift[rows], adjoint=True)
        sig = diff[rows]
        if not b_zero:
            sig = sig + ops.apply_level("Bstar", i, kappa)
        k[lat.rows(i + 1)] = lat.spread(kappa) - lat.spread(sig) * lat.delta_w(i + 1)[:, None]
    return AdaptedProcess(lat, k)


def costate(k):
    """kappa_i = E_i[k_{i+1}] on levels 0..N-1: the adjoint value carried across step i."""
    lat = k.lattice
    return AdaptedProcess(lat, lat.expect_next(k.data[1:]), lat.steps - 1)


def adjoint_martingale(k):
    """(k_{i+1}^+ - k_{i+1}^-) / (2 sqrt(dt)) on levels 0..N-1 (zero on the chain)."""
    lat = k.lattice
    return AdaptedProcess(lat, lat.martingale(k.data[1:]), lat.steps - 1)


def _bsee_chain(ops, F):
    # deterministic chain: row i is level i and z vanishes
    lat = ops.lattice
    N, dt = lat.steps, lat.grid.dt
    R = ops.chain_resolvents()
    y = np.empty((N + 1, ops.n))
    y[N] = ops.xi()[0]
    rhs = -dt * F
    cur = y[N]
    for i in range(N - 1, -1, -1):
        cur = R[i] @ (cur + rhs[i])
        y[i] = cur
    return AdaptedProcess(lat, y), AdaptedProcess(lat, np.zeros((N, ops.n)), N - 1)


def _see_chain(ops, k, drift):
    lat = ops.lattice
    N, dt = lat.steps, lat.grid.dt
    R = ops.chain_resolvents(adjoint=True)
    rhs = -dt * drift
    cur = k[0]
    for i in range(N):
        cur = R[i] @ (cur + rhs[i])
        k[i + 1] = cur
    return AdaptedProcess(lat, k)


def bsee_residual(ops, y, z, u=None, f0=None):
    """Sup-node defect of the discrete state recursion, re-evaluated from scratch."""
    lat = ops.lattice
    dt = lat.grid.dt
    F = bsee_static_load(ops, u, f0)
    worst = float(np.abs(y.level(lat.steps) - ops.xi()).max())
    for i in range(lat.steps):
        nxt = y.level(i + 1)
        zi = z.level(i)
        worst = max(worst, float(np.abs(zi - lat.martingale(nxt)).max()))
        lhs = y.level(i) + dt * ops.apply_level("A", i, y.level(i))
        rhs = lat.expect_next(nxt) - dt * (F[lat.rows(i)] + ops.apply_level("B", i, zi))
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst


def see_residual(ops, k, k0, drift_load, diffusion_load):
    """Sup-node defect of the adjoint recursion for given loads and initial value.

    Checks ``(I + dt A*) E_i[k_{i+1}] = k_i - dt b_i`` and, scaled by sqrt(dt)
    to match units, that the dW-part of k_{i+1} equals ``-(B* kappa_i + g_i)``.
    """
    lat = ops.lattice
    dt = lat.grid.dt
    rows = lat.prefix(lat.steps - 1)
    kap = costate(k).data
    worst = float(np.abs(k.level(0) - np.reshape(k0, (1, -1))).max())
    lhs = kap + dt * ops.apply("Astar", rows, kap)
    worst = max(worst, float(np.abs(lhs - (k.data[rows] - dt * drift_load.data)).max()))
    if not lat.deterministic:
        sig = ops.apply("Bstar", rows, kap) + diffusion_load.data
        mart = adjoint_martingale(k).data
        worst = max(worst, float(np.abs(mart + sig).max()) * np.sqrt(dt))
    return worst


def integrand_loads(problem, y, z, u):
    """(l_y, l_z) along (y, z, u) as processes on levels 0..N-1."""
    lat, integ = problem.lattice, problem.integrand
    N = lat.steps
    rows = lat.prefix(N - 1)
    args = (lat, rows, y.data[rows], z.data[rows], u.data[rows])
    return (AdaptedProcess(lat, integ.grad_y(*args), N - 1),
            AdaptedProcess(lat, integ.grad_z(*args), N - 1))


def initial_adjoint(problem):
    return lambda y0: -problem.integrand.grad_h(y0)


def solve_decoupled(problem, u):
    """State under the given control, then its adjoint: returns (k, y, z)."""
    ops = problem.operators
    y, z = solve_bsee(BseeInput(ops, u=u))
    ly, lz = integrand_loads(problem, y, z, u)
    k = solve_see(SeeInput(ops, initial_adjoint(problem), ly, lz), y.level(0))
    return TripleProcess(k, y, z)


def decoupled_residual(problem, lam, u):
    """Residual of both recursions for a triple produced by ``solve_decoupled``."""
    ops = problem.operators
    r1 = bsee_residual(ops, lam.y, lam.z, u=u)
    ly, lz = integrand_loads(problem, lam.y, lam.z, u)
    k0 = -problem.integrand.grad_h(lam.y.level(0))
    r2 = see_residual(ops, lam.k, k0, ly, lz)
    return max(r1, r2)
