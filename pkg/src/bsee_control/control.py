"""Cost evaluation, the optimal-control pipeline and the optimality checks.

The initial-time cost ``h`` is evaluated at ``y(0)``: the state runs
backward from its terminal datum, so the "free" end of the trajectory is
t = 0.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .continuation import ContinuationConfig, controls_from_triple, solve_hamiltonian_system
from .hamiltonian import rows_hamiltonian_grad_u
from .lattice import AdaptedProcess
from .oracle import brute_force_oracle  # noqa: F401  (re-exported)
from .problem import ControlProblem, SolverError  # noqa: F401
from .solvers import (BseeInput, SeeInput, costate, initial_adjoint, integrand_loads,
                      solve_bsee, solve_decoupled, solve_see)

CONSISTENCY_TOL = 1e-8
GRAD_TOL = 1e-6
VARIATIONAL_TOL = 1e-8
DECREASE_TOL = 1e-9


class InternalInconsistency(RuntimeError):
    """The solver's output failed its own post-verification."""


@dataclass(frozen=True)
class CostValue:
    total: float
    running: float
    terminal: float


def random_control(lattice, m, rng, amplitude=1.0):
    """i.i.d. uniform[-amplitude, amplitude] node values on levels 0..N-1."""
    last = lattice.steps - 1
    return AdaptedProcess(lattice, amplitude * rng.uniform(-1.0, 1.0, (lattice.n_rows(last), m)), last)


def _check_control(problem, u):
    if u.lattice is not problem.lattice:
        raise ValueError("control lives on another lattice")
    if u.dim != problem.control_dim or u.last < problem.lattice.steps - 1:
        raise ValueError(f"control must be {problem.control_dim}-dimensional on levels 0..N-1")
    if not np.all(np.isfinite(u.data)):
        raise ValueError("control has non-finite values")


def cost_of_states(problem, y, z, u):
    lat = problem.lattice
    N, dt = lat.steps, lat.grid.dt
    rows = lat.prefix(N - 1)
    vals = problem.integrand.l(lat, rows, y.data[rows], z.data, u.data[rows])
    running = float(dt * lat.level_means(vals, N - 1).sum())
    terminal = float(problem.integrand.h(y.level(0))[0])
    return CostValue(running + terminal, running, terminal)


def evaluate_cost(problem, u):
    """J(u) = E sum_i dt l(t_i, y_i, z_i, u_i) + h(y_0) along the state driven by u."""
    _check_control(problem, u)
    y, z = solve_bsee(BseeInput(problem.operators, u=u))
    return cost_of_states(problem, y, z, u)


def hamiltonian_gradient(problem, lam, u):
    """Row array of H_u = D* kappa + l_u on levels 0..N-1."""
    lat = problem.lattice
    rows = lat.prefix(lat.steps - 1)
    return rows_hamiltonian_grad_u(problem, rows, lam.y.data[rows], lam.z.data, u.data[rows],
                                   costate(lam.k).data)


def _u_dot(problem, a, b):
    return np.einsum("ri,ij,rj->r", a, problem.coeffs.mass_u, b)


def _row_node(lat, row):
    i = int(lat.level_of_rows(row))
    return dict(level=i, node=int(row - lat.offset(i)), t=float(lat.grid.t(i)))


@dataclass
class NecessaryConditionReport:
    passed: bool
    grad_sup: float
    variational_min: float
    witness: dict = field(default_factory=dict)

    def as_dict(self):
        return dict(passed=self.passed, grad_sup=self.grad_sup,
                    variational_min=self.variational_min, witness=self.witness)


def check_necessary_condition(problem, u, lam, probes=20, seed=0):
    """(H_u, v - u)_U >= 0 for random probe controls v, and H_u = 0 (U is unconstrained)."""
    lat = problem.lattice
    grad = hamiltonian_gradient(problem, lam, u)
    size = np.sqrt(np.maximum(_u_dot(problem, grad, grad), 0.0))
    worst_row = int(np.argmax(size))
    grad_sup = float(size[worst_row])
    rng = np.random.default_rng(seed)
    var_min, var_row = np.inf, 0
    urows = u.data[lat.prefix(lat.steps - 1)]
    for _ in range(probes):
        v = random_control(lat, problem.control_dim, rng).data
        vals = _u_dot(problem, grad, v - urows)
        r = int(np.argmin(vals))
        if vals[r] < var_min:
            var_min, var_row = float(vals[r]), r
    passed = grad_sup < GRAD_TOL and var_min >= -VARIATIONAL_TOL
    witness = {}
    if not passed:
        row = worst_row if grad_sup >= GRAD_TOL else var_row
        witness = _row_node(lat, row)
        witness["grad_u"] = grad[row].tolist()
    return NecessaryConditionReport(bool(passed), grad_sup, float(var_min), witness)


@dataclass
class PerturbationReport:
    passed: bool
    min_increase: float
    max_rel_mismatch: float
    fd_derivatives: list
    predicted_derivatives: list
    decrease_witness: dict = field(default_factory=dict)

    def as_dict(self):
        return dict(passed=self.passed, min_increase=self.min_increase,
                    max_rel_mismatch=self.max_rel_mismatch, fd_derivatives=self.fd_derivatives,
                    predicted_derivatives=self.predicted_derivatives,
                    decrease_witness=self.decrease_witness)


def perturbation_test(problem, u, directions=50, eps=1e-3, seed=0, amplitude=1.0, abs_floor=1e-6):
    """Cost increase along random directions plus a gradient cross-check.

    For each direction v: J(u +- eps v) - J(u) (should be >= -1e-9 at an
    optimum) and the central difference of J against E sum dt (H_u, v)_U,
    where H_u uses the adjoint computed along u.
    """
    _check_control(problem, u)
    lat = problem.lattice
    dt, N = lat.grid.dt, lat.steps
    j0 = evaluate_cost(problem, u).total
    lam = solve_decoupled(problem, u)
    grad = hamiltonian_gradient(problem, lam, u)
    rng = np.random.default_rng(seed)
    min_inc, witness = np.inf, {}
    fds, preds, worst_rel = [], [], 0.0
    for d in range(directions):
        v = random_control(lat, problem.control_dim, rng, amplitude)
        jp = evaluate_cost(problem, u + v * eps).total
        jm = evaluate_cost(problem, u - v * eps).total
        for sign, j in ((1, jp), (-1, jm)):
            if j - j0 < min_inc:
                min_inc = j - j0
                if min_inc < -DECREASE_TOL:
                    witness = dict(direction=d, sign=sign, decrease=float(j0 - j))
        fd = (jp - jm) / (2 * eps)
        pred = float(dt * lat.level_means(_u_dot(problem, grad, v.data[lat.prefix(N - 1)]),
                                          N - 1).sum())
        fds.append(float(fd))
        preds.append(pred)
        worst_rel = max(worst_rel, abs(fd - pred) / max(abs(pred), abs_floor))
    passed = min_inc >= -DECREASE_TOL
    return PerturbationReport(bool(passed), float(min_inc), float(worst_rel), fds, preds, witness)


@dataclass
class OptimalControlReport:
    continuation: object
    cost: CostValue
    state_consistency: float
    adjoint_consistency: float
    necessary: NecessaryConditionReport
    control_sup: float = 0.0

    def as_dict(self):
        return dict(continuation=self.continuation.as_dict(),
                    cost=dict(total=self.cost.total, running=self.cost.running,
                              terminal=self.cost.terminal),
                    state_consistency=self.state_consistency,
                    adjoint_consistency=self.adjoint_consistency,
                    necessary_condition=self.necessary.as_dict())


def solve_optimal_control(problem, config: Optional[ContinuationConfig] = None):
    """Solve the Hamiltonian system, read off u = gamma(D* kappa) and verify it.

    Returns ``(u, lam, report)``. Raises :class:`InternalInconsistency` if the
    state re-solved under u does not reproduce ``lam`` or if H_u does not
    vanish.
    """
    lam, rep = solve_hamiltonian_system(problem, config)
    u = controls_from_triple(problem, lam)
    ops = problem.operators
    y, z = solve_bsee(BseeInput(ops, u=u))
    state_gap = max((y - lam.y).max_abs(), (z - lam.z).max_abs())
    ly, lz = integrand_loads(problem, y, z, u)
    k = solve_see(SeeInput(ops, initial_adjoint(problem), ly, lz), y.level(0))
    adj_gap = (k - lam.k).max_abs()
    necessary = check_necessary_condition(problem, u, lam)
    if state_gap > CONSISTENCY_TOL:
        raise InternalInconsistency(f"state re-solve differs from the fixed point by {state_gap:.3e}")
    if not necessary.passed:
        raise InternalInconsistency(f"H_u does not vanish at the computed control "
                                    f"(sup {necessary.grad_sup:.3e}) {necessary.witness}")
    report = OptimalControlReport(rep, cost_of_states(problem, lam.y, lam.z, u), float(state_gap),
                                  float(adj_gap), necessary, u.max_abs())
    return u, lam, report


def zero_control(problem):
    lat = problem.lattice
    return AdaptedProcess.zeros(lat, problem.control_dim, lat.steps - 1)


__all__ = ["ControlProblem", "CostValue", "InternalInconsistency", "NecessaryConditionReport",
           "OptimalControlReport", "PerturbationReport", "brute_force_oracle",
           "check_necessary_condition", "cost_of_states", "evaluate_cost", "hamiltonian_gradient",
           "perturbation_test", "random_control", "solve_optimal_control", "zero_control"]
