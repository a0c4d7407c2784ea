"""Method of continuation for the coupled forward-backward (Hamiltonian) system.

The auxiliary system at level rho with forcings (b0, g0, f0) is::

    k-drift     : A* k + rho l_y(y, z, u) + (1 - rho) C y + b0
    k-diffusion : B* k + rho l_z(y, z, u) + (1 - rho) C z + g0
    y-drift     : A y + B z + rho D gamma(D* k) + G + f0
    k(0) = -h_y(y(0)),  y(T) = xi,   u = gamma(D* kappa),  kappa_i = E_i[k_{i+1}]

At rho = 0 it decouples (solve y, z first, then k). A solver at level rho0
becomes a solver at level rho by Picard iteration of the map that freezes the
(rho - rho0)-weighted terms at the previous iterate and hands them to the
rho0 solver as extra forcings. Stages are chained recursively: the solver of
stage m calls the solver of stage m - 1.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .hamiltonian import optimal_control
from .lattice import AdaptedProcess, TripleProcess, m2_norm
from .problem import SolverError
from .solvers import (BseeInput, SeeInput, bsee_residual, costate, initial_adjoint,
                      integrand_loads, see_residual, solve_bsee, solve_see)

log = logging.getLogger(__name__)


def _zeros(lat, n):
    return AdaptedProcess.zeros(lat, n, lat.steps - 1)


@dataclass
class AuxiliaryForcing:
    """Extra loads of the auxiliary system, each on levels 0..N-1."""

    b0: AdaptedProcess
    g0: AdaptedProcess
    f0: AdaptedProcess

    @classmethod
    def zero(cls, lattice, n):
        return cls(_zeros(lattice, n), _zeros(lattice, n), _zeros(lattice, n))

    def __add__(self, other):
        return AuxiliaryForcing(self.b0 + other.b0, self.g0 + other.g0, self.f0 + other.f0)

    def check_finite(self):
        for name in ("b0", "g0", "f0"):
            if not np.all(np.isfinite(getattr(self, name).data)):
                raise SolverError(f"forcing {name} is not finite")


@dataclass
class ContinuationConfig:
    monot_c: Optional[float] = None      # None: the integrand's monotonicity constant
    step_delta: Optional[float] = None   # None: measured, min(1/(2K), 1) clamped below
    picard_tol: float = 1e-9
    max_picard: int = 200
    measure_k: bool = True
    min_step: float = 0.05
    k_probes: int = 6
    contraction_probes: int = 3
    probe_all_stages: bool = False       # probing deep stages runs the nested solvers
    inner_tol_factor: float = 0.1
    monot_fractions: tuple = (1.0, 0.5, 0.25)  # candidates for C when monot_c is None
    flat: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.step_delta is not None and not 0 < self.step_delta <= 1:
            raise ValueError("step_delta must lie in (0, 1]")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")


@dataclass
class ContinuationReport:
    rho_schedule: list = field(default_factory=list)
    picard_iterations: list = field(default_factory=list)
    picard_increments: list = field(default_factory=list)
    contraction_ratios: list = field(default_factory=list)
    final_residual: float = float("nan")
    fixed_point_distance: float = float("nan")
    duality_residual: float = float("nan")
    measured_k: Optional[float] = None
    step_delta: float = float("nan")
    decoupled_solves: int = 0
    retried: bool = False
    monot_c: float = float("nan")
    stage0: Optional[TripleProcess] = field(default=None, repr=False)

    def as_dict(self):
        return dict(rho_schedule=self.rho_schedule, picard_iterations=self.picard_iterations,
                    picard_increments=self.picard_increments,
                    contraction_ratios=self.contraction_ratios,
                    final_residual=self.final_residual,
                    fixed_point_distance=self.fixed_point_distance,
                    duality_residual=self.duality_residual, measured_k=self.measured_k,
                    step_delta=self.step_delta, decoupled_solves=self.decoupled_solves,
                    retried=self.retried, monot_c=self.monot_c)


# Building blocks -------------------------------------------------------------

def controls_from_triple(problem, lam):
    """u_i = gamma(D* kappa_i) on levels 0..N-1, kappa_i = E_i[k_{i+1}]."""
    lat = problem.lattice
    kap = costate(lam.k).data
    return AdaptedProcess(lat, optimal_control(problem, lat.prefix(lat.steps - 1), kap),
                          lat.steps - 1)


class DecoupledStage:
    """Exact solver of the rho = 0 auxiliary system for arbitrary forcings."""

    rho = 0.0

    def __init__(self, problem, monot_c):
        self.problem = problem
        self.C = float(monot_c)
        self.calls = 0
        self.last = None

    def __call__(self, forcing, warm=None, tol=None):
        p = self.problem
        ops, lat = p.operators, p.lattice
        self.calls += 1
        y, z = solve_bsee(BseeInput(ops, f0=forcing.f0))
        N = lat.steps
        rows = lat.prefix(N - 1)
        drift = AdaptedProcess(lat, self.C * y.data[rows] + forcing.b0.data, N - 1)
        diff = AdaptedProcess(lat, self.C * z.data + forcing.g0.data, N - 1)
        k = solve_see(SeeInput(ops, initial_adjoint(p), drift, diff), y.level(0))
        self.last = TripleProcess(k, y, z)
        return self.last

    def total_calls(self):
        return self.calls


def frozen_forcing(problem, lam_prime, rho, rho0, forcing, monot_c):
    """Fold the (rho - rho0)-weighted terms evaluated at ``lam_prime`` into the forcings."""
    lat, integ = problem.lattice, problem.integrand
    d = rho - rho0
    N = lat.steps
    rows = lat.prefix(N - 1)
    y, z = lam_prime.y.data[rows], lam_prime.z.data
    u = optimal_control(problem, rows, costate(lam_prime.k).data)
    ly = integ.grad_y(lat, rows, y, z, u)
    lz = integ.grad_z(lat, rows, y, z, u)
    out = AuxiliaryForcing(
        AdaptedProcess(lat, forcing.b0.data + d * (ly - monot_c * y), N - 1),
        AdaptedProcess(lat, forcing.g0.data + d * (lz - monot_c * z), N - 1),
        AdaptedProcess(lat, forcing.f0.data + d * problem.operators.apply("D", rows, u), N - 1))
    out.check_finite()
    return out


def apply_map_I(lam_prime, rho, rho0, forcing, problem, solver_at_rho0, monot_c=None, warm=None,
                tol=None):
    """One application of the frozen-coefficient map at level rho on top of the rho0 solver.

    ``tol`` loosens an iterative rho0 solver (never below its own floor).
    """
    monot_c = problem.integrand.monotonicity_c if monot_c is None else monot_c
    if rho != rho0:
        forcing = frozen_forcing(problem, lam_prime, rho, rho0, forcing, monot_c)
    if tol is None:
        return solver_at_rho0(forcing, warm)
    return solver_at_rho0(forcing, warm, tol=tol)


def _sup_diff(a, b):
    return (a - b).max_abs()


@dataclass
class StageResult:
    solution: TripleProcess
    iterations: int
    increments: list


def solve_stage(rho, rho0, forcing, problem, config, solver_at_rho0, warm_start=None,
                tol=None, monot_c=None):
    """Picard iteration of the frozen-coefficient map to its fixed point.

    Stops once both the M^2 increment and the sup-node increment drop below
    ``tol``. Raises SolverError (with the last increment and ratio) after
    ``config.max_picard`` iterations.
    """
    if abs(rho - rho0) > (config.step_delta or 1.0) + 1e-12 and not config.flat:
        raise ValueError(f"continuation step {rho - rho0} exceeds step_delta")
    tol = config.picard_tol if tol is None else tol
    tri = problem.triple
    lam = warm_start if warm_start is not None else TripleProcess.zeros(problem.lattice, problem.dim)
    incs = []
    eta = config.inner_tol_factor
    for it in range(1, config.max_picard + 1):
        # inexact Picard: the inner error must stay below the predicted next
        # increment, i.e. eta * (observed ratio) * current increment
        if not incs:
            inner = eta * max(m2_norm(lam, tri), 1.0)
        else:
            q = min(1.0, max(incs[-1] / incs[-2], 0.01)) if len(incs) > 1 and incs[-2] > 0 else 1.0
            inner = eta * q * incs[-1]
        new = apply_map_I(lam, rho, rho0, forcing, problem, solver_at_rho0, monot_c, tol=inner)
        inc = m2_norm(new - lam, tri)
        sup = _sup_diff(new, lam)
        incs.append(inc)
        lam = new
        if (inc < tol and sup < tol) or rho == rho0:
            return StageResult(lam, it, incs)
        if not math.isfinite(inc):
            break
    ratio = incs[-1] / incs[-2] if len(incs) > 1 and incs[-2] > 0 else float("nan")
    raise SolverError(f"Picard iteration at rho={rho:.4g} did not converge "
                      f"(last increment {incs[-1]:.3e}, ratio {ratio:.3f}); try a smaller step_delta",
                      last_increment=incs[-1], ratio=ratio, rho=rho)


class ContinuationStage:
    """Solver of the auxiliary system at level ``rho`` built on ``parent``."""

    def __init__(self, problem, rho, parent, config, tol, monot_c):
        self.problem = problem
        self.rho = rho
        self.parent = parent
        self.config = config
        self.tol = tol
        self.monot_c = monot_c
        self.last = None
        self.history = []

    def __call__(self, forcing, warm=None, tol=None):
        start = warm if warm is not None else self.last
        tol = self.tol if tol is None else max(self.tol, tol)
        res = solve_stage(self.rho, self.parent.rho, forcing, self.problem, self.config,
                          self.parent, start, tol, self.monot_c)
        self.last = res.solution
        self.history.append(res)
        return res.solution

    def total_calls(self):
        return self.parent.total_calls()


def random_triple(lattice, n, rng, scale=1.0):
    def proc(last):
        return AdaptedProcess(lattice, scale * rng.standard_normal((lattice.n_rows(last), n)), last)
    return TripleProcess(proc(lattice.steps), proc(lattice.steps), proc(lattice.steps - 1))


def contraction_ratios(problem, rho, rho0, forcing, solver_at_rho0, base, probes, seed, monot_c=None,
                       rel_tol=1e-6):
    """Measured |I L1 - I L2| / |L1 - L2| over probe pairs around ``base``.

    An iterative rho0 solver is run to ``rel_tol`` times the probe distance.
    """
    rng = np.random.default_rng(seed)
    tri = problem.triple
    scales = (1e-2, 1e-1, 1.0)
    out = []
    for p in range(probes):
        s = scales[p % len(scales)]
        l1 = base + random_triple(problem.lattice, problem.dim, rng, s)
        l2 = base + random_triple(problem.lattice, problem.dim, rng, s)
        den = m2_norm(l1 - l2, tri)
        if den == 0:
            continue
        tol = None if isinstance(solver_at_rho0, DecoupledStage) else rel_tol * den
        i1 = apply_map_I(l1, rho, rho0, forcing, problem, solver_at_rho0, monot_c, tol=tol)
        i2 = apply_map_I(l2, rho, rho0, forcing, problem, solver_at_rho0, monot_c, tol=tol)
        out.append(m2_norm(i1 - i2, tri) / den)
    return out


def power_ratios(problem, rho, rho0, forcing, solver_at_rho0, base, iterations, seed, monot_c=None):
    """Ratios along power iteration of L -> I(base + L) - I(base).

    Random probes are rough in time and the solver smooths them out, so they
    tend to miss the slowest-contracting direction; the power iterates line
    up with it.
    """
    rng = np.random.default_rng(seed)
    tri = problem.triple
    ib = apply_map_I(base, rho, rho0, forcing, problem, solver_at_rho0, monot_c)
    scale = max(m2_norm(base, tri), 1.0) * 1e-1
    d = random_triple(problem.lattice, problem.dim, rng)
    out = []
    for _ in range(iterations):
        nd = m2_norm(d, tri)
        if nd == 0:
            break
        d = d * (scale / nd)
        img = apply_map_I(base + d, rho, rho0, forcing, problem, solver_at_rho0, monot_c) - ib
        out.append(m2_norm(img, tri) / scale)
        d = img
    return out


def measure_contraction_K(problem, rho0, forcing, probes, seed, solver_at_rho0=None, base=None,
                          delta=None, monot_c=None, power_iterations=8):
    """Empirical K in |I L1 - I L2|^2 <= K |rho - rho0| |L1 - L2|^2.

    Measured at rho = rho0 + delta (default: the largest admissible step,
    1 - rho0) from random probe pairs plus a short power iteration. Returns
    K; the suggested step is min(1 / (2K), 1).
    """
    if solver_at_rho0 is None:
        if rho0 != 0:
            raise ValueError("a stage solver is required for rho0 > 0")
        c = problem.integrand.monotonicity_c if monot_c is None else monot_c
        solver_at_rho0 = DecoupledStage(problem, c)
    delta = (1.0 - rho0) if delta is None else delta
    if delta <= 0:
        raise ValueError("no room to continue above rho0")
    if base is None:
        base = solver_at_rho0(forcing)
    ratios = contraction_ratios(problem, rho0 + delta, rho0, forcing, solver_at_rho0, base,
                                probes, seed, monot_c)
    ratios += power_ratios(problem, rho0 + delta, rho0, forcing, solver_at_rho0, base,
                           power_iterations, seed + 7919, monot_c)
    if not ratios:
        raise SolverError("all contraction probes were degenerate")
    return max(r * r / delta for r in ratios)


def suggested_step(K, min_step=0.0):
    step = 1.0 if K <= 0 else min(1.0 / (2.0 * K), 1.0)
    return max(step, min_step)


def choose_step(problem, config, stage0, lam0, forcing, monot_c, rounds=6):
    """Largest step delta with 2 K(delta) delta <= 1, K measured at delta itself.

    K is first measured at delta = 1. The frozen map's Lipschitz ratio grows
    roughly linearly in delta, so K(delta) ~ delta K(1) and the fixed point of
    delta = 1 / (2 K(delta)) is near 1 / sqrt(2 K(1)); that guess is then
    re-measured and shrunk until the inequality holds. Returns (delta, K).
    """
    def K_at(d):
        return measure_contraction_K(problem, 0.0, forcing, config.k_probes, config.seed, stage0,
                                     base=lam0, delta=d, monot_c=monot_c)

    K = K_at(1.0)
    if 2.0 * K <= 1.0:
        return 1.0, float(K)
    delta = min(1.0, 1.0 / np.sqrt(2.0 * K))
    for _ in range(rounds):
        if delta <= config.min_step:
            break
        K = K_at(delta)
        if 2.0 * K * delta <= 1.0:
            return float(delta), float(K)
        delta = max(0.95 * delta / np.sqrt(2.0 * K * delta), config.min_step)
    return float(max(delta, config.min_step)), float(K)


# Residuals and duality --------------------------------------------------------

def hamiltonian_residual(problem, lam):
    """Sup-node defect of both discrete recursions of the Hamiltonian system at ``lam``."""
    ops, lat, integ = problem.operators, problem.lattice, problem.integrand
    u = controls_from_triple(problem, lam)
    r_state = bsee_residual(ops, lam.y, lam.z, u=u)
    ly, lz = integrand_loads(problem, lam.y, lam.z, u)
    k0 = -integ.grad_h(lam.y.level(0))
    r_adj = see_residual(ops, lam.k, k0, ly, lz)
    return max(r_state, r_adj)


def _recursion_inputs(problem, lam, u=None):
    """Row arrays on levels 0..N-1: kappa, state load F, adjoint drift b, adjoint dW-coefficient s."""
    lat, ops, integ = problem.lattice, problem.operators, problem.integrand
    rows = lat.prefix(lat.steps - 1)
    kap = costate(lam.k).data
    y, z = lam.y.data[rows], lam.z.data
    ui = optimal_control(problem, rows, kap) if u is None else u.data[rows]
    F = ops.apply("B", rows, z) + ops.apply("D", rows, ui) + ops.coeffs.G.values(lat, rows)
    b = integ.grad_y(lat, rows, y, z, ui)
    s = ops.apply("Bstar", rows, kap) + integ.grad_z(lat, rows, y, z, ui)
    return kap, F, b, s


def duality_residual(lam1, lam2, problem, u1=None, u2=None):
    """|discrete Ito identity for (k1 - k2, y1 - y2)_H|.

    Each triple is taken to satisfy the Hamiltonian-system recursions (u =
    gamma(D* kappa)) unless its control is given, in which case it is taken
    to be a decoupled state/adjoint solve under that control. The per-step
    identity, exact for the scheme, is::

        E_i(dk_{i+1}, dy_{i+1}) - (dk_i, dy_i)
          = dt (dkappa_i, dF_i) - dt (db_i, dy_i) - dt (ds_i, dz_i)

    where F is the full state load and s = B* kappa + l_z the dW-coefficient
    of the adjoint.
    """
    if lam1.lattice is not lam2.lattice or lam1.lattice is not problem.lattice:
        raise ValueError("triples must live on the problem's lattice")
    lat, tri = problem.lattice, problem.triple
    dt, N = lat.grid.dt, lat.steps
    k1, F1, b1, s1 = _recursion_inputs(problem, lam1, u1)
    k2, F2, b2, s2 = _recursion_inputs(problem, lam2, u2)
    dy = (lam1.y - lam2.y).data
    dk = (lam1.k - lam2.k).data
    dz = (lam1.z - lam2.z).data
    rows = lat.prefix(N - 1)
    lhs = lat.mean_level(tri.h_dot(dk[lat.rows(N)], dy[lat.rows(N)])) \
        - lat.mean_level(tri.h_dot(dk[lat.rows(0)], dy[lat.rows(0)]))
    dens = dt * (tri.h_dot(k1 - k2, F1 - F2) - tri.h_dot(b1 - b2, dy[rows])
                 - tri.h_dot(s1 - s2, dz))
    rhs = lat.level_means(dens, N - 1).sum()
    return float(abs(lhs - rhs))


# Driver ----------------------------------------------------------------------

def _n_stages(delta):
    return int(math.ceil(1.0 / delta - 1e-12))


def _build_chain(problem, config, delta, monot_c, stage0):
    # equal stages no longer than delta
    M = _n_stages(delta)
    rhos = [(m + 1) / M for m in range(M)]
    stages = []
    parent = stage0
    for m, rho in enumerate(rhos):
        depth_from_top = M - 1 - m
        tol = max(config.picard_tol * config.inner_tol_factor ** depth_from_top, 1e-14)
        st = ContinuationStage(problem, rho, parent, config, tol, monot_c)
        stages.append(st)
        parent = st
    return rhos, stages


def _run_schedule(problem, config, delta, monot_c, stage0, lam0, zero, report):
    rhos, stages = _build_chain(problem, config, delta, monot_c, stage0)
    report.rho_schedule = [0.0] + rhos
    report.picard_iterations = [1]
    report.picard_increments = [[]]
    report.contraction_ratios = [[]]
    lam = lam0
    prev = stage0
    for m, st in enumerate(stages):
        if config.measure_k and config.contraction_probes > 0 and (m == 0 or config.probe_all_stages):
            keep = prev.last
            ratios = contraction_ratios(problem, st.rho, prev.rho, zero, prev, lam,
                                        config.contraction_probes, config.seed + m, monot_c)
            prev.last = keep
        else:
            ratios = []
        lam = st(zero, warm=lam)
        res = st.history[-1]
        report.picard_iterations.append(res.iterations)
        report.picard_increments.append(res.increments)
        report.contraction_ratios.append(ratios)
        log.info("stage rho=%.4f: %d Picard iterations", st.rho, res.iterations)
        prev = st
    return lam, stages


def solve_hamiltonian_system(problem, config=None, warm_start=None):
    """Solve the coupled system by continuation from rho = 0 to rho = 1.

    Returns ``(lam, report)``; ``report.final_residual`` is the sup-node
    defect of both discrete recursions at the returned triple. ``warm_start``
    replaces the rho = 0 solution as the first Picard iterate.
    """
    config = ContinuationConfig() if config is None else config
    monot_c = problem.integrand.monotonicity_c if config.monot_c is None else config.monot_c
    if not monot_c > 0:
        raise SolverError(f"monotonicity constant must be positive, got {monot_c}")
    report = ContinuationReport()
    zero = AuxiliaryForcing.zero(problem.lattice, problem.dim)
    stage0 = DecoupledStage(problem, monot_c)
    lam0 = stage0(zero)

    if config.flat:
        delta = 1.0
    elif config.step_delta is not None:
        delta = config.step_delta
    else:
        delta, K = choose_step(problem, config, stage0, lam0, zero, monot_c)
        if config.monot_c is None and _n_stages(delta) > 2:
            # any smaller positive C still satisfies the monotonicity bound;
            # nested cost grows geometrically with the stage count
            for frac in config.monot_fractions[1:]:
                c = frac * problem.integrand.monotonicity_c
                st = DecoupledStage(problem, c)
                base = st(zero)
                d, k = choose_step(problem, config, st, base, zero, c)
                if _n_stages(d) < _n_stages(delta):
                    delta, K, monot_c, stage0, lam0 = d, k, c, st, base
        report.measured_k = K
    report.monot_c = float(monot_c)

    first = lam0 if warm_start is None else warm_start
    try:
        lam, stages = _run_schedule(problem, config, delta, monot_c, stage0, first, zero, report)
    except SolverError:
        if config.flat:
            raise
        delta = delta / 2.0
        report.retried = True
        log.warning("continuation failed; retrying with step %.4g", delta)
        lam, stages = _run_schedule(problem, config, delta, monot_c, stage0, first, zero, report)
    report.step_delta = delta
    report.decoupled_solves = stage0.calls
    top = stages[-1]
    again = apply_map_I(lam, top.rho, top.parent.rho, zero, problem, top.parent, monot_c)
    report.fixed_point_distance = m2_norm(again - lam, problem.triple)
    report.final_residual = hamiltonian_residual(problem, lam)
    report.stage0 = lam0
    return lam, report
