"""Configuration-driven pipeline: build, validate, solve, check, export.

Everything written to ``report.json`` is a deterministic function of the
config and seed; wall-clock timings go to a separate ``timings.json``.
"""

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .config import SUITES, ConfigError, build_problem
from .continuation import (AuxiliaryForcing, DecoupledStage, contraction_ratios, duality_residual,
                           hamiltonian_residual)
from .control import (InternalInconsistency, check_necessary_condition, cost_of_states, perturbation_test,
                      random_control, solve_optimal_control, zero_control)
from .gelfand import CoercivityError, MalformedInput
from .hamiltonian import CheckRecord
from .lattice import AdaptedProcess, LatticeError, TripleProcess, m2_distance
from .oracle import MAX_DIM, MAX_NODES, OracleError, brute_force_oracle, oracle_residual
from .parabolic import heat_decay_reference, relative_l2_error, weak_solution_residual
from .problem import SolverError
from .solvers import (SeeInput, BseeInput, decoupled_residual, initial_adjoint, solve_bsee,
                      solve_decoupled, solve_see)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4

RESIDUAL_TOL = 1e-8
DECOUPLING_TOL = 1e-12
DUALITY_TOL = 1e-8
ORACLE_TOL = 1e-6
FD_REL_TOL = 1e-5
CONFIG_ERRORS = (ConfigError, MalformedInput, LatticeError, CoercivityError, ValueError)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _record(name, value, tol, witness=None, detail=""):
    """Pass iff value < tol; margin = tol - value."""
    ok = bool(np.isfinite(value) and value < tol)
    return CheckRecord(name, ok, float(tol - value), {} if ok else dict(witness or {}, value=value),
                       detail or f"value={value:.3e} tol={tol:.1e}", value=float(value))


def _skipped(name, why):
    return CheckRecord(name, True, 0.0, {}, f"skipped: {why}")


@dataclass
class Outcome:
    exit_code: int
    report: dict
    timings: dict = field(default_factory=dict)
    solution: object = None
    problem: object = None


class Experiment:
    def __init__(self, cfg, mode=None, seed=None):
        self.cfg = cfg.with_overrides(mode=mode, seed=seed)
        self.timings = {}
        self.problem = None
        self.u = self.lam = self.rep = None

    def _tick(self, key, t0):
        self.timings[key] = time.perf_counter() - t0

    # stages -----------------------------------------------------------------

    def build(self):
        t0 = time.perf_counter()
        self.problem = build_problem(self.cfg)
        self._tick("build", t0)
        return self.problem

    def solve(self):
        t0 = time.perf_counter()
        p = self.problem
        if self.cfg.control == "optimal":
            self.u, self.lam, self.rep = solve_optimal_control(p, self.cfg.continuation_config())
        else:
            self.u = zero_control(p)
            self.lam = solve_decoupled(p, self.u)
        self._tick("solve", t0)

    def run_suite(self, suite):
        t0 = time.perf_counter()
        out = getattr(self, f"_suite_{suite}")()
        self._tick(f"check_{suite}", t0)
        return out

    # suites -------------------------------------------------------------------

    def _suite_assumptions(self):
        return list(self.problem.validate(seed=self.cfg.seed).records)

    def _optimal(self):
        return self.cfg.control == "optimal"

    def _suite_convergence(self):
        p, lam, u = self.problem, self.lam, self.u
        recs = []
        if self._optimal():
            recs.append(_record("fixed_point_residual", hamiltonian_residual(p, lam), RESIDUAL_TOL))
            recs.append(_record("node_equation_residual", oracle_residual(p, lam), RESIDUAL_TOL))
            # stage 0 against a sequential state-then-adjoint solve
            mono = self.rep.continuation.monot_c
            ops, lat = p.operators, p.lattice
            y, z = solve_bsee(BseeInput(ops))
            rows = lat.prefix(lat.steps - 1)
            drift = AdaptedProcess(lat, mono * y.data[rows], lat.steps - 1)
            diff = AdaptedProcess(lat, mono * z.data, lat.steps - 1)
            k = solve_see(SeeInput(ops, initial_adjoint(p), drift, diff), y.level(0))
            seq = TripleProcess(k, y, z)
            recs.append(_record("decoupling_rho0", m2_distance(self.rep.continuation.stage0, seq, p.triple),
                                DECOUPLING_TOL))
            inc = self.rep.continuation.picard_increments[-1]
            recs.append(_record("picard_converged", inc[-1] if inc else 0.0,
                                max(self.cfg.continuation_config().picard_tol, 1e-14) * 10))
        else:
            recs.append(_record("decoupled_residual", decoupled_residual(p, lam, u), RESIDUAL_TOL))
        if hasattr(p, "parabolic"):
            recs.append(_record("weak_solution_residual", weak_solution_residual(p, lam.y, lam.z, u,
                                                                                 seed=self.cfg.seed),
                                RESIDUAL_TOL))
        return recs

    def _suite_duality(self):
        p = self.problem
        rng = np.random.default_rng(self.cfg.seed)
        recs = []
        if self._optimal():
            u0 = zero_control(p)
            recs.append(_record("duality_converged",
                                duality_residual(self.lam, solve_decoupled(p, u0), p, u2=u0),
                                DUALITY_TOL))
        worst = 0.0
        for _ in range(3):
            u1 = random_control(p.lattice, p.control_dim, rng)
            u2 = random_control(p.lattice, p.control_dim, rng)
            worst = max(worst, duality_residual(solve_decoupled(p, u1), solve_decoupled(p, u2), p,
                                                u1=u1, u2=u2))
        recs.append(_record("duality_decoupled_pairs", worst, DUALITY_TOL))
        return recs

    def _suite_contraction(self):
        if not self._optimal():
            return [_skipped("contraction", "no coupled system for control: zero")]
        p = self.problem
        crep = self.rep.continuation
        cc = self.cfg.continuation_config()
        mono = self.rep.continuation.monot_c
        stage0 = DecoupledStage(p, mono)
        zero = AuxiliaryForcing.zero(p.lattice, p.dim)
        base = stage0(zero)
        ratios = contraction_ratios(p, crep.step_delta, 0.0, zero, stage0, base, 20, cc.seed, mono)
        worst = max(ratios) if ratios else float("nan")
        recs = [CheckRecord("contraction_ratio", bool(worst < 1), float(1 - worst),
                            {} if worst < 1 else dict(ratio=worst),
                            f"{len(ratios)} probe pairs at delta={crep.step_delta:.4g}, max ratio {worst:.4g}",
                            value=worst)]
        bad = None
        for s, inc in enumerate(crep.picard_increments):
            for it in range(2, len(inc)):
                if inc[it] > inc[it - 1] and inc[it - 1] > 1e-13:
                    bad = dict(stage=s, iteration=it, previous=inc[it - 1], current=inc[it])
                    break
            if bad:
                break
        recs.append(CheckRecord("picard_monotone_decay", bad is None, 0.0 if bad is None else -1.0,
                                bad or {}))
        return recs

    def _suite_optimality(self):
        if not self._optimal():
            return [_skipped("optimality", "control: zero is not optimised")]
        p, u, lam = self.problem, self.u, self.lam
        opt = self.cfg.optimality
        seed = self.cfg.seed
        nec = check_necessary_condition(p, u, lam, seed=seed)
        recs = [CheckRecord("hamiltonian_gradient", nec.passed, float(1e-6 - nec.grad_sup), nec.witness,
                            f"sup |H_u| = {nec.grad_sup:.3e}", value=nec.grad_sup)]
        pert = perturbation_test(p, u, directions=int(opt.get("directions", 50)),
                                 eps=float(opt.get("eps", 1e-3)), seed=seed)
        recs.append(CheckRecord("perturbation_no_decrease", pert.passed, pert.min_increase + 1e-9,
                                pert.decrease_witness, f"min increase {pert.min_increase:.3e}",
                                value=pert.min_increase))
        rng = np.random.default_rng(seed + 1)
        worst = 0.0
        for s in range(int(opt.get("suboptimal", 5))):
            v = random_control(p.lattice, p.control_dim, rng)
            rep = perturbation_test(p, u + v, directions=2, eps=float(opt.get("eps", 1e-3)),
                                    seed=seed + 10 + s)
            worst = max(worst, rep.max_rel_mismatch)
        recs.append(_record("gradient_fd_match", worst, FD_REL_TOL))
        return recs

    def _suite_oracle(self):
        p = self.problem
        lat = p.lattice
        if lat.n_rows(lat.steps) > MAX_NODES or p.dim > MAX_DIM:
            return [_skipped("oracle", f"instance exceeds the oracle caps ({MAX_NODES} nodes, dim {MAX_DIM})")]
        if not self._optimal():
            return [_skipped("oracle", "control: zero is not optimised")]
        try:
            ref = brute_force_oracle(p)
        except OracleError as exc:
            return [CheckRecord("oracle_distance", False, -1.0, dict(error=str(exc)))]
        return [_record("oracle_distance", m2_distance(self.lam, ref, p.triple), ORACLE_TOL)]

    def _reference(self):
        ref = self.cfg.reference
        if not ref:
            return []
        p, lam = self.problem, self.lam
        lat = p.lattice
        if ref["kind"] == "closed_form":
            c, T = float(ref.get("c", 1.0)), self.cfg.horizon
            y0 = float(lam.y.level(0)[0, 0])
            recs = [_record("reference_y0", abs(y0 - c * math.exp(-T)) / abs(c * math.exp(-T)),
                            float(ref.get("tol_y0", 0.01)), dict(y0=y0))]
            if self._optimal():
                cost = self.rep.cost.total
                recs.append(_record("reference_cost", abs(cost - c * c), float(ref.get("tol_cost", 0.02)),
                                    dict(cost=cost)))
                ys = lam.y.data[lat.prefix(lat.steps - 1), 0]
                gap = float(np.abs(self.u.data[:, 0] - ys).max() / np.abs(ys).max())
                recs.append(_record("reference_u_equals_y", gap, float(ref.get("tol_u", 0.01))))
            return recs
        pb = p.parabolic
        err = relative_l2_error(lam.y.level(0)[0], heat_decay_reference(pb.mesh_n, self.cfg.horizon,
                                                                        space_dim=pb.space_dim))
        return [_record("reference_l2_error", err, float(ref.get("max_l2_error", 0.01)))]

    # summary --------------------------------------------------------------------

    def summary(self):
        p, lam = self.problem, self.lam
        out = dict(name=self.cfg.name, problem=self.cfg.problem,
                   mode="deterministic" if p.lattice.deterministic else "tree",
                   steps=p.lattice.steps, horizon=self.cfg.horizon, dim=p.dim,
                   control=self.cfg.control, seed=self.cfg.seed)
        if lam is None:
            return out
        out["y0"] = lam.y.level(0)[0]
        out["k0"] = lam.k.level(0)[0]
        out["u0"] = self.u.level(0)[0]
        if self.rep is not None:
            out["cost"] = dict(total=self.rep.cost.total, running=self.rep.cost.running,
                               terminal=self.rep.cost.terminal)
            out["continuation"] = self.rep.continuation.as_dict()
            out["state_consistency"] = self.rep.state_consistency
            out["adjoint_consistency"] = self.rep.adjoint_consistency
        else:
            c = cost_of_states(p, lam.y, lam.z, self.u)
            out["cost"] = dict(total=c.total, running=c.running, terminal=c.terminal)
        return out


def run(cfg, suites=None, mode=None, seed=None, reference=None):
    """Run the pipeline; returns an :class:`Outcome` (never raises for expected failures).

    ``suites=None`` runs the config's enabled checks plus its reference
    comparison; an explicit list runs exactly those suites, plus the
    reference comparison only if ``reference`` is true.
    """
    with_reference = suites is None if reference is None else bool(reference)
    suites = list(cfg.checks if suites is None else suites)
    exp = Experiment(cfg, mode, seed)
    report = dict(config=exp.cfg.as_dict(), suites=suites)

    def finish(code, status, checks, **extra):
        report.update(status=status, checks=[r.as_dict() for r in checks],
                      failed=[r.name for r in checks if not r.passed], **extra)
        if exp.problem is not None:
            report["summary"] = exp.summary()
        sol = (exp.u, exp.lam) if exp.lam is not None else None
        return Outcome(code, _clean(report), exp.timings, solution=sol, problem=exp.problem)

    try:
        exp.build()
    except CONFIG_ERRORS as exc:
        return finish(EXIT_CONFIG, "config_error", [], error=str(exc))
    checks = []
    if "assumptions" in suites:
        checks += exp.run_suite("assumptions")
        if not all(r.passed for r in checks):
            return finish(EXIT_CHECK, "check_failed", checks)
    if with_reference or any(s != "assumptions" for s in suites):
        try:
            exp.solve()
        except (SolverError, InternalInconsistency) as exc:
            return finish(EXIT_SOLVER, "solver_error", checks, error=str(exc),
                          diagnostics=getattr(exc, "diagnostics", {}))
        except CONFIG_ERRORS as exc:
            return finish(EXIT_CONFIG, "config_error", checks, error=str(exc))
        for s in SUITES:
            if s in suites and s != "assumptions":
                checks += exp.run_suite(s)
        if with_reference:
            checks += exp._reference()
    failed = any(not r.passed for r in checks)
    return finish(EXIT_CHECK if failed else EXIT_OK, "check_failed" if failed else "pass", checks)


# files -----------------------------------------------------------------------------

def dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _fmt(v):
    return "nan" if not np.isfinite(v) else repr(float(v))


def write_trajectories(problem, u, lam, path):
    """CSV with one row per (node, mesh point / component): t,x,node,y,z,k,u.

    x is the mesh coordinate in 1-D, the flat mesh index in 2-D and the
    component index for abstract problems; z and u are nan on the last level.
    """
    lat = problem.lattice
    n = problem.dim
    pb = getattr(problem, "parabolic", None)
    if pb is not None and pb.space_dim == 1:
        xs = [_fmt(v) for v in pb.points()[:, 0]]
    else:
        xs = [str(j) for j in range(n)]
    N = lat.steps
    total = lat.n_rows(N)
    ts = lat.t_rows(slice(0, total))
    z = np.full((total, n), np.nan)
    z[: lat.n_rows(N - 1)] = lam.z.data
    uu = np.full((total, n), np.nan)
    if u is not None and u.dim == n:
        uu[: lat.n_rows(N - 1)] = u.data[: lat.n_rows(N - 1)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "node", "y", "z", "k", "u"])
        for r in range(total):
            t = _fmt(ts[r])
            for j in range(n):
                w.writerow([t, xs[j], r, _fmt(lam.y.data[r, j]), _fmt(z[r, j]), _fmt(lam.k.data[r, j]),
                            _fmt(uu[r, j])])


def write_outputs(outcome, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    dump_json(outcome.report, os.path.join(out_dir, "report.json"))
    dump_json(_clean({k: round(v, 6) for k, v in outcome.timings.items()}),
              os.path.join(out_dir, "timings.json"))
    if outcome.solution is not None and outcome.solution[1] is not None:
        u, lam = outcome.solution
        write_trajectories(outcome.problem, u, lam, os.path.join(out_dir, "trajectories.csv"))


# convergence sweeps ------------------------------------------------------------------

@dataclass
class SweepRow:
    level: int
    error: float
    order: float = float("nan")


def _sweep_value(cfg, parameter, level):
    kw = dict(steps=level) if parameter == "steps" else dict(mesh_n=level)
    p = build_problem(cfg, **kw)
    if cfg.control == "optimal":
        u, lam, _ = solve_optimal_control(p, cfg.continuation_config())
    else:
        u = zero_control(p)
        y, _ = solve_bsee(BseeInput(p.operators, u=u))
        return p, y.level(0)[0]
    return p, lam.y.level(0)[0]


def _spacing(cfg, parameter, level):
    return cfg.horizon / level if parameter == "steps" else 1.0 / (level + 1)


def convergence_sweep(cfg, levels=None, parameter=None):
    """Errors of y(0) across refinement levels; returns (rows, error message or None).

    The reference is analytic when the config names one (for a mesh sweep of
    the heat-decay problem the reference carries the time discretisation so
    that only the spatial error is measured), else the finest level. The
    order uses the actual spacing ratio, log(e_l / e_{l+1}) / log(h_l / h_{l+1}),
    which is log2 of the error ratio for halving refinements.
    """
    parameter = parameter or cfg.sweep.get("parameter") or \
        ("steps" if cfg.problem == "lq-abstract" else "mesh")
    if parameter not in ("steps", "mesh"):
        raise ConfigError("sweep parameter must be 'steps' or 'mesh'")
    if parameter == "mesh" and cfg.problem == "lq-abstract":
        raise ConfigError("mesh sweeps need a parabolic problem")
    levels = [int(v) for v in (levels or cfg.sweep.get("levels") or [])]
    if len(levels) < 2:
        raise ConfigError("a sweep needs at least two levels")
    ref = cfg.reference or {}
    values, rows = [], []
    for lev in levels:
        try:
            p, val = _sweep_value(cfg, parameter, lev)
        except (SolverError, InternalInconsistency, *CONFIG_ERRORS) as exc:
            return rows, f"level {lev} failed: {exc}"
        values.append((p, val))
        if ref.get("kind") == "closed_form":
            c = float(ref.get("c", 1.0))
            err = abs(float(val[0]) - c * math.exp(-cfg.horizon))
        elif ref.get("kind") == "heat_decay":
            pb = p.parabolic
            steps = cfg.steps if parameter == "mesh" else None
            err = relative_l2_error(val, heat_decay_reference(pb.mesh_n, cfg.horizon, steps, pb.space_dim))
        else:
            err = None
        rows.append(SweepRow(lev, err))
    if not ref:
        p_f, v_f = values[-1]
        for row, (p, v) in zip(rows, values):
            if parameter == "mesh":
                pb, pf = p.parabolic, p_f.parabolic
                if pb.space_dim != 1:
                    raise ConfigError("self-convergence mesh sweeps are 1-D only")
                xf = np.concatenate([[0.0], pf.points()[:, 0], [1.0]])
                vf = np.interp(pb.points()[:, 0], xf, np.concatenate([[0.0], v_f, [0.0]]))
                row.error = relative_l2_error(v, vf)
            else:
                row.error = float(np.abs(v - v_f).max())
        rows = rows[:-1]
    for a, b in zip(rows, rows[1:]):
        if a.error > 0 and b.error > 0:
            b.order = math.log(a.error / b.error) / math.log(_spacing(cfg, parameter, a.level)
                                                             / _spacing(cfg, parameter, b.level))
    return rows, None


def write_sweep(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "error", "order"])
        for r in rows:
            w.writerow([r.level, _fmt(r.error), "" if not np.isfinite(r.order) else _fmt(r.order)])
