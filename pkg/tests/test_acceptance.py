"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (the summary block appears at
the end of the session) or ``python tests/test_acceptance.py``.
"""

import itertools
import json
import math
import sys
import time

import numpy as np
import pytest

from bsee_control.config import build_problem, load, shipped_configs
from bsee_control.continuation import (AuxiliaryForcing, ContinuationConfig, DecoupledStage,
                                       duality_residual, random_triple, solve_hamiltonian_system)
from bsee_control.experiment import convergence_sweep, run
from bsee_control.gelfand import Field
from bsee_control.lattice import AdaptedProcess, TripleProcess, m2_distance
from bsee_control.lq import lq_problem
from bsee_control.oracle import brute_force_oracle
from bsee_control.solvers import BseeInput, SeeInput, initial_adjoint, solve_bsee, solve_see

RESULTS = {}
VALID = [n for n in shipped_configs() if "broken" not in n]
BROKEN = {"lq_broken_N": "LQ_positivity", "parabolic_broken_kappa": "super_parabolic",
          "lq_broken_monotone": "A4_monotonicity"}


def verdict(num, title, ok, detail):
    RESULTS[num] = (title, bool(ok), detail)
    assert ok, f"criterion {num} ({title}): {detail}"


_SOLVED = {}


def _solved(name):
    if name not in _SOLVED:
        _SOLVED[name] = run(load(name), suites=["convergence", "duality"])
    return _SOLVED[name]


def test_01_closed_form_lq():
    t0 = time.perf_counter()
    out = run(load("lq_closed_form"), suites=[], reference=True)
    dt = time.perf_counter() - t0
    recs = {c["name"]: c for c in out.report["checks"]}
    want = ("reference_y0", "reference_cost", "reference_u_equals_y")
    ok = all(recs[k]["passed"] for k in want) and dt < 5
    verdict(1, "closed-form LQ", ok,
            ", ".join(f"{k}={recs[k]['value']:.2e}" for k in want) + f", {dt:.2f}s")


def test_02_brute_force_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(10):
        xi0, xi1 = rng.uniform(0.5, 2, 2)
        xi = Field.of_path(lambda t, W, a=xi0, b=xi1: (a + b * np.asarray(W))[:, None], (1,))
        A, B, D, M, Q, N, h = rng.uniform(0.5, 2, 7)
        p = lq_problem(A=A, B=B, D=D, M=M, Q=Q, N=N, h=h, xi=xi, steps=2, mode="tree",
                       coercivity_lambda=1.0)
        lam, _ = solve_hamiltonian_system(p)
        worst = max(worst, m2_distance(lam, brute_force_oracle(p), p.triple))
    dt = time.perf_counter() - t0
    verdict(2, "brute-force equivalence", worst < 1e-6 and dt < 10,
            f"max M2 distance {worst:.2e} over 10 instances, {dt:.2f}s")


def _decoupling_gap(p):
    mono = p.integrand.monotonicity_c
    stage0 = DecoupledStage(p, mono)(AuxiliaryForcing.zero(p.lattice, p.dim))
    lat, ops = p.lattice, p.operators
    y, z = solve_bsee(BseeInput(ops))
    rows = lat.prefix(lat.steps - 1)
    drift = AdaptedProcess(lat, mono * y.data[rows], lat.steps - 1)
    diff = AdaptedProcess(lat, mono * z.data, lat.steps - 1)
    k = solve_see(SeeInput(ops, initial_adjoint(p), drift, diff), y.level(0))
    return m2_distance(stage0, TripleProcess(k, y, z), p.triple)


def test_03_rho0_decoupling():
    gaps = {n: _decoupling_gap(build_problem(load(n), strict=False)) for n in shipped_configs()}
    worst = max(gaps, key=gaps.get)
    verdict(3, "rho=0 decoupling", gaps[worst] < 1e-12,
            f"{len(gaps)} configs, worst {worst} at {gaps[worst]:.2e}")


def test_04_fixed_point_residual():
    vals = {}
    for n in VALID:
        recs = {c["name"]: c for c in _solved(n).report["checks"]}
        key = "node_equation_residual" if "node_equation_residual" in recs else "decoupled_residual"
        vals[n] = max(recs[key]["value"], recs.get("fixed_point_residual", recs[key])["value"])
    worst = max(vals, key=vals.get)
    verdict(4, "fixed-point residual", vals[worst] < 1e-8,
            f"{len(vals)} valid configs, worst {worst} at {vals[worst]:.2e}")


def test_05_contraction():
    out = run(load("lq_tree_unit"), suites=["contraction"])
    recs = {c["name"]: c for c in out.report["checks"]}
    ratio, mono = recs["contraction_ratio"], recs["picard_monotone_decay"]
    ok = ratio["passed"] and mono["passed"] and ratio["detail"].startswith("20 ")
    verdict(5, "contraction measurement", ok, f"{ratio['detail']}; monotone={mono['passed']}")


def test_06_duality():
    worst = 0.0
    for n in VALID:
        for c in _solved(n).report["checks"]:
            if c["name"].startswith("duality"):
                worst = max(worst, c["value"])
    p = build_problem(load("lq_tree_unit"))
    rng = np.random.default_rng(6)
    garbage = duality_residual(random_triple(p.lattice, 1, rng), random_triple(p.lattice, 1, rng), p)
    verdict(6, "duality identity", worst < 1e-8 and garbage > 0.1,
            f"worst converged/decoupled {worst:.2e}, garbage {garbage:.2f}")


def test_07_optimality():
    lines, ok = [], True
    for n in ("lq_tree_unit", "lq_perturbed", "parabolic_tree"):
        recs = {c["name"]: c for c in run(load(n), suites=["optimality"]).report["checks"]}
        ok &= all(recs[k]["passed"] for k in ("hamiltonian_gradient", "perturbation_no_decrease",
                                              "gradient_fd_match"))
        lines.append(f"{n}: fd {recs['gradient_fd_match']['value']:.1e}")
    verdict(7, "optimality", ok, "; ".join(lines))


def test_08_uniqueness():
    cfg = load("lq_tree_unit")
    p = build_problem(cfg)
    cc = cfg.continuation_config()
    rng = np.random.default_rng(8)
    sols = [solve_hamiltonian_system(p, cc, warm_start=random_triple(p.lattice, p.dim, rng, 5.0))[0]
            for _ in range(5)]
    worst = max(m2_distance(a, b, p.triple) for a, b in itertools.combinations(sols, 2))
    verdict(8, "uniqueness", worst < 100 * cc.picard_tol,
            f"max pairwise distance {worst:.2e} (limit {100 * cc.picard_tol:.0e})")


def test_09_heat_decay():
    cfg = load("heat_decay")
    t0 = time.perf_counter()
    out = run(cfg, suites=[], reference=True)
    dt = time.perf_counter() - t0
    err = out.report["checks"][0]["value"]
    rows, fail = convergence_sweep(cfg, [8, 16, 32, 64], "mesh")
    orders = [r.order for r in rows[1:]]
    ok = fail is None and err < 0.01 and all(abs(o - 2) <= 0.3 for o in orders) and dt < 30
    verdict(9, "parabolic heat decay", ok,
            f"L2 error {err:.2e} in {dt:.2f}s, orders " + ", ".join(f"{o:.3f}" for o in orders))


def test_10_assumption_validators():
    bad = []
    for n in VALID:
        out = run(load(n), suites=["assumptions"])
        if out.exit_code != 0:
            bad.append(f"{n} failed {out.report['failed']}")
    for n, check in BROKEN.items():
        rep = run(load(n), suites=["assumptions"]).report
        recs = {c["name"]: c for c in rep["checks"]}
        if check not in rep["failed"] or not recs[check]["witness"]:
            bad.append(f"{n} did not fail {check} with a witness")
    verdict(10, "assumption validators", not bad,
            "; ".join(bad) or f"{len(VALID)} valid pass, {len(BROKEN)} broken fail with witnesses")


def test_11_determinism():
    diff = []
    for n in ("lq_random_coeffs", "parabolic_tree", "lq_broken_N"):
        a, b = (json.dumps(run(load(n)).report, sort_keys=True) for _ in range(2))
        if a != b:
            diff.append(n)
    verdict(11, "determinism", not diff, "identical reports" if not diff else f"differ: {diff}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
