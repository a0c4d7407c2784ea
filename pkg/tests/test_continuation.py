import itertools

import numpy as np
import pytest

from bsee_control.continuation import (AuxiliaryForcing, ContinuationConfig, DecoupledStage,
                                       contraction_ratios, duality_residual, hamiltonian_residual,
                                       choose_step, random_triple, solve_hamiltonian_system,
                                       suggested_step)
from bsee_control.control import random_control, zero_control
from bsee_control.lattice import AdaptedProcess, TripleProcess, m2_distance
from bsee_control.lq import lq_problem
from bsee_control.problem import SolverError
from bsee_control.solvers import SeeInput, BseeInput, initial_adjoint, solve_bsee, solve_decoupled, solve_see


def test_suggested_step():
    assert suggested_step(0.25) == 1.0
    assert suggested_step(2.0) == 0.25
    assert suggested_step(100.0, min_step=0.05) == 0.05


def test_stage0_equals_sequential_solve(unit_lq_tree):
    p = unit_lq_tree
    C = p.integrand.monotonicity_c
    lat = p.lattice
    st = DecoupledStage(p, C)
    lam0 = st(AuxiliaryForcing.zero(lat, 1))
    y, z = solve_bsee(BseeInput(p.operators))
    rows = lat.prefix(lat.steps - 1)
    k = solve_see(SeeInput(p.operators, initial_adjoint(p),
                           AdaptedProcess(lat, C * y.data[rows], lat.steps - 1),
                           AdaptedProcess(lat, C * z.data, lat.steps - 1)), y.level(0))
    assert m2_distance(lam0, TripleProcess(k, y, z), p.triple) < 1e-12


def test_converged_solution_satisfies_recursions(unit_lq_tree):
    lam, rep = solve_hamiltonian_system(unit_lq_tree)
    assert rep.final_residual < 1e-8
    assert hamiltonian_residual(unit_lq_tree, lam) < 1e-8
    assert rep.fixed_point_distance < 1e-8
    assert rep.rho_schedule[0] == 0.0 and rep.rho_schedule[-1] == 1.0


def test_contraction_below_one_and_monotone_increments(unit_lq_tree):
    p = unit_lq_tree
    lam, rep = solve_hamiltonian_system(p)
    st = DecoupledStage(p, p.integrand.monotonicity_c)
    zero = AuxiliaryForcing.zero(p.lattice, 1)
    ratios = contraction_ratios(p, rep.step_delta, 0.0, zero, st, st(zero), 20, 0)
    assert len(ratios) == 20 and max(ratios) < 1
    for inc in rep.picard_increments:
        assert all(b <= a for a, b in zip(inc[1:], inc[2:]))


def test_flat_matches_continuation():
    p = lq_problem(steps=4, mode="tree", B=0.3, A=0.5, coercivity_lambda=1.0)
    lam1, _ = solve_hamiltonian_system(p)
    lam2, _ = solve_hamiltonian_system(p, ContinuationConfig(flat=True, max_picard=2000))
    assert m2_distance(lam1, lam2, p.triple) < 1e-8


def test_uniqueness_from_random_warm_starts(unit_lq_tree):
    p = unit_lq_tree
    rng = np.random.default_rng(7)
    sols = [solve_hamiltonian_system(p, warm_start=random_triple(p.lattice, 1, rng, 3.0))[0]
            for _ in range(3)]
    for a, b in itertools.combinations(sols, 2):
        assert m2_distance(a, b, p.triple) < 100 * 1e-9


def test_duality_identity(unit_lq_tree):
    p = unit_lq_tree
    lam, _ = solve_hamiltonian_system(p)
    u0 = zero_control(p)
    assert duality_residual(lam, solve_decoupled(p, u0), p, u2=u0) < 1e-8
    rng = np.random.default_rng(0)
    u1, u2 = (random_control(p.lattice, 1, rng) for _ in range(2))
    assert duality_residual(solve_decoupled(p, u1), solve_decoupled(p, u2), p, u1=u1, u2=u2) < 1e-8
    # garbage triples break the identity at O(1)
    g1, g2 = (random_triple(p.lattice, 1, rng) for _ in range(2))
    assert duality_residual(g1, g2, p) > 1e-2


def test_non_convergence_raises_with_diagnostics(unit_lq_tree):
    cfg = ContinuationConfig(step_delta=1.0, max_picard=2, picard_tol=1e-14)
    with pytest.raises(SolverError) as exc:
        solve_hamiltonian_system(unit_lq_tree, cfg)
    assert "last_increment" in exc.value.diagnostics


def test_rejects_non_monotone_constant(unit_lq_tree):
    with pytest.raises(SolverError):
        solve_hamiltonian_system(unit_lq_tree, ContinuationConfig(monot_c=-1.0))


def _stiff_instance():
    from bsee_control.gelfand import Field
    xi = Field.of_path(lambda t, W: (1.2 + 0.8 * np.asarray(W))[:, None], (1,))
    return lq_problem(A=0.964, B=1.699, D=1.994, M=0.713, Q=0.618, N=0.771, h=1.039, xi=xi,
                      steps=2, mode="tree", coercivity_lambda=1.0)


def test_monotonicity_constant_adapts_to_shorten_chain():
    p = _stiff_instance()
    nominal = p.integrand.monotonicity_c
    stage0 = DecoupledStage(p, nominal)
    zero = AuxiliaryForcing.zero(p.lattice, 1)
    delta_nominal, _ = choose_step(p, ContinuationConfig(), stage0, stage0(zero), zero, nominal)
    lam, rep = solve_hamiltonian_system(p)
    assert rep.monot_c < nominal
    assert rep.step_delta > delta_nominal
    assert rep.final_residual < 1e-8


def test_explicit_monotonicity_constant_is_kept():
    p = lq_problem(steps=3, mode="tree", coercivity_lambda=1.0)
    _, rep = solve_hamiltonian_system(p, ContinuationConfig(monot_c=0.7))
    assert rep.monot_c == 0.7
