import numpy as np
import pytest

from bsee_control.gelfand import Field
from bsee_control.lattice import AdaptedProcess, BrownianLattice, TimeGrid
from bsee_control.lq import lq_problem
from bsee_control.problem import SolverError
from bsee_control.solvers import (BseeInput, SeeInput, bsee_residual, costate, decoupled_residual,
                                  initial_adjoint, integrand_loads, see_residual, solve_bsee,
                                  solve_decoupled, solve_see)
from bsee_control.control import random_control, zero_control


def _xi(a, b):
    return Field.of_path(lambda t, W: (a + b * np.asarray(W))[:, None], (1,))


def test_bsee_linear_terminal_exact_on_tree():
    # A = a, xi = W_T: y_i = (1 + a dt)^{-(N-i)} W_i and z_i = (1 + a dt)^{-(N-i-1)} exactly
    a, N = 0.7, 6
    p = lq_problem(A=a, xi=_xi(0.0, 1.0), steps=N, mode="tree")
    lat = p.lattice
    y, z = solve_bsee(BseeInput(p.operators))
    q = 1.0 / (1.0 + a * lat.grid.dt)
    for i in range(N + 1):
        assert np.allclose(y.level(i)[:, 0], q ** (N - i) * lat.W(i), atol=1e-14)
    for i in range(N):
        assert np.allclose(z.level(i)[:, 0], q ** (N - i - 1), atol=1e-14)


def test_bsee_deterministic_chain_closed_form():
    # y' = a y + d u + g backwards with constant data: implicit Euler recursion by hand
    a, g, c, N = 0.5, 0.3, 2.0, 50
    p = lq_problem(A=a, G=g, xi=c, steps=N)
    u = AdaptedProcess(p.lattice, np.full((N, 1), 0.2), N - 1)
    y, _ = solve_bsee(BseeInput(p.operators, u=u))
    dt = 1.0 / N
    ref = c
    for _ in range(N):
        ref = (ref - dt * (0.2 + g)) / (1 + dt * a)
    assert np.isclose(y.level(0)[0, 0], ref, rtol=1e-13)


def test_see_deterministic_chain_by_hand():
    a, N = 0.4, 20
    p = lq_problem(A=a, steps=N)
    lat = p.lattice
    drift = AdaptedProcess(lat, np.full((N, 1), 0.5), N - 1)
    k = solve_see(SeeInput(p.operators, lambda y0: np.array([1.0]), drift, drift * 0), np.zeros(1))
    dt = 1.0 / N
    ref = 1.0
    for _ in range(N):
        ref = (ref - dt * 0.5) / (1 + dt * a)
    assert np.isclose(k.level(N)[0, 0], ref, rtol=1e-13)


def test_decoupled_residuals_small_on_random_tree():
    p = lq_problem(n=2, m=1, A=np.array([[1.0, 0.2], [0.0, 0.5]]), B=0.3, D=np.array([[1.0], [0.5]]),
                   G=0.1, xi=Field.of_path(lambda t, W: np.stack([1 + W, np.sin(W)], 1), (2,)),
                   steps=5, mode="tree")
    u = random_control(p.lattice, 1, np.random.default_rng(0))
    lam = solve_decoupled(p, u)
    assert decoupled_residual(p, lam, u) < 1e-12
    # corrupting one node is seen by the residual
    lam.y.data[5, 0] += 1e-3
    assert decoupled_residual(p, lam, u) > 1e-4


def test_see_residual_reports_martingale_part():
    p = lq_problem(B=0.5, steps=4, mode="tree")
    u = zero_control(p)
    lam = solve_decoupled(p, u)
    ly, lz = integrand_loads(p, lam.y, lam.z, u)
    k0 = initial_adjoint(p)(lam.y.level(0))
    assert see_residual(p.operators, lam.k, k0, ly, lz) < 1e-13
    shifted = AdaptedProcess(p.lattice, lz.data + 1.0, lz.last)
    assert see_residual(p.operators, lam.k, k0, ly, shifted) > 1e-3


def test_costate_is_conditional_expectation():
    p = lq_problem(steps=3, mode="tree")
    lam = solve_decoupled(p, random_control(p.lattice, 1, np.random.default_rng(1)))
    kap = costate(lam.k)
    assert np.allclose(kap.level(1), p.lattice.expect_next(lam.k.level(2)))
    assert np.allclose(kap[(1, 0)], lam.k.expect_next((1, 0)))


def test_input_validation():
    p = lq_problem(steps=3, mode="tree")
    other = BrownianLattice(TimeGrid(1.0, 3))
    with pytest.raises(SolverError, match="another lattice"):
        solve_bsee(BseeInput(p.operators, u=AdaptedProcess.zeros(other, 1, 2)))
    with pytest.raises(SolverError, match="dimension"):
        solve_bsee(BseeInput(p.operators, u=AdaptedProcess.zeros(p.lattice, 2, 2)))
    with pytest.raises(SolverError):
        solve_see(SeeInput(p.operators, lambda y: y, None, None), np.zeros(1))


def test_singular_step_matrix_reports_time_index():
    # I + dt A = 0 only on level 3 (dt = 1/4, A = -4 there)
    A = Field.of_time(lambda t: np.array([[-4.0 if abs(t - 0.75) < 1e-12 else 0.0]]), (1, 1))
    p = lq_problem(A=A, steps=4)
    with pytest.raises(SolverError) as exc:
        solve_bsee(BseeInput(p.operators))
    assert exc.value.diagnostics["time_index"] == 3


def test_bsee_residual_matches_solver_on_chain():
    p = lq_problem(A=0.3, G=0.2, steps=64)
    y, z = solve_bsee(BseeInput(p.operators))
    assert bsee_residual(p.operators, y, z) < 1e-14
