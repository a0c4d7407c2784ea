import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bsee_control.gelfand import Field, GelfandTriple, MalformedInput
from bsee_control.hamiltonian import (PerturbedQuadraticIntegrand, QuadraticIntegrand, hamiltonian_grad_u,
                                      hamiltonian_value, lq_gamma, optimal_control)
from bsee_control.lattice import BrownianLattice, TimeGrid
from bsee_control.lq import lq_problem


def _spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T + np.eye(n)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_quadratic_gradients_match_differences(n, seed):
    rng = np.random.default_rng(seed)
    mh = np.diag(rng.uniform(0.5, 2, n))
    tri = GelfandTriple(mh, mh + np.eye(n))
    integ = QuadraticIntegrand(tri, _spd(rng, n), _spd(rng, n), _spd(rng, n), _spd(rng, n))
    integ = PerturbedQuadraticIntegrand(tri, integ.M, integ.Q, integ.N, integ.hmat, c=0.3)
    lat = BrownianLattice(TimeGrid(1.0, 2))
    integ = integ.bind(lat)
    r = [0]
    y, z, u, dy, dz, du = (rng.standard_normal((1, n)) for _ in range(6))
    eps = 1e-6
    f = lambda s: integ.l(lat, r, y + s * dy, z + s * dz, u + s * du)[0]
    fd = (f(eps) - f(-eps)) / (2 * eps)
    an = (tri.h_dot(integ.grad_y(lat, r, y, z, u), dy) + tri.h_dot(integ.grad_z(lat, r, y, z, u), dz))[0] \
        + float(integ.grad_u(lat, r, y, z, u)[0] @ du[0])
    assert abs(fd - an) <= 1e-6 * max(1.0, abs(an))


def test_lq_gamma_minimises_hamiltonian():
    rng = np.random.default_rng(4)
    N = _spd(rng, 2)
    v = rng.standard_normal(2)
    u = lq_gamma(v, N)
    H = lambda w: w @ v + w @ N @ w
    for _ in range(20):
        assert H(u + 0.1 * rng.standard_normal(2)) >= H(u)
    with pytest.raises(MalformedInput):
        lq_gamma(v, -N)


def test_hamiltonian_gradient_vanishes_at_minimiser():
    p = lq_problem(steps=3, mode="tree", B=0.4)
    k = np.array([0.7])
    u = optimal_control(p, [0], k[None])[0]
    g = hamiltonian_grad_u(p, 0, 0, np.ones(1), np.ones(1), u, k)
    assert np.abs(g).max() < 1e-14
    # u = -1/2 N^{-1} D* k for the unit problem
    assert np.isclose(u[0], -0.35)
    assert hamiltonian_value(p, 0, 0, np.ones(1), np.ones(1), u + 0.1, k) > \
        hamiltonian_value(p, 0, 0, np.ones(1), np.ones(1), u, k)


def test_validators_pass_on_unit_problem(unit_lq_tree):
    rep = unit_lq_tree.validate()
    assert rep.passed, rep.failed()
    names = {r.name for r in rep.records}
    assert {"A1_bounded_B_D", "A2_coercivity", "A3_gradient_consistency", "A4_monotonicity",
            "A5_minimizer", "LQ_positivity"} <= names


def test_validator_negative_N_has_witness():
    rep = lq_problem(N=-1.0, steps=3, mode="tree", coercivity_lambda=1.0).validate()
    assert not rep["LQ_positivity"].passed
    assert rep["LQ_positivity"].witness["weight"] == "N"


def test_validator_non_monotone_has_witness():
    rep = lq_problem(M=-1.0, steps=3, mode="tree", coercivity_lambda=1.0).validate()
    rec = rep["A4_monotonicity"]
    assert not rec.passed and "level" in rec.witness


def test_validator_coercivity_failure():
    rep = lq_problem(A=-2.0, steps=3, mode="tree", coercivity_lambda=1.0).validate()
    assert not rep["A2_coercivity"].passed


def test_validator_detects_wrong_gradient():
    from bsee_control.hamiltonian import CallbackIntegrand
    from bsee_control.problem import ControlProblem
    base = lq_problem(steps=2, mode="tree", coercivity_lambda=1.0)
    q = base.integrand
    bad = CallbackIntegrand(q.l, lambda *a: 3 * q.grad_y(*a), q.grad_z, q.grad_u, q.h, q.grad_h,
                            monotonicity_c=1.0)
    p = ControlProblem(base.coeffs, bad, base.minimizer, base.lattice, 1.0)
    rec = p.validate()["A3_gradient_consistency"]
    assert not rec.passed and rec.witness


def test_deterministic_mode_rejects_random_data():
    with pytest.raises(MalformedInput):
        lq_problem(steps=3, xi=Field.of_path(lambda t, W: np.asarray(W)[:, None], (1,)))
    with pytest.raises(MalformedInput):
        lq_problem(steps=3, B=1.0)
