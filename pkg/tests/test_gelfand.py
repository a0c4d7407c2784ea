import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bsee_control.gelfand import (CoercivityError, EvolutionCoefficients, Field, GelfandTriple,
                                  MalformedInput, adjoint_matrix, build_adjoints, certify_coercivity,
                                  check_adjoint_pairing, field_samples, inner_h, norm_v_sq,
                                  spectral_bound)
from bsee_control.lattice import BrownianLattice, TimeGrid


def _spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


def test_triple_rejects_bad_masses():
    with pytest.raises(MalformedInput):
        GelfandTriple(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(2))
    with pytest.raises(MalformedInput):
        GelfandTriple(-np.eye(2), np.eye(2))
    with pytest.raises(MalformedInput):
        GelfandTriple(np.eye(2), np.eye(3))


def test_inner_products():
    tri = GelfandTriple(2 * np.eye(2), np.diag([3.0, 5.0]))
    assert inner_h([1, 2], [3, 4], tri) == 22.0
    assert norm_v_sq([1, 1], tri) == 8.0
    assert np.isclose(tri.embedding_constant(), 2 / 3)
    with pytest.raises(MalformedInput):
        inner_h([1, 2, 3], [1, 2], tri)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_adjoint_pairing_identity(n, m, seed):
    rng = np.random.default_rng(seed)
    mh, mu = _spd(rng, n), _spd(rng, m)
    X = rng.standard_normal((n, m))
    Xs = adjoint_matrix(X, mh, mu)
    assert check_adjoint_pairing(X, Xs, mh, mu, seed=seed) < 1e-10


def test_certify_coercivity():
    tri = GelfandTriple.identity(2)
    assert np.isclose(certify_coercivity([np.eye(2)], tri, 0.0), 1.0)
    # a skew part does not change the symmetric form
    assert np.isclose(certify_coercivity([np.array([[1.0, 5.0], [-5.0, 1.0]])], tri, 0.5), 1.5)
    with pytest.raises(CoercivityError):
        certify_coercivity([-np.eye(2)], tri, 0.5)
    with pytest.raises(MalformedInput):
        certify_coercivity([], tri, 1.0)


def test_field_kinds_and_samples():
    lat = BrownianLattice(TimeGrid(1.0, 3))
    c = Field.constant(np.eye(2))
    t = Field.of_time(lambda s: (1 + s) * np.eye(2), (2, 2))
    p = Field.of_path(lambda s, W: np.asarray(W)[:, None, None] * np.eye(2), (2, 2))
    assert field_samples(c, lat).shape == (1, 2, 2)
    assert field_samples(t, lat).shape == (4, 2, 2)
    assert field_samples(p, lat).shape == (15, 2, 2)
    assert np.isclose(spectral_bound(t, lat), 2.0)
    assert np.isclose(spectral_bound(p, lat), 3 * np.sqrt(1 / 3))
    assert p.random and not t.random
    with pytest.raises(MalformedInput):
        p.level_value(lat, 1)
    x = np.ones((2, 2))
    assert np.allclose(p.apply_level(lat, 1, x), lat.W(1)[:, None] * x)


def test_non_finite_field_rejected():
    lat = BrownianLattice(TimeGrid(1.0, 2))
    f = Field.of_time(lambda s: np.array([np.nan]), (1,))
    with pytest.raises(MalformedInput):
        f.values(lat, slice(0, 3))


def test_build_adjoints_respects_masses():
    rng = np.random.default_rng(0)
    mh = np.diag([1.0, 2.0])
    tri = GelfandTriple(mh, mh + np.eye(2))
    A = rng.standard_normal((2, 2))
    D = rng.standard_normal((2, 1))
    co = EvolutionCoefficients(tri, Field.constant(A), Field.constant(np.zeros((2, 2))),
                               Field.constant(D), Field.constant(np.zeros(2)),
                               Field.constant(np.ones(2)), mass_u=np.array([[3.0]]))
    co = build_adjoints(co)
    lat = BrownianLattice(TimeGrid(1.0, 1), 1)
    As = co.adjoint_A.level_value(lat, 0)
    Ds = co.adjoint_D.level_value(lat, 0)
    assert check_adjoint_pairing(A, As, mh, mh) < 1e-12
    assert check_adjoint_pairing(D, Ds, mh, np.array([[3.0]])) < 1e-12


def test_coefficient_shape_errors():
    tri = GelfandTriple.identity(2)
    z2 = Field.constant(np.zeros((2, 2)))
    with pytest.raises(MalformedInput):
        EvolutionCoefficients(tri, Field.constant(np.zeros((3, 3))), z2, z2,
                              Field.constant(np.zeros(2)), Field.constant(np.zeros(2)))
    with pytest.raises(MalformedInput):
        EvolutionCoefficients(tri, z2, z2, z2, Field.constant(np.zeros(3)), Field.constant(np.zeros(2)))
