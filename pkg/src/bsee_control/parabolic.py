"""Finite-difference front-end for the Dirichlet backward stochastic parabolic problem.

On the unit interval (or square) with zero boundary values, the operator

    A y = -( d_i (a^{ij} d_j y) + b^i d_i y + c y )

is discretised on ``mesh_n`` interior points per axis with mesh width
``h = 1 / (mesh_n + 1)``: second-order terms through half-point fluxes,
first-order terms centred, boundary neighbours eliminated. Mesh values are
the Galerkin coordinates; the H inner product is the lumped ``h^d I`` and the
V norm adds the discrete Dirichlet energy.

Coefficients are callables ``f(t, W, x)`` with ``x`` of shape (points, d).
Only path-dependent (``path=True``) coefficients may use ``W``; they require
the tree lattice.
"""

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .gelfand import EvolutionCoefficients, Field, GelfandTriple, MalformedInput, spectral_bound
from .hamiltonian import CheckRecord, QuadraticIntegrand, lq_minimizer
from .lattice import BrownianLattice, TimeGrid
from .lq import _gamma_lipschitz
from .problem import ControlProblem

MARGIN_TOL = 1e-12


@dataclass(frozen=True)
class Coefficient:
    """A space-time (and optionally path) dependent coefficient."""

    func: Callable
    time: bool = False
    path: bool = False

    @classmethod
    def const(cls, value):
        value = np.asarray(value, dtype=float)
        return cls(lambda t, W, x: value)

    def __call__(self, t, W, x):
        return np.asarray(self.func(t, W, x), dtype=float)


def as_coefficient(value):
    if isinstance(value, Coefficient):
        return value
    if callable(value):
        return Coefficient(value, time=True)
    return Coefficient.const(value)


class SuperParabolicityError(MalformedInput):
    def __init__(self, record):
        super().__init__(f"super-parabolicity violated: {record.witness}")
        self.record = record


@dataclass
class ParabolicProblem:
    space_dim: int = 1
    mesh_n: int = 31
    a: Union[float, Coefficient, Callable] = 0.5
    b: Union[float, Coefficient, Callable] = 0.0
    c: Union[float, Coefficient, Callable] = 0.0
    nu: Union[float, Coefficient, Callable] = 0.0
    g: Union[float, Coefficient, Callable] = 0.0
    xi: Union[float, Coefficient, Callable] = field(
        default_factory=lambda: Coefficient(lambda t, W, x: np.prod(np.sin(np.pi * x), axis=-1)))
    kappa: float = 1.0
    K: float = 1.0

    def __post_init__(self):
        if self.space_dim not in (1, 2):
            raise MalformedInput("space_dim must be 1 or 2")
        if int(self.mesh_n) != self.mesh_n or self.mesh_n < 2:
            raise MalformedInput("mesh_n must be an integer >= 2")
        if not (0 < self.kappa <= self.K):
            raise MalformedInput("need 0 < kappa <= K")
        for name in ("a", "b", "c", "nu", "g", "xi"):
            setattr(self, name, as_coefficient(getattr(self, name)))

    @property
    def h(self):
        return 1.0 / (self.mesh_n + 1)

    @property
    def n(self):
        return self.mesh_n ** self.space_dim

    def points(self):
        """Interior mesh points, shape (n, d), first axis fastest."""
        g = np.arange(1, self.mesh_n + 1) * self.h
        if self.space_dim == 1:
            return g[:, None]
        X, Y = np.meshgrid(g, g, indexing="ij")
        return np.column_stack([X.ravel(order="F"), Y.ravel(order="F")])

    @property
    def random(self):
        return any(getattr(self, k).path for k in ("a", "b", "c", "nu", "g", "xi"))


# evaluation helpers -----------------------------------------------------------

def _diffusion(prob, t, W, x):
    """a at points x as (P, d, d); scalars mean a multiple of the identity."""
    d = prob.space_dim
    v = prob.a(t, W, x)
    P = len(x)
    if v.ndim == 0 or v.shape == (P,):
        return np.broadcast_to(v.reshape(-1, 1, 1) if v.ndim else v, (P, 1, 1)) * np.eye(d)
    if v.shape == (d, d):
        return np.broadcast_to(v, (P, d, d))
    if v.shape == (P, d, d):
        return v
    raise MalformedInput(f"diffusion coefficient has shape {v.shape}")


def _vector(prob, coef, t, W, x):
    d = prob.space_dim
    v = coef(t, W, x)
    P = len(x)
    if v.ndim == 0 or v.shape == (P,):
        return np.broadcast_to((v.reshape(-1, 1) if v.ndim else v) * np.ones(d), (P, d))
    if v.shape == (d,):
        return np.broadcast_to(v, (P, d))
    if v.shape == (P, d):
        return v
    raise MalformedInput(f"drift coefficient has shape {v.shape}")


def _scalar(coef, t, W, x):
    return np.broadcast_to(coef(t, W, x), (len(x),)).astype(float)


def _index(prob):
    m = prob.mesh_n
    if prob.space_dim == 1:
        return lambda i, j=0: i if 0 <= i < m else -1
    return lambda i, j: i + m * j if (0 <= i < m and 0 <= j < m) else -1


def _grid_ids(prob):
    m = prob.mesh_n
    if prob.space_dim == 1:
        return [(i,) for i in range(m)]
    return [(i, j) for j in range(m) for i in range(m)]


def operator_matrix(prob, t, W, adjoint_formula=False):
    """Nodal matrix of A(t, W) (or of the formula-based adjoint operator)."""
    d, h, n = prob.space_dim, prob.h, prob.n
    idx = _index(prob)
    pts = prob.points()
    ids = _grid_ids(prob)
    mat = np.zeros((n, n))
    b = _vector(prob, prob.b, t, W, pts)
    c = _scalar(prob.c, t, W, pts)
    for axis in range(d):
        e = np.zeros(d)
        e[axis] = h
        a_plus = _diffusion(prob, t, W, pts + e / 2)[:, axis, axis]
        a_minus = _diffusion(prob, t, W, pts - e / 2)[:, axis, axis]
        for p, gid in enumerate(ids):
            up = list(gid); up[axis] += 1
            dn = list(gid); dn[axis] -= 1
            qu, qd = idx(*up), idx(*dn)
            mat[p, p] += (a_plus[p] + a_minus[p]) / h ** 2
            if qu >= 0:
                mat[p, qu] -= a_plus[p] / h ** 2
            if qd >= 0:
                mat[p, qd] -= a_minus[p] / h ** 2
            # first order: -b d_axis y  (formula adjoint: +b d_axis y)
            sgn = 1.0 if adjoint_formula else -1.0
            if qu >= 0:
                mat[p, qu] += sgn * b[p, axis] / (2 * h)
            if qd >= 0:
                mat[p, qd] -= sgn * b[p, axis] / (2 * h)
    if d == 2:
        # mixed terms d_i (a^{ij} d_j y), i != j, by centred differences of centred fluxes
        for i_ax, j_ax in ((0, 1), (1, 0)):
            ei = np.zeros(2); ei[i_ax] = h
            a_p = _diffusion(prob, t, W, pts + ei)[:, i_ax, j_ax]
            a_m = _diffusion(prob, t, W, pts - ei)[:, i_ax, j_ax]
            for p, gid in enumerate(ids):
                for si, a_side in ((1, a_p[p]), (-1, a_m[p])):
                    for sj in (1, -1):
                        q = list(gid)
                        q[i_ax] += si
                        q[j_ax] += sj
                        qq = idx(*q)
                        if qq >= 0:
                            mat[p, qq] -= si * sj * a_side / (4 * h * h)
    zero = c.copy()
    if adjoint_formula:
        # -(c - div b)
        div = np.zeros(n)
        for axis in range(d):
            e = np.zeros(d)
            e[axis] = h
            div += (_vector(prob, prob.b, t, W, pts + e)[:, axis]
                    - _vector(prob, prob.b, t, W, pts - e)[:, axis]) / (2 * h)
        zero = c - div
    mat -= np.diag(zero)
    return mat


def laplacian_matrix(prob):
    """Positive discrete Dirichlet Laplacian (-Delta_h)."""
    unit = ParabolicProblem(prob.space_dim, prob.mesh_n, a=1.0)
    return operator_matrix(unit, 0.0, 0.0)


def gelfand_triple(prob):
    vol = prob.h ** prob.space_dim
    mh = vol * np.eye(prob.n)
    return GelfandTriple(mh, mh + vol * laplacian_matrix(prob))


# checks ------------------------------------------------------------------------

def _sample_states(prob, lattice):
    """(t, W) pairs at which coefficients are sampled."""
    out = []
    for i in range(lattice.steps + 1):
        t = lattice.grid.t(i)
        Ws = np.unique(lattice.W(i)) if prob.random else [0.0]
        out.extend((t, float(W)) for W in Ws)
    return out


def check_super_parabolicity(prob, lattice):
    """kappa I <= 2a <= K I and |b|, |c|, |nu| <= K at mesh and half points."""
    pts = prob.points()
    h = prob.h
    shifts = [np.zeros(prob.space_dim)]
    for axis in range(prob.space_dim):
        e = np.zeros(prob.space_dim); e[axis] = h / 2
        shifts += [e, -e]
    worst, witness = np.inf, {}
    for t, W in _sample_states(prob, lattice):
        for s in shifts:
            x = pts + s
            ev = np.linalg.eigvalsh(2.0 * _diffusion(prob, t, W, x))
            lo = ev.min(axis=-1) - prob.kappa
            hi = prob.K - ev.max(axis=-1)
            for margin, kind in ((lo, "kappa"), (hi, "K")):
                j = int(np.argmin(margin))
                if margin[j] < worst:
                    worst = float(margin[j])
                    witness = dict(t=t, W=W, x=x[j].tolist(), bound=kind,
                                   eig_2a=ev[j].tolist())
        bnd = max(float(np.abs(_vector(prob, prob.b, t, W, pts)).max()),
                  float(np.abs(_scalar(prob.c, t, W, pts)).max()),
                  float(np.abs(_scalar(prob.nu, t, W, pts)).max()))
        if prob.K - bnd < worst:
            worst = prob.K - bnd
            witness = dict(t=t, W=W, bound="coefficient bound K", sup=bnd)
    passed = worst >= -MARGIN_TOL
    return CheckRecord("super_parabolic", bool(passed), float(worst), {} if passed else witness,
                       detail=f"kappa={prob.kappa:g} K={prob.K:g}")


def coercivity_lambda(prob, lattice):
    """||c||_inf + ||b||_inf^2 / (2 kappa) + 1 over the sampled states."""
    pts = prob.points()
    cs, bs = 0.0, 0.0
    for t, W in _sample_states(prob, lattice):
        cs = max(cs, float(np.abs(_scalar(prob.c, t, W, pts)).max()))
        bs = max(bs, float(np.abs(_vector(prob, prob.b, t, W, pts)).max()))
    return cs + bs ** 2 / (2 * prob.kappa) + 1.0


# assembly ------------------------------------------------------------------------

def _field(prob, deps, shape, level_fn):
    """Field from ``level_fn(t, W) -> value`` honouring the declared dependence."""
    if any(getattr(prob, k).path for k in deps):
        def func(t, Ws):
            return np.stack([level_fn(t, float(W)) for W in np.atleast_1d(Ws)])
        return Field.of_path(func, shape)
    if any(getattr(prob, k).time for k in deps):
        return Field.of_time(lambda t: level_fn(t, 0.0), shape)
    return Field.constant(level_fn(0.0, 0.0))


def assemble(prob, grid, mode="deterministic", strict=True, name="parabolic"):
    """ControlProblem for the discretised parabolic problem with the unit quadratic cost."""
    if not isinstance(grid, TimeGrid):
        raise MalformedInput("grid must be a TimeGrid")
    if mode not in ("deterministic", "tree"):
        raise MalformedInput(f"unknown mode {mode!r}")
    if prob.space_dim == 2 and mode == "tree":
        raise MalformedInput("2-D problems are supported in deterministic mode only")
    lattice = BrownianLattice(grid, 1 if mode == "deterministic" else 2)
    if mode == "deterministic" and prob.random:
        raise MalformedInput("deterministic mode needs coefficients that do not depend on W")
    record = check_super_parabolicity(prob, lattice)
    if strict and not record.passed:
        raise SuperParabolicityError(record)
    n = prob.n
    pts = prob.points()
    triple = gelfand_triple(prob)
    mh = triple.mass_h
    A = _field(prob, ("a", "b", "c"), (n, n), lambda t, W: operator_matrix(prob, t, W))
    B = _field(prob, ("nu",), (n, n), lambda t, W: np.diag(_scalar(prob.nu, t, W, pts)))
    G = _field(prob, ("g",), (n,), lambda t, W: _scalar(prob.g, t, W, pts))
    xi_c = prob.xi
    if xi_c.path:
        xi = Field.of_path(lambda t, Ws: np.stack([_scalar(xi_c, grid.horizon, float(W), pts)
                                                   for W in np.atleast_1d(Ws)]), (n,))
    else:
        xi = Field.constant(_scalar(xi_c, grid.horizon, 0.0, pts))
    D = Field.constant(np.eye(n))
    coeffs = EvolutionCoefficients(triple, A, B, D, G, xi, mass_u=mh)
    eye = np.eye(n)
    integ = QuadraticIntegrand(triple, eye, eye, eye, eye, mass_u=mh)
    minimizer = lq_minimizer(Field.constant(eye))
    lam = coercivity_lambda(prob, lattice)
    problem = ControlProblem(coeffs, integ, minimizer, lattice, lam, super_parabolic=record,
                             name=name, meta=dict(kind=f"parabolic-{prob.space_dim}d",
                                                  mesh_n=prob.mesh_n, h=prob.h))
    coeffs = problem.coeffs
    coeffs.b_bound = spectral_bound(coeffs.B, lattice)
    coeffs.d_bound = 1.0
    problem.minimizer.lipschitz_c = _gamma_lipschitz(problem)
    problem.parabolic = prob
    return problem


def formula_adjoint_gap(prob, t=0.0, W=0.0):
    """Sup of (A*_formula - A^T) applied to prod sin(pi x_i); A^T is the exact H-adjoint.

    The two discretisations differ entrywise when b varies, but agree on
    smooth functions up to O(h^2).
    """
    phi = np.prod(np.sin(np.pi * prob.points()), axis=1)
    A = operator_matrix(prob, t, W)
    As = operator_matrix(prob, t, W, adjoint_formula=True)
    return float(np.abs((As - A.T) @ phi).max())


# weak form and references ------------------------------------------------------------

def weak_solution_residual(problem, y, z, u, test_fns=5, seed=0):
    """Max defect of the discrete weak formulation over test functions and nodes.

    For each test vector phi (zero on the boundary by construction) and each
    node of level i < N::

        ((y_i - E_i y_{i+1}) / dt, phi) + <A y_i, phi> + (B z_i + D u_i + G_i, phi) = 0
        (z_i - (y_{i+1}^+ - y_{i+1}^-) / (2 sqrt(dt)), phi) = 0

    where (., .) is the mesh-averaged inner product (the H product divided by
    h^d) and <A y, phi> is evaluated through the bilinear form. ``test_fns``
    is a count (random hat-function combinations with unit sup norm) or an
    explicit (count, n) array.
    """
    lat, ops = problem.lattice, problem.operators
    n = problem.dim
    if y.dim != n or z.dim != n or u.dim != problem.control_dim:
        raise MalformedInput("process dimensions do not match the mesh")
    if isinstance(test_fns, (int, np.integer)):
        rng = np.random.default_rng(seed)
        phis = rng.uniform(-1, 1, (int(test_fns), n))
        phis /= np.abs(phis).max(axis=1, keepdims=True)
    else:
        phis = np.atleast_2d(np.asarray(test_fns, dtype=float))
        if phis.shape[1] != n:
            raise MalformedInput("test functions have the wrong length")
    dt = lat.grid.dt
    worst = 0.0
    for i in range(lat.steps):
        yi, nxt = y.level(i), y.level(i + 1)
        Ay = ops.apply_level("A", i, yi)
        F = (ops.apply_level("B", i, z.level(i)) + ops.apply_level("D", i, u.level(i))
             + ops.G(i))
        eq = (yi - lat.expect_next(nxt)) / dt + Ay + F
        zeq = z.level(i) - lat.martingale(nxt)
        worst = max(worst, float(np.abs(eq @ phis.T).max()), float(np.abs(zeq @ phis.T).max()))
    return worst


def heat_decay_reference(mesh_n, horizon, steps=None, space_dim=1):
    """y(0, x) for a = 1/2, zero lower-order terms and xi = prod sin(pi x_i).

    With ``steps`` the implicit-Euler amplification (1 + mu dt)^-N replaces the
    exact factor exp(-mu T), mu = d pi^2 / 2: the result is then exact in time
    for the discrete scheme and only the spatial error remains.
    """
    prob = ParabolicProblem(space_dim, mesh_n)
    mu = space_dim * np.pi ** 2 / 2
    if steps is None:
        amp = np.exp(-mu * horizon)
    else:
        amp = (1.0 + mu * horizon / steps) ** (-steps)
    return amp * np.prod(np.sin(np.pi * prob.points()), axis=1)


def relative_l2_error(values, reference, space_dim=1):
    return float(np.linalg.norm(values - reference) / np.linalg.norm(reference))
