"""Running/terminal cost models, the Hamiltonian and its minimiser map.

Integrand methods are vectorised over rows of the lattice's flat node array:
``rows`` is a slice or index array, ``y`` and ``z`` have shape (rows, n) and
``u`` has shape (rows, m). Gradients are Riesz representatives in H (for y,
z) and in U (for u), so that ``(l_y, v)_H`` is the directional derivative of
``l`` along ``v``.
"""

from dataclasses import dataclass, field

from typing import Optional

import numpy as np
import scipy.linalg

from .gelfand import Field, MalformedInput, adjoint_matrix, field_samples

MARGIN_TOL = 1e-8


def _mv(mats, vecs):
    return np.einsum("...ij,...j->...i", mats, vecs)


def node_rows(lat, i, j):
    return [lat.node_id(i, j)]


class IntegrandModel:
    """Running cost ``l(t, y, z, u)`` and initial-time cost ``h(y(0))``.

    Subclasses implement the vectorised methods below. ``monotonicity_c``
    is the constant of the strong-monotonicity condition on (l_y, l_z) and
    h_y; ``growth_c`` bounds the quadratic growth of l and h.
    """

    monotonicity_c = 1.0
    growth_c = 1.0

    def l(self, lat, rows, y, z, u):
        raise NotImplementedError

    def grad_y(self, lat, rows, y, z, u):
        raise NotImplementedError

    def grad_z(self, lat, rows, y, z, u):
        raise NotImplementedError

    def grad_u(self, lat, rows, y, z, u):
        raise NotImplementedError

    def h(self, y):
        raise NotImplementedError

    def grad_h(self, y):
        raise NotImplementedError

    @property
    def deterministic(self):
        return True

    def bind(self, lattice):
        return self


def _plus_adjoint(fld, mass):
    return fld.map(lambda v: v + adjoint_matrix(v, mass))


class QuadraticIntegrand(IntegrandModel):
    """l = (M y, y)_H + (Q z, z)_H + (N u, u)_U,  h(y) = (h y, y)_H."""

    def __init__(self, triple, M, Q, N, hmat, mass_u=None, monotonicity_c=None, growth_c=None):
        self.triple = triple
        self.mass_h = triple.mass_h
        self.M, self.Q, self.N = (f if isinstance(f, Field) else Field.constant(f) for f in (M, Q, N))
        self.hmat = np.asarray(hmat, dtype=float)
        self.mass_u = np.eye(self.N.shape[0]) if mass_u is None else np.asarray(mass_u, float)
        self._declared = (monotonicity_c, growth_c)
        self.monotonicity_c = monotonicity_c
        self.growth_c = growth_c
        # gradients of the quadratic forms: (X + X*) x
        self._Ms = _plus_adjoint(self.M, self.mass_h)
        self._Qs = _plus_adjoint(self.Q, self.mass_h)
        self._Ns = _plus_adjoint(self.N, self.mass_u)
        self._hs = self.hmat + adjoint_matrix(self.hmat, self.mass_h)

    # lower bound of the y-curvature of any non-quadratic add-on, in H
    _curvature_floor = 0.0
    _extra_growth = 0.0

    def bind(self, lattice):
        """Compute the monotonicity and growth constants over the lattice samples."""
        mono_dec, growth_dec = self._declared
        tri = self.triple
        mh, nv = tri.mass_h, tri.norm_v
        mono, grow = np.inf, 0.0

        def gen_eigs(form, norm):
            form = 0.5 * (form + form.T)
            return scipy.linalg.eigh(form, norm, eigvals_only=True)

        for M in field_samples(self.M, lattice):
            ev = gen_eigs(mh @ (M + adjoint_matrix(M, mh)) + self._curvature_floor * mh, nv)
            mono = min(mono, ev.min())
            grow = max(grow, np.abs(gen_eigs(mh @ M, nv)).max())
        for Q in field_samples(self.Q, lattice):
            mono = min(mono, gen_eigs(mh @ (Q + adjoint_matrix(Q, mh)), mh).min())
            grow = max(grow, np.abs(gen_eigs(mh @ Q, mh)).max())
        for N in field_samples(self.N, lattice):
            grow = max(grow, np.abs(gen_eigs(self.mass_u @ N, self.mass_u)).max())
        hm = self.hmat
        mono = min(mono, gen_eigs(mh @ (hm + adjoint_matrix(hm, mh)), nv).min())
        grow = max(grow, np.abs(gen_eigs(mh @ hm, nv)).max())
        self.monotonicity_c = float(mono) if mono_dec is None else mono_dec
        # gradient bound: |(X + X*) x| <= 2 |X| |x|, so 2x the form bound covers both
        self.growth_c = 2.0 * float(grow) + self._extra_growth * tri.embedding_constant() + 1e-12 \
            if growth_dec is None else growth_dec
        return self

    @property
    def deterministic(self):
        return not (self.M.random or self.Q.random or self.N.random)

    def l(self, lat, rows, y, z, u):
        mh = self.mass_h
        return (np.einsum("ri,ij,rj->r", self.M.apply(lat, rows, y), mh, y)
                + np.einsum("ri,ij,rj->r", self.Q.apply(lat, rows, z), mh, z)
                + np.einsum("ri,ij,rj->r", self.N.apply(lat, rows, u), self.mass_u, u))

    def grad_y(self, lat, rows, y, z, u):
        return self._Ms.apply(lat, rows, y)

    def grad_z(self, lat, rows, y, z, u):
        return self._Qs.apply(lat, rows, z)

    def grad_u(self, lat, rows, y, z, u):
        return self._Ns.apply(lat, rows, u)

    def h(self, y):
        return np.einsum("...i,ij,...j->...", y @ self.hmat.T, self.mass_h, y)

    def grad_h(self, y):
        return y @ self._hs.T


class PerturbedQuadraticIntegrand(QuadraticIntegrand):
    """Quadratic integrand plus ``c * sum_j w_j log(1 + y_j^2)``.

    ``w`` is the diagonal of the (diagonal) mass matrix, so the extra term is
    the quadrature of ``c log(1 + y^2)``. Its second derivative is bounded
    below by ``-c/4``, which is subtracted from the monotonicity constant.
    """

    def __init__(self, *args, c=0.1, **kwargs):
        super().__init__(*args, **kwargs)
        mh = self.mass_h
        if np.abs(mh - np.diag(np.diag(mh))).max() > 0:
            raise MalformedInput("log perturbation needs a diagonal mass matrix")
        self.c = float(c)
        self.w = np.diag(mh).copy()
        # d/dy [2 c y / (1 + y^2)] >= -c/4 and c log(1 + y^2) <= c y^2
        self._curvature_floor = -0.25 * self.c
        self._extra_growth = 2.0 * self.c

    def l(self, lat, rows, y, z, u):
        return super().l(lat, rows, y, z, u) + self.c * np.log1p(y ** 2) @ self.w

    def grad_y(self, lat, rows, y, z, u):
        # H-gradient of sum_j w_j c log(1+y_j^2) is 2 c y / (1 + y^2) for diagonal mass
        return super().grad_y(lat, rows, y, z, u) + 2.0 * self.c * y / (1.0 + y ** 2)


class CallbackIntegrand(IntegrandModel):
    """Integrand from user callables ``f(lat, rows, y, z, u)`` and ``h(y)``."""

    def __init__(self, l, grad_y, grad_z, grad_u, h, grad_h, monotonicity_c, growth_c=1.0,
                 deterministic=True):
        self._l, self._gy, self._gz, self._gu = l, grad_y, grad_z, grad_u
        self._h, self._gh = h, grad_h
        self.monotonicity_c = monotonicity_c
        self.growth_c = growth_c
        self._det = deterministic

    @property
    def deterministic(self):
        return self._det

    def l(self, lat, rows, y, z, u):
        return self._l(lat, rows, y, z, u)

    def grad_y(self, lat, rows, y, z, u):
        return self._gy(lat, rows, y, z, u)

    def grad_z(self, lat, rows, y, z, u):
        return self._gz(lat, rows, y, z, u)

    def grad_u(self, lat, rows, y, z, u):
        return self._gu(lat, rows, y, z, u)

    def h(self, y):
        return self._h(y)

    def grad_h(self, y):
        return self._gh(y)


def _check_pd(N):
    sym = 0.5 * (N + np.swapaxes(N, -1, -2))
    ev = np.linalg.eigvalsh(sym)
    if np.any(ev <= 0):
        bad = np.argwhere(np.atleast_1d(ev.min(axis=-1)) <= 0)
        raise MalformedInput(f"N is not positive definite (first bad node index {bad[0].tolist()}, "
                             f"min eigenvalue {float(ev.min()):.6g})")


def lq_gamma(v, N):
    """Minimiser map -1/2 N^{-1} v (vectorised over leading axes of v and N)."""
    N = np.asarray(N, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_pd(N)
    return -0.5 * np.linalg.solve(N, v[..., None])[..., 0]


@dataclass
class MinimizerMap:
    """gamma(lat, rows, v) -> argmin_u of (u, v)_U + l(., u)."""

    gamma: object
    lipschitz_c: float = 1.0

    def __call__(self, lat, rows, v):
        return self.gamma(lat, rows, v)


def _gain(v):
    _check_pd(v)
    return -0.5 * np.linalg.inv(v)


def lq_minimizer(N_field):
    """gamma for l containing (N u, u)_U with N self-adjoint in U."""
    gain = N_field.map(_gain)

    def gamma(lat, rows, v):
        return gain.apply(lat, rows, v)

    return MinimizerMap(gamma)


# Hamiltonian ----------------------------------------------------------------

def rows_hamiltonian(problem, rows, y, z, u, k):
    """H = (B z + D u, k)_H + l over the given rows."""
    ops = problem.operators
    drive = ops.apply("B", rows, z) + ops.apply("D", rows, u)
    return problem.triple.h_dot(drive, k) + problem.integrand.l(problem.lattice, rows, y, z, u)


def rows_hamiltonian_grad_u(problem, rows, y, z, u, k):
    """H_u = D* k + l_u (Riesz representative in U)."""
    return (problem.operators.apply("Dstar", rows, k)
            + problem.integrand.grad_u(problem.lattice, rows, y, z, u))


def _node_args(problem, y, z, u, k):
    n, m = problem.dim, problem.control_dim
    out = []
    for name, v, d in (("y", y, n), ("z", z, n), ("u", u, m), ("k", k, n)):
        v = np.asarray(v, dtype=float)
        if v.shape != (d,):
            raise MalformedInput(f"{name} has shape {v.shape}, expected ({d},)")
        out.append(v[None, :])
    return out


def hamiltonian_value(problem, i, j, y, z, u, k):
    y, z, u, k = _node_args(problem, y, z, u, k)
    return float(rows_hamiltonian(problem, node_rows(problem.lattice, i, j), y, z, u, k)[0])


def hamiltonian_grad_u(problem, i, j, y, z, u, k):
    y, z, u, k = _node_args(problem, y, z, u, k)
    return rows_hamiltonian_grad_u(problem, node_rows(problem.lattice, i, j), y, z, u, k)[0]


def optimal_control(problem, rows, k):
    """u = gamma(D* k) over the given rows."""
    v = problem.operators.apply("Dstar", rows, k)
    return problem.minimizer(problem.lattice, rows, v)


# Assumption validation -------------------------------------------------------

@dataclass
class CheckRecord:
    name: str
    passed: bool
    margin: float
    witness: dict = field(default_factory=dict)
    detail: str = ""
    value: Optional[float] = None

    def as_dict(self):
        return dict(name=self.name, passed=bool(self.passed), margin=float(self.margin),
                    witness=self.witness, detail=self.detail,
                    value=None if self.value is None else float(self.value))


@dataclass
class ValidationReport:
    records: list

    @property
    def passed(self):
        return all(r.passed for r in self.records)

    def __getitem__(self, name):
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def failed(self):
        return [r.name for r in self.records if not r.passed]

    def as_dict(self):
        return [r.as_dict() for r in self.records]


def _sample_nodes(lat, rng, probes):
    out = []
    for _ in range(probes):
        i = int(rng.integers(0, lat.steps))
        j = int(rng.integers(0, lat.n_nodes(i)))
        out.append((i, j))
    return out


def _fd_check(problem, rng, nodes, eps=1e-6):
    """Worst relative mismatch between directional differences of l, h and their gradients."""
    lat, integ, tri = problem.lattice, problem.integrand, problem.triple
    n, m = problem.dim, problem.control_dim
    worst, witness = 0.0, {}
    for (i, j) in nodes:
        r = node_rows(lat, i, j)
        y, z, dy, dz = (rng.standard_normal((1, n)) for _ in range(4))
        u, du = rng.standard_normal((1, m)), rng.standard_normal((1, m))
        f = lambda s: integ.l(lat, r, y + s * dy, z + s * dz, u + s * du)[0]
        fd = (f(eps) - f(-eps)) / (2 * eps)
        an = (tri.h_dot(integ.grad_y(lat, r, y, z, u), dy)
              + tri.h_dot(integ.grad_z(lat, r, y, z, u), dz))[0]
        an += float(np.einsum("i,ij,j->", integ.grad_u(lat, r, y, z, u)[0],
                              problem.coeffs.mass_u, du[0]))
        err = abs(fd - an) / max(abs(an), 1.0)
        if err > worst:
            worst, witness = err, dict(level=i, node=j, fd=float(fd), analytic=float(an))
        g = lambda s: integ.h(y + s * dy)[0]
        fd = (g(eps) - g(-eps)) / (2 * eps)
        an = tri.h_dot(integ.grad_h(y), dy)[0]
        err = abs(fd - an) / max(abs(an), 1.0)
        if err > worst:
            worst, witness = err, dict(level=0, node=0, fd=float(fd), analytic=float(an), part="h")
    return worst, witness


def validate_assumptions(problem, probes=20, seed=0):
    """Sampled falsification of the standing assumptions, with witnesses."""
    rng = np.random.default_rng(seed)
    lat, tri, integ = problem.lattice, problem.triple, problem.integrand
    coeffs, ops = problem.coeffs, problem.operators
    n, m = problem.dim, problem.control_dim
    recs = []
    nodes = _sample_nodes(lat, rng, probes)

    # A.1: bounded B, D
    from .gelfand import spectral_bound
    worst_b = spectral_bound(coeffs.B, lat)
    worst_d = spectral_bound(coeffs.D, lat)
    ok = worst_b <= coeffs.b_bound and worst_d <= coeffs.d_bound
    recs.append(CheckRecord("A1_bounded_B_D", ok,
                            float(min(coeffs.b_bound - worst_b, coeffs.d_bound - worst_d)),
                            {} if ok else dict(norm_B=worst_b, norm_D=worst_d)))

    # A.2: coercivity certificate
    from .gelfand import certify_family, CoercivityError
    lam = problem.coercivity_lambda
    try:
        cert = certify_family(coeffs, lat, lam)
        recs.append(CheckRecord("A2_coercivity", True, cert.alpha,
                                detail=f"alpha={cert.alpha:.6g} lambda={lam:.6g} C={cert.bound_c:.6g}"))
    except CoercivityError as exc:
        recs.append(CheckRecord("A2_coercivity", False, -1.0, dict(lam=lam), str(exc)))
    if problem.super_parabolic is not None:
        recs.append(problem.super_parabolic)

    # A.3: gradient consistency + growth
    fd_err, fd_wit = _fd_check(problem, rng, nodes)
    recs.append(CheckRecord("A3_gradient_consistency", fd_err <= 1e-6, 1e-6 - fd_err,
                            fd_wit if fd_err > 1e-6 else {}))
    gc = integ.growth_c
    worst_growth, gwit = np.inf, {}
    for (i, j) in nodes:
        r = node_rows(lat, i, j)
        y, z = rng.standard_normal((1, n)) * 3, rng.standard_normal((1, n)) * 3
        u = rng.standard_normal((1, m)) * 3
        size = 1 + tri.v_sq(y)[0] + tri.h_sq(z)[0] + float(u[0] @ coeffs.mass_u @ u[0])
        marg = gc * size - abs(integ.l(lat, r, y, z, u)[0])
        if marg < worst_growth:
            worst_growth, gwit = marg, dict(level=i, node=j)
        marg = gc * (1 + tri.v_sq(y)[0]) - abs(integ.h(y)[0])
        if marg < worst_growth:
            worst_growth, gwit = marg, dict(level=0, node=0, part="h")
    recs.append(CheckRecord("A3_growth", worst_growth >= -MARGIN_TOL, worst_growth,
                            gwit if worst_growth < -MARGIN_TOL else {}))

    # A.4: monotonicity of (l_y, l_z) and h_y
    C = integ.monotonicity_c
    # with no positive constant, fall back to plain monotonicity so a witness can be shown
    C_check = C if C > 0 else 0.0
    worst_mono, mwit = np.inf, {}
    for (i, j) in nodes:
        r = node_rows(lat, i, j)
        y1, y2, z1, z2 = (rng.standard_normal((1, n)) * 2 for _ in range(4))
        u = rng.standard_normal((1, m))
        dy, dz = y1 - y2, z1 - z2
        lhs = (tri.h_dot(integ.grad_y(lat, r, y1, z1, u) - integ.grad_y(lat, r, y2, z2, u), dy)
               + tri.h_dot(integ.grad_z(lat, r, y1, z1, u) - integ.grad_z(lat, r, y2, z2, u), dz))[0]
        marg = lhs - C_check * (tri.v_sq(dy)[0] + tri.h_sq(dz)[0])
        if marg < worst_mono:
            worst_mono, mwit = marg, dict(level=i, node=j, y1=y1[0].tolist(), y2=y2[0].tolist())
        lhs = tri.h_dot(integ.grad_h(y1) - integ.grad_h(y2), dy)[0]
        marg = lhs - C_check * tri.v_sq(dy)[0]
        if marg < worst_mono:
            worst_mono, mwit = marg, dict(level=0, node=0, part="h", y1=y1[0].tolist(), y2=y2[0].tolist())
    recs.append(CheckRecord("A4_monotonicity", C > 0 and worst_mono >= -MARGIN_TOL, worst_mono,
                            mwit if worst_mono < -MARGIN_TOL else {}, detail=f"C={C:.6g}"))

    # A.5: gamma minimises H, and D gamma(D* .) is monotone decreasing and Lipschitz
    lip = problem.minimizer.lipschitz_c
    worst_min, worst_dec, worst_lip, wit5 = np.inf, np.inf, np.inf, {}
    try:
        for (i, j) in nodes:
            r = node_rows(lat, i, j)
            k1, k2 = rng.standard_normal((1, n)), rng.standard_normal((1, n))
            y, z = rng.standard_normal((1, n)), rng.standard_normal((1, n))
            g1 = optimal_control(problem, r, k1)
            g2 = optimal_control(problem, r, k2)
            diff = ops.apply("D", r, g1) - ops.apply("D", r, g2)
            dec = -tri.h_dot(diff, k1 - k2)[0]
            lipm = lip * np.sqrt(tri.v_sq(k1 - k2)[0]) - np.sqrt(tri.h_sq(diff)[0])
            h0 = rows_hamiltonian(problem, r, y, z, g1, k1)[0]
            for _ in range(5):
                v = rng.standard_normal((1, m))
                marg = rows_hamiltonian(problem, r, y, z, g1 + v, k1)[0] - h0
                if marg < worst_min:
                    worst_min = marg
                    if marg < -MARGIN_TOL:
                        wit5 = dict(level=i, node=j, k=k1[0].tolist(), direction=v[0].tolist())
            if dec < worst_dec:
                worst_dec = dec
                if dec < -1e-10:
                    wit5 = dict(level=i, node=j, k1=k1[0].tolist(), k2=k2[0].tolist())
            worst_lip = min(worst_lip, lipm)
        ok = worst_min >= -MARGIN_TOL and worst_dec >= -1e-10 and worst_lip >= -1e-10
        recs.append(CheckRecord("A5_minimizer", ok, float(min(worst_min, worst_dec, worst_lip)),
                                wit5 if not ok else {},
                                detail=f"min-gap={worst_min:.3e} monotone={worst_dec:.3e} lipschitz={worst_lip:.3e}"))
    except MalformedInput as exc:
        recs.append(CheckRecord("A5_minimizer", False, -np.inf, dict(error=str(exc)), str(exc)))

    # Positivity of the quadratic weights (LQ front-end)
    if isinstance(integ, QuadraticIntegrand):
        worst_pos, pwit = np.inf, {}
        for name, fld in (("M", integ.M), ("Q", integ.Q), ("N", integ.N)):
            vals = field_samples(fld, lat)
            sym = 0.5 * (vals + np.swapaxes(vals, -1, -2))
            ev = np.linalg.eigvalsh(sym).min(axis=-1)
            j = int(np.argmin(ev))
            if ev[j] < worst_pos:
                worst_pos, pwit = float(ev[j]), dict(weight=name, sample=j, kind=fld.kind)
        ev_h = float(np.linalg.eigvalsh(0.5 * (integ.hmat + integ.hmat.T)).min())
        if ev_h < worst_pos:
            worst_pos, pwit = ev_h, dict(weight="h")
        recs.append(CheckRecord("LQ_positivity", worst_pos > 0, worst_pos,
                                pwit if worst_pos <= 0 else {}))
    return ValidationReport(recs)
