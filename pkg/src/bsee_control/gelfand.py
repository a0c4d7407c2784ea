"""Finite-dimensional Gelfand triple and time/path-indexed operator families.

Everything lives in Galerkin (nodal) coordinates. An element of V* produced
by an operator such as ``A`` is stored in the same coordinates as the vectors
of H, and the duality pairing is the continuous extension of the H inner
product, ``<f, x> = x^T M_H f``. With the default identity mass matrix this is
the plain dot product.
"""

from dataclasses import dataclass, field, replace
import weakref
from typing import Optional

import numpy as np
import scipy.linalg

SYM_RTOL = 1e-12
EIG_FLOOR = -1e-10


class MalformedInput(ValueError):
    """Raised for dimension mismatches and non-finite data."""


class CoercivityError(ValueError):
    """Raised when no positive coercivity constant exists."""


def _check_vec(x, n, name="x"):
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise MalformedInput(f"{name} has shape {x.shape}, expected ({n},)")
    return x


def _check_spd(mat, name):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise MalformedInput(f"{name} must be square, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise MalformedInput(f"{name} has non-finite entries")
    scale = max(np.abs(mat).max(), 1.0)
    if np.abs(mat - mat.T).max() > SYM_RTOL * scale:
        raise MalformedInput(f"{name} is not symmetric")
    if np.linalg.eigvalsh(mat).min() <= 0:
        raise MalformedInput(f"{name} is not positive definite")
    return mat


@dataclass(frozen=True)
class CoercivityCertificate:
    alpha: float
    lam: float
    bound_c: float


@dataclass(frozen=True, eq=False)
class GelfandTriple:
    """Discrete (V, H, V*) with mass matrix ``mass_h`` and V-norm matrix ``norm_v``."""

    mass_h: np.ndarray
    norm_v: np.ndarray
    coercivity: Optional[CoercivityCertificate] = None

    def __post_init__(self):
        mass_h = _check_spd(self.mass_h, "mass_h")
        norm_v = _check_spd(self.norm_v, "norm_v")
        if mass_h.shape != norm_v.shape:
            raise MalformedInput("mass_h and norm_v differ in size")
        object.__setattr__(self, "mass_h", mass_h)
        object.__setattr__(self, "norm_v", norm_v)

    @classmethod
    def identity(cls, n):
        eye = np.eye(n)
        return cls(eye, eye.copy())

    @property
    def dim(self):
        return self.mass_h.shape[0]

    def embedding_constant(self):
        """Smallest c with x^T M_H x <= c x^T N_V x."""
        return float(scipy.linalg.eigh(self.mass_h, self.norm_v, eigvals_only=True).max())

    def with_certificate(self, cert):
        return replace(self, coercivity=cert)

    # Batched forms below operate on the trailing axis.
    def h_dot(self, x, y):
        return np.einsum("...i,ij,...j->...", x, self.mass_h, y)

    def v_sq(self, x):
        return np.einsum("...i,ij,...j->...", x, self.norm_v, x)

    def h_sq(self, x):
        return self.h_dot(x, x)


def inner_h(x, y, triple):
    n = triple.dim
    return float(_check_vec(x, n) @ triple.mass_h @ _check_vec(y, n, "y"))


def norm_v_sq(x, triple):
    x = _check_vec(x, triple.dim)
    return float(x @ triple.norm_v @ x)


def pairing_form(A, triple):
    """Matrix of the bilinear form (x, y) -> <A x, y>."""
    return triple.mass_h @ A


def certify_coercivity(A_samples, triple, lam):
    """Largest alpha with <A x, x> + lam |x|_H^2 >= alpha |x|_V^2 over all samples.

    Raises CoercivityError if that constant is not positive.
    """
    samples = [np.asarray(a, dtype=float) for a in A_samples]
    if not samples:
        raise MalformedInput("need at least one operator sample")
    n = triple.dim
    alpha = np.inf
    for a in samples:
        if a.shape != (n, n):
            raise MalformedInput(f"operator sample has shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise MalformedInput("operator sample has non-finite entries")
        form = pairing_form(a, triple)
        sym = 0.5 * (form + form.T) + lam * triple.mass_h
        try:
            ev = scipy.linalg.eigh(sym, triple.norm_v, eigvals_only=True)
        except np.linalg.LinAlgError as exc:
            raise MalformedInput("singular norm_v") from exc
        alpha = min(alpha, float(ev.min()))
    if alpha <= 0:
        raise CoercivityError(f"coercivity fails for lambda={lam}: alpha={alpha:.3e}")
    return alpha


def operator_norm_v_to_vstar(A, triple):
    """sup |<A x, y>| / (|x|_V |y|_V)."""
    lv = np.linalg.cholesky(triple.norm_v)
    li = np.linalg.inv(lv)
    return float(np.linalg.norm(li @ pairing_form(A, triple) @ li.T, 2))


class Field:
    """A coefficient that may depend on time and on the Brownian path.

    Path dependence is only through the current value W(t_i) of the node,
    which keeps every coefficient predictable on the lattice by construction.

    Values are looked up by rows of the lattice's flat node array:
    ``values(lattice, rows)`` returns ``(len(rows), *shape)``, a broadcast
    view when the field is constant.
    """

    def __init__(self, func, shape, kind):
        self._func = func
        self.shape = tuple(shape)
        self.kind = kind  # "constant" | "time" | "path"
        self._cache = weakref.WeakKeyDictionary()

    @classmethod
    def constant(cls, value):
        value = np.array(value, dtype=float)
        value.setflags(write=False)
        return cls(lambda t, W: value, value.shape, "constant")

    @classmethod
    def of_time(cls, func, shape):
        return cls(lambda t, W: np.asarray(func(t), dtype=float), shape, "time")

    @classmethod
    def of_path(cls, func, shape):
        """``func(t, W)`` receives an array of W values and returns (len(W), *shape)."""
        return cls(func, shape, "path")

    @property
    def random(self):
        return self.kind == "path"

    def _eval_level(self, lattice, i):
        W = lattice.W(i)
        out = np.asarray(self._func(lattice.grid.t(i), W), dtype=float)
        out = np.broadcast_to(out, (len(W),) + self.shape)
        if not np.all(np.isfinite(out)):
            raise MalformedInput(f"field has non-finite values at level {i}")
        return out

    def _table(self, lattice):
        # constant: one value; time: one per level; path: one per node
        hit = self._cache.get(lattice)
        if hit is None:
            L = lattice.steps + 1
            if self.kind == "constant":
                hit = np.array(self._eval_level(lattice, 0)[0])
            elif self.kind == "time":
                hit = np.stack([self._eval_level(lattice, i)[0] for i in range(L)])
            else:
                hit = np.concatenate([self._eval_level(lattice, i) for i in range(L)])
            self._cache[lattice] = hit
        return hit

    def values(self, lattice, rows):
        tab = self._table(lattice)
        if self.kind == "constant":
            n = len(lattice.level_of_rows(rows))
            return np.broadcast_to(tab, (n,) + self.shape)
        if self.kind == "time":
            return tab[lattice.level_of_rows(rows)]
        return tab[rows]

    def at_level(self, lattice, i):
        if self.kind == "path":
            return self._table(lattice)[lattice.rows(i)]
        return np.broadcast_to(self.level_value(lattice, i), (lattice.n_nodes(i),) + self.shape)

    def level_value(self, lattice, i):
        """Single value on level ``i``; only for fields that do not depend on the path."""
        if self.random:
            raise MalformedInput("path-dependent field has no single level value")
        tab = self._table(lattice)
        return tab if self.kind == "constant" else tab[i]

    def apply(self, lattice, rows, x):
        """Row-wise matrix-vector product ``F(row) @ x[row]``."""
        if self.kind == "constant":
            return x @ self._table(lattice).T
        return np.einsum("...ij,...j->...i", self.values(lattice, rows), x)

    def apply_level(self, lattice, i, x):
        if self.random:
            return np.einsum("...ij,...j->...i", self.at_level(lattice, i), x)
        return x @ self.level_value(lattice, i).T

    def is_zero(self, lattice):
        return not np.any(self._table(lattice))

    def map(self, func, shape=None):
        """Pointwise transform of the field's values (keeps the dependence kind)."""
        inner = self._func
        return Field(lambda t, W: func(np.asarray(inner(t, W), dtype=float)),
                     self.shape if shape is None else shape, self.kind)


def _adjoint_values(values, left_mass, right_mass):
    # X: right space -> left space; X* = right_mass^-1 X^T left_mass
    xt = np.swapaxes(values, -1, -2)
    return np.linalg.solve(right_mass, xt @ left_mass)


def adjoint_field(fld, left_mass, right_mass):
    left_mass = np.asarray(left_mass, dtype=float)
    right_mass = np.asarray(right_mass, dtype=float)
    shape = (fld.shape[1], fld.shape[0])
    return fld.map(lambda v: _adjoint_values(v, left_mass, right_mass), shape)


@dataclass(eq=False)
class EvolutionCoefficients:
    """Operator family of the controlled backward equation.

    ``A`` maps V -> V*, ``B`` maps H -> H, ``D`` maps U -> H, ``G`` is an
    H-valued forcing and ``xi`` the terminal datum (evaluated on the last
    lattice level).
    """

    triple: GelfandTriple
    A: Field
    B: Field
    D: Field
    G: Field
    xi: Field
    mass_u: np.ndarray = None
    b_bound: float = np.inf
    d_bound: float = np.inf
    adjoint_A: Optional[Field] = field(default=None, repr=False)
    adjoint_B: Optional[Field] = field(default=None, repr=False)
    adjoint_D: Optional[Field] = field(default=None, repr=False)

    def __post_init__(self):
        n = self.triple.dim
        if self.A.shape != (n, n) or self.B.shape != (n, n):
            raise MalformedInput("A and B must be n x n")
        if len(self.D.shape) != 2 or self.D.shape[0] != n:
            raise MalformedInput("D must be n x m")
        if self.G.shape != (n,) or self.xi.shape != (n,):
            raise MalformedInput("G and xi must be n-vectors")
        if self.mass_u is None:
            self.mass_u = np.eye(self.D.shape[1])
        self.mass_u = _check_spd(self.mass_u, "mass_u")
        if self.mass_u.shape[0] != self.D.shape[1]:
            raise MalformedInput("mass_u does not match the control dimension")

    @property
    def dim(self):
        return self.triple.dim

    @property
    def control_dim(self):
        return self.D.shape[1]

    @property
    def has_adjoints(self):
        return self.adjoint_A is not None

    def fields(self):
        return dict(A=self.A, B=self.B, D=self.D, G=self.G, xi=self.xi)


def build_adjoints(coeffs):
    """Attach the pairing adjoints A*, B*, D* (returns a new object)."""
    mh = coeffs.triple.mass_h
    try:
        np.linalg.cholesky(mh)
    except np.linalg.LinAlgError as exc:
        raise MalformedInput("singular mass_h") from exc
    return replace(
        coeffs,
        adjoint_A=adjoint_field(coeffs.A, mh, mh),
        adjoint_B=adjoint_field(coeffs.B, mh, mh),
        adjoint_D=adjoint_field(coeffs.D, mh, coeffs.mass_u),
    )


def adjoint_matrix(X, left_mass, right_mass=None):
    """Adjoint of a single matrix X: right -> left with respect to the given masses."""
    right_mass = left_mass if right_mass is None else right_mass
    return _adjoint_values(np.asarray(X, dtype=float), np.asarray(left_mass, float),
                           np.asarray(right_mass, float))


def check_adjoint_pairing(X, Xstar, left_mass, right_mass, probes=10, seed=0):
    """Max relative defect of (X a, b)_left = (a, X* b)_right over random probes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        a = rng.standard_normal(X.shape[1])
        b = rng.standard_normal(X.shape[0])
        lhs = (X @ a) @ left_mass @ b
        rhs = a @ right_mass @ (Xstar @ b)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1.0))
    return worst


def field_samples(fld, lattice):
    """Distinct values of a field over the lattice (one overall, per level or per node)."""
    tab = fld._table(lattice)
    return tab[None] if fld.kind == "constant" else tab


def spectral_bound(fld, lattice):
    """Max spectral norm of a matrix field over all lattice levels."""
    return float(np.linalg.norm(field_samples(fld, lattice), ord=2, axis=(-2, -1)).max())


def certify_family(coeffs, lattice, lam):
    """Coercivity certificate for A over every distinct lattice sample."""
    samples = list(field_samples(coeffs.A, lattice))
    alpha = certify_coercivity(samples, coeffs.triple, lam)
    bound = max(operator_norm_v_to_vstar(a, coeffs.triple) for a in samples)
    return CoercivityCertificate(alpha=alpha, lam=lam, bound_c=bound)

