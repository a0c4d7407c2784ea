"""Front-end for the abstract linear-quadratic problem (V = H = V* = R^n)."""

import numpy as np

from .gelfand import EvolutionCoefficients, Field, GelfandTriple
from .hamiltonian import PerturbedQuadraticIntegrand, QuadraticIntegrand, lq_minimizer
from .lattice import BrownianLattice, TimeGrid
from .problem import ControlProblem


def as_field(value, shape):
    """Scalars become multiples of the identity (matrices) or constant vectors."""
    if isinstance(value, Field):
        if value.shape != tuple(shape):
            raise ValueError(f"field has shape {value.shape}, expected {shape}")
        return value
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        if len(shape) == 2:
            if shape[0] == shape[1]:
                arr = arr * np.eye(shape[0])
            else:
                arr = np.full(shape, float(arr))
        else:
            arr = np.full(shape, float(arr))
    if arr.shape != tuple(shape):
        raise ValueError(f"value has shape {arr.shape}, expected {shape}")
    return Field.constant(arr)


def lq_problem(n=1, m=None, A=0.0, B=0.0, D=1.0, G=0.0, xi=1.0, M=1.0, Q=1.0, N=1.0, h=1.0,
               horizon=1.0, steps=16, mode="deterministic", perturbation=0.0,
               monotonicity_c=None, b_bound=None, d_bound=None, coercivity_lambda=0.0,
               name="lq"):
    """Assemble an LQ ControlProblem.

    Every coefficient may be a scalar, an array or a :class:`Field`; ``xi``
    is evaluated on the terminal level (a path-dependent Field gives random
    terminal data).
    """
    m = n if m is None else m
    triple = GelfandTriple.identity(n)
    grid = TimeGrid(horizon, steps)
    lattice = BrownianLattice(grid, 1 if mode == "deterministic" else 2)
    coeffs = EvolutionCoefficients(
        triple, as_field(A, (n, n)), as_field(B, (n, n)), as_field(D, (n, m)),
        as_field(G, (n,)), as_field(xi, (n,)),
        b_bound=np.inf if b_bound is None else b_bound,
        d_bound=np.inf if d_bound is None else d_bound)
    hmat = np.asarray(h, dtype=float)
    hmat = hmat * np.eye(n) if hmat.ndim == 0 else hmat
    Mf, Qf, Nf = as_field(M, (n, n)), as_field(Q, (n, n)), as_field(N, (m, m))
    if perturbation:
        integ = PerturbedQuadraticIntegrand(triple, Mf, Qf, Nf, hmat, c=perturbation,
                                            monotonicity_c=monotonicity_c)
    else:
        integ = QuadraticIntegrand(triple, Mf, Qf, Nf, hmat, monotonicity_c=monotonicity_c)
    prob = ControlProblem(coeffs, integ, lq_minimizer(Nf), lattice, coercivity_lambda, name=name)
    if b_bound is None or d_bound is None:
        from .gelfand import spectral_bound
        if b_bound is None:
            coeffs.b_bound = spectral_bound(coeffs.B, lattice)
        if d_bound is None:
            coeffs.d_bound = spectral_bound(coeffs.D, lattice)
    prob.minimizer.lipschitz_c = _gamma_lipschitz(prob)
    return prob


def _gamma_lipschitz(prob):
    """sup |D N^{-1} D*| / 2 over the lattice: Lipschitz constant of k -> D gamma(D* k)."""
    lat, c = prob.lattice, prob.coeffs
    fields = (c.D, prob.integrand.N, c.adjoint_D)
    if any(f.random for f in fields):
        levels = [(f.at_level(lat, i) for f in fields) for i in range(lat.steps + 1)]
    else:
        levels = [(f.level_value(lat, i)[None] for f in fields) for i in range(lat.steps + 1)]
    worst = 0.0
    for D, N, Ds in levels:
        mats = D @ np.linalg.solve(N, Ds)
        worst = max(worst, 0.5 * float(np.linalg.norm(mats, 2, axis=(-2, -1)).max()))
    # V-norm of k dominates its H-norm up to the embedding constant
    return worst * np.sqrt(prob.triple.embedding_constant()) + 1e-12


def closed_form_lq(c=1.0, horizon=1.0):
    """Analytic solution of the scalar unit problem (A=B=G=0, D=M=Q=N=h=1, xi=c).

    y'' = y with y'(0) = y(0), y(T) = c gives y = c e^{t-T}, u = y, k = -2y,
    and optimal cost c^2.
    """
    return dict(y=lambda t: c * np.exp(t - horizon), u=lambda t: c * np.exp(t - horizon),
                k=lambda t: -2 * c * np.exp(t - horizon), cost=c * c)
