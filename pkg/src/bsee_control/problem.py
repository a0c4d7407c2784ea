"""ControlProblem: operators + cost model + minimiser + lattice, with level caches."""

import numpy as np

from .gelfand import EvolutionCoefficients, MalformedInput, build_adjoints


class SolverError(RuntimeError):
    """Numerical failure inside a solver (singular step matrix, divergence)."""

    def __init__(self, msg, **diagnostics):
        super().__init__(msg)
        self.diagnostics = diagnostics


class LevelOperators:
    """Per-level operator values and step resolvents for one (coefficients, lattice) pair.

    Level getters return per-node stacks; the ``apply_*`` helpers take the
    cheaper single-matrix route whenever a field does not depend on the path.
    """

    COND_LIMIT = 1e13

    def __init__(self, coeffs, lattice):
        if not coeffs.has_adjoints:
            coeffs = build_adjoints(coeffs)
        self.coeffs = coeffs
        self.lattice = lattice
        self.n = coeffs.dim
        self.m = coeffs.control_dim
        self._res = {}
        self.b_zero = coeffs.B.is_zero(lattice)

    def A(self, i):
        return self.coeffs.A.at_level(self.lattice, i)

    def B(self, i):
        return self.coeffs.B.at_level(self.lattice, i)

    def D(self, i):
        return self.coeffs.D.at_level(self.lattice, i)

    def G(self, i):
        return self.coeffs.G.at_level(self.lattice, i)

    def Astar(self, i):
        return self.coeffs.adjoint_A.at_level(self.lattice, i)

    def Bstar(self, i):
        return self.coeffs.adjoint_B.at_level(self.lattice, i)

    def Dstar(self, i):
        return self.coeffs.adjoint_D.at_level(self.lattice, i)

    def xi(self):
        return self.coeffs.xi.at_level(self.lattice, self.lattice.steps)

    def field(self, name):
        c = self.coeffs
        return dict(A=c.A, B=c.B, D=c.D, G=c.G, Astar=c.adjoint_A, Bstar=c.adjoint_B,
                    Dstar=c.adjoint_D)[name]

    def apply(self, name, rows, x):
        """Row-wise product of the named operator with ``x`` over flat rows."""
        return self.field(name).apply(self.lattice, rows, x)

    def apply_level(self, name, i, x):
        return self.field(name).apply_level(self.lattice, i, x)

    def step_matrix(self, i, adjoint=False):
        """I + dt A_i (or A*_i), one matrix per node."""
        mats = self.Astar(i) if adjoint else self.A(i)
        return np.eye(self.n) + self.lattice.grid.dt * mats

    def _resolvent(self, i, adjoint):
        key = (i, adjoint)
        hit = self._res.get(key)
        if hit is None:
            fld = self.coeffs.adjoint_A if adjoint else self.coeffs.A
            dt = self.lattice.grid.dt
            base = fld.at_level(self.lattice, i) if fld.random else fld.level_value(self.lattice, i)[None]
            mats = np.eye(self.n) + dt * base
            cond = np.linalg.cond(mats)
            if not np.all(np.isfinite(cond)) or np.max(cond) > self.COND_LIMIT:
                raise SolverError(f"step matrix I + dt A is singular at time index {i}",
                                  time_index=i, cond=float(np.max(cond)))
            inv = np.linalg.inv(mats)
            hit = inv if fld.random else inv[0]
            self._res[key] = hit
        return hit

    def resolvent(self, i, adjoint=False):
        """(I + dt A_i)^{-1}, or the adjoint version, one matrix per node."""
        r = self._resolvent(i, adjoint)
        return r if r.ndim == 3 else np.broadcast_to(r, (self.lattice.n_nodes(i),) + r.shape)

    def chain_resolvents(self, adjoint=False):
        """(N, n, n) stack of level resolvents; the chain has one node per level."""
        key = ("chain", adjoint)
        hit = self._res.get(key)
        if hit is None:
            hit = np.stack([np.asarray(self._resolvent(i, adjoint)).reshape(self.n, self.n)
                            for i in range(self.lattice.steps)])
            self._res[key] = hit
        return hit

    def solve_step(self, i, rhs, adjoint=False, per_child=False):
        """Apply the level-i resolvent to ``rhs`` (rows are nodes of level i, or of
        level i+1 when ``per_child``)."""
        r = self._resolvent(i, adjoint)
        if r.ndim == 2:
            return rhs @ r.T
        if per_child:
            r = self.lattice.spread(r)
        return np.einsum("...ij,...j->...i", r, rhs)


class ControlProblem:
    """Everything needed to pose and solve the control problem on one lattice."""

    def __init__(self, coeffs, integrand, minimizer, lattice, coercivity_lambda=0.0,
                 super_parabolic=None, name="problem", meta=None):
        if not isinstance(coeffs, EvolutionCoefficients):
            raise MalformedInput("coeffs must be EvolutionCoefficients")
        if not coeffs.has_adjoints:
            coeffs = build_adjoints(coeffs)
        self.coeffs = coeffs
        self.triple = coeffs.triple
        self.integrand = integrand.bind(lattice)
        self.minimizer = minimizer
        self.lattice = lattice
        self.control_dim = coeffs.control_dim
        self.coercivity_lambda = coercivity_lambda
        self.super_parabolic = super_parabolic
        self.name = name
        self.meta = dict(meta or {})
        self.operators = LevelOperators(coeffs, lattice)
        self._report = None
        if lattice.deterministic:
            self._check_deterministic_mode()

    @property
    def dim(self):
        return self.triple.dim

    def _check_deterministic_mode(self):
        c = self.coeffs
        random = [name for name, f in c.fields().items() if f.random]
        if random or not self.integrand.deterministic:
            raise MalformedInput(f"deterministic mode needs deterministic data; random: {random or ['integrand']}")
        if not self.operators.b_zero:
            raise MalformedInput("deterministic mode needs B == 0")

    def validate(self, probes=20, seed=0):
        from .hamiltonian import validate_assumptions
        self._report = validate_assumptions(self, probes, seed)
        return self._report

    @property
    def report(self):
        if self._report is None:
            self.validate()
        return self._report

    def with_lattice(self, lattice):
        """Same data posed on another lattice (fresh caches)."""
        return ControlProblem(self.coeffs, self.integrand, self.minimizer, lattice,
                              self.coercivity_lambda, self.super_parabolic, self.name, self.meta)
