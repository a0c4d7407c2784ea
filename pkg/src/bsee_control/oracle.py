"""Brute-force reference solver for tiny instances.

Every equation of the discrete Hamiltonian system is written out node by
node and the whole thing is solved at once: by one dense linear solve when
the residual is affine (LQ), otherwise by ``scipy.optimize.root``. None of
the recursive solvers are used, so agreement with them is a real check.

Unknowns, in this order: y on levels 0..N, z on 0..N-1, k on 0..N and
kappa on 0..N-1 (kappa_i is the adjoint value carried across step i).
"""

import numpy as np
import scipy.optimize

from .lattice import AdaptedProcess, TripleProcess

MAX_NODES = 15  # N <= 3 on the tree
MAX_DIM = 2


class OracleError(ValueError):
    pass


class _Layout:
    def __init__(self, lat, n):
        self.lat, self.n = lat, n
        N = lat.steps
        self.sizes = [lat.n_rows(N) * n, lat.n_rows(N - 1) * n, lat.n_rows(N) * n,
                      lat.n_rows(N - 1) * n]
        self.starts = np.concatenate([[0], np.cumsum(self.sizes)])
        self.total = int(self.starts[-1])

    def split(self, x):
        n = self.n
        return [x[self.starts[b]:self.starts[b + 1]].reshape(-1, n) for b in range(4)]


def _node_residuals(problem, lay, x):
    lat, n = lay.lat, lay.n
    N, dt = lat.steps, lat.grid.dt
    c = problem.coeffs
    integ = problem.integrand
    y, z, k, kap = lay.split(x)
    out = []
    xi = c.xi.at_level(lat, N)
    for j in range(lat.n_nodes(N)):
        out.append(y[lat.node_id(N, j)] - xi[j])
    out.append(k[0] + integ.grad_h(y[:1])[0])
    for i in range(N):
        A, B, D, G = (f.at_level(lat, i) for f in (c.A, c.B, c.D, c.G))
        As, Bs, Ds = (f.at_level(lat, i) for f in (c.adjoint_A, c.adjoint_B, c.adjoint_D))
        for j in range(lat.n_nodes(i)):
            r = lat.node_id(i, j)
            kids = [lat.node_id(*ch) for ch in lat.children(i, j)]
            incs = lat.increments
            ynext = [y[q] for q in kids]
            if len(kids) == 2:
                zr = (ynext[0] - ynext[1]) / (2 * np.sqrt(dt))
            else:
                zr = np.zeros(n)
            out.append(z[r] - zr)
            u = problem.minimizer(lat, [r], (Ds[j] @ kap[r])[None])[0]
            ey = sum(ynext) / len(ynext)
            F = B[j] @ z[r] + D[j] @ u + G[j]
            out.append(y[r] + dt * A[j] @ y[r] - ey + dt * F)
            ly = integ.grad_y(lat, [r], y[r][None], z[r][None], u[None])[0]
            lz = integ.grad_z(lat, [r], y[r][None], z[r][None], u[None])[0]
            out.append(kap[r] + dt * As[j] @ kap[r] - k[r] + dt * ly)
            s = Bs[j] @ kap[r] + lz
            for q, dw in zip(kids, incs):
                out.append(k[q] - kap[r] + s * dw)
    return np.concatenate(out)


def brute_force_oracle(problem, max_nodes_total=MAX_NODES, max_dim=MAX_DIM, linear=None):
    """Solve the full discrete Hamiltonian system as one dense system.

    ``linear`` forces the affine (True) or root-finding (False) path; by
    default the affine path is used when the residual passes an affinity
    probe.
    """
    lat = problem.lattice
    n = problem.dim
    if lat.n_rows(lat.steps) > max_nodes_total:
        raise OracleError(f"{lat.n_rows(lat.steps)} lattice nodes exceed the oracle cap of {max_nodes_total}")
    if n > max_dim:
        raise OracleError(f"dimension {n} exceeds the oracle cap of {max_dim}")
    lay = _Layout(lat, n)
    res = lambda x: _node_residuals(problem, lay, x)
    r0 = res(np.zeros(lay.total))
    if r0.size != lay.total:
        raise OracleError("assembled system is not square")
    eye = np.eye(lay.total)
    jac = np.column_stack([res(eye[q]) - r0 for q in range(lay.total)])
    if linear is None:
        rng = np.random.default_rng(0)
        probe = rng.standard_normal(lay.total)
        linear = np.allclose(res(probe), r0 + jac @ probe, rtol=1e-10, atol=1e-10)
    if linear:
        if np.linalg.cond(jac) > 1e14:
            raise OracleError("assembled system is singular")
        x = np.linalg.solve(jac, -r0)
    else:
        x0 = np.linalg.lstsq(jac, -r0, rcond=None)[0]
        sol = scipy.optimize.root(res, x0, method="hybr", tol=1e-14)
        if not sol.success or np.abs(res(sol.x)).max() > 1e-10:
            raise OracleError(f"root finding failed: {sol.message}")
        x = sol.x
    y, z, k, _ = lay.split(x)
    N = lat.steps
    return TripleProcess(AdaptedProcess(lat, k.copy()), AdaptedProcess(lat, y.copy()),
                         AdaptedProcess(lat, z.copy(), N - 1))


def oracle_residual(problem, lam):
    """Sup of the assembled node equations at ``lam`` (kappa recomputed as E_i[k_{i+1}])."""
    lat = problem.lattice
    lay = _Layout(lat, problem.dim)
    kap = lat.expect_next(lam.k.data[1:])
    x = np.concatenate([lam.y.data.ravel(), lam.z.data.ravel(), lam.k.data.ravel(), kap.ravel()])
    return float(np.abs(_node_residuals(problem, lay, x)).max())
