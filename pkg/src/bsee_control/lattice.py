"""Time grid, binary Brownian event tree and adapted processes on it.

Level ``i`` of the tree holds ``2**i`` nodes; node ``j`` has children
``2j`` (increment +sqrt(dt)) and ``2j + 1`` (increment -sqrt(dt)). The
deterministic lattice is the one-node-per-level chain with W = 0.

Nodes are numbered level by level, so node ``(i, j)`` is row
``offset(i) + j`` of a flat array and a process covering levels ``0..L`` is
one ``(rows, d)`` array. Expectations fold sibling pairs level by level,
which makes the tower property ``E[E_i[X_{i+1}]] = E[X_{i+1}]`` hold bit for
bit.
"""

from dataclasses import dataclass

import numpy as np

TREE_CAP = 16
CHAIN_CAP = 4096


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise LatticeError("horizon must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise LatticeError("steps must be a positive integer")

    @property
    def dt(self):
        return self.horizon / self.steps

    def t(self, i):
        return i * self.dt

    @property
    def times(self):
        return np.arange(self.steps + 1) * self.dt


class BrownianLattice:
    """Non-recombining lattice for a one-dimensional Brownian motion."""

    def __init__(self, grid, branching=2, cap=None):
        if branching not in (1, 2):
            raise LatticeError("branching must be 1 (deterministic) or 2 (tree)")
        cap = (TREE_CAP if branching == 2 else CHAIN_CAP) if cap is None else cap
        if grid.steps > cap:
            mode = "tree" if branching == 2 else "deterministic"
            raise LatticeError(f"N={grid.steps} exceeds the {mode}-mode cap of {cap} steps")
        self.grid = grid
        self.branching = branching
        sq = np.sqrt(grid.dt)
        self.increments = np.array([sq, -sq]) if branching == 2 else np.zeros(1)
        counts = [branching ** i for i in range(grid.steps + 1)]
        self._offsets = np.concatenate([[0], np.cumsum(counts)])
        levels = [np.zeros(1)]
        for _ in range(grid.steps):
            levels.append((levels[-1][:, None] + self.increments[None, :]).ravel())
        self._w_all = np.concatenate(levels)
        self._t_all = np.repeat(grid.times, counts)
        self._level_all = np.repeat(np.arange(grid.steps + 1), counts)

    @classmethod
    def tree(cls, grid, cap=TREE_CAP):
        return cls(grid, 2, cap)

    @property
    def deterministic(self):
        return self.branching == 1

    @property
    def steps(self):
        return self.grid.steps

    def n_nodes(self, i):
        return self.branching ** i

    def offset(self, i):
        return int(self._offsets[i])

    def rows(self, i):
        """Slice of the flat node array holding level ``i``."""
        return slice(int(self._offsets[i]), int(self._offsets[i + 1]))

    def prefix(self, last):
        """Slice holding levels ``0..last``."""
        return slice(0, int(self._offsets[last + 1]))

    def n_rows(self, last):
        return int(self._offsets[last + 1])

    def prob(self, i):
        return 0.5 ** i if self.branching == 2 else 1.0

    def W(self, i):
        return self._w_all[self.rows(i)]

    def W_rows(self, rows):
        return self._w_all[rows]

    def t_rows(self, rows):
        return self._t_all[rows]

    def level_of_rows(self, rows):
        return self._level_all[rows]

    def children(self, i, j):
        if i >= self.steps:
            raise LatticeError(f"node ({i}, {j}) is a leaf")
        b = self.branching
        return [(i + 1, b * j + c) for c in range(b)]

    def parent(self, i, j):
        if i == 0:
            raise LatticeError("the root has no parent")
        return (i - 1, j // self.branching)

    def node_id(self, i, j):
        return self.offset(i) + j

    def delta_w(self, i):
        """Increment leading into each node of level ``i`` (i >= 1)."""
        return np.tile(self.increments, self.n_nodes(i - 1))

    # Level-wise primitives; arrays have the node axis first.
    def expect_next(self, values_next):
        v = np.asarray(values_next)
        if self.branching == 1:
            return v
        v = v.reshape((v.shape[0] // 2, 2) + v.shape[1:])
        return (v[:, 0] + v[:, 1]) * 0.5

    def martingale(self, values_next):
        v = np.asarray(values_next)
        if self.branching == 1:
            return np.zeros_like(v)
        v = v.reshape((v.shape[0] // 2, 2) + v.shape[1:])
        return (v[:, 0] - v[:, 1]) / (2.0 * np.sqrt(self.grid.dt))

    def spread(self, values):
        """Repeat parent values onto the children (node axis first)."""
        if self.branching == 1:
            return values
        return np.repeat(values, 2, axis=0)

    def mean_level(self, scalars):
        """E of a per-node array at one level, by pairwise folding."""
        v = np.asarray(scalars, dtype=float)
        while v.shape[0] > 1:
            v = self.expect_next(v)
        return v[0]

    def level_means(self, data, last):
        """E at every level 0..last of a flat per-node array; returns (last+1, ...)."""
        return np.array([self.mean_level(data[self.rows(i)]) for i in range(last + 1)])


def make_deterministic_lattice(grid):
    return BrownianLattice(grid, branching=1)


class AdaptedProcess:
    """One d-vector per lattice node on levels ``0..last``, stored flat."""

    def __init__(self, lattice, data, last=None):
        last = lattice.steps if last is None else last
        data = np.asarray(data, dtype=float)
        if data.ndim != 2 or data.shape[0] != lattice.n_rows(last):
            raise LatticeError(f"data has shape {data.shape}, expected ({lattice.n_rows(last)}, d)")
        self.lattice = lattice
        self.data = data
        self.last = last

    @classmethod
    def from_levels(cls, lattice, levels):
        return cls(lattice, np.concatenate([np.asarray(v, float) for v in levels]), len(levels) - 1)

    @classmethod
    def zeros(cls, lattice, dim, last=None):
        last = lattice.steps if last is None else last
        return cls(lattice, np.zeros((lattice.n_rows(last), dim)), last)

    @classmethod
    def from_function(cls, lattice, func, dim, last=None):
        """Values from ``func(t, W) -> (rows, dim)`` with t, W arrays over all nodes."""
        last = lattice.steps if last is None else last
        rows = lattice.prefix(last)
        out = np.asarray(func(lattice.t_rows(rows), lattice.W_rows(rows)), dtype=float)
        out = np.broadcast_to(out, (lattice.n_rows(last), dim)).copy()
        return cls(lattice, out, last)

    @property
    def first(self):
        return 0

    @property
    def dim(self):
        return self.data.shape[1]

    @property
    def values(self):
        return [self.level(i) for i in range(self.last + 1)]

    def level(self, i):
        if not 0 <= i <= self.last:
            raise LatticeError(f"level {i} not covered (0..{self.last})")
        return self.data[self.lattice.rows(i)]

    def __getitem__(self, node):
        i, j = node
        return self.level(i)[j]

    def expect_next(self, node):
        i, j = node
        if i >= self.last:
            raise LatticeError(f"node ({i}, {j}) has no children in this process")
        kids = [self.level(ci)[cj] for ci, cj in self.lattice.children(i, j)]
        return sum(kids[1:], kids[0]) / len(kids)

    def truncate(self, last):
        return AdaptedProcess(self.lattice, self.data[: self.lattice.n_rows(last)], last)

    def copy(self):
        return AdaptedProcess(self.lattice, self.data.copy(), self.last)

    def _other(self, other):
        if other.lattice is not self.lattice or other.last != self.last:
            raise LatticeError("processes live on different lattices or levels")
        return other.data

    def __add__(self, other):
        return AdaptedProcess(self.lattice, self.data + self._other(other), self.last)

    def __sub__(self, other):
        return AdaptedProcess(self.lattice, self.data - self._other(other), self.last)

    def __mul__(self, c):
        return AdaptedProcess(self.lattice, c * self.data, self.last)

    __rmul__ = __mul__

    def max_abs(self):
        return float(np.abs(self.data).max())


def extract_martingale(values_next, node, lattice):
    """dW-integrand of a level-(i+1) variable seen from node (i, j)."""
    i, j = node
    dt = lattice.grid.dt
    if dt <= 0:
        raise LatticeError("dt must be positive")
    kids = lattice.children(i, j)
    if lattice.branching == 1:
        return np.zeros_like(np.asarray(values_next[kids[0][1]], dtype=float))
    up, down = (np.asarray(values_next[cj], dtype=float) for _, cj in kids)
    return (up - down) / (2.0 * np.sqrt(dt))


def expectation(proc, i, f=None):
    """E[f(X_i)]; ``f`` maps the (nodes, d) level array to per-node values."""
    vals = proc.level(i)
    out = vals if f is None else np.asarray(f(vals), dtype=float)
    return proc.lattice.mean_level(out)


class TripleProcess:
    """(k, y, z): k and y on levels 0..N, z on 0..N-1."""

    def __init__(self, k, y, z):
        lat = k.lattice
        if y.lattice is not lat or z.lattice is not lat:
            raise LatticeError("k, y, z must share one lattice")
        if k.last != lat.steps or y.last != lat.steps or z.last != lat.steps - 1:
            raise LatticeError("k, y must cover 0..N and z 0..N-1")
        self.k, self.y, self.z = k, y, z

    @property
    def lattice(self):
        return self.k.lattice

    @classmethod
    def zeros(cls, lattice, dim):
        return cls(AdaptedProcess.zeros(lattice, dim), AdaptedProcess.zeros(lattice, dim),
                   AdaptedProcess.zeros(lattice, dim, lattice.steps - 1))

    def __add__(self, other):
        return TripleProcess(self.k + other.k, self.y + other.y, self.z + other.z)

    def __sub__(self, other):
        return TripleProcess(self.k - other.k, self.y - other.y, self.z - other.z)

    def __mul__(self, c):
        return TripleProcess(self.k * c, self.y * c, self.z * c)

    __rmul__ = __mul__

    def copy(self):
        return TripleProcess(self.k.copy(), self.y.copy(), self.z.copy())

    def max_abs(self):
        return max(self.k.max_abs(), self.y.max_abs(), self.z.max_abs())


def m2_norm_sq(lam, triple):
    """E sum_i dt (|k_i|_V^2 + |y_i|_V^2 + |z_i|_H^2) over levels 0..N-1 (left endpoints)."""
    lat = lam.lattice
    n = triple.dim
    if lam.k.dim != n or lam.y.dim != n or lam.z.dim != n:
        raise LatticeError("process dimension does not match the Gelfand triple")
    N = lat.steps
    rows = lat.prefix(N - 1)
    dens = (triple.v_sq(lam.k.data[rows]) + triple.v_sq(lam.y.data[rows])
            + triple.h_sq(lam.z.data))
    return float(lat.grid.dt * lat.level_means(dens, N - 1).sum())


def m2_norm(lam, triple):
    return float(np.sqrt(m2_norm_sq(lam, triple)))


def m2_distance(a, b, triple):
    return m2_norm(a - b, triple)
