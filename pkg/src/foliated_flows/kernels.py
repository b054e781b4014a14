"""Exact transition kernels on labeled grids and their property checks.

A ``LeafGrid`` is a finite discretization of the circle foliation: m equally
spaced angular sites on each of a list of (r, z)-labeled leaves.  Kernels are
dense row-stochastic matrices; every check below is an exact max-norm over the
complete basis of grid indicator functions, not a sampled estimate.

Checks cover: compatibility of a 2-point kernel with its 1-point marginal,
diagonal preservation, the foliated (off-leaf mass zero) property with its
function-pair degeneracy variant, the semigroup composition law, and the
absorb-on-diagonal coalescing construction.

Feller continuity of the underlying semigroups is a topological limit
statement with no finite-grid analog; it is out of scope for these numeric
checks and is not asserted anywhere.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import TWO_PI

ROW_SUM_TOL = 1e-12
_ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class LeafGrid:
    """m angular sites (2*pi*k/m) on each of a list of distinct (r, z) leaves."""

    m: int
    leaves: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if self.m < 2:
            raise ValueError(f"need at least 2 angular sites, got m={self.m}")
        if len(set(self.leaves)) != len(self.leaves):
            raise ValueError("leaf labels must be distinct")
        if not self.leaves:
            raise ValueError("need at least one leaf")

    @property
    def n_states(self) -> int:
        return self.m * len(self.leaves)

    @property
    def angles(self) -> np.ndarray:
        return TWO_PI * np.arange(self.m) / self.m

    def index(self, leaf_i: int, site: int) -> int:
        return leaf_i * self.m + site % self.m

    def leaf_of(self, state: int) -> int:
        return state // self.m

    def site_of(self, state: int) -> int:
        return state % self.m

    def leaf_labels(self) -> np.ndarray:
        """Leaf index of every state."""
        return np.repeat(np.arange(len(self.leaves)), self.m)


@dataclass(frozen=True)
class PairGrid:
    """The 2-fold product of a LeafGrid; state (s1, s2) has index s1*n + s2."""

    base: LeafGrid

    @property
    def n_states(self) -> int:
        return self.base.n_states ** 2

    def index(self, s1: int, s2: int) -> int:
        return s1 * self.base.n_states + s2

    def split(self, state: int) -> tuple[int, int]:
        return divmod(state, self.base.n_states)

    def diagonal_indices(self) -> np.ndarray:
        n = self.base.n_states
        return np.arange(n) * n + np.arange(n)


@dataclass(frozen=True)
class TransitionKernel:
    """Row-stochastic matrix representing a discretized P_t on a labeled grid."""

    grid: LeafGrid | PairGrid
    t: float
    matrix: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = self.grid.n_states
        if self.matrix.shape != (n, n):
            raise ValueError(f"matrix shape {self.matrix.shape} != grid size {n}")
        if np.any(self.matrix < 0.0):
            raise ValueError("kernel entries must be nonnegative")
        row_sums = self.matrix.sum(axis=1)
        worst = float(np.max(np.abs(row_sums - 1.0)))
        if worst > ROW_SUM_TOL:
            raise ValueError(f"rows must sum to 1 within {ROW_SUM_TOL}; worst defect {worst}")
        if self.t < 0.0:
            raise ValueError(f"t must be >= 0: {self.t}")

    def power(self, n: int) -> np.ndarray:
        return np.linalg.matrix_power(self.matrix, n)

    def compose(self, other: "TransitionKernel") -> "TransitionKernel":
        if self.grid != other.grid:
            raise ValueError("cannot compose kernels on different grids")
        return TransitionKernel(grid=self.grid, t=self.t + other.t, matrix=self.matrix @ other.matrix)


def build_cylinder_kernel(grid: LeafGrid, t: float) -> TransitionKernel:
    """Discretized rotation-jump semigroup at a grid-aligned time.

    From each state the kernel moves mass (1+e^{-2t})/2 to the site rotated by
    t and (1-e^{-2t})/2 to the rotated antipodal site, on the same leaf.  t
    must be a multiple of 2*pi/m with m even, so both targets are grid-exact;
    off-grid rotations are an error (no interpolation).
    """
    if grid.m % 2 != 0:
        raise ValueError(f"antipodal map needs an even number of sites, got m={grid.m}")
    step = TWO_PI / grid.m
    k = round(t / step)
    if abs(t - k * step) > _ALIGN_TOL:
        raise ValueError(
            f"t={t} does not align with the grid: must be a multiple of 2*pi/{grid.m}"
        )
    p_jump = 0.5 * (1.0 - math.exp(-2.0 * t))
    p_stay = 0.5 * (1.0 + math.exp(-2.0 * t))
    n = grid.n_states
    matrix = np.zeros((n, n))
    half = grid.m // 2
    for leaf_i in range(len(grid.leaves)):
        for site in range(grid.m):
            row = grid.index(leaf_i, site)
            matrix[row, grid.index(leaf_i, site + k)] += p_stay
            matrix[row, grid.index(leaf_i, site + k + half)] += p_jump
    return TransitionKernel(
        grid=grid, t=float(t), matrix=matrix, meta={"rotation_steps": int(k), "jump_prob": p_jump}
    )


def product_kernel_flow(k1: TransitionKernel) -> TransitionKernel:
    """2-point kernel induced by the common-noise flow of a cylinder kernel.

    Both coordinates receive the SAME rotation and the SAME jump outcome:
    mass (1+e^{-2t})/2 on (both rotated) and (1-e^{-2t})/2 on (both rotated
    antipodal).
    """
    if "rotation_steps" not in k1.meta:
        raise ValueError("product_kernel_flow needs a kernel built by build_cylinder_kernel")
    grid = k1.grid
    if not isinstance(grid, LeafGrid):
        raise ValueError("k1 must live on a single-point LeafGrid")
    k = k1.meta["rotation_steps"]
    p_jump = k1.meta["jump_prob"]
    pair = PairGrid(base=grid)
    n = grid.n_states
    matrix = np.zeros((pair.n_states, pair.n_states))
    half = grid.m // 2

    def moved(state: int, extra: int) -> int:
        return grid.index(grid.leaf_of(state), grid.site_of(state) + k + extra)

    for s1 in range(n):
        for s2 in range(n):
            row = pair.index(s1, s2)
            matrix[row, pair.index(moved(s1, 0), moved(s2, 0))] += 1.0 - p_jump
            matrix[row, pair.index(moved(s1, half), moved(s2, half))] += p_jump
    return TransitionKernel(grid=pair, t=k1.t, matrix=matrix)


def independent_product_kernel(k1: TransitionKernel) -> TransitionKernel:
    """Tensor square of a 1-point kernel (two independent copies)."""
    if not isinstance(k1.grid, LeafGrid):
        raise ValueError("k1 must live on a single-point LeafGrid")
    pair = PairGrid(base=k1.grid)
    return TransitionKernel(grid=pair, t=k1.t, matrix=np.kron(k1.matrix, k1.matrix))


def _require_pair_over(k2: TransitionKernel, k1: TransitionKernel) -> int:
    if not isinstance(k2.grid, PairGrid) or not isinstance(k1.grid, LeafGrid):
        raise ValueError("expected a pair kernel and its base 1-point kernel")
    if k2.grid.base != k1.grid:
        raise ValueError("pair kernel grid does not match the 1-point grid")
    return k1.grid.n_states


def check_compatibility(k2: TransitionKernel, k1: TransitionKernel) -> float:
    """Max defect of the first-coordinate marginal of k2 against k1.

    Test functions are f(x1, x2) = g(x1) over all grid indicators g, so this
    is the exact max-norm marginal defect (Def-style compatibility).
    """
    n = _require_pair_over(k2, k1)
    m4 = k2.matrix.reshape(n, n, n, n)
    marginal = m4.sum(axis=3)  # (x1, x2, z)
    defect = np.abs(marginal - k1.matrix[:, np.newaxis, :])
    return float(np.max(defect))


def check_diagonal_preserving(k2: TransitionKernel, k1: TransitionKernel) -> float:
    """Max over states x, indicators f of |P2 f⊗f (x,x) - P1 f^2 (x)|.

    For indicator f = 1_z this compares the (x,x) -> (z,z) mass with the
    1-point transition x -> z.
    """
    n = _require_pair_over(k2, k1)
    m4 = k2.matrix.reshape(n, n, n, n)
    diag_block = m4[np.arange(n), np.arange(n)][:, np.arange(n), np.arange(n)]  # (x, z)
    return float(np.max(np.abs(diag_block - k1.matrix)))


def check_foliated(k: TransitionKernel) -> float:
    """Max over rows of the total mass sent to states with a different leaf label.

    Zero iff the kernel is foliated on the grid (the discrete statement that
    the support of every transition measure stays inside the leaf).
    """
    if isinstance(k.grid, LeafGrid):
        labels = k.grid.leaf_labels()
        off = labels[np.newaxis, :] != labels[:, np.newaxis]
        return float(np.max(np.where(off, k.matrix, 0.0).sum(axis=1)))
    base = k.grid.base
    labels = base.leaf_labels()
    n = base.n_states
    m4 = k.matrix.reshape(n, n, n, n)
    off1 = labels[np.newaxis, :] != labels[:, np.newaxis]  # (x1, y1)
    off2 = off1  # same grid on the second coordinate
    mask = off1[:, np.newaxis, :, np.newaxis] | off2[np.newaxis, :, np.newaxis, :]
    return float(np.max(np.where(mask, m4, 0.0).sum(axis=(2, 3))))


def function_pair_degeneracy_gap(
    k: TransitionKernel, f: np.ndarray, g: np.ndarray, leaf_i: int
) -> float:
    """Max over states x on the given leaf of |P_t f(x) - P_t g(x)|.

    f and g must agree on the leaf; for a foliated kernel the gap is 0 (the
    action at x only sees the restriction of the test function to the leaf).
    """
    if not isinstance(k.grid, LeafGrid):
        raise ValueError("function-pair degeneracy is a 1-point kernel check")
    labels = k.grid.leaf_labels()
    on_leaf = labels == leaf_i
    if not np.any(on_leaf):
        raise ValueError(f"no such leaf index {leaf_i}")
    if np.max(np.abs(f[on_leaf] - g[on_leaf])) > 0.0:
        raise ValueError("test functions must agree on the leaf")
    action = k.matrix @ (f - g)
    return float(np.max(np.abs(action[on_leaf])))


def _is_irreducible(matrix: np.ndarray) -> bool:
    reach = matrix > 0.0
    n = matrix.shape[0]
    closure = reach | np.eye(n, dtype=bool)
    for _ in range(n):
        nxt = closure | (closure @ closure)
        if np.array_equal(nxt, closure):
            break
        closure = nxt
    return bool(np.all(closure))


def coalesce_two_point(k1: TransitionKernel) -> TransitionKernel:
    """One-step-kernel analog of the coalescing concatenation on a single leaf.

    Off-diagonal states move as the independent product of k1 with itself;
    any mass landing on the diagonal is absorbed there, since diagonal states
    move as the 1-point chain mapped to the diagonal.  Before absorption the
    off-diagonal dynamics therefore equals the independent 2-point motion.
    """
    if not isinstance(k1.grid, LeafGrid):
        raise ValueError("k1 must live on a LeafGrid")
    if len(k1.grid.leaves) != 1:
        raise ValueError("the coalescing construction expects a single-leaf kernel")
    if not _is_irreducible(k1.matrix):
        warnings.warn("1-point kernel is not irreducible; coalescence may never occur")
    pair = PairGrid(base=k1.grid)
    n = k1.grid.n_states
    matrix = np.kron(k1.matrix, k1.matrix)
    diag = pair.diagonal_indices()
    for z in range(n):
        row = np.zeros(pair.n_states)
        row[diag] = k1.matrix[z]
        matrix[diag[z]] = row
    return TransitionKernel(grid=pair, t=k1.t, matrix=matrix)


def cyclic_walk_kernel(m: int, p_left: float, leaf=(1.0, 0.0), t: float = 1.0) -> TransitionKernel:
    """Cyclic nearest-neighbour walk on m sites (p left, 1-p right)."""
    if not 0.0 <= p_left <= 1.0:
        raise ValueError(f"p_left must be a probability: {p_left}")
    grid = LeafGrid(m=m, leaves=(tuple(leaf),))
    matrix = np.zeros((m, m))
    for s in range(m):
        matrix[s, (s - 1) % m] += p_left
        matrix[s, (s + 1) % m] += 1.0 - p_left
    return TransitionKernel(grid=grid, t=t, matrix=matrix)


def first_marginal(k2: TransitionKernel) -> np.ndarray:
    """First-coordinate marginal matrix of a pair kernel."""
    n = k2.grid.base.n_states
    return k2.matrix.reshape(n, n, n, n).sum(axis=3)


def kernel_to_json(k: TransitionKernel) -> dict:
    if isinstance(k.grid, LeafGrid):
        grid = {"kind": "leaf", "m": k.grid.m, "leaves": [list(l) for l in k.grid.leaves]}
    else:
        grid = {
            "kind": "pair",
            "m": k.grid.base.m,
            "leaves": [list(l) for l in k.grid.base.leaves],
        }
    return {"grid": grid, "t": k.t, "matrix": k.matrix.tolist()}


def write_kernel_json(k: TransitionKernel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(kernel_to_json(k), fh)


def defect_record(check: str, t: float, defect: float) -> dict:
    return {"check": check, "t": t, "defect": defect}
