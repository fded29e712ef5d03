"""Q1 finite elements for the weighted Neumann problem div(w grad u) = 0.

The weight w is constant per cell and strictly positive, the boundary
condition prescribes the conormal flux w du/dn = f on gamma_tilde and zero
elsewhere, and the solution is pinned by a zero gamma-mean.  The stiffness
matrix is singular with kernel the constants, so the conjugate gradient
iteration deflates that kernel explicitly and the returned solution is
shifted to zero gamma-mean afterwards.  ``lu_solve_neumann`` is the direct
alternative: it pins one node, factors once per matrix and back-substitutes,
which pays off when the same stiffness serves several right hand sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .geometry import Grid

__all__ = [
    "K_REF",
    "WeightField",
    "NeumannData",
    "BoundaryTrace",
    "SolveInfo",
    "SolverError",
    "assemble",
    "unit_stiffness",
    "load_vector",
    "solve_weighted_neumann",
    "lu_solve_neumann",
    "lu_solve_spd",
    "boundary_trace",
    "energy_seminorm",
    "caccioppoli_ratio",
]

# Exact element stiffness of the Laplacian for bilinear elements on a square;
# independent of the cell size in two dimensions.  Node order: counterclockwise
# from the lower-left corner.
K_REF = np.array([
    [4.0, -1.0, -2.0, -1.0],
    [-1.0, 4.0, -1.0, -2.0],
    [-2.0, -1.0, 4.0, -1.0],
    [-1.0, -2.0, -1.0, 4.0],
]) / 6.0
K_REF.setflags(write=False)


class SolverError(RuntimeError):
    """Linear solve failed; carries the achieved residual."""

    def __init__(self, message: str, residual: float = np.nan, iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class WeightField:
    """Per-cell conductivity with certified bounds floor <= w <= cap."""

    values: np.ndarray
    floor: float
    cap: float

    def __post_init__(self):
        v = self.values
        if not (self.floor > 0.0):
            raise ValueError("weight floor must be positive")
        if v.min() < self.floor - 1e-14 or v.max() > self.cap + 1e-14:
            raise ValueError("weight values escape their certified bounds")

    @classmethod
    def uniform(cls, grid: Grid, value: float = 1.0) -> "WeightField":
        return cls(np.full(grid.n_cells, float(value)), floor=value, cap=value)


@dataclass(frozen=True)
class NeumannData:
    """Per-boundary-edge current density, supported on gamma_tilde.

    The weighted mean over gamma_tilde must vanish (compatibility of the
    pure Neumann problem).
    """

    values: np.ndarray  # one value per boundary edge, zero off gamma_tilde

    def check(self, grid: Grid, tol: float = 1e-12) -> None:
        off = self.values[~grid.gamma_tilde_edges]
        if off.size and np.abs(off).max() > 0.0:
            raise ValueError("current density must vanish off gamma_tilde")
        total = float(self.values.sum() * grid.h)
        scale = float(np.abs(self.values).sum() * grid.h) or 1.0
        if abs(total) > tol * scale:
            raise ValueError(f"current density has non-zero mean: {total:.3e}")

    def norm(self, grid: Grid) -> float:
        """L2 norm over gamma_tilde (per-edge midpoint rule)."""
        return float(np.sqrt((self.values ** 2).sum() * grid.h))

    def projected(self, grid: Grid) -> "NeumannData":
        """Copy with the gamma_tilde mean removed exactly."""
        mask = grid.gamma_tilde_edges
        v = self.values.copy()
        v[mask] -= v[mask].mean()
        return NeumannData(v)

    @classmethod
    def from_arc_function(cls, grid: Grid, fn, segment: str = "gamma_tilde") -> "NeumannData":
        """Evaluate fn(side_index, arc) at the midpoints of tagged edges."""
        mask = grid.gamma_tilde_edges if segment == "gamma_tilde" else grid.gamma_edges
        v = np.zeros(len(grid.be_arc))
        v[mask] = fn(grid.be_side[mask], grid.be_arc[mask])
        return cls(v)


@dataclass(frozen=True)
class SolveInfo:
    iterations: int
    residual: float      # relative residual at exit
    converged: bool


@dataclass(frozen=True)
class BoundaryTrace:
    """Nodal restriction to a tagged segment with L2 quadrature weights."""

    nodes: np.ndarray
    values: np.ndarray
    weights: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(self.weights @ self.values ** 2))


def assemble(grid: Grid, w: np.ndarray) -> sparse.csr_matrix:
    """Stiffness matrix sum_c w_c * A_c for per-cell weights w > 0."""
    w = np.asarray(w, dtype=float)
    if w.shape != (grid.n_cells,):
        raise ValueError("weight must be one value per cell")
    if w.min() <= 0.0:
        raise ValueError("weights must be strictly positive")
    return _assemble_selected(grid, w, None)


def _assemble_selected(grid: Grid, w, cells) -> sparse.csr_matrix:
    cn = grid.cell_nodes if cells is None else grid.cell_nodes[cells]
    wc = w if cells is None else w[cells]
    rows = np.repeat(cn, 4, axis=1).ravel()
    cols = np.tile(cn, (1, 4)).ravel()
    data = (wc[:, None] * K_REF.ravel()[None, :]).ravel()
    n = grid.n_nodes
    return sparse.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()


def unit_stiffness(grid: Grid) -> sparse.csr_matrix:
    """Stiffness with w = 1; cached on the grid object."""
    cached = getattr(grid, "_unit_stiffness", None)
    if cached is None:
        cached = assemble(grid, np.ones(grid.n_cells))
        object.__setattr__(grid, "_unit_stiffness", cached)
    return cached


def load_vector(grid: Grid, f: NeumannData) -> np.ndarray:
    """Boundary load int_gamma_tilde f phi with trapezoid edge quadrature."""
    b = np.zeros(grid.n_nodes)
    half = 0.5 * grid.h * f.values
    np.add.at(b, grid.be_nodes[:, 0], half)
    np.add.at(b, grid.be_nodes[:, 1], half)
    return b


def _pcg(K, b, *, tol, maxiter, x0=None, deflate=True):
    """Jacobi-preconditioned CG with explicit deflation of constants.

    The residual is kept orthogonal to the constant vector each iteration,
    which protects the singular Neumann system against rounding drift.
    Convergence is relative: ||r|| <= tol * ||b||.
    """
    n = K.shape[0]
    d = K.diagonal()
    if (d <= 0.0).any():
        raise SolverError("stiffness diagonal is not positive")
    inv_d = 1.0 / d

    def project(z):
        if deflate:
            z -= z.mean()
        return z

    b = project(b.copy())
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n), SolveInfo(0, 0.0, True)

    x = np.zeros(n) if x0 is None else x0.copy()
    r = project(b - K @ x)
    z = inv_d * r
    p = z.copy()
    rz = float(r @ z)
    res = float(np.linalg.norm(r))
    it = 0
    while res > tol * bnorm and it < maxiter:
        Kp = K @ p
        alpha = rz / float(p @ Kp)
        x += alpha * p
        r -= alpha * Kp
        project(r)
        res = float(np.linalg.norm(r))
        z = inv_d * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    info = SolveInfo(it, res / bnorm, res <= tol * bnorm)
    return x, info


# minimum-degree on the symmetrized pattern beats the COLAMD default by
# about 2x on these grid stiffness patterns
_SPLU_OPTS = dict(permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})


def _factor(A: sparse.csc_matrix):
    return splu(A, **_SPLU_OPTS)


def lu_solve_neumann(K: sparse.csr_matrix, b: np.ndarray) -> np.ndarray:
    """Direct solve of the singular Neumann system K x = b.

    The compatible part of b (mean removed, matching the deflated CG) is
    solved with node 0 pinned to zero, which removes the constant kernel;
    callers re-center the result to their preferred gauge.  The pinned
    factorization is cached on the matrix object, so every further right
    hand side against the same stiffness costs one back-substitution.
    """
    lu = getattr(K, "_pinned_lu", None)
    if lu is None:
        Kp = K.copy()
        start, end = int(Kp.indptr[0]), int(Kp.indptr[1])
        Kp.data[Kp.indices == 0] = 0.0
        Kp.data[start:end] = 0.0
        Kp.data[start + np.searchsorted(Kp.indices[start:end], 0)] = 1.0
        lu = _factor(Kp.tocsc())
        K._pinned_lu = lu
    bp = b - b.mean()
    bp[0] = 0.0
    return lu.solve(bp)


def lu_solve_spd(A, b: np.ndarray) -> np.ndarray:
    """Direct solve of a nonsingular sparse system, no caching."""
    return _factor(sparse.csc_matrix(A)).solve(b)


def solve_weighted_neumann(grid: Grid, w: WeightField, f: NeumannData, *,
                           tol: float = 1e-10, maxiter: int | None = None,
                           x0: np.ndarray | None = None,
                           check_data: bool = True) -> tuple[np.ndarray, SolveInfo]:
    """Solve div(w grad u) = 0, w du/dn = f, normalized to zero gamma-mean.

    Raises SolverError when the iteration limit is hit, reporting the
    achieved residual.
    """
    if check_data:
        f.check(grid)
    K = assemble(grid, w.values)
    b = load_vector(grid, f)
    if maxiter is None:
        maxiter = max(1000, 10 * grid.n_nodes)
    u, info = _pcg(K, b, tol=tol, maxiter=maxiter, x0=x0)
    if not info.converged:
        raise SolverError(
            f"CG hit the iteration limit ({info.iterations}); "
            f"achieved relative residual {info.residual:.3e}",
            residual=info.residual, iterations=info.iterations)
    u = u - grid.gamma_mean(u)
    return u, info


def solve_on_cells(grid: Grid, retained: np.ndarray, f: NeumannData, *,
                   tol: float = 1e-10, maxiter: int | None = None
                   ) -> tuple[np.ndarray, SolveInfo]:
    """Unit-weight Neumann solve restricted to the retained cells.

    Nodes not touched by any retained cell are fixed at zero; the kernel
    deflation runs over the active nodes only.
    """
    active = np.zeros(grid.n_nodes, dtype=bool)
    active[np.unique(grid.cell_nodes[retained])] = True
    K = _assemble_selected(grid, np.ones(grid.n_cells), retained)
    b = load_vector(grid, f)
    idx = np.flatnonzero(active)
    Ka = K[idx][:, idx].tocsr()
    ba = b[idx]
    if maxiter is None:
        maxiter = max(1000, 10 * grid.n_nodes)
    ua, info = _pcg(Ka, ba, tol=tol, maxiter=maxiter)
    if not info.converged:
        raise SolverError(
            f"CG hit the iteration limit ({info.iterations}); "
            f"achieved relative residual {info.residual:.3e}",
            residual=info.residual, iterations=info.iterations)
    u = np.zeros(grid.n_nodes)
    u[idx] = ua
    u[active] -= grid.gamma_mean(u)   # gamma nodes are always active
    u[~active] = 0.0
    return u, info


def boundary_trace(grid: Grid, u: np.ndarray, segment: str = "gamma") -> BoundaryTrace:
    """Nodal values on a tagged segment plus trapezoid quadrature weights."""
    if segment == "gamma":
        mask = grid.gamma_edges
    elif segment == "gamma_tilde":
        mask = grid.gamma_tilde_edges
    else:
        raise ValueError(f"unknown segment {segment!r}")
    edges = grid.be_nodes[mask]
    nodes = np.unique(edges)
    wts = np.zeros(grid.n_nodes)
    np.add.at(wts, edges[:, 0], 0.5 * grid.h)
    np.add.at(wts, edges[:, 1], 0.5 * grid.h)
    return BoundaryTrace(nodes=nodes, values=u[nodes], weights=wts[nodes])


def energy_seminorm(grid: Grid, u: np.ndarray, w: WeightField) -> float:
    """Weighted H1 seminorm sqrt(sum_c w |grad u|^2 h^2), midpoint gradients."""
    g = grid.cell_gradient(u)
    return float(np.sqrt(((g ** 2).sum(axis=1) * w.values).sum() * grid.h ** 2))


def caccioppoli_ratio(grid: Grid, u: np.ndarray, w: WeightField,
                      center: tuple[float, float], radius: float) -> float:
    """R^2 * int_{B_R} w |grad u|^2 / int_{B_2R} w u^2 on concentric balls.

    For solutions of the homogeneous equation on B_2R this is bounded by a
    constant independent of w.  Returns NaN when the denominator is below
    1e-14 of scale (the ratio is then undefined).
    """
    cx, cy = center
    if not (radius > 0):
        raise ValueError("radius must be positive")
    sp = grid.spec
    margin = min(cx, sp.width - cx, cy, sp.height - cy)
    if 2.0 * radius > margin + 1e-12:
        raise ValueError("B_2R pokes out of the domain")
    d2 = (grid.cell_cx - cx) ** 2 + (grid.cell_cy - cy) ** 2
    inner = d2 < radius ** 2
    outer = d2 < (2.0 * radius) ** 2
    g2 = (grid.cell_gradient(u) ** 2).sum(axis=1)
    ubar = grid.cell_average(u)
    num = float((w.values[inner] * g2[inner]).sum() * grid.h ** 2)
    den = float((w.values[outer] * ubar[outer] ** 2).sum() * grid.h ** 2)
    scale = float((w.values[outer] * (ubar[outer] ** 2 + 1e-300)).max() * np.pi * (2 * radius) ** 2)
    if den <= 1e-14 * max(scale, 1e-300):
        return float("nan")
    return radius ** 2 * num / den
