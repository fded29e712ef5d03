"""Synthetic measurements: direct cavity solve, noise model, analytic checks.

The direct problem drives a current f through gamma_tilde with the cavity
present and records the voltage g on gamma.  Both data live on boundary
edges (per-edge densities and midpoint voltages), which is also the CSV
serialization unit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import Grid, CavityShape, rasterize_cavity
from .elliptic import NeumannData, SolveInfo, solve_on_cells

__all__ = [
    "CauchyData",
    "GroundTruth",
    "solve_direct_cavity",
    "add_noise",
    "analytic_strip_solution",
    "strip_current",
]


@dataclass(frozen=True)
class CauchyData:
    """One boundary measurement pair on a grid's boundary edges.

    ``f`` is the per-edge current density (supported on gamma_tilde),
    ``g`` the per-edge voltage (supported on gamma, edge-midpoint values).
    ``epsilon`` records the noise level the pair was generated at, ``rho``
    the noise amplitude factor and ``seed`` the RNG seed; exact data carry
    epsilon = 0.
    """

    f: np.ndarray
    g: np.ndarray
    epsilon: float = 0.0
    rho: float = 1.0
    seed: int = 0

    def check(self, grid: Grid, tol: float = 1e-9) -> None:
        NeumannData(self.f).check(grid, tol=tol)
        off = self.g[~grid.gamma_edges]
        if off.size and np.abs(off).max() > 0.0:
            raise ValueError("voltage must vanish off gamma")
        total = float(self.g[grid.gamma_edges].sum() * grid.h)
        scale = float(np.abs(self.g).sum() * grid.h) or 1.0
        if abs(total) > tol * scale:
            raise ValueError(f"voltage has non-zero gamma-mean: {total:.3e}")

    def g_norm(self, grid: Grid) -> float:
        return float(np.sqrt((self.g[grid.gamma_edges] ** 2).sum() * grid.h))

    def f_norm(self, grid: Grid) -> float:
        return float(np.sqrt((self.f[grid.gamma_tilde_edges] ** 2).sum() * grid.h))


@dataclass(frozen=True)
class GroundTruth:
    """Reference configuration: cavity, retained mask, potential, exact data."""

    cavity: CavityShape
    retained: np.ndarray      # per-cell conducting mask
    u0: np.ndarray            # nodal potential, zero outside the retained hull
    data: CauchyData          # exact (noise-free) Cauchy pair
    solve_info: SolveInfo


def solve_direct_cavity(grid: Grid, cavity: CavityShape, f: NeumannData, *,
                        tol: float = 1e-10,
                        enforce_standoff: bool = True) -> GroundTruth:
    """Solve the direct problem with a perfectly insulating cavity.

    The conducting region is the gamma_tilde-connected part of the grid
    with the cavity cells removed; the potential is extended by zero on
    the unreachable remainder and normalized to zero gamma-mean.  The
    standoff check is an admissibility hypothesis of the inverse problem;
    reference configurations (for example a full-width insulating slab)
    may switch it off.
    """
    f.check(grid)
    retained = rasterize_cavity(grid, cavity, enforce_standoff=enforce_standoff)
    u0, info = solve_on_cells(grid, retained, f, tol=tol)
    g0 = grid.edge_midpoint_values(u0)
    g0 = np.where(grid.gamma_edges, g0, 0.0)
    data = CauchyData(f=f.values.copy(), g=g0, epsilon=0.0)
    return GroundTruth(cavity=cavity, retained=retained, u0=u0,
                       data=data, solve_info=info)


def _scaled_noise(rng, n: int, target_norm: float, edge_len: float) -> np.ndarray:
    """Zero-mean white noise with an exact L2 norm on n edges."""
    raw = rng.standard_normal(n)
    raw -= raw.mean()
    nrm = float(np.sqrt((raw ** 2).sum() * edge_len))
    if nrm < 1e-300:
        raise ValueError("degenerate noise draw; need at least two edges")
    return raw * (target_norm / nrm)


def add_noise(grid: Grid, data: CauchyData, epsilon: float, *,
              rho: float = 1.0, seed: int = 0) -> CauchyData:
    """Perturb a Cauchy pair to the prescribed noise level.

    White Gaussian noise per edge, projected to zero mean and rescaled so
    that the perturbations have L2 norms exactly rho*epsilon on gamma_tilde
    and gamma.  The f draw precedes the g draw with a fixed-seed generator,
    so the same (data, epsilon, rho, seed) always reproduces byte-identical
    output.  rho*epsilon = 0 returns the input values unchanged.
    """
    if epsilon < 0 or rho < 0:
        raise ValueError("noise level and amplitude must be non-negative")
    level = rho * epsilon
    if level == 0.0:
        return replace(data, epsilon=epsilon, rho=rho, seed=seed)
    rng = np.random.default_rng(seed)
    ft = grid.gamma_tilde_edges
    ga = grid.gamma_edges
    f = data.f.copy()
    g = data.g.copy()
    f[ft] += _scaled_noise(rng, int(ft.sum()), level, grid.h)
    g[ga] += _scaled_noise(rng, int(ga.sum()), level, grid.h)
    # re-center: the mean projection above is exact, but keep the invariant
    # against accumulation when noising already-noisy data
    f[ft] -= f[ft].mean()
    g[ga] -= g[ga].mean()
    return CauchyData(f=f, g=g, epsilon=epsilon, rho=rho, seed=seed)


def analytic_strip_solution(lam: float, T: float, x, y):
    """Closed-form potential for the strip (0,1)x(0,T) test problem.

    Current sqrt(2)*cos(lam*x) enters at the bottom, an insulating screen
    sits at height 2 and the potential vanishes identically above it.
    Requires T >= 2 and lam a multiple of pi so the side walls stay
    insulated.
    """
    if T < 2.0:
        raise ValueError("the strip must reach at least height 2")
    if lam <= 0:
        raise ValueError("lam must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    fx = np.sqrt(2.0) * np.cos(lam * x)
    # coth(2L) cosh(Ly) - sinh(Ly) = cosh(L(2-y)) / sinh(2L); the form below
    # has only decaying exponentials for 0 <= y <= 2, so it never overflows
    yc = np.clip(y, 0.0, 2.0)
    profile = (np.exp(-lam * yc) + np.exp(-lam * (4.0 - yc))) / (1.0 - np.exp(-4.0 * lam))
    vals = fx / lam * profile
    # points on the screen itself carry the one-sided trace from below
    return np.where(y > 2.0, 0.0, vals)


def strip_current(grid: Grid, lam: float) -> NeumannData:
    """Per-edge bottom current sqrt(2)*cos(lam*x) for the strip problem."""
    def fn(side, arc):
        x = arc * grid.spec.width
        return np.where(side == 0, np.sqrt(2.0) * np.cos(lam * x), 0.0)
    return NeumannData.from_arc_function(grid, fn)
