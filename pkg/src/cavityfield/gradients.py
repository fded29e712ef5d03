"""Derivatives of the objectives with respect to the phase field.

Two independent routes are provided on purpose.  The directional
derivatives solve the sensitivity problem (the linearized state) and
transcribe the chain rule term by term; the full gradients solve one
adjoint problem instead and assemble a nodal density.  Both are exact
derivatives of the same discrete functionals, so for any direction

    directional == gradient.pair(direction)

up to the linear-solver residuals; the test suite drives this identity to
1e-10 and fixes every sign convention through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Grid
from .elliptic import (NeumannData, SolveInfo, K_REF, unit_stiffness,
                       load_vector, _pcg, lu_solve_neumann, SolverError)
from .forward import CauchyData
from .functionals import (FunctionalParams, State, solve_state,
                          misfit_rhs, element_energies)

__all__ = [
    "SensitivityState",
    "AdjointState",
    "GradientField",
    "sensitivity_solve",
    "adjoint_solve",
    "cavity_directional_derivative",
    "reduced_crack_directional_derivative",
    "crack_directional_derivative",
    "cavity_gradient",
    "reduced_crack_gradient",
]


@dataclass(frozen=True)
class SensitivityState:
    """Linearized state U for one phase-field direction."""

    U: np.ndarray
    direction_cell: np.ndarray   # cell averages of the direction
    info: SolveInfo


@dataclass(frozen=True)
class AdjointState:
    p: np.ndarray
    info: SolveInfo


@dataclass(frozen=True)
class GradientField:
    """Derivative as (pointwise density, Dirichlet part) against directions.

    The pairing with a nodal direction d (vanishing on the safety band) is

        sum_nodes density * d * node_area  +  dirichlet_part @ d

    where dirichlet_part is the unit-stiffness action 2 eta K1 vtilde.
    ``step_direction`` folds both into one per-area density for descent.
    """

    density: np.ndarray
    dirichlet_part: np.ndarray
    node_area: np.ndarray
    free: np.ndarray          # nodes the optimizer may move
    adjoint: np.ndarray | None = None   # adjoint state, reusable as a warm start

    def pair(self, direction: np.ndarray) -> float:
        return float((self.density * self.node_area) @ direction
                     + self.dirichlet_part @ direction)

    def step_direction(self) -> np.ndarray:
        return self.density + self.dirichlet_part / self.node_area

    def norm(self) -> float:
        s = self.step_direction()
        return float(np.sqrt((s * s * self.node_area).sum()))


def _psi_eta_prime(params: FunctionalParams, vbar: np.ndarray, offset: float) -> np.ndarray:
    return (1.0 - offset) * params.potentials.psi_prime(vbar)


def _weighted_element_action(grid: Grid, coef: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Nodal vector of sum_c coef_c * A_c u (exact element forms)."""
    qe = coef[:, None] * (u[grid.cell_nodes] @ K_REF)
    return np.bincount(grid.cell_nodes.ravel(), weights=qe.ravel(),
                       minlength=grid.n_nodes)


def _element_cross(grid: Grid, p: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-cell exact integrals int_cell grad p . grad u."""
    return np.einsum("ci,ij,cj->c", p[grid.cell_nodes], K_REF, u[grid.cell_nodes])


def _qpower_rhs(grid: Grid, state: State, q: float, b: float) -> np.ndarray:
    """Derivative of b int w |grad u|^q with respect to u (midpoint form)."""
    g = grid.cell_gradient(state.u)
    mag2 = (g ** 2).sum(axis=1)
    mag = np.sqrt(np.maximum(mag2, 1e-300))
    coef = b * q * grid.h ** 2 * state.w.values * mag ** (q - 2.0)
    zx = coef * g[:, 0]
    zy = coef * g[:, 1]
    # G^T z scatters the cell vector z into the four corners
    vals = np.stack([(-zx - zy), (zx - zy), (zx + zy), (-zx + zy)],
                    axis=1) / (2.0 * grid.h)
    return np.bincount(grid.cell_nodes.ravel(), weights=vals.ravel(),
                       minlength=grid.n_nodes)


def sensitivity_solve(grid: Grid, state: State, direction: np.ndarray,
                      params: FunctionalParams, *, tol: float = 1e-10,
                      maxiter: int | None = None) -> SensitivityState:
    """Linearized state U: K(w) U = sum_c psi_eta'(vbar) dirbar A_c u.

    ``direction`` is a nodal perturbation of vtilde (zero on the safety
    band); increasing vtilde lowers v, hence the plus sign on the right
    hand side.  U carries the same zero gamma-mean normalization as u.
    """
    direction = np.asarray(direction, dtype=float)
    dirbar = grid.cell_average(direction)
    coef = _psi_eta_prime(params, state.vbar, state.offset) * dirbar
    rhs = _weighted_element_action(grid, coef, state.u)
    if maxiter is None:
        maxiter = max(1000, 10 * grid.n_nodes)
    U, info = _pcg(state.K, rhs, tol=tol, maxiter=maxiter)
    if not info.converged:
        raise SolverError(
            f"sensitivity solve hit the iteration limit; residual {info.residual:.3e}",
            residual=info.residual, iterations=info.iterations)
    U = U - grid.gamma_mean(U)
    return SensitivityState(U=U, direction_cell=dirbar, info=info)


def adjoint_solve(grid: Grid, state: State, data: CauchyData,
                  params: FunctionalParams, *, q: float = 2.0,
                  tol: float = 1e-10, maxiter: int | None = None,
                  x0: np.ndarray | None = None,
                  method: str = "pcg") -> AdjointState:
    """Adjoint of the u-dependent terms: K(w) p = misfit source + b source.

    ``x0`` seeds the Krylov solve; the previous iterate's adjoint is a
    good guess when the phase field moves slowly.  With method "direct"
    the solve reuses the LU factor cached on state.K by a direct state
    solve, so it is a single back-substitution.
    """
    r = params.misfit_scale * misfit_rhs(grid, state.u, data)
    if params.b != 0.0:
        if q == 2.0:
            r = r + 2.0 * params.b * (state.K @ state.u)
        else:
            r = r + _qpower_rhs(grid, state, q, params.b)
    if method == "direct":
        p = lu_solve_neumann(state.K, r)
        info = SolveInfo(0, 0.0, True)
    elif method == "pcg":
        if maxiter is None:
            maxiter = max(1000, 10 * grid.n_nodes)
        p, info = _pcg(state.K, r, tol=tol, maxiter=maxiter, x0=x0)
        if not info.converged:
            raise SolverError(
                f"adjoint solve hit the iteration limit; residual {info.residual:.3e}",
                residual=info.residual, iterations=info.iterations)
    else:
        raise ValueError(f"unknown solve method {method!r}")
    return AdjointState(p=p - grid.gamma_mean(p), info=info)


def _misfit_pairing(grid: Grid, u: np.ndarray, data: CauchyData,
                    U: np.ndarray) -> float:
    """Derivative of the raw misfit against a state perturbation U."""
    return float(misfit_rhs(grid, u, data) @ U)


def _well_pairing(grid: Grid, vbar, dirbar, eta: float, well_prime) -> float:
    """(1/eta) int well'(v) * (-dirbar); v moves opposite to vtilde."""
    return float(-(well_prime(vbar) * dirbar).sum() * grid.h ** 2 / eta)


def _dirichlet_pairing(grid: Grid, vtilde, direction, eta: float) -> float:
    K1 = unit_stiffness(grid)
    return float(2.0 * eta * ((K1 @ vtilde) @ direction))


def _grad_term_pairing(grid: Grid, state: State, params: FunctionalParams,
                       q: float, dirbar: np.ndarray, U: np.ndarray) -> float:
    """Derivative of b int psi_eta(v)|grad u|^q in a joint (v, u) direction."""
    if params.b == 0.0:
        return 0.0
    psip = _psi_eta_prime(params, state.vbar, state.offset)
    if q == 2.0:
        uAu = element_energies(grid, state.u)
        t_w = -float((psip * dirbar * uAu).sum())
        t_u = 2.0 * float(state.u @ (state.K @ U))
        return params.b * (t_w + t_u)
    g = grid.cell_gradient(state.u)
    gU = grid.cell_gradient(U)
    mag = np.sqrt(np.maximum((g ** 2).sum(axis=1), 1e-300))
    h2 = grid.h ** 2
    t_w = -float((psip * dirbar * mag ** q).sum() * h2)
    t_u = float(q * (state.w.values * mag ** (q - 2.0)
                     * (g * gU).sum(axis=1)).sum() * h2)
    return params.b * (t_w + t_u)


def cavity_directional_derivative(grid: Grid, vtilde: np.ndarray,
                                  direction: np.ndarray, data: CauchyData,
                                  params: FunctionalParams, *,
                                  state: State | None = None,
                                  sens: SensitivityState | None = None,
                                  tol: float = 1e-10) -> float:
    """Directional derivative of the cavity objective along ``direction``."""
    vtilde = np.asarray(vtilde, dtype=float)
    direction = np.asarray(direction, dtype=float)
    st = state or solve_state(grid, vtilde, data, params, offset_power=2.0, tol=tol)
    sn = sens or sensitivity_solve(grid, st, direction, params, tol=tol)
    pots = params.potentials
    return (params.misfit_scale * _misfit_pairing(grid, st.u, data, sn.U)
            + _grad_term_pairing(grid, st, params, 2.0, sn.direction_cell, sn.U)
            + _well_pairing(grid, st.vbar, sn.direction_cell, params.eta, pots.w_prime)
            + _dirichlet_pairing(grid, vtilde, direction, params.eta))


def reduced_crack_directional_derivative(grid: Grid, vtilde: np.ndarray,
                                         direction: np.ndarray, data: CauchyData,
                                         params: FunctionalParams, *,
                                         state: State | None = None,
                                         sens: SensitivityState | None = None,
                                         tol: float = 1e-10) -> float:
    """Directional derivative of the reduced crack objective (exponent q)."""
    vtilde = np.asarray(vtilde, dtype=float)
    direction = np.asarray(direction, dtype=float)
    q = params.grad_power
    st = state or solve_state(grid, vtilde, data, params, offset_power=q, tol=tol)
    sn = sens or sensitivity_solve(grid, st, direction, params, tol=tol)
    pots = params.potentials
    return (params.misfit_scale * _misfit_pairing(grid, st.u, data, sn.U)
            + _grad_term_pairing(grid, st, params, q, sn.direction_cell, sn.U)
            + _well_pairing(grid, st.vbar, sn.direction_cell, params.eta, pots.v_prime)
            + _dirichlet_pairing(grid, vtilde, direction, params.eta))


def crack_directional_derivative(grid: Grid, u: np.ndarray, vtilde: np.ndarray,
                                 du: np.ndarray, direction: np.ndarray,
                                 data: CauchyData, params: FunctionalParams, *,
                                 state: State | None = None,
                                 tol: float = 1e-10) -> float:
    """Joint directional derivative of the two-variable crack objective.

    ``du`` perturbs the free potential u, ``direction`` perturbs vtilde.
    The state sensitivity enters only through the discrepancy term's
    int f U contribution.
    """
    u = np.asarray(u, dtype=float)
    vtilde = np.asarray(vtilde, dtype=float)
    du = np.asarray(du, dtype=float)
    direction = np.asarray(direction, dtype=float)
    q = params.grad_power
    st = state or solve_state(grid, vtilde, data, params, offset_power=q, tol=tol)
    sn = sensitivity_solve(grid, st, direction, params, tol=tol)
    pots = params.potentials
    bf = load_vector(grid, NeumannData(data.f))
    psip = _psi_eta_prime(params, st.vbar, st.offset)
    uAu = element_energies(grid, u)

    # discrepancy expansion u^T K u - 2 f u + f state, differentiated in both slots
    d_disc_u = 2.0 * float(u @ (st.K @ du)) - 2.0 * float(bf @ du)
    d_disc_v = -float((psip * sn.direction_cell * uAu).sum()) + float(bf @ sn.U)
    disc = params.discrepancy_scale * (d_disc_u + d_disc_v)

    misfit = params.misfit_scale * _misfit_pairing(grid, u, data, du)

    if params.b == 0.0:
        grad = 0.0
    elif q == 2.0:
        grad = params.b * (2.0 * float(u @ (st.K @ du))
                           - float((psip * sn.direction_cell * uAu).sum()))
    else:
        g = grid.cell_gradient(u)
        gdu = grid.cell_gradient(du)
        mag = np.sqrt(np.maximum((g ** 2).sum(axis=1), 1e-300))
        h2 = grid.h ** 2
        grad = params.b * (
            float(q * (st.w.values * mag ** (q - 2.0) * (g * gdu).sum(axis=1)).sum() * h2)
            - float((psip * sn.direction_cell * mag ** q).sum() * h2))

    well = _well_pairing(grid, st.vbar, sn.direction_cell, params.eta, pots.v_prime)
    diri = _dirichlet_pairing(grid, vtilde, direction, params.eta)
    return disc + misfit + grad + well + diri


def _assemble_gradient(grid: Grid, state: State, params: FunctionalParams,
                       adj: AdjointState, q: float, well_prime,
                       vtilde: np.ndarray) -> GradientField:
    """Fold adjoint, b-term and well densities into a GradientField."""
    psip = _psi_eta_prime(params, state.vbar, state.offset)
    pAu = _element_cross(grid, adj.p, state.u)
    h2 = grid.h ** 2
    D = psip * pAu / h2
    if params.b != 0.0:
        if q == 2.0:
            D = D - params.b * psip * element_energies(grid, state.u) / h2
        else:
            g = grid.cell_gradient(state.u)
            mag = np.sqrt(np.maximum((g ** 2).sum(axis=1), 1e-300))
            D = D - params.b * psip * mag ** q
    D = D - well_prime(state.vbar) / params.eta

    density = grid.node_average_of_cells(D)
    dirichlet = 2.0 * params.eta * (unit_stiffness(grid) @ vtilde)
    free = ~grid.node_in_band
    density[~free] = 0.0
    dirichlet[~free] = 0.0
    return GradientField(density=density, dirichlet_part=dirichlet,
                         node_area=grid.node_area, free=free, adjoint=adj.p)


def cavity_gradient(grid: Grid, vtilde: np.ndarray, data: CauchyData,
                    params: FunctionalParams, *, state: State | None = None,
                    tol: float = 1e-10,
                    adjoint_x0: np.ndarray | None = None,
                    method: str = "pcg") -> GradientField:
    """Full gradient of the cavity objective via one adjoint solve."""
    vtilde = np.asarray(vtilde, dtype=float)
    st = state or solve_state(grid, vtilde, data, params, offset_power=2.0,
                              tol=tol, method=method)
    adj = adjoint_solve(grid, st, data, params, q=2.0, tol=tol, x0=adjoint_x0,
                        method=method)
    return _assemble_gradient(grid, st, params, adj, 2.0,
                              params.potentials.w_prime, vtilde)


def reduced_crack_gradient(grid: Grid, vtilde: np.ndarray, data: CauchyData,
                           params: FunctionalParams, *, state: State | None = None,
                           tol: float = 1e-10,
                           adjoint_x0: np.ndarray | None = None,
                           method: str = "pcg") -> GradientField:
    """Full gradient of the reduced crack objective via one adjoint solve."""
    vtilde = np.asarray(vtilde, dtype=float)
    q = params.grad_power
    st = state or solve_state(grid, vtilde, data, params, offset_power=q,
                              tol=tol, method=method)
    adj = adjoint_solve(grid, st, data, params, q=q, tol=tol, x0=adjoint_x0,
                        method=method)
    return _assemble_gradient(grid, st, params, adj, q,
                              params.potentials.v_prime, vtilde)
