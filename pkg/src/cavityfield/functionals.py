"""Objective functionals built from one boundary measurement pair.

Four evaluators share the same ingredients:

* ``cavity_objective``       misfit + optional gradient term + double well,
* ``crack_objective``        adds a state-discrepancy term and a free u,
* ``reduced_crack_objective``  the crack objective pinned at u = state,
* ``phase_edge_energy``      gradient term + single well alone.

Quadrature conventions: every |grad .|^2 integral uses the exact bilinear
element forms (so the algebraic identities between the discrepancy
expansion and the state equation hold to rounding), nonlinearities in v
and |grad u|^q with q != 2 use the midpoint rule per cell, and boundary
integrals use the trapezoid rule per edge with per-edge voltages.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Grid
from .elliptic import (NeumannData, WeightField, SolveInfo, K_REF,
                       assemble, unit_stiffness, load_vector, _pcg,
                       lu_solve_neumann, SolverError)
from .forward import CauchyData
from .phasefield import PotentialSet, EtaSchedule, weight_from_phase

__all__ = [
    "FunctionalParams",
    "FunctionalBreakdown",
    "State",
    "solve_state",
    "misfit_value",
    "misfit_rhs",
    "cavity_objective",
    "crack_objective",
    "reduced_crack_objective",
    "phase_edge_energy",
]


@dataclass(frozen=True)
class FunctionalParams:
    """Scales and coefficients of the objectives at one noise level.

    The exponents couple the data terms to the noise: the boundary misfit
    is weighted by a2/epsilon^misfit_exponent and the crack discrepancy by
    a1/epsilon^discrepancy_exponent, with
    0 < misfit_exponent <= discrepancy_exponent <= 2.  ``offset2`` and
    ``offset_q`` are the conductivity floors used by the quadratic and the
    grad_power-homogeneous functionals respectively.
    """

    epsilon: float
    eta: float
    band_radius: float
    offset2: float
    offset_q: float
    a1: float = 1.0
    a2: float = 1.0
    b: float = 0.0
    misfit_exponent: float = 0.5
    discrepancy_exponent: float = 0.5
    grad_power: float = 2.0
    band_lo: float = 0.4
    band_hi: float = 0.6
    potentials: PotentialSet = field(default_factory=PotentialSet.default)

    def __post_init__(self):
        if not (self.epsilon > 0 and self.eta > 0):
            raise ValueError("epsilon and eta must be positive")
        if not (0.0 < self.misfit_exponent <= self.discrepancy_exponent <= 2.0):
            raise ValueError("need 0 < misfit_exponent <= discrepancy_exponent <= 2")
        if self.grad_power < 2.0:
            raise ValueError("grad_power below 2 is outside the admissible range")
        if min(self.a1, self.a2, self.b) < 0:
            raise ValueError("coefficients must be non-negative")
        if not (0.0 < self.band_lo < self.band_hi < 1.0):
            raise ValueError("need 0 < band_lo < band_hi < 1")
        for o in (self.offset2, self.offset_q):
            if not (0.0 < o <= 0.5):
                raise ValueError("conductivity offsets must lie in (0, 1/2]")
        if self.band_radius < 2.0 * self.eta - 1e-15:
            raise ValueError("band radius below 2*eta violates the localization hypothesis")

    @classmethod
    def from_epsilon(cls, epsilon: float, schedule: EtaSchedule | None = None,
                     **overrides) -> "FunctionalParams":
        sched = schedule or EtaSchedule()
        eta = sched.eta(epsilon)
        grad_power = float(overrides.pop("grad_power", 2.0))
        return cls(epsilon=epsilon, eta=eta,
                   band_radius=sched.band_radius(eta),
                   offset2=sched.offset(eta, 2.0),
                   offset_q=sched.offset(eta, grad_power),
                   grad_power=grad_power, **overrides)

    @property
    def misfit_scale(self) -> float:
        return self.a2 / self.epsilon ** self.misfit_exponent

    @property
    def discrepancy_scale(self) -> float:
        return self.a1 / self.epsilon ** self.discrepancy_exponent


@dataclass(frozen=True)
class FunctionalBreakdown:
    """Per-term values; total is their exact sum."""

    misfit: float = 0.0
    discrepancy: float = 0.0
    gradient: float = 0.0
    well: float = 0.0
    dirichlet: float = 0.0

    @property
    def total(self) -> float:
        return self.misfit + self.discrepancy + self.gradient + self.well + self.dirichlet

    def as_dict(self) -> dict:
        return {"misfit": self.misfit, "discrepancy": self.discrepancy,
                "gradient": self.gradient, "well": self.well,
                "dirichlet": self.dirichlet, "total": self.total}


@dataclass(frozen=True)
class State:
    """Solved state for a phase field: weight, stiffness and potential."""

    u: np.ndarray
    w: WeightField
    K: object               # csr stiffness assembled with w
    vbar: np.ndarray        # per-cell average of v = 1 - vtilde
    offset: float
    info: SolveInfo


def solve_state(grid: Grid, vtilde: np.ndarray, data: CauchyData,
                params: FunctionalParams, *, offset_power: float = 2.0,
                tol: float = 1e-10, x0: np.ndarray | None = None,
                maxiter: int | None = None, method: str = "pcg") -> State:
    """Weighted Neumann state for the complement field vtilde.

    ``offset_power`` selects the conductivity floor: 2 for the quadratic
    functionals, the gradient exponent for the q-homogeneous ones.
    ``method`` picks the linear solver: "pcg" (honors tol/x0/maxiter) or
    "direct", a pinned LU factorization cached on the stiffness so that
    later solves against the same State are back-substitutions.
    """
    v = 1.0 - np.asarray(vtilde, dtype=float)
    offset = params.offset2 if offset_power == 2.0 else params.offset_q
    w = weight_from_phase(grid, v, params.eta, offset, params.potentials)
    K = assemble(grid, w.values)
    bf = load_vector(grid, NeumannData(data.f))
    if method == "direct":
        u = lu_solve_neumann(K, bf)
        info = SolveInfo(0, 0.0, True)
    elif method == "pcg":
        if maxiter is None:
            maxiter = max(1000, 10 * grid.n_nodes)
        u, info = _pcg(K, bf, tol=tol, maxiter=maxiter, x0=x0)
        if not info.converged:
            raise SolverError(
                f"state solve hit the iteration limit; residual {info.residual:.3e}",
                residual=info.residual, iterations=info.iterations)
    else:
        raise ValueError(f"unknown solve method {method!r}")
    u = u - grid.gamma_mean(u)
    return State(u=u, w=w, K=K, vbar=grid.cell_average(v), offset=offset, info=info)


def misfit_value(grid: Grid, u: np.ndarray, data: CauchyData) -> float:
    """int_gamma |u - g|^2, trapezoid per edge against per-edge voltages."""
    e = grid.be_nodes[grid.gamma_edges]
    g = data.g[grid.gamma_edges]
    return float(0.5 * grid.h * (((u[e[:, 0]] - g) ** 2) + ((u[e[:, 1]] - g) ** 2)).sum())


def misfit_rhs(grid: Grid, u: np.ndarray, data: CauchyData) -> np.ndarray:
    """Nodal derivative of misfit_value with respect to u."""
    e = grid.be_nodes[grid.gamma_edges]
    g = data.g[grid.gamma_edges]
    out = np.zeros(grid.n_nodes)
    np.add.at(out, e[:, 0], grid.h * (u[e[:, 0]] - g))
    np.add.at(out, e[:, 1], grid.h * (u[e[:, 1]] - g))
    return out


def element_energies(grid: Grid, u: np.ndarray, w: np.ndarray | None = None
                     ) -> np.ndarray:
    """Exact per-cell values of int_cell |grad u|^2 (times w if given)."""
    ue = u[grid.cell_nodes]
    e = np.einsum("ci,ij,cj->c", ue, K_REF, ue)
    return e if w is None else w * e


def _grad_q_term(grid: Grid, u: np.ndarray, w: WeightField, q: float) -> float:
    """int psi_eta(v) |grad u|^q; exact element forms for q = 2, midpoint else."""
    if q == 2.0:
        return float(element_energies(grid, u, w.values).sum())
    g = grid.cell_gradient(u)
    mag = np.sqrt((g ** 2).sum(axis=1))
    return float((w.values * mag ** q).sum() * grid.h ** 2)


def _well_term(grid: Grid, vbar: np.ndarray, eta: float, well) -> float:
    return float(well(vbar).sum() * grid.h ** 2 / eta)


def _dirichlet_term(grid: Grid, vtilde: np.ndarray, eta: float) -> float:
    K1 = unit_stiffness(grid)
    return float(eta * (vtilde @ (K1 @ vtilde)))


def cavity_objective(grid: Grid, vtilde: np.ndarray, data: CauchyData,
                     params: FunctionalParams, *, state: State | None = None,
                     tol: float = 1e-10) -> FunctionalBreakdown:
    """Boundary misfit + b * state energy + double-well interface energy.

    The state is solved with the quadratic conductivity floor; pass a
    precomputed ``state`` to reuse it.
    """
    vtilde = np.asarray(vtilde, dtype=float)
    st = state or solve_state(grid, vtilde, data, params, offset_power=2.0, tol=tol)
    pots = params.potentials
    return FunctionalBreakdown(
        misfit=params.misfit_scale * misfit_value(grid, st.u, data),
        gradient=params.b * _grad_q_term(grid, st.u, st.w, 2.0),
        well=_well_term(grid, st.vbar, params.eta, pots.w),
        dirichlet=_dirichlet_term(grid, vtilde, params.eta),
    )


def reduced_crack_objective(grid: Grid, vtilde: np.ndarray, data: CauchyData,
                            params: FunctionalParams, *, state: State | None = None,
                            tol: float = 1e-10) -> FunctionalBreakdown:
    """Crack objective evaluated at its own state; single well V.

    With grad_power = 2 this differs from the cavity objective only through
    the well (V versus W).
    """
    vtilde = np.asarray(vtilde, dtype=float)
    q = params.grad_power
    st = state or solve_state(grid, vtilde, data, params, offset_power=q, tol=tol)
    pots = params.potentials
    return FunctionalBreakdown(
        misfit=params.misfit_scale * misfit_value(grid, st.u, data),
        gradient=params.b * _grad_q_term(grid, st.u, st.w, q),
        well=_well_term(grid, st.vbar, params.eta, pots.v),
        dirichlet=_dirichlet_term(grid, vtilde, params.eta),
    )


def crack_objective(grid: Grid, u: np.ndarray, vtilde: np.ndarray,
                    data: CauchyData, params: FunctionalParams, *,
                    state: State | None = None,
                    tol: float = 1e-10) -> FunctionalBreakdown:
    """Two-variable crack objective with the weighted state discrepancy.

    The discrepancy |u - state|_w^2 is evaluated through its algebraic
    expansion  int psi(v)|grad u|^2 - 2 int f u + int f state,  which needs
    only the one state solve; by the discrete state equation the expansion
    equals the direct weighted seminorm of u - state exactly.
    """
    u = np.asarray(u, dtype=float)
    vtilde = np.asarray(vtilde, dtype=float)
    q = params.grad_power
    st = state or solve_state(grid, vtilde, data, params, offset_power=q, tol=tol)
    bf = load_vector(grid, NeumannData(data.f))
    expansion = float(u @ (st.K @ u) - 2.0 * (bf @ u) + bf @ st.u)
    pots = params.potentials
    return FunctionalBreakdown(
        misfit=params.misfit_scale * misfit_value(grid, u, data),
        discrepancy=params.discrepancy_scale * expansion,
        gradient=params.b * _grad_q_term(grid, u, st.w, q),
        well=_well_term(grid, st.vbar, params.eta, pots.v),
        dirichlet=_dirichlet_term(grid, vtilde, params.eta),
    )


def phase_edge_energy(grid: Grid, u: np.ndarray, vtilde: np.ndarray,
                      params: FunctionalParams) -> FunctionalBreakdown:
    """b int psi(v)|grad u|^q + single well + Dirichlet term, no solve."""
    u = np.asarray(u, dtype=float)
    vtilde = np.asarray(vtilde, dtype=float)
    v = 1.0 - vtilde
    q = params.grad_power
    w = weight_from_phase(grid, v, params.eta, params.offset_q, params.potentials)
    vbar = grid.cell_average(v)
    return FunctionalBreakdown(
        gradient=params.b * _grad_q_term(grid, u, w, q),
        well=_well_term(grid, vbar, params.eta, params.potentials.v),
        dirichlet=_dirichlet_term(grid, vtilde, params.eta),
    )
