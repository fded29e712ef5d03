"""Projected descent on the phase field, plus the alternating crack scheme.

The variable is the complement field vtilde (1 inside the sought cavity),
clamped to [0,1] nodewise and pinned to 0 on the safety band after every
step.  Step sizes follow a Barzilai-Borwein rule safeguarded by a
backtracking Armijo test on the projection arc, so the recorded objective
values are non-increasing across accepted steps.  Everything is
deterministic: rerunning a configuration reproduces the trace bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Grid
from .elliptic import NeumannData, load_vector, _pcg, SolverError
from .forward import CauchyData
from .phasefield import PhaseField, project_admissible
from .functionals import (FunctionalParams, FunctionalBreakdown, State,
                          solve_state, misfit_value, misfit_rhs,
                          cavity_objective, reduced_crack_objective,
                          crack_objective, element_energies)
from .gradients import (GradientField, cavity_gradient, reduced_crack_gradient,
                        _psi_eta_prime)

__all__ = [
    "OptimizerConfig",
    "RunTrace",
    "projected_step",
    "minimize_cavity_objective",
    "minimize_reduced_crack_objective",
    "minimize_crack_objective_alternating",
]


@dataclass(frozen=True)
class OptimizerConfig:
    """Descent controls.  stop_tol is a relative-decrease threshold.

    ``pde_solver`` selects how state and adjoint systems are solved inside
    the loop: "pcg" (tolerance pde_tol) or "direct", which factors each
    stiffness once and back-substitutes; the factor is shared between the
    state at an accepted iterate and its adjoint.
    """

    max_iterations: int = 200
    stop_tol: float = 1e-6
    patience: int = 3
    step_init: float = 1.0
    step_min: float = 1e-12
    step_max: float = 1e8
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 40
    use_bb: bool = True
    pde_tol: float = 1e-10
    pde_solver: str = "pcg"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("need at least one iteration")
        if not (0.0 < self.armijo <= 0.5):
            raise ValueError("armijo constant must lie in (0, 1/2]")
        if not (0.0 < self.shrink < 1.0):
            raise ValueError("shrink factor must lie in (0, 1)")
        if not (0.0 < self.step_min <= self.step_init <= self.step_max):
            raise ValueError("step bounds are inconsistent")
        if self.stop_tol < 0 or self.patience < 1 or self.max_backtracks < 0:
            raise ValueError("bad stopping controls")
        if self.pde_solver not in ("pcg", "direct"):
            raise ValueError('pde_solver must be "pcg" or "direct"')


@dataclass
class RunTrace:
    """Per-iteration history of one descent run."""

    iterations: list = field(default_factory=list)
    totals: list = field(default_factory=list)
    terms: list = field(default_factory=list)        # FunctionalBreakdown per row
    steps: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    projected_counts: list = field(default_factory=list)
    converged: bool = False
    message: str = ""

    def record(self, it, breakdown, step, grad_norm, projected):
        self.iterations.append(int(it))
        self.totals.append(float(breakdown.total))
        self.terms.append(breakdown)
        self.steps.append(float(step))
        self.grad_norms.append(float(grad_norm))
        self.projected_counts.append(int(projected))

    @property
    def final_total(self) -> float:
        return self.totals[-1] if self.totals else float("nan")


def projected_step(grid: Grid, vtilde: np.ndarray, gradient: GradientField,
                   step: float) -> np.ndarray:
    """One descent trial: move against the combined density, then project."""
    return project_admissible(grid, vtilde - step * gradient.step_direction())


def _count_active(grid: Grid, vtilde: np.ndarray) -> int:
    free = ~grid.node_in_band
    at_bounds = (vtilde[free] <= 0.0) | (vtilde[free] >= 1.0)
    return int(at_bounds.sum())


def _descent_loop(grid, vtilde0, config, evaluate, gradient_of, callback=None):
    """Shared projected BB/Armijo loop.

    ``evaluate(vtilde, x0)`` returns (breakdown, state); ``gradient_of``
    maps (vtilde, state, previous GradientField or None) to a
    GradientField, the previous one seeding its adjoint solve.
    ``callback(it, vtilde)`` runs after every recorded iterate
    (checkpointing hook).
    """
    vt = project_admissible(grid, np.asarray(vtilde0, dtype=float))
    trace = RunTrace()
    br, state = evaluate(vt, None)
    grad = gradient_of(vt, state, None)
    trace.record(0, br, 0.0, grad.norm(), _count_active(grid, vt))
    if callback is not None:
        callback(0, vt)

    omega = grid.node_area
    step = config.step_init
    prev_vt = None
    prev_dir = None
    small_streak = 0

    for it in range(1, config.max_iterations + 1):
        d = grad.step_direction()
        if np.abs(d).max() == 0.0:
            trace.converged = True
            trace.message = "stationary point: gradient vanishes"
            break
        if config.use_bb and prev_vt is not None:
            s = vt - prev_vt
            y = d - prev_dir
            sy = float((s * y * omega).sum())
            if sy > 0.0:
                step = float(np.clip((s * s * omega).sum() / sy,
                                     config.step_min, config.step_max))
        prev_vt = vt.copy()
        prev_dir = d.copy()

        accepted = False
        pinned = False
        t = step
        for _ in range(config.max_backtracks + 1):
            trial = project_admissible(grid, vt - t * d)
            move2 = float(((trial - vt) ** 2 * omega).sum())
            if move2 == 0.0:
                # projection absorbs the whole move: stationary on the box
                pinned = True
                break
            trial_br, trial_state = evaluate(trial, state.u)
            # Armijo on the projection arc
            if trial_br.total <= br.total - (config.armijo / t) * move2:
                accepted = True
                break
            t *= config.shrink
        if not accepted:
            trace.converged = pinned
            trace.message = ("projected step vanishes: stationary on the constraint set"
                             if pinned else
                             "line search exhausted; returning best iterate")
            break

        decrease = br.total - trial_br.total
        vt, br, state = trial, trial_br, trial_state
        grad = gradient_of(vt, state, grad)
        step = t
        trace.record(it, br, t, grad.norm(), _count_active(grid, vt))
        if callback is not None:
            callback(it, vt)

        if decrease <= config.stop_tol * max(1.0, abs(br.total)):
            small_streak += 1
            if small_streak >= config.patience:
                trace.converged = True
                trace.message = "relative decrease below stop_tol"
                break
        else:
            small_streak = 0
    else:
        trace.message = "iteration budget exhausted"

    return vt, state, trace


def minimize_cavity_objective(grid: Grid, data: CauchyData,
                              params: FunctionalParams, config: OptimizerConfig,
                              *, vtilde0: np.ndarray | None = None,
                              callback=None) -> tuple[PhaseField, RunTrace]:
    """Projected descent on the cavity objective from vtilde0 (default: 0)."""
    if vtilde0 is None:
        vtilde0 = np.zeros(grid.n_nodes)

    def evaluate(vt, x0):
        st = solve_state(grid, vt, data, params, offset_power=2.0,
                         tol=config.pde_tol, x0=x0, method=config.pde_solver)
        return cavity_objective(grid, vt, data, params, state=st), st

    def gradient_of(vt, st, prev):
        return cavity_gradient(grid, vt, data, params, state=st,
                               tol=config.pde_tol, method=config.pde_solver,
                               adjoint_x0=None if prev is None else prev.adjoint)

    vt, _, trace = _descent_loop(grid, vtilde0, config, evaluate, gradient_of,
                                 callback=callback)
    return PhaseField.from_vtilde(vt), trace


def minimize_reduced_crack_objective(grid: Grid, data: CauchyData,
                                     params: FunctionalParams,
                                     config: OptimizerConfig, *,
                                     vtilde0: np.ndarray | None = None,
                                     callback=None) -> tuple[PhaseField, RunTrace]:
    """Projected descent on the reduced crack objective.

    Works for any grad_power >= 2 since only weighted quadratic state
    solves are involved.
    """
    if vtilde0 is None:
        vtilde0 = np.zeros(grid.n_nodes)
    q = params.grad_power

    def evaluate(vt, x0):
        st = solve_state(grid, vt, data, params, offset_power=q,
                         tol=config.pde_tol, x0=x0)
        return reduced_crack_objective(grid, vt, data, params, state=st), st

    def gradient_of(vt, st, prev):
        return reduced_crack_gradient(grid, vt, data, params, state=st,
                                      tol=config.pde_tol,
                                      adjoint_x0=None if prev is None
                                      else prev.adjoint)

    vt, _, trace = _descent_loop(grid, vtilde0, config, evaluate, gradient_of,
                                 callback=callback)
    return PhaseField.from_vtilde(vt), trace


def _crack_u_solve(grid, data, params, state, tol):
    """Exact minimizer of the crack objective over u at fixed phase field.

    The objective is quadratic in u with a positive-definite Hessian
    2(a1s + b) K(w) + a2s diag(m); the boundary mass kills the constant
    kernel, so plain CG applies.
    """
    a1s = params.discrepancy_scale
    a2s = params.misfit_scale
    bf = load_vector(grid, NeumannData(data.f))
    m = np.zeros(grid.n_nodes)
    e = grid.be_nodes[grid.gamma_edges]
    g = data.g[grid.gamma_edges]
    np.add.at(m, e[:, 0], grid.h)
    np.add.at(m, e[:, 1], grid.h)
    z = np.zeros(grid.n_nodes)
    np.add.at(z, e[:, 0], grid.h * g)
    np.add.at(z, e[:, 1], grid.h * g)

    from scipy import sparse
    H = (2.0 * (a1s + params.b)) * state.K + sparse.diags(a2s * m)
    rhs = 2.0 * a1s * bf + a2s * z
    u, info = _pcg(H.tocsr(), rhs, tol=tol, maxiter=max(1000, 10 * grid.n_nodes),
                   deflate=False)
    if not info.converged:
        raise SolverError("u-subproblem hit the iteration limit",
                          residual=info.residual, iterations=info.iterations)
    return u


def minimize_crack_objective_alternating(grid: Grid, data: CauchyData,
                                         params: FunctionalParams,
                                         config: OptimizerConfig, *,
                                         vtilde0: np.ndarray | None = None
                                         ) -> tuple[np.ndarray, PhaseField, RunTrace]:
    """Alternate exact u-solves with projected phase-field steps (q = 2).

    The phase-field half-step uses the closed-form derivative of the
    two-variable objective at fixed u; the int f U discrepancy piece
    reduces to psi' |grad state|^2 by the state equation, so no adjoint
    solve is needed.
    """
    if params.grad_power != 2.0:
        raise ValueError("alternating minimization is limited to grad_power = 2")
    if vtilde0 is None:
        vtilde0 = np.zeros(grid.n_nodes)

    pots = params.potentials

    def evaluate_joint(u, vt, x0=None):
        st = solve_state(grid, vt, data, params, offset_power=2.0,
                         tol=config.pde_tol, x0=x0)
        return crack_objective(grid, u, vt, data, params, state=st), st

    def vt_gradient(u, vt, st):
        psip = _psi_eta_prime(params, st.vbar, st.offset)
        uAu = element_energies(grid, u)
        sAs = element_energies(grid, st.u)
        h2 = grid.h ** 2
        a1s = params.discrepancy_scale
        D = psip * (a1s * (sAs - uAu) - params.b * uAu) / h2 \
            - pots.v_prime(st.vbar) / params.eta
        density = grid.node_average_of_cells(D)
        from .elliptic import unit_stiffness
        dirichlet = 2.0 * params.eta * (unit_stiffness(grid) @ vt)
        freem = ~grid.node_in_band
        density[~freem] = 0.0
        dirichlet[~freem] = 0.0
        return GradientField(density=density, dirichlet_part=dirichlet,
                             node_area=grid.node_area, free=freem)

    vt = project_admissible(grid, np.asarray(vtilde0, dtype=float))
    _, st = evaluate_joint(np.zeros(grid.n_nodes), vt)
    u = _crack_u_solve(grid, data, params, st, config.pde_tol)
    br, st = evaluate_joint(u, vt, x0=st.u)
    trace = RunTrace()
    grad = vt_gradient(u, vt, st)
    trace.record(0, br, 0.0, grad.norm(), _count_active(grid, vt))

    omega = grid.node_area
    step = config.step_init
    prev = None
    small_streak = 0
    for it in range(1, config.max_iterations + 1):
        d = grad.step_direction()
        if np.abs(d).max() == 0.0:
            trace.converged = True
            trace.message = "stationary point: gradient vanishes"
            break
        if config.use_bb and prev is not None:
            s = vt - prev[0]
            y = d - prev[1]
            sy = float((s * y * omega).sum())
            if sy > 0.0:
                step = float(np.clip((s * s * omega).sum() / sy,
                                     config.step_min, config.step_max))
        prev = (vt.copy(), d.copy())

        accepted = False
        pinned = False
        t = step
        for _ in range(config.max_backtracks + 1):
            trial = project_admissible(grid, vt - t * d)
            move2 = float(((trial - vt) ** 2 * omega).sum())
            if move2 == 0.0:
                pinned = True
                break
            trial_br, trial_st = evaluate_joint(u, trial, x0=st.u)
            if trial_br.total <= br.total - (config.armijo / t) * move2:
                accepted = True
                break
            t *= config.shrink
        if not accepted:
            trace.converged = pinned
            trace.message = ("projected step vanishes: stationary on the constraint set"
                             if pinned else
                             "line search exhausted; returning best iterate")
            break

        vt, br, st = trial, trial_br, trial_st
        step = t
        # exact u half-step at the new phase field, never increases the value
        u = _crack_u_solve(grid, data, params, st, config.pde_tol)
        br = crack_objective(grid, u, vt, data, params, state=st)
        grad = vt_gradient(u, vt, st)
        prev_total = trace.totals[-1]
        trace.record(it, br, t, grad.norm(), _count_active(grid, vt))

        if prev_total - br.total <= config.stop_tol * max(1.0, abs(br.total)):
            small_streak += 1
            if small_streak >= config.patience:
                trace.converged = True
                trace.message = "relative decrease below stop_tol"
                break
        else:
            small_streak = 0
    else:
        trace.message = "iteration budget exhausted"

    return u, PhaseField.from_vtilde(vt), trace
