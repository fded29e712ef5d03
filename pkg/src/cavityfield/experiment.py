"""Batch front end: config parsing, data generation, reconstruction runs.

A flat key=value config (section.key = value) fixes the domain, the true
cavity, the grids, the noise levels, the functional and the optimizer.
``run_reconstruction`` executes one noise level end to end; ``epsilon_sweep``
walks a decreasing noise schedule with warm starts and reports how the
thresholded reconstruction approaches the true cavity in the Hausdorff
distance.  All outputs are deterministic given the config.
"""

from __future__ import annotations

import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .geometry import (SIDES, DomainSpec, CavityShape, Grid, GeometryError,
                       build_grid, full_boundary, rasterize_cavity)
from .elliptic import NeumannData, solve_on_cells
from .forward import CauchyData, GroundTruth, solve_direct_cavity, add_noise
from .phasefield import (PotentialSet, PhaseField, EtaSchedule, BandReport,
                         project_admissible, check_band_constraint)
from .functionals import FunctionalParams, solve_state, misfit_value
from .gradients import (cavity_gradient, reduced_crack_gradient,
                        cavity_directional_derivative,
                        reduced_crack_directional_derivative)
from .optimize import (OptimizerConfig, RunTrace, minimize_cavity_objective,
                       minimize_reduced_crack_objective)
from . import fieldio

__all__ = [
    "StageError",
    "ExperimentConfig",
    "ExperimentBundle",
    "ReconstructionResult",
    "SweepResult",
    "make_current",
    "restrict_edge_values",
    "prepare_experiment",
    "functional_params_for",
    "threshold_set",
    "hausdorff_distance",
    "symmetric_difference_area",
    "smoothed_indicator",
    "state_consistency",
    "misfit_floor",
    "misfit_decay_study",
    "run_reconstruction",
    "epsilon_sweep",
    "run_gradient_check",
    "recompute_metrics",
]


class StageError(RuntimeError):
    """Failure annotated with the pipeline stage that raised it."""

    def __init__(self, stage: str, original: BaseException):
        super().__init__(f"[{stage}] {original}")
        self.stage = stage
        self.original = original


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# -- configuration ----------------------------------------------------------

_PATTERNS = ("uniform_dipole", "cosine", "perimeter")
_OBJECTIVES = ("cavity", "reduced_crack")
_PROFILES = ("smoothstep", "power")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one reconstruction experiment depends on.

    The weight profile defaults to the power family here, unlike the
    library-level potential default: the smoothstep profile is flat at
    v = 1, which makes the no-cavity initial field a critical point that
    projected descent cannot leave.
    """

    domain: DomainSpec = field(default_factory=DomainSpec)
    cavity: CavityShape = field(default_factory=CavityShape.empty)
    resolution: int = 64
    data_refine: int = 2
    epsilons: tuple = (0.1, 0.05, 0.02, 0.01)
    rho: float = 1.0
    seed: int = 0
    schedule: EtaSchedule = field(default_factory=EtaSchedule)
    a1: float = 1.0
    a2: float = 1.0
    b: float = 0.0
    misfit_exponent: float = 0.5
    discrepancy_exponent: float = 0.5
    grad_power: float = 2.0
    band_lo: float = 0.4
    band_hi: float = 0.6
    profile: str = "power"
    profile_gamma: float = 2.0
    pattern: str = "uniform_dipole"
    amplitude: float = 1.0
    current_side: str = "bottom"
    mode: int = 1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    objective: str = "cavity"
    threshold: float = 0.5
    outdir: str = ""
    checkpoint_every: int = 0

    def __post_init__(self):
        if not (self.band_lo < self.threshold < self.band_hi):
            raise ValueError("threshold must lie strictly inside (band_lo, band_hi)")
        if self.resolution < 4:
            raise ValueError("resolution too small")
        if self.data_refine < 1:
            raise ValueError("data_refine must be a positive integer")
        eps = tuple(float(e) for e in self.epsilons)
        if not eps or any(e <= 0 for e in eps):
            raise ValueError("epsilons must be positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilons must be strictly decreasing")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.objective not in _OBJECTIVES:
            raise ValueError(f"objective must be one of {_OBJECTIVES}")
        if self.pattern not in _PATTERNS:
            raise ValueError(f"pattern must be one of {_PATTERNS}")
        if self.profile not in _PROFILES:
            raise ValueError(f"profile must be one of {_PROFILES}")
        if self.current_side not in SIDES:
            raise ValueError(f"current_side must be one of {SIDES}")
        if self.mode < 1 or self.amplitude <= 0:
            raise ValueError("need mode >= 1 and amplitude > 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")

    def potentials(self) -> PotentialSet:
        if self.profile == "smoothstep":
            return PotentialSet.default()
        return PotentialSet.with_power_profile(self.profile_gamma)

    # -- flat key=value settings ------------------------------------------

    def to_settings(self) -> dict:
        r = lambda x: repr(float(x))
        return {
            "domain.width": r(self.domain.width),
            "domain.height": r(self.domain.height),
            "domain.delta": r(self.domain.delta),
            "domain.gamma": _render_side_spec(self.domain.gamma),
            "domain.gamma_tilde": _render_side_spec(self.domain.gamma_tilde),
            "cavity.shape": self.cavity.serialize(),
            "grid.resolution": str(self.resolution),
            "grid.data_refine": str(self.data_refine),
            "noise.epsilons": ",".join(repr(float(e)) for e in self.epsilons),
            "noise.rho": r(self.rho),
            "noise.seed": str(self.seed),
            "schedule.eta_scale": r(self.schedule.eta_scale),
            "schedule.eta_power": r(self.schedule.eta_power),
            "schedule.band_factor": r(self.schedule.band_factor),
            "functional.a1": r(self.a1),
            "functional.a2": r(self.a2),
            "functional.b": r(self.b),
            "functional.misfit_exponent": r(self.misfit_exponent),
            "functional.discrepancy_exponent": r(self.discrepancy_exponent),
            "functional.grad_power": r(self.grad_power),
            "functional.band_lo": r(self.band_lo),
            "functional.band_hi": r(self.band_hi),
            "potential.profile": self.profile,
            "potential.gamma": r(self.profile_gamma),
            "current.pattern": self.pattern,
            "current.amplitude": r(self.amplitude),
            "current.side": self.current_side,
            "current.mode": str(self.mode),
            "optimizer.max_iterations": str(self.optimizer.max_iterations),
            "optimizer.stop_tol": r(self.optimizer.stop_tol),
            "optimizer.patience": str(self.optimizer.patience),
            "optimizer.step_init": r(self.optimizer.step_init),
            "optimizer.step_min": r(self.optimizer.step_min),
            "optimizer.step_max": r(self.optimizer.step_max),
            "optimizer.armijo": r(self.optimizer.armijo),
            "optimizer.shrink": r(self.optimizer.shrink),
            "optimizer.max_backtracks": str(self.optimizer.max_backtracks),
            "optimizer.use_bb": "true" if self.optimizer.use_bb else "false",
            "optimizer.pde_tol": r(self.optimizer.pde_tol),
            "experiment.objective": self.objective,
            "experiment.threshold": r(self.threshold),
            "experiment.outdir": self.outdir,
            "experiment.checkpoint_every": str(self.checkpoint_every),
        }

    @classmethod
    def from_settings(cls, settings: dict) -> "ExperimentConfig":
        base = cls().to_settings()
        unknown = sorted(set(settings) - set(base))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        s = {**base, **{k: str(v) for k, v in settings.items()}}
        domain = DomainSpec(width=float(s["domain.width"]),
                            height=float(s["domain.height"]),
                            delta=float(s["domain.delta"]),
                            gamma=_parse_side_spec(s["domain.gamma"]),
                            gamma_tilde=_parse_side_spec(s["domain.gamma_tilde"]))
        schedule = EtaSchedule(eta_scale=float(s["schedule.eta_scale"]),
                               eta_power=float(s["schedule.eta_power"]),
                               band_factor=float(s["schedule.band_factor"]))
        opt = OptimizerConfig(
            max_iterations=int(s["optimizer.max_iterations"]),
            stop_tol=float(s["optimizer.stop_tol"]),
            patience=int(s["optimizer.patience"]),
            step_init=float(s["optimizer.step_init"]),
            step_min=float(s["optimizer.step_min"]),
            step_max=float(s["optimizer.step_max"]),
            armijo=float(s["optimizer.armijo"]),
            shrink=float(s["optimizer.shrink"]),
            max_backtracks=int(s["optimizer.max_backtracks"]),
            use_bb=_parse_bool(s["optimizer.use_bb"]),
            pde_tol=float(s["optimizer.pde_tol"]))
        return cls(
            domain=domain,
            cavity=CavityShape.deserialize(s["cavity.shape"]),
            resolution=int(s["grid.resolution"]),
            data_refine=int(s["grid.data_refine"]),
            epsilons=tuple(float(t) for t in s["noise.epsilons"].split(",") if t.strip()),
            rho=float(s["noise.rho"]),
            seed=int(s["noise.seed"]),
            schedule=schedule,
            a1=float(s["functional.a1"]),
            a2=float(s["functional.a2"]),
            b=float(s["functional.b"]),
            misfit_exponent=float(s["functional.misfit_exponent"]),
            discrepancy_exponent=float(s["functional.discrepancy_exponent"]),
            grad_power=float(s["functional.grad_power"]),
            band_lo=float(s["functional.band_lo"]),
            band_hi=float(s["functional.band_hi"]),
            profile=s["potential.profile"],
            profile_gamma=float(s["potential.gamma"]),
            pattern=s["current.pattern"],
            amplitude=float(s["current.amplitude"]),
            current_side=s["current.side"],
            mode=int(s["current.mode"]),
            optimizer=opt,
            objective=s["experiment.objective"],
            threshold=float(s["experiment.threshold"]),
            outdir=s["experiment.outdir"],
            checkpoint_every=int(s["experiment.checkpoint_every"]))


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_side_spec(text: str):
    text = text.strip()
    if text == "all":
        return full_boundary()
    segs = []
    for part in text.split(";"):
        bits = part.split(":")
        if len(bits) != 3:
            raise ValueError(f"expected side:t0:t1, got {part!r}")
        segs.append((bits[0].strip(), float(bits[1]), float(bits[2])))
    return tuple(segs)


def _render_side_spec(segs) -> str:
    if tuple(segs) == full_boundary():
        return "all"
    return ";".join(f"{s}:{repr(float(a))}:{repr(float(b))}" for s, a, b in segs)


def functional_params_for(config: ExperimentConfig, epsilon: float) -> FunctionalParams:
    return FunctionalParams.from_epsilon(
        epsilon, config.schedule,
        a1=config.a1, a2=config.a2, b=config.b,
        misfit_exponent=config.misfit_exponent,
        discrepancy_exponent=config.discrepancy_exponent,
        grad_power=config.grad_power,
        band_lo=config.band_lo, band_hi=config.band_hi,
        potentials=config.potentials())


# -- current patterns and data generation -----------------------------------

def make_current(grid: Grid, config: ExperimentConfig) -> NeumannData:
    """Injected current density at boundary-edge midpoints, exactly zero-mean."""
    a = config.amplitude
    vals = np.zeros(len(grid.be_arc))
    if config.pattern == "uniform_dipole":
        vals[grid.be_side == SIDES.index("bottom")] = a
        vals[grid.be_side == SIDES.index("top")] = -a
    elif config.pattern == "cosine":
        mask = grid.be_side == SIDES.index(config.current_side)
        n = int(mask.sum())
        j = np.arange(n)  # edges are arc-ordered within each side
        vals[mask] = a * np.sqrt(2.0) * np.cos(config.mode * np.pi * (j + 0.5) / n)
    else:  # perimeter
        w, hgt = grid.spec.width, grid.spec.height
        perim = 2.0 * (w + hgt)
        s = np.empty_like(grid.be_arc)
        # counterclockwise arc length; be_arc is normalized per side
        for idx, start, flip, length in ((0, 0.0, False, w),
                                         (1, w, False, hgt),
                                         (2, w + hgt, True, w),
                                         (3, 2 * w + hgt, True, hgt)):
            m = grid.be_side == idx
            phys = grid.be_arc[m] * length
            s[m] = start + (length - phys if flip else phys)
        vals = a * np.sqrt(2.0) * np.cos(2.0 * np.pi * config.mode * s / perim)
    support = vals != 0.0
    if support.any():
        vals[support] -= vals[support].mean()
    data = NeumannData(vals)
    data.check(grid)
    return data


def restrict_edge_values(fine: Grid, coarse: Grid, values: np.ndarray) -> np.ndarray:
    """Average fine-edge values onto coarse edges, side by side."""
    if fine.nx % coarse.nx or fine.ny % coarse.ny:
        raise ValueError("fine grid is not a refinement of the coarse grid")
    r = fine.nx // coarse.nx
    if fine.ny // coarse.ny != r:
        raise ValueError("refinement factor differs between axes")
    values = np.asarray(values, dtype=float)
    out = np.empty(len(coarse.be_arc))
    for s in range(len(SIDES)):
        fm = fine.be_side == s
        cm = coarse.be_side == s
        out[cm] = values[fm].reshape(-1, r).mean(axis=1)
    return out


@dataclass
class ExperimentBundle:
    """Prepared inputs shared by every run of one experiment."""

    config: ExperimentConfig
    grid: Grid                    # reconstruction grid
    fine_grid: Grid               # data-generation grid
    current: NeumannData          # restricted to the reconstruction grid
    truth: GroundTruth            # direct solve on the fine grid
    retained: np.ndarray          # true conducting cells, reconstruction grid
    u0: np.ndarray                # direct potential on the reconstruction grid
    base: CauchyData              # noiseless restricted Cauchy pair
    noisy: tuple                  # one CauchyData per config epsilon


def prepare_experiment(config: ExperimentConfig) -> ExperimentBundle:
    """Generate truth data on the fine grid and restrict it for inversion."""
    with _stage("data"):
        grid = build_grid(config.domain, config.resolution)
        fine = build_grid(config.domain, config.resolution * config.data_refine)
        f_fine = make_current(fine, config)
        truth = solve_direct_cavity(fine, config.cavity, f_fine)

        f_c = restrict_edge_values(fine, grid, f_fine.values)
        g_c = restrict_edge_values(fine, grid, truth.data.g)
        current = NeumannData(f_c).projected(grid)
        gmask = grid.gamma_edges
        g_c[gmask] -= g_c[gmask].mean()
        g_c[~gmask] = 0.0
        base = CauchyData(f=current.values, g=g_c, epsilon=0.0)
        base.check(grid)

        retained = rasterize_cavity(grid, config.cavity)
        u0, _ = solve_on_cells(grid, retained, current)
        noisy = tuple(add_noise(grid, base, eps, rho=config.rho,
                                seed=config.seed + k)
                      for k, eps in enumerate(config.epsilons))
    return ExperimentBundle(config=config, grid=grid, fine_grid=fine,
                            current=current, truth=truth, retained=retained,
                            u0=u0, base=base, noisy=noisy)


# -- metrics -----------------------------------------------------------------

def threshold_set(grid: Grid, phase, c: float) -> np.ndarray:
    """Cells whose average phase value exceeds c (the conducting estimate)."""
    v = phase.values if isinstance(phase, PhaseField) else np.asarray(phase, float)
    return grid.cell_average(v) > c


def hausdorff_distance(mask_a: np.ndarray, mask_b: np.ndarray, h: float) -> float:
    """Hausdorff distance between two cell masks on a common grid.

    Zero iff the masks coincide; +inf when exactly one is empty.
    """
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("masks live on different grids")
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return float("inf")

    def dist_to(mask):
        # EDT needs at least one zero in the input
        if mask.all():
            return np.zeros(mask.shape)
        return ndimage.distance_transform_edt(~mask, sampling=h)

    to_a = dist_to(a)
    to_b = dist_to(b)
    return float(max(to_b[a].max(), to_a[b].max()))


def symmetric_difference_area(mask_a: np.ndarray, mask_b: np.ndarray, h: float) -> float:
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("masks live on different grids")
    return float((a ^ b).sum() * h * h)


def smoothed_indicator(grid: Grid, cavity: CavityShape, eta: float) -> np.ndarray:
    """Admissible vtilde: the cavity indicator mollified over a 2*eta layer.

    Equals 1 on the cavity, 0 beyond distance 2*eta from it, with a
    monotone cubic ramp in between (midpoint at distance eta).
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if cavity.kind == "disc":
        cx, cy, r = cavity.params
        d = np.maximum(np.hypot(grid.node_x - cx, grid.node_y - cy) - r, 0.0)
    else:
        inside = cavity.contains(grid.node_x, grid.node_y)
        if not inside.any():
            return np.zeros(grid.n_nodes)
        d = ndimage.distance_transform_edt(
            ~inside.reshape(grid.ny + 1, grid.nx + 1), sampling=grid.h).ravel()
    t = np.clip(d / (2.0 * eta), 0.0, 1.0)
    v = t * t * (3.0 - 2.0 * t)
    return project_admissible(grid, 1.0 - v)


def state_consistency(grid: Grid, vtilde: np.ndarray, data: CauchyData,
                      params: FunctionalParams, u0: np.ndarray, *,
                      tol: float = 1e-10) -> float:
    """L2 distance between the weighted state psi_eta(v)*u and the true potential."""
    st = solve_state(grid, vtilde, data, params, offset_power=2.0, tol=tol)
    pots = params.potentials
    v = 1.0 - np.asarray(vtilde, dtype=float)
    w_node = (1.0 - st.offset) * pots.psi(v) + st.offset
    err = w_node * st.u - u0
    return float(np.sqrt((err ** 2 * grid.node_area).sum()))


def misfit_floor(bundle: ExperimentBundle) -> float:
    """Boundary misfit of the sharp-geometry coarse solve against the data.

    Both grids solve the same exact problem; the gap is pure discretization
    error, independent of the noise level, and is subtracted when fitting
    decay rates.
    """
    return misfit_value(bundle.grid, bundle.u0, bundle.base)


def misfit_decay_study(config: ExperimentConfig,
                       bundle: ExperimentBundle | None = None) -> list:
    """Raw boundary misfit of the mollified true indicator per noise level."""
    if bundle is None:
        bundle = prepare_experiment(config)
    grid = bundle.grid
    floor = misfit_floor(bundle)
    rows = []
    for eps, data in zip(config.epsilons, bundle.noisy):
        params = functional_params_for(config, eps)
        vt = smoothed_indicator(grid, config.cavity, params.eta)
        st = solve_state(grid, vt, data, params, offset_power=2.0,
                         tol=config.optimizer.pde_tol)
        raw = misfit_value(grid, st.u, data)
        rows.append({"epsilon": eps, "eta": params.eta, "misfit": raw,
                     "floor": floor, "excess": max(raw - floor, 0.0)})
    return rows


# -- reconstruction runs -----------------------------------------------------

@dataclass
class ReconstructionResult:
    """One noise level, minimized and measured against the truth."""

    epsilon: float
    eta: float
    band_radius: float
    phase: PhaseField
    mask: np.ndarray              # thresholded conducting cells {v > c}
    hausdorff: float              # cavity estimate vs true cavity
    symdiff_area: float
    symdiff_fraction: float
    final_misfit: float           # raw boundary misfit at the final iterate
    misfit_history: list
    band_report: BandReport
    state_error: float
    trace: RunTrace
    runtime_s: float
    outdir: str = ""

    def metrics(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "eta": self.eta,
            "band_radius": self.band_radius,
            "hausdorff": self.hausdorff,
            "symdiff_area": self.symdiff_area,
            "symdiff_fraction": self.symdiff_fraction,
            "final_misfit": self.final_misfit,
            "final_total": self.trace.final_total,
            "iterations": self.trace.iterations[-1] if self.trace.iterations else 0,
            "converged": self.trace.converged,
            "band_ok": self.band_report.ok,
            "state_error": self.state_error,
        }


def _minimize(grid, data, params, config, vtilde0, callback):
    if config.objective == "cavity":
        return minimize_cavity_objective(grid, data, params, config.optimizer,
                                         vtilde0=vtilde0, callback=callback)
    return minimize_reduced_crack_objective(grid, data, params, config.optimizer,
                                            vtilde0=vtilde0, callback=callback)


def run_reconstruction(config: ExperimentConfig, *, epsilon: float | None = None,
                       vtilde0: np.ndarray | None = None,
                       bundle: ExperimentBundle | None = None,
                       outdir: str | None = None) -> ReconstructionResult:
    """Reconstruct at one noise level and write the run artifacts."""
    t0 = time.perf_counter()
    if bundle is None:
        bundle = prepare_experiment(config)
    grid = bundle.grid
    if epsilon is None:
        epsilon = config.epsilons[0]
    try:
        k = config.epsilons.index(epsilon)
    except ValueError:
        raise StageError("config", ValueError(
            f"epsilon {epsilon!r} is not in the configured sweep")) from None
    data = bundle.noisy[k]
    params = functional_params_for(config, epsilon)

    rundir = outdir if outdir is not None else config.outdir
    callback = None
    if rundir:
        os.makedirs(rundir, exist_ok=True)
        if config.checkpoint_every > 0:
            every = config.checkpoint_every

            def callback(it, vt):
                if it % every == 0:
                    fieldio.dump_field(os.path.join(rundir, f"checkpoint_{it:04d}.txt"),
                                       grid, vt)

    with _stage("minimize"):
        phase, trace = _minimize(grid, data, params, config, vtilde0, callback)

    with _stage("metrics"):
        mask = threshold_set(grid, phase, config.threshold)
        est_cavity = (~mask).reshape(grid.ny, grid.nx)
        true_cavity = (~bundle.retained).reshape(grid.ny, grid.nx)
        hd = hausdorff_distance(est_cavity, true_cavity, grid.h)
        sd = symmetric_difference_area(est_cavity, true_cavity, grid.h)
        area = config.domain.width * config.domain.height
        st = solve_state(grid, phase.vtilde, data, params, offset_power=2.0,
                         tol=config.optimizer.pde_tol)
        final_misfit = misfit_value(grid, st.u, data)
        report = check_band_constraint(grid, phase.values, config.cavity,
                                       params.band_radius, params.band_lo,
                                       params.band_hi)
        state_err = state_consistency(grid, phase.vtilde, data, params,
                                      bundle.u0, tol=config.optimizer.pde_tol)
        mscale = params.misfit_scale
        history = [b.misfit / mscale if mscale > 0 else float("nan")
                   for b in trace.terms]

    result = ReconstructionResult(
        epsilon=epsilon, eta=params.eta, band_radius=params.band_radius,
        phase=phase, mask=mask, hausdorff=hd, symdiff_area=sd,
        symdiff_fraction=sd / area, final_misfit=final_misfit,
        misfit_history=history, band_report=report, state_error=state_err,
        trace=trace, runtime_s=time.perf_counter() - t0, outdir=rundir or "")

    if rundir:
        with _stage("artifacts"):
            _write_run_artifacts(rundir, config, bundle, data, result, st.u)
    return result


def _write_run_artifacts(rundir, config, bundle, data, result, u_final):
    grid = bundle.grid
    settings = config.to_settings()
    settings["experiment.outdir"] = result.outdir
    with open(os.path.join(rundir, "config.txt"), "w") as fh:
        fh.write(fieldio.config_to_text(settings))
    fieldio.cauchy_to_csv(os.path.join(rundir, "data.csv"), grid, data)
    fieldio.trace_to_csv(os.path.join(rundir, "trace.csv"), result.trace)
    fieldio.dump_field(os.path.join(rundir, "phase.txt"), grid, result.phase.values)
    fieldio.dump_pgm(os.path.join(rundir, "phase.pgm"), grid, result.phase.values)
    fieldio.dump_field(os.path.join(rundir, "state.txt"), grid, u_final)
    fieldio.dump_field(os.path.join(rundir, "truth_potential.txt"), grid, bundle.u0)
    fieldio.metrics_to_text(os.path.join(rundir, "metrics.txt"), result.metrics())
    fieldio.write_manifest(os.path.join(rundir, "manifest.txt"), rundir)


@dataclass
class SweepResult:
    rows: list
    results: list
    outdir: str = ""


def epsilon_sweep(config: ExperimentConfig, *,
                  bundle: ExperimentBundle | None = None,
                  outdir: str | None = None) -> SweepResult:
    """Walk the noise levels from largest to smallest with warm starts.

    Each level starts from the previous minimizer (continuation); failures
    are recorded per row and the sweep continues.
    """
    if bundle is None:
        bundle = prepare_experiment(config)
    basedir = outdir if outdir is not None else config.outdir
    rows = []
    results = []
    vt = None
    for k, eps in enumerate(config.epsilons):
        rundir = os.path.join(basedir, f"eps{k}") if basedir else None
        row = {"epsilon": eps, "eta": config.schedule.eta(eps),
               "band_radius": config.schedule.band_radius(config.schedule.eta(eps)),
               "hausdorff": float("nan"), "symdiff_area": float("nan"),
               "final_misfit": float("nan"), "state_error": float("nan"),
               "error": ""}
        try:
            res = run_reconstruction(config, epsilon=eps, vtilde0=vt,
                                     bundle=bundle, outdir=rundir)
            vt = res.phase.vtilde
            row.update(hausdorff=res.hausdorff, symdiff_area=res.symdiff_area,
                       final_misfit=res.final_misfit, state_error=res.state_error)
            results.append(res)
        except StageError as exc:
            row["error"] = str(exc)
            results.append(None)
        rows.append(row)
    if basedir:
        os.makedirs(basedir, exist_ok=True)
        _write_sweep_table(os.path.join(basedir, "sweep.csv"), rows)
    return SweepResult(rows=rows, results=results, outdir=basedir or "")


def _write_sweep_table(path, rows):
    cols = ("epsilon", "eta", "band_radius", "hausdorff", "symdiff_area",
            "final_misfit", "state_error", "error")
    lines = [",".join(cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = row[c]
            cells.append(repr(float(v)) if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- diagnostics -------------------------------------------------------------

def run_gradient_check(config: ExperimentConfig, *, directions: int = 3,
                       step: float = 1e-5, seed: int = 0) -> dict:
    """Finite-difference and duality checks of every descent derivative.

    Returns the worst relative finite-difference error and the worst
    adjoint/sensitivity discrepancy for the cavity objective and for the
    reduced crack objective at grad_power 2 and 3.
    """
    from .functionals import cavity_objective, reduced_crack_objective

    bundle = prepare_experiment(config)
    grid = bundle.grid
    data = bundle.noisy[0]
    eps = config.epsilons[0]
    rng = np.random.default_rng(seed)

    params2 = functional_params_for(config, eps)
    vt = smoothed_indicator(grid, config.cavity, params2.eta)
    if not vt.any():
        # no cavity configured: probe around a generic interior bump
        cx = 0.5 * grid.spec.width
        cy = 0.5 * grid.spec.height
        r2 = (grid.node_x - cx) ** 2 + (grid.node_y - cy) ** 2
        vt = np.exp(-r2 / (0.2 * grid.spec.width) ** 2)
    # keep free values strictly inside (0,1): the clamped potentials are
    # only piecewise smooth at the box bounds, so probing on the bounds
    # would difference across a kink
    vt = project_admissible(grid, 0.05 + 0.9 * vt)

    free = ~grid.node_in_band

    def direction():
        d = rng.standard_normal(grid.n_nodes)
        d[~free] = 0.0
        return d / np.abs(d).max()

    out = {"fd_cavity": 0.0, "fd_crack2": 0.0, "fd_crack3": 0.0,
           "dual_cavity": 0.0, "dual_crack2": 0.0, "dual_crack3": 0.0}
    tol = 1e-13

    params3 = replace(params2, grad_power=3.0,
                      offset_q=config.schedule.offset(params2.eta, 3.0))
    cases = [
        ("cavity",
         lambda v: cavity_objective(grid, v, data, params2).total,
         lambda v, d: cavity_directional_derivative(grid, v, d, data, params2, tol=tol),
         lambda v: cavity_gradient(grid, v, data, params2, tol=tol)),
        ("crack2",
         lambda v: reduced_crack_objective(grid, v, data, params2).total,
         lambda v, d: reduced_crack_directional_derivative(grid, v, d, data,
                                                           params2, tol=tol),
         lambda v: reduced_crack_gradient(grid, v, data, params2, tol=tol)),
        ("crack3",
         lambda v: reduced_crack_objective(grid, v, data, params3).total,
         lambda v, d: reduced_crack_directional_derivative(grid, v, d, data,
                                                           params3, tol=tol),
         lambda v: reduced_crack_gradient(grid, v, data, params3, tol=tol)),
    ]

    for name, value, direct, gradient in cases:
        g = gradient(vt)
        for _ in range(directions):
            d = direction()
            fd = (value(vt + step * d) - value(vt - step * d)) / (2.0 * step)
            dd = direct(vt, d)
            pa = g.pair(d)
            scale = max(1.0, abs(fd), abs(dd))
            out[f"fd_{name}"] = max(out[f"fd_{name}"], abs(fd - dd) / scale)
            out[f"dual_{name}"] = max(out[f"dual_{name}"],
                                      abs(pa - dd) / max(1.0, abs(pa), abs(dd)))
    return out


def recompute_metrics(rundir: str) -> dict:
    """Rebuild the truth from a run's config copy and re-measure its field."""
    with _stage("metrics"):
        with open(os.path.join(rundir, "config.txt")) as fh:
            settings = fieldio.parse_config_text(fh.read())
        config = ExperimentConfig.from_settings(settings)
        bundle = prepare_experiment(config)
        grid = bundle.grid
        nx, ny, h, v = fieldio.load_field(os.path.join(rundir, "phase.txt"))
        if (nx, ny) != (grid.nx, grid.ny) or abs(h - grid.h) > 1e-12:
            raise ValueError("phase dump does not match the configured grid")
        data = fieldio.cauchy_from_csv(os.path.join(rundir, "data.csv"), grid)
        params = functional_params_for(config, data.epsilon)
        phase = PhaseField(values=v)
        mask = threshold_set(grid, phase, config.threshold)
        est_cavity = (~mask).reshape(grid.ny, grid.nx)
        true_cavity = (~bundle.retained).reshape(grid.ny, grid.nx)
        st = solve_state(grid, phase.vtilde, data, params, offset_power=2.0,
                         tol=config.optimizer.pde_tol)
        report = check_band_constraint(grid, phase.values, config.cavity,
                                       params.band_radius, params.band_lo,
                                       params.band_hi)
        area = config.domain.width * config.domain.height
        sd = symmetric_difference_area(est_cavity, true_cavity, grid.h)
        return {
            "epsilon": data.epsilon,
            "eta": params.eta,
            "band_radius": params.band_radius,
            "hausdorff": hausdorff_distance(est_cavity, true_cavity, grid.h),
            "symdiff_area": sd,
            "symdiff_fraction": sd / area,
            "final_misfit": misfit_value(grid, st.u, data),
            "band_ok": report.ok,
            "state_error": state_consistency(grid, phase.vtilde, data, params,
                                             bundle.u0,
                                             tol=config.optimizer.pde_tol),
        }
