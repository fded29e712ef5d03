"""End-to-end acceptance checks, one numbered criterion per test.

Every test prints a single line

    criterion N: PASS - measured values (pinned tolerances)

or its FAIL twin, then asserts the same condition, so the verdict and
the numbers behind it always appear in the captured output.  The two
full-resolution reconstruction sweeps behind criteria 7 and 9 run once
in module-scoped fixtures; the remaining criteria are standalone.
"""

import time

import numpy as np
import pytest
from scipy import ndimage

from cavityfield import (
    CavityShape,
    DomainSpec,
    FunctionalParams,
    OptimizerConfig,
    PotentialSet,
    WeightField,
    add_noise,
    analytic_strip_solution,
    build_grid,
    caccioppoli_ratio,
    cavity_directional_derivative,
    cavity_gradient,
    cavity_objective,
    crack_directional_derivative,
    crack_objective,
    interface_energy,
    project_admissible,
    reduced_crack_directional_derivative,
    reduced_crack_gradient,
    reduced_crack_objective,
    sensitivity_solve,
    smoothed_indicator,
    solve_direct_cavity,
    solve_state,
    strip_current,
)
from cavityfield.experiment import (
    ExperimentConfig,
    epsilon_sweep,
    misfit_decay_study,
    prepare_experiment,
)

RECON_EPSILONS = (0.1, 0.05, 0.02, 0.01)


def _verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, flush=True)
    assert ok, line


def _smooth_unit_field(grid, rng):
    """Random nodal field smoothed to grid-independent wiggles, range [0,1]."""
    z = rng.standard_normal((grid.ny + 1, grid.nx + 1))
    z = ndimage.gaussian_filter(z, sigma=3.0, mode="nearest").ravel()
    return (z - z.min()) / (z.max() - z.min())


# -- criterion 1: forward solver against the closed-form strip solution ------

def test_criterion_1_forward_strip_accuracy():
    t0 = time.perf_counter()
    spec = DomainSpec(width=1.0, height=2.0)
    errs = {}
    for res in (64, 128):
        grid = build_grid(spec, res)
        truth = solve_direct_cavity(grid, CavityShape.empty(),
                                    strip_current(grid, np.pi))
        exact = analytic_strip_solution(np.pi, 2.0, grid.node_x, grid.node_y)
        exact = exact - grid.gamma_mean(exact)
        num = np.sqrt(((truth.u0 - exact) ** 2 * grid.node_area).sum())
        den = np.sqrt((exact ** 2 * grid.node_area).sum())
        errs[res] = float(num / den)
    order = float(np.log2(errs[64] / errs[128]))
    wall = time.perf_counter() - t0
    ok = errs[128] <= 0.02 and order >= 1.8 and wall <= 30.0
    _verdict(1, ok, f"rel_l2={errs[128]:.2e} at 128x256 (tol 2.0e-02), "
                    f"order={order:.2f} (min 1.8), wall={wall:.1f}s (max 30s)")


# -- criterion 2: interface energy of an optimal profile measures length -----

def test_criterion_2_interface_energy_length():
    t0 = time.perf_counter()
    grid = build_grid(DomainSpec(), 256)
    eta = 0.02
    v = 1.0 / (1.0 + np.exp(-3.0 * (grid.node_x - 0.5) / eta))
    energy = interface_energy(grid, v, eta)
    wall = time.perf_counter() - t0
    ok = abs(energy - 1.0) <= 0.1 and wall <= 5.0
    _verdict(2, ok, f"P_eta={energy:.4f} for a unit-length straight interface "
                    f"at eta=0.02, 256x256 (tol 10%), wall={wall:.2f}s (max 5s)")


# -- shared base problem for the derivative checks ----------------------------

@pytest.fixture(scope="module")
def fd_setup():
    grid = build_grid(DomainSpec(delta=0.1), 64)
    cavity = CavityShape.disc(0.5, 0.55, 0.12)
    truth = solve_direct_cavity(grid, cavity, strip_current(grid, np.pi))
    data = add_noise(grid, truth.data, 0.05, seed=7)
    return grid, data


# -- criterion 3: analytic derivatives against central finite differences ----

def test_criterion_3_gradients_match_finite_differences(fd_setup):
    grid, data = fd_setup
    t0 = time.perf_counter()
    step = 1e-5
    tol = 1e-11
    pots = PotentialSet.default()
    p2 = FunctionalParams.from_epsilon(0.05, potentials=pots,
                                       a1=1.0, a2=1.0, b=0.5)
    p3 = FunctionalParams.from_epsilon(0.05, potentials=pots,
                                       a1=1.0, a2=1.0, b=0.5, grad_power=3.0)
    rng = np.random.default_rng(11)
    free = ~grid.node_in_band
    worst = {"cavity": 0.0, "crack2": 0.0, "crack3": 0.0,
             "full_u": 0.0, "full_v": 0.0}

    def rel(analytic, fd):
        return abs(analytic - fd) / max(abs(analytic), 1e-14)

    def central(fun):
        return (fun(step) - fun(-step)) / (2.0 * step)

    for _ in range(5):
        vt = project_admissible(grid, 0.05 + 0.9 * _smooth_unit_field(grid, rng))
        u = 0.5 * (_smooth_unit_field(grid, rng) - 0.5)
        st2 = solve_state(grid, vt, data, p2, offset_power=2.0, tol=tol)
        st3 = solve_state(grid, vt, data, p3, offset_power=3.0, tol=tol)
        for _ in range(5):
            d = _smooth_unit_field(grid, rng) - 0.5
            d[~free] = 0.0
            du = _smooth_unit_field(grid, rng) - 0.5
            zero = np.zeros(grid.n_nodes)
            sn2 = sensitivity_solve(grid, st2, d, p2, tol=tol)
            sn3 = sensitivity_solve(grid, st3, d, p3, tol=tol)

            got = cavity_directional_derivative(grid, vt, d, data, p2,
                                                state=st2, sens=sn2)
            fd = central(lambda s: cavity_objective(
                grid, vt + s * d, data, p2, tol=tol).total)
            worst["cavity"] = max(worst["cavity"], rel(got, fd))

            got = reduced_crack_directional_derivative(grid, vt, d, data, p2,
                                                       state=st2, sens=sn2)
            fd = central(lambda s: reduced_crack_objective(
                grid, vt + s * d, data, p2, tol=tol).total)
            worst["crack2"] = max(worst["crack2"], rel(got, fd))

            got = reduced_crack_directional_derivative(grid, vt, d, data, p3,
                                                       state=st3, sens=sn3)
            fd = central(lambda s: reduced_crack_objective(
                grid, vt + s * d, data, p3, tol=tol).total)
            worst["crack3"] = max(worst["crack3"], rel(got, fd))

            # the state depends on vtilde only, so the u-partial reuses it
            got = crack_directional_derivative(grid, u, vt, du, zero, data, p2,
                                               state=st2, tol=tol)
            fd = central(lambda s: crack_objective(
                grid, u + s * du, vt, data, p2, state=st2).total)
            worst["full_u"] = max(worst["full_u"], rel(got, fd))

            got = crack_directional_derivative(grid, u, vt, zero, d, data, p2,
                                               state=st2, tol=tol)
            fd = central(lambda s: crack_objective(
                grid, u, vt + s * d, data, p2, tol=tol).total)
            worst["full_v"] = max(worst["full_v"], rel(got, fd))

    wall = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-3 and wall <= 120.0
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    _verdict(3, ok, f"max FD mismatch {detail} (tol 1.0e-03, central step "
                    f"1e-05, 5 base points x 5 directions, 64x64), "
                    f"wall={wall:.0f}s (max 120s)")


# -- criterion 4: adjoint gradient pairs to the sensitivity derivative -------

def test_criterion_4_adjoint_duality(fd_setup):
    grid, data = fd_setup
    tol = 1e-13
    pots = PotentialSet.default()
    p2 = FunctionalParams.from_epsilon(0.05, potentials=pots,
                                       a1=1.0, a2=1.0, b=0.5)
    p3 = FunctionalParams.from_epsilon(0.05, potentials=pots,
                                       a1=1.0, a2=1.0, b=0.5, grad_power=3.0)
    rng = np.random.default_rng(13)
    vt = project_admissible(grid, 0.05 + 0.9 * _smooth_unit_field(grid, rng))
    st2 = solve_state(grid, vt, data, p2, offset_power=2.0, tol=tol)
    st3 = solve_state(grid, vt, data, p3, offset_power=3.0, tol=tol)
    g_cav = cavity_gradient(grid, vt, data, p2, state=st2, tol=tol)
    g_rc2 = reduced_crack_gradient(grid, vt, data, p2, state=st2, tol=tol)
    g_rc3 = reduced_crack_gradient(grid, vt, data, p3, state=st3, tol=tol)
    free = ~grid.node_in_band
    worst = {"cavity": 0.0, "crack2": 0.0, "crack3": 0.0}
    for _ in range(20):
        d = _smooth_unit_field(grid, rng) - 0.5
        d[~free] = 0.0
        sn2 = sensitivity_solve(grid, st2, d, p2, tol=tol)
        sn3 = sensitivity_solve(grid, st3, d, p3, tol=tol)
        triples = (
            ("cavity", g_cav.pair(d),
             cavity_directional_derivative(grid, vt, d, data, p2,
                                           state=st2, sens=sn2)),
            ("crack2", g_rc2.pair(d),
             reduced_crack_directional_derivative(grid, vt, d, data, p2,
                                                  state=st2, sens=sn2)),
            ("crack3", g_rc3.pair(d),
             reduced_crack_directional_derivative(grid, vt, d, data, p3,
                                                  state=st3, sens=sn3)),
        )
        for key, lhs, rhs in triples:
            worst[key] = max(worst[key], abs(lhs - rhs) / max(abs(rhs), 1e-14))
    ok = max(worst.values()) <= 1e-10
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    _verdict(4, ok, f"max adjoint/sensitivity mismatch {detail} "
                    f"(tol 1.0e-10, 20 directions)")


# -- criterion 5: state normalization and conductivity-floor stability -------

def test_criterion_5_state_normalization_and_offset_stability(fd_setup):
    grid, data = fd_setup
    vt = smoothed_indicator(grid, CavityShape.disc(0.5, 0.55, 0.12), 0.05)
    worst_mean = 0.0
    peaks = []
    for eta in (1e-1, 1e-2, 1e-3, 1e-4):
        params = FunctionalParams(epsilon=0.05, eta=eta, band_radius=2.0 * eta,
                                  offset2=min(eta ** 2, 0.5),
                                  offset_q=min(eta ** 2, 0.5))
        st = solve_state(grid, vt, data, params, maxiter=400000)
        worst_mean = max(worst_mean, abs(grid.gamma_mean(st.u)))
        peaks.append(float(np.abs(st.u).max()))
    spread = max(peaks) / min(peaks)
    ok = worst_mean <= 1e-9 and spread < 2.0
    _verdict(5, ok, f"max |gamma-mean|={worst_mean:.1e} (tol 1.0e-09), "
                    f"max|u| spread {spread:.3f}x over eta in 1e-1..1e-4 "
                    f"(max 2x), fixed data")


# -- criterion 6: interior energy ratios stay bounded under refinement -------

def test_criterion_6_interior_energy_bounds():
    balls = (((0.35, 0.5), 0.15), ((0.65, 0.8), 0.15), ((0.5, 1.2), 0.15))
    spec = DomainSpec(width=1.0, height=2.0)
    ratios = {}
    for res in (64, 128):
        grid = build_grid(spec, res)
        truth = solve_direct_cavity(grid, CavityShape.empty(),
                                    strip_current(grid, np.pi))
        ones = WeightField(values=np.ones(grid.n_cells), floor=1.0, cap=1.0)
        ratios[res] = np.array([caccioppoli_ratio(grid, truth.u0, ones, c, r)
                                for c, r in balls])
    drift = np.abs(ratios[128] - ratios[64]) / np.abs(ratios[64])
    ok = bool(np.all(np.isfinite(ratios[64])) and np.all(np.isfinite(ratios[128]))
              and np.all(drift <= 0.10))
    vals = ", ".join(f"{a:.3f}->{b:.3f}" for a, b in zip(ratios[64], ratios[128]))
    _verdict(6, ok, f"ball energy ratios under 2x refinement {vals}, "
                    f"max drift {drift.max():.1%} (tol 10%)")


# -- criteria 7 and 9: the reconstruction sweep, run twice -------------------

def _reconstruction_config():
    return ExperimentConfig(
        domain=DomainSpec(delta=0.08),
        cavity=CavityShape.disc(0.5, 0.65, 0.2),
        resolution=128,
        epsilons=RECON_EPSILONS,
        seed=0,
        a2=100.0,
        pattern="perimeter",
        mode=1,
        optimizer=OptimizerConfig(max_iterations=500, stop_tol=1e-7),
    )


@pytest.fixture(scope="module")
def recon_bundle():
    cfg = _reconstruction_config()
    return cfg, prepare_experiment(cfg)


@pytest.fixture(scope="module")
def sweep_pair(recon_bundle, tmp_path_factory):
    cfg, bundle = recon_bundle
    sweeps, walls, dirs = [], [], []
    for tag in ("first", "second"):
        d = tmp_path_factory.mktemp(f"sweep_{tag}")
        t0 = time.perf_counter()
        sweeps.append(epsilon_sweep(cfg, bundle=bundle, outdir=str(d)))
        walls.append(time.perf_counter() - t0)
        dirs.append(d)
    return sweeps, walls, dirs


def test_criterion_7_reconstruction_sweep(sweep_pair, recon_bundle):
    cfg, bundle = recon_bundle
    sweeps, walls, _ = sweep_pair
    rows = sweeps[0].rows
    clean = all(r["error"] == "" for r in rows)
    assert clean, "sweep reported a stage failure: " + \
        "; ".join(r["error"] for r in rows if r["error"])
    h = bundle.grid.h
    hs = np.array([r["hausdorff"] for r in rows])
    ses = np.array([r["state_error"] for r in rows])
    sd_frac = rows[-1]["symdiff_area"] / (cfg.domain.width * cfg.domain.height)
    ups = np.diff(hs)[np.diff(hs) > 1e-12]
    mono_ok = ups.size <= 1 and (ups.size == 0 or float(ups.max()) <= 2 * h + 1e-12)
    final_ok = hs[-1] <= 0.1 and sd_frac <= 0.1
    state_ok = bool(np.all(np.diff(ses) <= 1e-12) and ses[-1] < ses[0])
    wall_ok = walls[0] <= 900.0
    ok = mono_ok and final_ok and state_ok and wall_ok
    hh = "/".join(f"{x:.4f}" for x in hs)
    ss = "/".join(f"{x:.4f}" for x in ses)
    _verdict(7, ok,
             f"hausdorff {hh} (monotone up to one 2-cell inversion: "
             f"{'yes' if mono_ok else 'NO'}; final tol 0.1), "
             f"symdiff fraction {sd_frac:.4f} (tol 0.1), "
             f"state error {ss} (decreasing: {'yes' if state_ok else 'NO'}), "
             f"wall={walls[0]:.0f}s (max 900s)")


# -- criterion 8: boundary misfit of the mollified truth decays with noise ---

def test_criterion_8_misfit_decay_rate(recon_bundle):
    cfg, bundle = recon_bundle
    rows = misfit_decay_study(cfg, bundle=bundle)
    eps = np.array([r["epsilon"] for r in rows])
    excess = np.array([r["excess"] for r in rows])
    positive = bool(np.all(excess > 0))
    slope = float(np.polyfit(np.log(eps), np.log(np.maximum(excess, 1e-300)),
                             1)[0])
    target = min(cfg.discrepancy_exponent, 2.0)
    ok = positive and abs(slope - target) <= 0.4
    pts = ", ".join(f"{r['epsilon']:g}:{r['excess']:.2e}" for r in rows)
    _verdict(8, ok, f"excess-misfit slope {slope:.2f} vs target {target:.1f} "
                    f"(window +-0.4); floor={rows[0]['floor']:.2e}, "
                    f"points {pts}")


# -- criterion 9: identical seeds give byte-identical artifacts --------------

def test_criterion_9_reruns_are_byte_identical(sweep_pair):
    _, _, dirs = sweep_pair
    names = ("trace.csv", "phase.txt", "phase.pgm", "state.txt",
             "truth_potential.txt", "data.csv", "metrics.txt")
    mismatched = []
    for k in range(len(RECON_EPSILONS)):
        for name in names:
            a = (dirs[0] / f"eps{k}" / name).read_bytes()
            b = (dirs[1] / f"eps{k}" / name).read_bytes()
            if a != b:
                mismatched.append(f"eps{k}/{name}")
    if (dirs[0] / "sweep.csv").read_bytes() != (dirs[1] / "sweep.csv").read_bytes():
        mismatched.append("sweep.csv")
    checked = len(names) * len(RECON_EPSILONS) + 1
    ok = not mismatched
    _verdict(9, ok, f"{checked - len(mismatched)}/{checked} rerun artifacts "
                    f"byte-identical"
                    + (f"; mismatched: {', '.join(mismatched)}" if mismatched
                       else ""))
