"""End-to-end experiment plumbing: config, data generation, metrics, artifacts."""

import os

import numpy as np
import pytest

from cavityfield.geometry import (SIDES, DomainSpec, CavityShape, build_grid,
                                  rasterize_cavity)
from cavityfield.phasefield import PhaseField
from cavityfield.optimize import OptimizerConfig
from cavityfield import fieldio
from cavityfield.experiment import (StageError, ExperimentConfig,
                                    make_current, restrict_edge_values,
                                    prepare_experiment, functional_params_for,
                                    threshold_set, hausdorff_distance,
                                    symmetric_difference_area,
                                    smoothed_indicator, misfit_floor,
                                    misfit_decay_study, run_reconstruction,
                                    epsilon_sweep, recompute_metrics)
from cavityfield.cli import main as cli_main


def tiny_config(**overrides):
    """Smallest config that still resolves the band and the cavity."""
    base = dict(
        domain=DomainSpec(delta=0.2),
        cavity=CavityShape.disc(0.5, 0.55, 0.12),
        resolution=16,
        epsilons=(0.1, 0.05),
        seed=3,
        a2=50.0,
        optimizer=OptimizerConfig(max_iterations=3, stop_tol=0.0),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


# -- configuration round trip ------------------------------------------------------

def test_settings_round_trip_is_exact():
    cfg = tiny_config(
        domain=DomainSpec(width=2.0, height=1.0, delta=0.25,
                          gamma=(("bottom", 0.0, 1.0),),
                          gamma_tilde=(("bottom", 0.25, 0.75),)),
        cavity=CavityShape.rectangle(0.7, 0.4, 1.3, 0.6),
        pattern="cosine", current_side="bottom", mode=2,
        b=0.5, grad_power=3.0, objective="reduced_crack",
        profile="smoothstep", threshold=0.45,
    )
    assert ExperimentConfig.from_settings(cfg.to_settings()) == cfg


def test_settings_reject_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_settings({"noise.sigma": "0.1"})


def test_partial_settings_keep_defaults():
    cfg = ExperimentConfig.from_settings({"grid.resolution": "32",
                                          "noise.epsilons": "0.2"})
    assert cfg.resolution == 32
    assert cfg.epsilons == (0.2,)
    assert cfg.domain == DomainSpec()


def test_threshold_outside_band_is_rejected_before_any_solve():
    with pytest.raises(ValueError, match="threshold"):
        tiny_config(threshold=0.7)
    with pytest.raises(ValueError, match="threshold"):
        ExperimentConfig.from_settings({"experiment.threshold": "0.3",
                                        "functional.band_lo": "0.35"})


@pytest.mark.parametrize("key,val", [
    ("epsilons", (0.05, 0.1)),          # must decrease
    ("epsilons", ()),
    ("epsilons", (0.1, -0.01)),
    ("rho", -1.0),
    ("resolution", 2),
    ("data_refine", 0),
    ("objective", "full_crack"),
    ("pattern", "checkerboard"),
    ("profile", "bump"),
    ("current_side", "north"),
    ("mode", 0),
    ("amplitude", 0.0),
    ("checkpoint_every", -1),
])
def test_config_validation_rejects(key, val):
    with pytest.raises(ValueError):
        tiny_config(**{key: val})


def test_parse_config_text_errors():
    assert fieldio.parse_config_text("# note\n\na.b = 1\n") == {"a.b": "1"}
    with pytest.raises(ValueError, match="duplicate"):
        fieldio.parse_config_text("a = 1\na = 2\n")
    with pytest.raises(ValueError, match="key = value"):
        fieldio.parse_config_text("just words\n")
    with pytest.raises(ValueError, match="empty key"):
        fieldio.parse_config_text("= 3\n")


# -- current patterns --------------------------------------------------------------

@pytest.mark.parametrize("pattern,kw", [
    ("uniform_dipole", {}),
    ("cosine", dict(current_side="left", mode=2)),
    ("perimeter", dict(mode=1)),
    ("perimeter", dict(mode=3)),
])
def test_make_current_is_admissible(pattern, kw):
    cfg = tiny_config(pattern=pattern, **kw)
    g = build_grid(cfg.domain, cfg.resolution)
    cur = make_current(g, cfg)
    cur.check(g)  # zero mean on the support, support inside gamma_tilde
    assert np.abs(cur.values).max() > 0.1


def test_uniform_dipole_values():
    cfg = tiny_config(amplitude=2.0)
    g = build_grid(cfg.domain, cfg.resolution)
    vals = make_current(g, cfg).values
    assert np.all(vals[g.be_side == SIDES.index("bottom")] == 2.0)
    assert np.all(vals[g.be_side == SIDES.index("top")] == -2.0)
    assert np.all(vals[g.be_side == SIDES.index("left")] == 0.0)


def test_cosine_pattern_uses_per_side_arc():
    cfg = tiny_config(pattern="cosine", current_side="right", mode=1)
    g = build_grid(cfg.domain, cfg.resolution)
    vals = make_current(g, cfg).values
    m = g.be_side == SIDES.index("right")
    n = int(m.sum())
    want = np.sqrt(2.0) * np.cos(np.pi * (np.arange(n) + 0.5) / n)
    assert np.allclose(vals[m], want - want.mean(), atol=1e-12)
    assert np.all(vals[~m] == 0.0)


def test_perimeter_pattern_is_continuous_around_corners():
    # mode 1 wraps once around the boundary; adjacent edge midpoints across
    # every corner must differ by O(h), not jump
    cfg = tiny_config(pattern="perimeter", mode=1)
    g = build_grid(cfg.domain, cfg.resolution)
    vals = make_current(g, cfg).values
    bottom = np.flatnonzero(g.be_side == 0)
    right = np.flatnonzero(g.be_side == 1)
    top = np.flatnonzero(g.be_side == 2)
    left = np.flatnonzero(g.be_side == 3)
    # counterclockwise neighbours; top and left arcs run against the walk
    corner_pairs = [(bottom[-1], right[0]), (right[-1], top[-1]),
                    (top[0], left[-1]), (left[0], bottom[0])]
    for i, j in corner_pairs:
        assert abs(vals[i] - vals[j]) < 2.5 * np.pi * g.h


# -- data restriction --------------------------------------------------------------

def test_restrict_edge_values_averages_blocks():
    spec = DomainSpec(delta=0.25)
    coarse = build_grid(spec, 12)
    fine = build_grid(spec, 36)
    rng = np.random.default_rng(0)
    fv = rng.standard_normal(len(fine.be_arc))
    cv = restrict_edge_values(fine, coarse, fv)
    # hand check the first coarse edge on each side
    for side in range(4):
        fm = np.flatnonzero(fine.be_side == side)
        cm = np.flatnonzero(coarse.be_side == side)
        assert cv[cm[0]] == pytest.approx(fv[fm[:3]].mean(), rel=1e-15)
    # block averaging preserves totals scaled by the ratio
    assert cv.sum() * 3 == pytest.approx(fv.sum(), rel=1e-12)


def test_restrict_requires_common_refinement():
    spec = DomainSpec(delta=0.25)
    fine = build_grid(spec, 18)
    with pytest.raises(ValueError):
        restrict_edge_values(fine, build_grid(spec, 12),
                             np.zeros(len(fine.be_arc)))


def test_prepare_experiment_bundle_consistency():
    cfg = tiny_config()
    b = prepare_experiment(cfg)
    assert b.grid.nx == 16 and b.fine_grid.nx == 32
    b.base.check(b.grid)
    assert b.base.epsilon == 0.0
    assert len(b.noisy) == len(cfg.epsilons)
    for eps, d in zip(cfg.epsilons, b.noisy):
        assert d.epsilon == eps
        d.check(b.grid)
    assert np.array_equal(b.retained, rasterize_cavity(b.grid, cfg.cavity))
    # the restricted current is the block average of the fine current
    want = restrict_edge_values(b.fine_grid, b.grid,
                                make_current(b.fine_grid, cfg).values)
    assert np.allclose(b.current.values, want, atol=1e-12)
    # the true coarse potential keeps the zero gamma mean
    nodes = b.grid.be_nodes[b.grid.gamma_edges]
    mean = (0.5 * (b.u0[nodes[:, 0]] + b.u0[nodes[:, 1]]) * b.grid.h).sum()
    assert abs(mean) < 1e-9


# -- metrics -----------------------------------------------------------------------

def test_threshold_set_orientation():
    g = build_grid(DomainSpec(delta=0.2), 16)
    phase = PhaseField(values=np.ones(g.n_nodes))
    assert threshold_set(g, phase, 0.5).all()          # conducting everywhere
    assert not threshold_set(g, np.zeros(g.n_nodes), 0.5).any()


def brute_hausdorff(a, b, h):
    """Quadratic-cost oracle over cell centers."""
    ai = np.argwhere(a)
    bi = np.argwhere(b)
    if len(ai) == 0 and len(bi) == 0:
        return 0.0
    if len(ai) == 0 or len(bi) == 0:
        return float("inf")
    d = np.sqrt(((ai[:, None, :] - bi[None, :, :]) ** 2).sum(-1)) * h
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def test_hausdorff_against_brute_force():
    rng = np.random.default_rng(7)
    h = 1.0 / 32
    checked = 0
    for _ in range(12):
        a = rng.random((12, 9)) < 0.25
        b = rng.random((12, 9)) < 0.25
        if not (a.any() and b.any()):
            continue
        assert hausdorff_distance(a, b, h) == pytest.approx(
            brute_hausdorff(a, b, h), rel=1e-12)
        checked += 1
    assert checked >= 8


def test_hausdorff_sentinels_and_two_cells():
    empty = np.zeros((8, 8), bool)
    one = empty.copy()
    one[2, 3] = True
    other = empty.copy()
    other[2, 6] = True
    h = 0.125
    assert hausdorff_distance(empty, empty, h) == 0.0
    assert hausdorff_distance(one, empty, h) == float("inf")
    assert hausdorff_distance(empty, one, h) == float("inf")
    assert hausdorff_distance(one, one, h) == 0.0
    assert hausdorff_distance(one, other, h) == pytest.approx(3 * h)
    with pytest.raises(ValueError):
        hausdorff_distance(one, np.zeros((4, 4), bool), h)


def test_symmetric_difference_area_counts_cells():
    a = np.zeros((6, 6), bool)
    b = np.zeros((6, 6), bool)
    a[1:3, 1:4] = True     # 6 cells
    b[2:4, 1:4] = True     # overlap 3
    h = 0.5
    assert symmetric_difference_area(a, b, h) == pytest.approx(6 * h * h)
    assert symmetric_difference_area(a, a, h) == 0.0


def test_smoothed_indicator_profile():
    g = build_grid(DomainSpec(delta=0.2), 32)
    eta = 0.05
    vt = smoothed_indicator(g, CavityShape.disc(0.5, 0.55, 0.15), eta)
    d = np.maximum(np.hypot(g.node_x - 0.5, g.node_y - 0.55) - 0.15, 0.0)
    inside = (d <= 0) & ~g.node_in_band
    far = (d >= 2 * eta) | g.node_in_band
    assert np.all(vt[inside] == 1.0)
    assert np.all(vt[far] == 0.0)
    mid = ~inside & ~far
    assert np.all((vt[mid] >= 0.0) & (vt[mid] <= 1.0))
    # midpoint of the ramp sits near distance eta
    k = np.argmin(np.abs(d - eta))
    assert abs(vt[k] - 0.5) < 0.2
    with pytest.raises(ValueError):
        smoothed_indicator(g, CavityShape.disc(0.5, 0.55, 0.15), 0.0)


def test_misfit_decay_rows_and_floor():
    cfg = tiny_config()
    rows = misfit_decay_study(cfg)
    assert [r["epsilon"] for r in rows] == list(cfg.epsilons)
    floor = rows[0]["floor"]
    assert floor > 0.0
    assert floor == misfit_floor(prepare_experiment(cfg))
    for r in rows:
        assert r["floor"] == floor
        assert r["excess"] == pytest.approx(max(r["misfit"] - floor, 0.0))
    # smaller noise gives smaller raw misfit of the smoothed truth
    assert rows[1]["misfit"] < rows[0]["misfit"]


# -- runs and artifacts ------------------------------------------------------------

def test_run_reconstruction_writes_consistent_artifacts(tmp_path):
    outdir = str(tmp_path / "run")
    cfg = tiny_config()
    res = run_reconstruction(cfg, outdir=outdir)
    names = {"config.txt", "data.csv", "trace.csv", "phase.txt", "phase.pgm",
             "state.txt", "truth_potential.txt", "metrics.txt", "manifest.txt"}
    assert names <= set(os.listdir(outdir))

    # metrics file round trip matches the in-memory result
    m = fieldio.read_metrics(os.path.join(outdir, "metrics.txt"))
    assert float(m["hausdorff"]) == res.hausdorff
    assert float(m["final_misfit"]) == res.final_misfit
    assert int(m["iterations"]) == res.trace.iterations[-1]
    assert "runtime" not in " ".join(m)   # metrics carry no wall-clock noise

    # phase dump round trips exactly
    nx, ny, h, v = fieldio.load_field(os.path.join(outdir, "phase.txt"))
    assert (nx, ny) == (16, 16)
    assert np.array_equal(v, res.phase.values)

    # manifest lists every file except itself
    with open(os.path.join(outdir, "manifest.txt")) as fh:
        listed = {ln.split()[0] for ln in fh
                  if ln.strip() and not ln.startswith("created")}
    assert listed == set(os.listdir(outdir)) - {"manifest.txt"}

    # recompute_metrics on the run directory agrees with the stored metrics
    rm = recompute_metrics(outdir)
    assert rm["hausdorff"] == res.hausdorff
    assert rm["final_misfit"] == pytest.approx(res.final_misfit, rel=1e-9)
    assert rm["state_error"] == pytest.approx(res.state_error, rel=1e-9)


def test_reruns_are_byte_identical(tmp_path):
    cfg = tiny_config()
    d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
    run_reconstruction(cfg, outdir=d1)
    run_reconstruction(cfg, outdir=d2)
    compared = 0
    for name in sorted(os.listdir(d1)):
        with open(os.path.join(d1, name), "rb") as fh:
            l1 = fh.read().splitlines()
        with open(os.path.join(d2, name), "rb") as fh:
            l2 = fh.read().splitlines()
        if name == "manifest.txt":
            l1, l2 = l1[1:], l2[1:]   # first line carries the timestamp
        elif name == "config.txt":
            l1 = [ln for ln in l1 if not ln.startswith(b"experiment.outdir")]
            l2 = [ln for ln in l2 if not ln.startswith(b"experiment.outdir")]
        assert l1 == l2, name
        compared += 1
    assert compared >= 9


def test_unknown_epsilon_is_a_config_stage_error():
    with pytest.raises(StageError, match=r"\[config\]"):
        run_reconstruction(tiny_config(), epsilon=0.3)


def test_checkpoint_files_appear(tmp_path):
    outdir = str(tmp_path / "run")
    cfg = tiny_config(checkpoint_every=1)
    run_reconstruction(cfg, outdir=outdir)
    written = [n for n in os.listdir(outdir) if n.startswith("checkpoint_")]
    assert "checkpoint_0000.txt" in written
    assert len(written) >= 2


def test_single_level_sweep_equals_run():
    cfg = tiny_config(epsilons=(0.1,))
    res = run_reconstruction(cfg, epsilon=0.1)
    sweep = epsilon_sweep(cfg)
    assert len(sweep.rows) == 1
    row = sweep.rows[0]
    assert row["error"] == ""
    assert row["hausdorff"] == res.hausdorff
    assert row["symdiff_area"] == res.symdiff_area
    assert row["final_misfit"] == res.final_misfit
    assert row["state_error"] == res.state_error


def test_sweep_continues_after_a_failed_level(tmp_path, monkeypatch):
    import cavityfield.experiment as exp
    cfg = tiny_config()
    real = exp.run_reconstruction
    calls = []

    def flaky(config, *, epsilon=None, vtilde0=None, bundle=None, outdir=None):
        calls.append(epsilon)
        if epsilon == cfg.epsilons[0]:
            raise StageError("minimize", RuntimeError("synthetic failure"))
        return real(config, epsilon=epsilon, vtilde0=vtilde0, bundle=bundle,
                    outdir=outdir)

    monkeypatch.setattr(exp, "run_reconstruction", flaky)
    sweep = exp.epsilon_sweep(cfg, outdir=str(tmp_path))
    assert calls == list(cfg.epsilons)
    assert "[minimize]" in sweep.rows[0]["error"]
    assert np.isnan(sweep.rows[0]["hausdorff"])
    assert sweep.rows[1]["error"] == ""
    # the level ran and recorded a measurement (inf allowed: a three
    # iteration budget never opens a cavity, so the estimate stays empty)
    assert not np.isnan(sweep.rows[1]["hausdorff"])
    assert sweep.results[0] is None and sweep.results[1] is not None
    with open(os.path.join(str(tmp_path), "sweep.csv")) as fh:
        lines = fh.read().splitlines()
    assert len(lines) == 3
    assert "synthetic failure" in lines[1]


# -- field and data file round trips -------------------------------------------------

def test_field_dump_round_trip_exact(tmp_path):
    g = build_grid(DomainSpec(delta=0.25), 12)
    rng = np.random.default_rng(2)
    vals = rng.standard_normal(g.n_nodes)
    path = str(tmp_path / "f.txt")
    fieldio.dump_field(path, g, vals)
    nx, ny, h, back = fieldio.load_field(path)
    assert (nx, ny) == (12, 12)
    assert h == g.h
    assert np.array_equal(back, vals)
    with pytest.raises(ValueError):
        fieldio.dump_field(path, g, vals[:-1])


def test_cauchy_csv_round_trip_exact(tmp_path):
    cfg = tiny_config()
    b = prepare_experiment(cfg)
    path = str(tmp_path / "d.csv")
    fieldio.cauchy_to_csv(path, b.grid, b.noisy[0])
    back = fieldio.cauchy_from_csv(path, b.grid)
    assert np.array_equal(back.f, b.noisy[0].f)
    assert np.array_equal(back.g, b.noisy[0].g)
    assert back.epsilon == b.noisy[0].epsilon
    assert back.seed == b.noisy[0].seed
    # a different grid is rejected
    with pytest.raises(ValueError, match="different grid"):
        fieldio.cauchy_from_csv(path, build_grid(cfg.domain, 32))


def test_pgm_dump_shape_and_range(tmp_path):
    g = build_grid(DomainSpec(delta=0.25), 12)
    path = str(tmp_path / "p.pgm")
    fieldio.dump_pgm(path, g, np.linspace(0, 1, g.n_nodes))
    raw = open(path, "rb").read()
    header = b"P5\n13 13\n255\n"
    assert raw.startswith(header)
    assert len(raw) == len(header) + 13 * 13
    # rows are flipped: the first pixel is the top-left node, the last the
    # bottom-right one
    assert raw[len(header)] == round(255 * 156 / 168)
    assert raw[-1] == round(255 * 12 / 168)


# -- command line ------------------------------------------------------------------

def write_cli_config(tmp_path, cfg=None):
    cfg = cfg or tiny_config()
    path = str(tmp_path / "exp.cfg")
    with open(path, "w") as fh:
        fh.write(fieldio.config_to_text(cfg.to_settings()))
    return path


def test_cli_generate_and_metrics(tmp_path, capsys):
    cfgpath = write_cli_config(tmp_path)
    gen = str(tmp_path / "gen")
    assert cli_main(["generate", "-c", cfgpath, "-o", gen]) == 0
    assert {"config.txt", "data_exact.csv", "data_eps0.csv", "data_eps1.csv",
            "truth_potential.txt", "truth_mask.pgm", "manifest.txt"} \
        <= set(os.listdir(gen))

    run = str(tmp_path / "run")
    assert cli_main(["reconstruct", "-c", cfgpath, "-o", run,
                     "--epsilon", "0.1"]) == 0
    out = capsys.readouterr().out
    assert "hausdorff" in out

    assert cli_main(["metrics", "--run", run]) == 0
    out = capsys.readouterr().out
    assert "final_misfit" in out


def test_cli_sweep_and_set_overrides(tmp_path, capsys):
    cfgpath = write_cli_config(tmp_path)
    assert cli_main(["sweep", "-c", cfgpath, "-o", str(tmp_path / "sw"),
                     "-s", "noise.epsilons=0.1",
                     "-s", "optimizer.max_iterations=2"]) == 0
    out = capsys.readouterr().out
    lines = [ln for ln in out.splitlines() if ln]
    assert lines[0].startswith("epsilon,")
    assert len(lines) == 2


def test_cli_rejects_bad_config(tmp_path, capsys):
    bad = str(tmp_path / "bad.cfg")
    with open(bad, "w") as fh:
        fh.write("noise.sigma = 1\n")
    assert cli_main(["generate", "-c", bad]) == 1
    err = capsys.readouterr().err
    assert "error [config]" in err
    assert "unknown config keys" in err


def test_cli_stage_error_is_reported(tmp_path, capsys):
    cfgpath = write_cli_config(tmp_path)
    # a cavity that reaches into the safety band fails in the data stage
    assert cli_main(["reconstruct", "-c", cfgpath, "-s",
                     "cavity.shape=disc:0.5,0.5,0.45"]) == 1
    err = capsys.readouterr().err
    assert "error [data]" in err


def test_cli_gradcheck_smoke(tmp_path, capsys):
    cfgpath = write_cli_config(tmp_path, tiny_config(epsilons=(0.1,)))
    assert cli_main(["gradcheck", "-c", cfgpath, "--directions", "1"]) == 0
    out = capsys.readouterr().out
    assert "fd_cavity" in out and "dual_crack3" in out and "FAIL" not in out
