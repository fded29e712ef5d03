"""Reconstruct a disc cavity from one noisy boundary pair.

A disc of radius 0.2 sits off-center in the unit square.  One current
pattern is applied, the resulting voltage is measured on the accessible
part of the boundary, and synthetic noise of amplitude epsilon is added.
The sweep then minimizes the regularized misfit at a decreasing sequence
of noise levels, warm-starting each level from the previous minimizer
and tightening the interface width eta = epsilon along the way.

Kept small on purpose: a 48 x 48 grid and a few hundred iterations per
level finish in about a minute.  The acceptance suite repeats the same
experiment at 128 x 128.
"""

import os

from cavityfield import (CavityShape, DomainSpec, ExperimentConfig,
                         OptimizerConfig, epsilon_sweep)

outdir = os.path.join(os.path.dirname(__file__), "out", "reconstruct")

config = ExperimentConfig(
    domain=DomainSpec(delta=0.08),
    cavity=CavityShape.disc(0.5, 0.65, 0.2),
    resolution=48,
    epsilons=(0.1, 0.05, 0.02, 0.01),
    seed=0,
    a2=100.0,
    pattern="perimeter",
    mode=1,
    optimizer=OptimizerConfig(max_iterations=400, stop_tol=1e-7,
                              pde_tol=1e-8),
)

print(f"true cavity: disc r=0.2 at (0.50, 0.65); grid {config.resolution}^2")
print("minimizing with continuation over epsilon ...")
print()

sweep = epsilon_sweep(config, outdir=outdir)

print("epsilon    eta  iters  hausdorff  symdiff  state_err   misfit")
for row, res in zip(sweep.rows, sweep.results):
    print(f"{row['epsilon']:7.3f} {row['eta']:6.3f} {len(res.trace.totals):6d}"
          f" {row['hausdorff']:10.4f} {row['symdiff_area']:8.4f}"
          f" {row['state_error']:10.4f} {row['final_misfit']:8.5f}")
print()

final = sweep.results[-1]
print(f"final level: {final.trace.message}")
rep = final.band_report
print(f"band check ok={rep.ok} (low {rep.low_violations},"
      f" high {rep.high_violations} violations)")
print()

print(f"run artifacts under {outdir}/eps*/ (each level dumps its phase")
print("field as phase.txt and phase.pgm); sweep summary in sweep.csv")
print()
print("the symmetric difference shrinks with epsilon while the hausdorff")
print("distance stalls at a few cells: at this resolution the interface")
print("can only move in steps of h = 1/48, so the finer acceptance run")
print("at 128 x 128 is the one that pushes it below 0.1")
