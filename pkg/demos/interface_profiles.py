"""Phase-field ingredients: wells, conductivity profiles, interface energy.

Three short experiments on the unit square:

  1. the double well W and the single well V along [0,1];
  2. the interface energy of a logistic transition across a straight
     line, which approximates the line's length as eta shrinks;
  3. the per-cell conductivity produced by a smoothed cavity indicator,
     dumped as a portable graymap for inspection.
"""

import os

import numpy as np

from cavityfield import (CavityShape, DomainSpec, PotentialSet, build_grid,
                         interface_energy, smoothed_indicator,
                         weight_from_phase, fieldio)

outdir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(outdir, exist_ok=True)

# 1. the wells and profiles at a glance
pots = PotentialSet.default()
ts = np.linspace(0.0, 1.0, 11)
print("t       W(t)     V(t)     psi(t)")
for t, w, v, p in zip(ts, pots.w(ts), pots.v(ts), pots.psi(ts)):
    print(f"{t:4.2f} {w:8.4f} {v:8.4f} {p:8.4f}")
print()

# 2. interface energy vs interface length
grid = build_grid(DomainSpec(), 256)
print("eta      energy of a unit-length interface")
for eta in (0.1, 0.05, 0.02, 0.01):
    v = 1.0 / (1.0 + np.exp(-3.0 * (grid.node_x - 0.5) / eta))
    print(f"{eta:5.3f}  {interface_energy(grid, v, eta):8.4f}")
print("(the normalization of W makes the limit equal the length itself)")
print()

# 3. conductivity of a smoothed cavity: 1 outside, offset inside
grid = build_grid(DomainSpec(delta=0.1), 128)
cavity = CavityShape.disc(0.5, 0.55, 0.15)
eta = 0.03
vtilde = smoothed_indicator(grid, cavity, eta)
w = weight_from_phase(grid, 1.0 - vtilde, eta, offset=eta ** 2)
print(f"conductivity range [{w.values.min():.2e}, {w.values.max():.2f}] "
      f"with offset {eta ** 2:.0e}")
pgm = os.path.join(outdir, "conductivity.pgm")
fieldio.dump_pgm(pgm, grid, 1.0 - vtilde)
print(f"wrote {pgm}")
