"""Phase fields, double/single-well potentials and interface energies.

The nodal field v marks conducting material (v = 1) versus cavity (v = 0);
the optimization variable is its complement vtilde = 1 - v, which must
vanish on the safety band.  The conductivity seen by the solver is a
monotone profile of v lifted away from zero by a small offset, so the
state problem stays uniformly elliptic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage
from scipy.integrate import quad

from .geometry import Grid, CavityShape, rasterize_cavity
from .elliptic import WeightField

__all__ = [
    "PotentialSet",
    "PhaseField",
    "EtaSchedule",
    "BandReport",
    "weight_from_phase",
    "interface_energy",
    "discrete_perimeter",
    "project_admissible",
    "check_band_constraint",
]


def _clip01(t):
    return np.clip(t, 0.0, 1.0)


def _w_default(t):
    t = _clip01(t)
    return 9.0 * t * t * (t - 1.0) ** 2


def _wp_default(t):
    t = np.asarray(t, dtype=float)
    inside = (t >= 0.0) & (t <= 1.0)
    tc = _clip01(t)
    return np.where(inside, 18.0 * tc * (tc - 1.0) * (2.0 * tc - 1.0), 0.0)


def _v_default(t):
    t = _clip01(t)
    return 0.25 * (t - 1.0) ** 2


def _vp_default(t):
    t = np.asarray(t, dtype=float)
    inside = (t >= 0.0) & (t <= 1.0)
    return np.where(inside, 0.5 * (_clip01(t) - 1.0), 0.0)


def _psi_smoothstep(t):
    t = _clip01(t)
    return t * t * (3.0 - 2.0 * t)


def _psip_smoothstep(t):
    t = np.asarray(t, dtype=float)
    inside = (t >= 0.0) & (t <= 1.0)
    tc = _clip01(t)
    return np.where(inside, 6.0 * tc * (1.0 - tc), 0.0)


@dataclass(frozen=True)
class PotentialSet:
    """Wells W (double) and V (single) plus the conductivity profile psi.

    All three are clamped to their endpoint values outside [0,1] with
    derivatives extended by zero there.  ``c_w = int_0^1 sqrt(W)`` is the
    transition cost factor and ``c_v = V(0)`` the well depth at the void
    phase; the defaults are normalized so that 2*c_w = 1 and 4*c_v = 1.
    """

    w: Callable = _w_default
    w_prime: Callable = _wp_default
    v: Callable = _v_default
    v_prime: Callable = _vp_default
    psi: Callable = _psi_smoothstep
    psi_prime: Callable = _psip_smoothstep
    c_w: float = 0.5
    c_v: float = 0.25
    psi_name: str = "smoothstep"

    @classmethod
    def default(cls) -> "PotentialSet":
        return cls()

    @classmethod
    def with_power_profile(cls, gamma: float = 2.0) -> "PotentialSet":
        """Default wells with psi(t) = t^gamma.

        Unlike the smoothstep, the power profile has a non-zero slope at
        t = 1, so a uniformly conducting initial guess is not a critical
        point of the objectives and descent can open a cavity from it.
        """
        if gamma < 1.0:
            raise ValueError("gamma < 1 breaks the C1 profile requirement")

        def psi(t):
            return _clip01(t) ** gamma

        def psi_prime(t):
            t = np.asarray(t, dtype=float)
            inside = (t >= 0.0) & (t <= 1.0)
            return np.where(inside, gamma * _clip01(t) ** (gamma - 1.0), 0.0)

        return cls(psi=psi, psi_prime=psi_prime, psi_name=f"power{gamma:g}")

    @classmethod
    def custom(cls, w, w_prime, v, v_prime, psi, psi_prime,
               name: str = "custom") -> "PotentialSet":
        c_w = quad(lambda t: np.sqrt(max(w(t), 0.0)), 0.0, 1.0)[0]
        c_v = float(v(0.0))
        return cls(w=w, w_prime=w_prime, v=v, v_prime=v_prime,
                   psi=psi, psi_prime=psi_prime, c_w=c_w, c_v=c_v,
                   psi_name=name)


@dataclass(frozen=True)
class PhaseField:
    """Nodal material indicator v in [0,1]; v = 1 means conducting."""

    values: np.ndarray

    @property
    def vtilde(self) -> np.ndarray:
        return 1.0 - self.values

    @classmethod
    def from_vtilde(cls, vtilde: np.ndarray) -> "PhaseField":
        return cls(1.0 - np.asarray(vtilde, dtype=float))

    @classmethod
    def no_cavity(cls, grid: Grid) -> "PhaseField":
        return cls(np.ones(grid.n_nodes))

    def validate(self, grid: Grid) -> None:
        v = self.values
        if v.shape != (grid.n_nodes,):
            raise ValueError("phase field must be nodal")
        if v.min() < -1e-12 or v.max() > 1.0 + 1e-12:
            raise ValueError("phase field escapes [0,1]")
        if (v[grid.node_in_band] < 1.0 - 1e-12).any():
            raise ValueError("phase field must equal 1 on the safety band")


@dataclass(frozen=True)
class EtaSchedule:
    """Coupling of the internal scales to the noise level epsilon.

    eta(eps) = eta_scale * eps^eta_power, the conductivity offset is
    min(eta^power, 1/2) where the power comes from the functional's
    gradient exponent, and the localization band radius is
    band_factor * eta with band_factor >= 2.
    """

    eta_scale: float = 1.0
    eta_power: float = 1.0
    band_factor: float = 2.0

    def __post_init__(self):
        if self.eta_scale <= 0 or self.eta_power <= 0:
            raise ValueError("eta rule must be increasing from zero")
        if self.band_factor < 2.0:
            raise ValueError("band factor below 2 violates the localization hypothesis")

    def eta(self, epsilon: float) -> float:
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        return float(self.eta_scale * epsilon ** self.eta_power)

    def offset(self, eta: float, power: float = 2.0) -> float:
        if eta <= 0:
            raise ValueError("eta must be positive")
        return float(min(eta ** power, 0.5))

    def band_radius(self, eta: float) -> float:
        return float(self.band_factor * eta)


def weight_from_phase(grid: Grid, v: np.ndarray, eta: float, offset: float,
                      potentials: PotentialSet | None = None) -> WeightField:
    """Per-cell conductivity (1 - offset) * psi(v) + offset.

    v is averaged over each cell's corners before the profile is applied,
    so cells fully inside the safety band get weight exactly 1.
    """
    if not (0.0 < offset <= 0.5):
        raise ValueError("offset must lie in (0, 1/2]")
    pots = potentials or PotentialSet.default()
    vbar = grid.cell_average(np.asarray(v, dtype=float))
    w = (1.0 - offset) * pots.psi(vbar) + offset
    return WeightField(values=w, floor=0.5 * offset, cap=1.0)


def interface_energy(grid: Grid, v: np.ndarray, eta: float,
                     potentials: PotentialSet | None = None) -> float:
    """Perimeter-approximating energy (1/eta) int W(v) + eta int |grad v|^2.

    Midpoint quadrature per cell for both terms.  For fields resolving an
    optimal transition profile this tends to 2*c_w times the interface
    length as eta shrinks (equal to the length itself for the default W).
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    pots = potentials or PotentialSet.default()
    vbar = grid.cell_average(np.asarray(v, dtype=float))
    g2 = (grid.cell_gradient(np.asarray(v, dtype=float)) ** 2).sum(axis=1)
    h2 = grid.h ** 2
    return float((pots.w(vbar).sum() / eta + eta * g2.sum()) * h2)


def discrete_perimeter(grid: Grid, cell_mask: np.ndarray) -> float:
    """Face-counting perimeter of a cell set (the l1 / cityblock length)."""
    m = np.asarray(cell_mask, dtype=bool).reshape(grid.ny, grid.nx)
    vertical = (m[:, 1:] != m[:, :-1]).sum()
    horizontal = (m[1:, :] != m[:-1, :]).sum()
    # faces on the domain boundary separate the set from the outside too
    rim = m[0, :].sum() + m[-1, :].sum() + m[:, 0].sum() + m[:, -1].sum()
    return float((vertical + horizontal + rim) * grid.h)


def project_admissible(grid: Grid, vtilde: np.ndarray) -> np.ndarray:
    """Clamp vtilde into [0,1] nodewise and zero it on the safety band.

    This is the projection used after every descent step; it is idempotent
    and never increases the distance between two fields.
    """
    out = np.clip(np.asarray(vtilde, dtype=float), 0.0, 1.0)
    out[grid.node_in_band] = 0.0
    return out


@dataclass(frozen=True)
class BandReport:
    """Outcome of the two-sided band membership check."""

    ok: bool
    low_violations: int    # cells deep inside the cavity with v > c1
    high_violations: int   # cells deep inside the conductor with v < c2
    band_radius: float


def check_band_constraint(grid: Grid, v: np.ndarray, cavity: CavityShape,
                          band_radius: float, c1: float, c2: float) -> BandReport:
    """Diagnose whether v respects the two-sided localization bands.

    Away (further than band_radius) from the conducting region the field
    must sit below c1; away from the cavity complement it must sit above
    c2.  This is a diagnostic, not a constraint the optimizer enforces.
    """
    if not (0.0 < c1 < c2 < 1.0):
        raise ValueError("need 0 < c1 < c2 < 1")
    retained = rasterize_cavity(grid, cavity).reshape(grid.ny, grid.nx)
    # distance from each cell center to the nearest retained / excluded cell;
    # scipy's EDT misbehaves when the mask has no zeros at all
    d_to_cond = ndimage.distance_transform_edt(~retained, sampling=grid.h)
    if retained.all():
        d_to_cav = np.full(retained.shape, np.inf)
    else:
        d_to_cav = ndimage.distance_transform_edt(retained, sampling=grid.h)
    vbar = grid.cell_average(np.asarray(v, dtype=float)).reshape(grid.ny, grid.nx)
    deep_cavity = d_to_cond > band_radius
    deep_cond = d_to_cav > band_radius
    low = int((vbar[deep_cavity] > c1 + 1e-12).sum())
    high = int((vbar[deep_cond] < c2 - 1e-12).sum())
    return BandReport(ok=(low == 0 and high == 0),
                      low_violations=low, high_violations=high,
                      band_radius=band_radius)
