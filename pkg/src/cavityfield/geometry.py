"""Rectangular domains, accessible boundary segments, uniform grids, cavities.

The conductor occupies an axis-aligned rectangle.  Two tagged portions of its
boundary play distinct roles: the current is injected on ``gamma_tilde`` and
the voltage is recorded on ``gamma``.  A safety band of prescribed thickness
hugs the boundary; cavities must keep a standoff distance ``delta`` from it so
that the region near the measurements is never insulated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

SIDES = ("bottom", "right", "top", "left")

__all__ = [
    "SIDES",
    "DomainSpec",
    "Grid",
    "CavityShape",
    "GeometryError",
    "full_boundary",
    "build_grid",
    "rasterize_cavity",
    "check_standoff",
]


class GeometryError(ValueError):
    """Inconsistent domain, grid or cavity description."""


def full_boundary() -> tuple[tuple[str, float, float], ...]:
    """All four sides, each with its full parameter range."""
    return tuple((s, 0.0, 1.0) for s in SIDES)


@dataclass(frozen=True)
class DomainSpec:
    """Rectangle (0,width)x(0,height) with tagged boundary segments.

    ``gamma`` and ``gamma_tilde`` are sequences of (side, t0, t1) with the
    side parametrized by its own coordinate scaled to [0,1].  ``delta`` is
    the cavity standoff; the inner band has half thickness delta/2 and the
    outer (safety) band 3*delta/4.
    """

    width: float = 1.0
    height: float = 1.0
    gamma: tuple = field(default_factory=full_boundary)
    gamma_tilde: tuple = field(default_factory=full_boundary)
    delta: float = 0.1

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise GeometryError("domain sides must be positive")
        # the safety band on opposite sides must not swallow the domain
        if not (0 < self.delta and 0.75 * self.delta < 0.5 * min(self.width, self.height)):
            raise GeometryError("delta out of range for this rectangle")
        for seg in tuple(self.gamma) + tuple(self.gamma_tilde):
            side, t0, t1 = seg
            if side not in SIDES:
                raise GeometryError(f"unknown side {side!r}")
            if not (0.0 <= t0 < t1 <= 1.0):
                raise GeometryError(f"bad parameter range {seg!r}")
        if not self.gamma or not self.gamma_tilde:
            raise GeometryError("gamma and gamma_tilde must be non-empty")

    def band_width(self) -> float:
        return 0.75 * self.delta


@dataclass(frozen=True)
class Grid:
    """Uniform Q1 grid on a DomainSpec.  Immutable after construction.

    Nodes are numbered row-major, ``node = iy*(nx+1) + ix``; cells likewise
    ``cell = cy*nx + cx``.  ``cell_nodes`` lists the four corners of each
    cell counterclockwise from the lower left.  Boundary edges carry the
    side id, the arc parameter of their midpoint and the owning cell.
    """

    spec: DomainSpec
    nx: int
    ny: int
    h: float
    node_x: np.ndarray
    node_y: np.ndarray
    cell_nodes: np.ndarray
    cell_cx: np.ndarray
    cell_cy: np.ndarray
    node_cell_count: np.ndarray
    node_area: np.ndarray
    be_nodes: np.ndarray        # (n_edges, 2) endpoint node ids
    be_side: np.ndarray         # (n_edges,) index into SIDES
    be_arc: np.ndarray          # (n_edges,) midpoint parameter in [0,1]
    be_cell: np.ndarray         # (n_edges,) owning cell
    gamma_edges: np.ndarray     # (n_edges,) bool
    gamma_tilde_edges: np.ndarray
    gamma_node_weight: np.ndarray   # (n_nodes,) trapezoid weights on gamma
    node_in_inner_band: np.ndarray  # dist to boundary < delta/2
    node_in_band: np.ndarray        # dist to boundary < 3*delta/4

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_in_band(self) -> np.ndarray:
        """Cells whose four corners all lie in the safety band."""
        return self.node_in_band[self.cell_nodes].all(axis=1)

    def cell_average(self, nodal: np.ndarray) -> np.ndarray:
        return nodal[self.cell_nodes].mean(axis=1)

    def cell_gradient(self, nodal: np.ndarray) -> np.ndarray:
        """Gradient of the bilinear interpolant at cell centers, (n_cells, 2)."""
        ue = nodal[self.cell_nodes]
        gx = (ue[:, 1] + ue[:, 2] - ue[:, 0] - ue[:, 3]) / (2.0 * self.h)
        gy = (ue[:, 3] + ue[:, 2] - ue[:, 0] - ue[:, 1]) / (2.0 * self.h)
        return np.stack([gx, gy], axis=1)

    def scatter_cells_to_nodes(self, cellvals: np.ndarray) -> np.ndarray:
        """Sum cell values into their four corner nodes."""
        return np.bincount(self.cell_nodes.ravel(),
                           weights=np.repeat(cellvals, 4),
                           minlength=self.n_nodes)

    def node_average_of_cells(self, cellvals: np.ndarray) -> np.ndarray:
        """Average of the adjacent-cell values at each node."""
        return self.scatter_cells_to_nodes(cellvals) / self.node_cell_count

    def gamma_mean(self, nodal: np.ndarray) -> float:
        w = self.gamma_node_weight
        return float((w @ nodal) / w.sum())

    def edge_midpoint_values(self, nodal: np.ndarray) -> np.ndarray:
        """Average of the endpoint values on every boundary edge."""
        return 0.5 * (nodal[self.be_nodes[:, 0]] + nodal[self.be_nodes[:, 1]])


def _tag_edges(side_idx, arc, segments) -> np.ndarray:
    tags = np.zeros(side_idx.shape, dtype=bool)
    for side, t0, t1 in segments:
        s = SIDES.index(side)
        tags |= (side_idx == s) & (arc >= t0 - 1e-12) & (arc <= t1 + 1e-12)
    return tags


def build_grid(spec: DomainSpec, resolution: int) -> Grid:
    """Build a uniform grid with ``resolution`` cells per unit length.

    Rejects resolutions that are incommensurable with the rectangle, leave
    the safety band thinner than two cells, or make gamma or gamma_tilde
    empty at grid scale.
    """
    if resolution <= 0:
        raise GeometryError("resolution must be positive")
    h = 1.0 / float(resolution)
    nx = int(round(spec.width * resolution))
    ny = int(round(spec.height * resolution))
    if abs(nx * h - spec.width) > 1e-9 * spec.width or nx < 2:
        raise GeometryError("width is not an integer number of cells")
    if abs(ny * h - spec.height) > 1e-9 * spec.height or ny < 2:
        raise GeometryError("height is not an integer number of cells")
    if spec.band_width() < 2.0 * h - 1e-12:
        raise GeometryError("safety band thinner than two cells; refine the grid")

    ix, iy = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    node_x = (ix * h).ravel()
    node_y = (iy * h).ravel()

    cx, cy = np.meshgrid(np.arange(nx), np.arange(ny))
    cx = cx.ravel()
    cy = cy.ravel()
    n00 = cy * (nx + 1) + cx
    cell_nodes = np.stack([n00, n00 + 1, n00 + nx + 2, n00 + nx + 1], axis=1)
    cell_ccx = (cx + 0.5) * h
    cell_ccy = (cy + 0.5) * h

    node_cell_count = np.bincount(cell_nodes.ravel(), minlength=(nx + 1) * (ny + 1))
    node_area = node_cell_count * (h * h / 4.0)

    # boundary edges, grouped by side in SIDES order
    eb = np.arange(nx)
    er = np.arange(ny)
    be_nodes = np.concatenate([
        np.stack([eb, eb + 1], axis=1),                                    # bottom
        np.stack([er * (nx + 1) + nx, (er + 1) * (nx + 1) + nx], axis=1),  # right
        np.stack([ny * (nx + 1) + eb, ny * (nx + 1) + eb + 1], axis=1),    # top
        np.stack([er * (nx + 1), (er + 1) * (nx + 1)], axis=1),            # left
    ])
    be_side = np.concatenate([
        np.full(nx, 0), np.full(ny, 1), np.full(nx, 2), np.full(ny, 3)]).astype(np.int64)
    be_arc = np.concatenate([
        (eb + 0.5) * h / spec.width,
        (er + 0.5) * h / spec.height,
        (eb + 0.5) * h / spec.width,
        (er + 0.5) * h / spec.height,
    ])
    be_cell = np.concatenate([
        eb, er * nx + (nx - 1), (ny - 1) * nx + eb, er * nx])

    gamma_edges = _tag_edges(be_side, be_arc, spec.gamma)
    gamma_tilde_edges = _tag_edges(be_side, be_arc, spec.gamma_tilde)
    if not gamma_edges.any():
        raise GeometryError("gamma is empty at this resolution")
    if not gamma_tilde_edges.any():
        raise GeometryError("gamma_tilde is empty at this resolution")

    gw = np.zeros((nx + 1) * (ny + 1))
    for k in (0, 1):
        np.add.at(gw, be_nodes[gamma_edges, k], 0.5 * h)

    dist = np.minimum(np.minimum(node_x, spec.width - node_x),
                      np.minimum(node_y, spec.height - node_y))
    node_in_inner_band = dist < 0.5 * spec.delta - 1e-12
    node_in_band = dist < 0.75 * spec.delta - 1e-12
    if not node_in_band.any():
        raise GeometryError("safety band is empty at this resolution")

    arrays = dict(
        node_x=node_x, node_y=node_y, cell_nodes=cell_nodes,
        cell_cx=cell_ccx, cell_cy=cell_ccy,
        node_cell_count=node_cell_count, node_area=node_area,
        be_nodes=be_nodes, be_side=be_side, be_arc=be_arc, be_cell=be_cell,
        gamma_edges=gamma_edges, gamma_tilde_edges=gamma_tilde_edges,
        gamma_node_weight=gw,
        node_in_inner_band=node_in_inner_band, node_in_band=node_in_band)
    for a in arrays.values():
        a.setflags(write=False)
    return Grid(spec=spec, nx=nx, ny=ny, h=h, **arrays)


def _polygon_contains(verts: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # even-odd ray casting, vectorized over query points
    inside = np.zeros(x.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < np.where(crosses, xi, 0.0))
    return inside


@dataclass(frozen=True)
class CavityShape:
    """Insulating inclusion, rasterized by cell-center membership.

    Kinds: ``empty``, ``disc`` (cx, cy, r), ``rect`` (x0, y0, x1, y1),
    ``polygon`` (flat vertex coordinates) and ``mask`` (nx, ny followed by a
    run-length encoding of the excluded cells, row-major).
    """

    kind: str
    params: tuple = ()

    @classmethod
    def empty(cls) -> "CavityShape":
        return cls("empty")

    @classmethod
    def disc(cls, cx: float, cy: float, r: float) -> "CavityShape":
        return cls("disc", (float(cx), float(cy), float(r)))

    @classmethod
    def rectangle(cls, x0: float, y0: float, x1: float, y1: float) -> "CavityShape":
        if not (x0 < x1 and y0 < y1):
            raise GeometryError("degenerate rectangle")
        return cls("rect", (float(x0), float(y0), float(x1), float(y1)))

    @classmethod
    def polygon(cls, vertices: Sequence[tuple[float, float]]) -> "CavityShape":
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise GeometryError("polygon needs at least three (x, y) vertices")
        return cls("polygon", tuple(float(t) for t in v.ravel()))

    @classmethod
    def from_mask(cls, excluded: np.ndarray) -> "CavityShape":
        """Explicit excluded-cell mask, shape (ny, nx), row-major RLE."""
        m = np.asarray(excluded, dtype=bool)
        if m.ndim != 2:
            raise GeometryError("mask must be 2-d (ny, nx)")
        flat = m.ravel()
        # run lengths, starting with a run of False
        runs = []
        current = False
        count = 0
        for bit in flat:
            if bit == current:
                count += 1
            else:
                runs.append(count)
                current = bit
                count = 1
        runs.append(count)
        return cls("mask", (m.shape[1], m.shape[0]) + tuple(runs))

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.kind == "empty":
            return np.zeros(np.shape(x), dtype=bool)
        if self.kind == "disc":
            cx, cy, r = self.params
            return (x - cx) ** 2 + (y - cy) ** 2 <= r * r
        if self.kind == "rect":
            x0, y0, x1, y1 = self.params
            return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
        if self.kind == "polygon":
            verts = np.asarray(self.params).reshape(-1, 2)
            return _polygon_contains(verts, np.asarray(x, float), np.asarray(y, float))
        if self.kind == "mask":
            raise GeometryError("mask cavities are resolved per cell, not pointwise")
        raise GeometryError(f"unknown cavity kind {self.kind!r}")

    def excluded_cells(self, grid: Grid) -> np.ndarray:
        """Boolean per-cell exclusion mask from center membership."""
        if self.kind == "mask":
            nx, ny = int(self.params[0]), int(self.params[1])
            if nx != grid.nx or ny != grid.ny:
                raise GeometryError("mask cavity does not match the grid dimensions")
            runs = self.params[2:]
            flat = np.zeros(nx * ny, dtype=bool)
            pos = 0
            bit = False
            for run in runs:
                run = int(run)
                if bit:
                    flat[pos:pos + run] = True
                pos += run
                bit = not bit
            if pos != nx * ny:
                raise GeometryError("mask run lengths do not cover the grid")
            return flat
        return self.contains(grid.cell_cx, grid.cell_cy)

    def serialize(self) -> str:
        if self.kind == "empty":
            return "empty"
        body = ",".join(str(p) if isinstance(p, int) else repr(float(p))
                        for p in self.params)
        return f"{self.kind}:{body}"

    @classmethod
    def deserialize(cls, text: str) -> "CavityShape":
        text = text.strip()
        if text == "empty":
            return cls.empty()
        kind, _, body = text.partition(":")
        vals = tuple(float(t) for t in body.split(",") if t.strip())
        if kind == "disc":
            return cls.disc(*vals)
        if kind == "rect":
            return cls.rectangle(*vals)
        if kind == "polygon":
            return cls("polygon", vals)
        if kind == "mask":
            return cls("mask", (int(vals[0]), int(vals[1])) + tuple(int(v) for v in vals[2:]))
        raise GeometryError(f"unknown cavity kind {kind!r}")


def check_standoff(grid: Grid, excluded: np.ndarray) -> float:
    """Distance from the excluded cells to the safety band nodes.

    Raises if it falls below the standoff ``delta``; returns the measured
    distance (inf when nothing is excluded).
    """
    if not excluded.any():
        return np.inf
    band_pts = np.stack([grid.node_x[grid.node_in_band],
                         grid.node_y[grid.node_in_band]], axis=1)
    cav_pts = np.stack([grid.cell_cx[excluded], grid.cell_cy[excluded]], axis=1)
    d = float(cKDTree(band_pts).query(cav_pts)[0].min())
    if d < grid.spec.delta - 1e-12:
        raise GeometryError(
            f"cavity violates the standoff: dist {d:.6g} < delta {grid.spec.delta:.6g}")
    return d


def rasterize_cavity(grid: Grid, cavity: CavityShape, *,
                     enforce_standoff: bool = True) -> np.ndarray:
    """Retained (conducting, reachable) cell mask for a cavity.

    Excluded cells are those whose centers lie inside the shape.  The
    retained region is the 4-connected component of the remaining cells
    that contains the cells adjacent to gamma_tilde; enclosed conducting
    pockets are dropped.  Fails if the cavity disconnects gamma_tilde or
    cuts the retained region off gamma.
    """
    excluded = cavity.excluded_cells(grid)
    if enforce_standoff:
        check_standoff(grid, excluded)

    open_cells = ~excluded.reshape(grid.ny, grid.nx)
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, _ = ndimage.label(open_cells, structure=structure)
    labels = labels.ravel()

    seed_cells = grid.be_cell[grid.gamma_tilde_edges]
    seed_labels = np.unique(labels[seed_cells])
    if (seed_labels == 0).any():
        raise GeometryError("cavity overlaps a gamma_tilde boundary cell")
    if len(seed_labels) != 1:
        raise GeometryError("cavity disconnects the gamma_tilde cells")
    retained = labels == seed_labels[0]

    gamma_cells = grid.be_cell[grid.gamma_edges]
    if not retained[gamma_cells].any():
        raise GeometryError("retained region does not touch gamma")
    retained.setflags(write=False)
    return retained
