"""Plain-text artifact formats: field dumps, boundary data CSV, traces.

Every writer formats floats with repr (shortest round-trip), so rerunning
a deterministic experiment reproduces each artifact byte for byte.
"""

from __future__ import annotations

import datetime
import os

import numpy as np

from .geometry import SIDES, Grid
from .forward import CauchyData

__all__ = [
    "dump_field", "load_field", "dump_pgm",
    "cauchy_to_csv", "cauchy_from_csv",
    "trace_to_csv", "metrics_to_text", "read_metrics",
    "config_to_text", "parse_config_text",
    "write_manifest",
]


def _fmt(x: float) -> str:
    return repr(float(x))


def dump_field(path: str, grid: Grid, values: np.ndarray) -> None:
    """Write a nodal field: three header lines, then one grid row per line."""
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n_nodes,):
        raise ValueError("field length does not match the grid")
    rows = values.reshape(grid.ny + 1, grid.nx + 1)
    lines = [f"nx {grid.nx}", f"ny {grid.ny}", f"h {_fmt(grid.h)}"]
    for r in rows:
        lines.append(" ".join(_fmt(v) for v in r))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_field(path: str) -> tuple[int, int, float, np.ndarray]:
    """Read a dump_field file; returns (nx, ny, h, flat nodal values)."""
    with open(path) as fh:
        lines = [ln for ln in (s.strip() for s in fh) if ln]
    try:
        nx = int(lines[0].split()[1])
        ny = int(lines[1].split()[1])
        h = float(lines[2].split()[1])
    except (IndexError, ValueError) as exc:
        raise ValueError(f"malformed field header in {path}") from exc
    body = lines[3:]
    if len(body) != ny + 1:
        raise ValueError(f"expected {ny + 1} rows in {path}, found {len(body)}")
    arr = np.vstack([np.array(ln.split(), dtype=float) for ln in body])
    if arr.shape != (ny + 1, nx + 1):
        raise ValueError(f"row length mismatch in {path}")
    return nx, ny, h, arr.ravel()


def dump_pgm(path: str, grid: Grid, values: np.ndarray) -> None:
    """8-bit grayscale companion image of a nodal field in [0, 1]."""
    values = np.asarray(values, dtype=float).reshape(grid.ny + 1, grid.nx + 1)
    img = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    img = img[::-1]  # image rows run top to bottom
    header = f"P5\n{grid.nx + 1} {grid.ny + 1}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.tobytes())


def cauchy_to_csv(path: str, grid: Grid, data: CauchyData) -> None:
    """One row per boundary edge: side, arc coordinate, injected f, measured g."""
    lines = [
        f"# epsilon {_fmt(data.epsilon)}",
        f"# rho {_fmt(data.rho)}",
        f"# seed {data.seed}",
        f"# nx {grid.nx}",
        f"# ny {grid.ny}",
        "side,arc,f,g",
    ]
    for i in range(len(grid.be_side)):
        lines.append(",".join((SIDES[grid.be_side[i]], _fmt(grid.be_arc[i]),
                               _fmt(data.f[i]), _fmt(data.g[i]))))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def cauchy_from_csv(path: str, grid: Grid) -> CauchyData:
    meta = {}
    rows = []
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln:
                continue
            if ln.startswith("#"):
                parts = ln[1:].split()
                if len(parts) == 2:
                    meta[parts[0]] = parts[1]
                continue
            if ln.startswith("side,"):
                continue
            rows.append(ln.split(","))
    if int(meta.get("nx", grid.nx)) != grid.nx or int(meta.get("ny", grid.ny)) != grid.ny:
        raise ValueError(f"{path} was written for a different grid")
    if len(rows) != len(grid.be_side):
        raise ValueError(f"{path}: expected {len(grid.be_side)} edges, found {len(rows)}")
    f = np.zeros(len(rows))
    g = np.zeros(len(rows))
    for i, (side, arc, fv, gv) in enumerate(rows):
        if side != SIDES[grid.be_side[i]] or abs(float(arc) - grid.be_arc[i]) > 1e-12:
            raise ValueError(f"{path}: edge {i} does not match the grid ordering")
        f[i] = float(fv)
        g[i] = float(gv)
    return CauchyData(f=f, g=g,
                      epsilon=float(meta.get("epsilon", 0.0)),
                      rho=float(meta.get("rho", 0.0)),
                      seed=int(meta.get("seed", 0)))


def trace_to_csv(path: str, trace) -> None:
    lines = ["iteration,total,misfit,discrepancy,gradient,well,dirichlet,"
             "step,grad_norm,projected"]
    for k in range(len(trace.iterations)):
        b = trace.terms[k]
        lines.append(",".join([
            str(trace.iterations[k]), _fmt(trace.totals[k]),
            _fmt(b.misfit), _fmt(b.discrepancy), _fmt(b.gradient),
            _fmt(b.well), _fmt(b.dirichlet),
            _fmt(trace.steps[k]), _fmt(trace.grad_norms[k]),
            str(trace.projected_counts[k]),
        ]))
    lines.append(f"# converged {trace.converged}")
    lines.append(f"# message {trace.message}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def metrics_to_text(path: str, metrics: dict) -> None:
    lines = []
    for key in sorted(metrics):
        val = metrics[key]
        if isinstance(val, (float, np.floating)):
            lines.append(f"{key} {_fmt(val)}")
        else:
            lines.append(f"{key} {val}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metrics(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            key, _, val = ln.partition(" ")
            out[key] = val
    return out


def config_to_text(settings: dict) -> str:
    return "\n".join(f"{k} = {settings[k]}" for k in sorted(settings)) + "\n"


def parse_config_text(text: str) -> dict:
    """key = value lines; blank lines and # comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        ln = raw.strip()
        if not ln or ln.startswith("#"):
            continue
        key, sep, val = ln.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        val = val.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def write_manifest(path: str, directory: str) -> None:
    """Record the run contents; only this file carries a timestamp."""
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    names = sorted(n for n in os.listdir(directory)
                   if n != os.path.basename(path))
    lines = [f"created {stamp}"]
    for n in names:
        size = os.path.getsize(os.path.join(directory, n))
        lines.append(f"{n} {size}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
