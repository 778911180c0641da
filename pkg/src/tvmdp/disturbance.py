"""Time-varying 2D current fields.

Two analytic families (self-spinning vectors and a moving vortex) plus a
gridded field backed by sampled data with trilinear interpolation in
(x, y, t). All fields answer point queries through ``velocity_at`` and
vectorized queries through ``velocity_grid``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "SelfSpinningField",
    "VortexField",
    "GriddedField",
    "write_gridded_field",
    "load_gridded_field",
    "field_from_params",
]


class _Field:
    def velocity_at(self, x: float, y: float, t: float) -> tuple[float, float]:
        vx, vy = self.velocity_grid(np.asarray([x], float), np.asarray([y], float), float(t))
        return float(vx[0]), float(vy[0])


@dataclass
class SelfSpinningField(_Field):
    """Uniform field whose vector spins in place: v = A (cos wt, sin wt)."""

    magnitude: float
    omega: float

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("magnitude must be non-negative")

    kind = "self_spinning"

    def velocity_grid(self, x: np.ndarray, y: np.ndarray, t: float):
        phase = self.omega * t
        vx = np.full_like(np.asarray(x, float), self.magnitude * np.cos(phase))
        vy = np.full_like(np.asarray(y, float), self.magnitude * np.sin(phase))
        return vx, vy


@dataclass
class VortexField(_Field):
    """Rotating-center vortex.

    The vortex center (x_c, y_c) circles radius ``radius`` around
    (center_x, center_y); the flow at (x, y) is
    v_x = x_c - x + y - y_c, v_y = x_c - x - y + y_c.
    """

    radius: float
    omega: float
    center_x: float
    center_y: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be non-negative")

    kind = "vortex"

    def vortex_center(self, t: float) -> tuple[float, float]:
        return (
            self.radius * np.cos(self.omega * t) + self.center_x,
            self.radius * np.sin(self.omega * t) + self.center_y,
        )

    def velocity_grid(self, x: np.ndarray, y: np.ndarray, t: float):
        xc, yc = self.vortex_center(t)
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        vx = xc - x + y - yc
        vy = xc - x - y + yc
        return vx, vy


class GriddedField(_Field):
    """Velocity samples on a regular (x, y, t) lattice.

    Queries interpolate trilinearly; coordinates outside the sampled box
    clamp to the boundary samples.
    """

    kind = "gridded"

    def __init__(
        self,
        vx: np.ndarray,
        vy: np.ndarray,
        origin: tuple[float, float, float],
        spacing: tuple[float, float, float],
    ):
        vx = np.asarray(vx, float)
        vy = np.asarray(vy, float)
        if vx.shape != vy.shape or vx.ndim != 3:
            raise ValueError("vx and vy must be equal-shaped (nx, ny, nt) arrays")
        self.vx = vx
        self.vy = vy
        self.origin = tuple(float(v) for v in origin)
        self.spacing = tuple(float(v) for v in spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacings must be positive")
        self.shape = vx.shape

    def _fractional_index(self, coord, axis):
        n = self.shape[axis]
        u = (np.asarray(coord, float) - self.origin[axis]) / self.spacing[axis]
        u = np.clip(u, 0.0, n - 1.0)
        lo = np.minimum(np.floor(u).astype(np.int64), n - 2) if n > 1 else np.zeros_like(u, np.int64)
        frac = u - lo if n > 1 else np.zeros_like(u)
        return lo, frac

    def velocity_grid(self, x: np.ndarray, y: np.ndarray, t: float):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        tt = np.full_like(x, float(t))
        ix, fx = self._fractional_index(x, 0)
        iy, fy = self._fractional_index(y, 1)
        it, ft = self._fractional_index(tt, 2)

        def interp(v):
            out = np.zeros_like(x)
            for dx_, wx in ((0, 1 - fx), (1, fx)):
                for dy_, wy in ((0, 1 - fy), (1, fy)):
                    for dt_, wt in ((0, 1 - ft), (1, ft)):
                        jx = np.clip(ix + dx_, 0, self.shape[0] - 1)
                        jy = np.clip(iy + dy_, 0, self.shape[1] - 1)
                        jt = np.clip(it + dt_, 0, self.shape[2] - 1)
                        out += wx * wy * wt * v[jx, jy, jt]
            return out

        return interp(self.vx), interp(self.vy)


def write_gridded_field(path, field_or_vx, vy=None, origin=None, spacing=None) -> None:
    """Write a gridded field as CSV (x,y,t,vx,vy) plus a JSON descriptor.

    The descriptor sits next to the CSV with suffix ``.json`` and records
    grid shape, origin, and spacing, so loading needs no inference.
    """
    if isinstance(field_or_vx, GriddedField):
        f = field_or_vx
        vx, vy, origin, spacing = f.vx, f.vy, f.origin, f.spacing
    else:
        vx = np.asarray(field_or_vx, float)
        vy = np.asarray(vy, float)
    path = Path(path)
    nx, ny, nt = vx.shape
    xs = origin[0] + spacing[0] * np.arange(nx)
    ys = origin[1] + spacing[1] * np.arange(ny)
    ts = origin[2] + spacing[2] * np.arange(nt)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "t", "vx", "vy"])
        for it in range(nt):
            for iy in range(ny):
                for ix in range(nx):
                    w.writerow(
                        [
                            f"{xs[ix]:.12g}",
                            f"{ys[iy]:.12g}",
                            f"{ts[it]:.12g}",
                            f"{vx[ix, iy, it]:.12g}",
                            f"{vy[ix, iy, it]:.12g}",
                        ]
                    )
    descriptor = {
        "shape": [int(nx), int(ny), int(nt)],
        "origin": [float(v) for v in origin],
        "spacing": [float(v) for v in spacing],
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(descriptor, indent=2) + "\n")


def load_gridded_field(path) -> GriddedField:
    """Load a gridded field written by :func:`write_gridded_field`."""
    path = Path(path)
    desc_path = path.with_suffix(path.suffix + ".json")
    if not path.exists():
        raise FileNotFoundError(f"gridded field file not found: {path}")
    if not desc_path.exists():
        raise FileNotFoundError(f"gridded field descriptor not found: {desc_path}")
    desc = json.loads(desc_path.read_text())
    nx, ny, nt = desc["shape"]
    origin = tuple(desc["origin"])
    spacing = tuple(desc["spacing"])
    vx = np.zeros((nx, ny, nt))
    vy = np.zeros((nx, ny, nt))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:5] != ["x", "y", "t", "vx", "vy"]:
            raise ValueError(f"unexpected gridded field header in {path}: {header}")
        for rec in reader:
            if not rec or rec[0].startswith("#"):
                continue
            x, y, t, fx, fy = (float(v) for v in rec[:5])
            ix = int(round((x - origin[0]) / spacing[0]))
            iy = int(round((y - origin[1]) / spacing[1]))
            it = int(round((t - origin[2]) / spacing[2]))
            vx[ix, iy, it] = fx
            vy[ix, iy, it] = fy
    return GriddedField(vx, vy, origin, spacing)


def field_from_params(kind: str, params: dict):
    """Instantiate a field from config-style parameters."""
    if kind == "self_spinning":
        return SelfSpinningField(magnitude=params["magnitude"], omega=params["omega"])
    if kind == "vortex":
        return VortexField(
            radius=params["radius"],
            omega=params["omega"],
            center_x=params["center_x"],
            center_y=params["center_y"],
        )
    if kind == "gridded":
        return load_gridded_field(params["path"])
    raise ValueError(f"unknown disturbance field kind: {kind!r}")
