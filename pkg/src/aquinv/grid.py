"""Grid geometry, physical parameters, source description and parameter packing.

Fields are plain ``numpy`` arrays of shape ``grid.shape == (nx, ny, nz)``.
Axis order is (x, y, z) and z index 0 is the top layer.  Flattening always
uses C order, so the flat index of cell ``(i, j, k)`` is ``(i*ny + j)*nz + k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, LayoutError

DAYS_PER_YEAR = 365.0


@dataclass(frozen=True)
class Grid3:
    nx: int
    ny: int
    nz: int
    lx: float
    ly: float
    lz: float

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 2:
            raise DomainError(f"grid needs at least 2 cells per axis, got {self.shape}")
        if min(self.lx, self.ly, self.lz) <= 0:
            raise DomainError("grid extents must be positive")

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def n_cells(self):
        return self.nx * self.ny * self.nz

    @property
    def dx(self):
        return self.lx / self.nx

    @property
    def dy(self):
        return self.ly / self.ny

    @property
    def dz(self):
        return self.lz / self.nz

    @property
    def cell_volume(self):
        return self.dx * self.dy * self.dz

    def centers(self, axis):
        n, d = [(self.nx, self.dx), (self.ny, self.dy), (self.nz, self.dz)][axis]
        return (np.arange(n) + 0.5) * d

    def check_field(self, values, name="field"):
        values = np.asarray(values)
        if values.shape != self.shape:
            raise LayoutError(f"{name} has shape {values.shape}, grid is {self.shape}")
        if not np.all(np.isfinite(values)):
            raise DomainError(f"{name} contains non-finite values")
        return values

    def to_dict(self):
        return dict(nx=self.nx, ny=self.ny, nz=self.nz, lx=self.lx, ly=self.ly, lz=self.lz)


@dataclass(frozen=True)
class TransportParams:
    """Transport coefficients.

    ``rho_b`` is in g/m^3 *before* ``unit_scale``; the retardation uses
    ``unit_scale * rho_b * K_f``.  With the tabulated bulk density of
    1587 kg/m^3 taken literally the retardation is of order 1e5, so the
    default scale of 1e-6 reads the density as g/cm^3.
    """

    theta: float = 0.3
    rho_b: float = 1.587e6
    K_f: float = 0.1
    a: float = 0.9
    alpha_L: float = 35.0
    alpha_T: float = 10.5
    alpha_C: float = 10.5
    D_m: float = 1e-9
    unit_scale: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise DomainError(f"porosity must lie in (0, 1), got {self.theta}")
        if self.a <= 0:
            raise DomainError(f"Freundlich exponent must be positive, got {self.a}")
        if min(self.alpha_L, self.alpha_T, self.alpha_C) < 0 or self.D_m < 0:
            raise DomainError("dispersivities and diffusion must be non-negative")

    @property
    def sorption_coeff(self):
        """``unit_scale * rho_b * K_f`` (sorbed mass per bulk volume per c**a)."""
        return self.unit_scale * self.rho_b * self.K_f


@dataclass(frozen=True)
class SourceConfig:
    """Point release with piecewise-constant strength over stress periods.

    ``strengths`` are source-flux concentrations (g/m^3); the mass loading
    rate in the source cell is ``q_s * strengths[p]`` (g/m^3/d).
    """

    sl_x: float
    sl_y: float
    layer: int
    strengths: tuple = ()
    period_len: float = 4 * DAYS_PER_YEAR
    t0: float = 0.0
    q_s: float = 2e-5

    def __post_init__(self):
        object.__setattr__(self, "strengths", tuple(float(s) for s in self.strengths))
        if any(not math.isfinite(s) or s < 0 for s in self.strengths):
            raise DomainError("source strengths must be finite and non-negative")
        if self.period_len <= 0:
            raise DomainError("stress period length must be positive")

    @property
    def n_re(self):
        return len(self.strengths)

    @property
    def duration(self):
        return self.n_re * self.period_len

    def with_parameters(self, sl, ss):
        return SourceConfig(float(sl[0]), float(sl[1]), self.layer, tuple(ss),
                            self.period_len, self.t0, self.q_s)


def locate_cell(x, y, layer, grid):
    """Snap a continuous plan-view location and a layer index to a cell."""
    if not (0.0 <= x <= grid.lx and 0.0 <= y <= grid.ly):
        raise DomainError(f"location ({x}, {y}) lies outside the domain")
    if not 0 <= layer < grid.nz:
        raise DomainError(f"layer {layer} outside 0..{grid.nz - 1}")
    i = min(int(math.floor(x / grid.dx)), grid.nx - 1)
    j = min(int(math.floor(y / grid.dy)), grid.ny - 1)
    return i, j, int(layer)


def stress_period(src, t):
    """Index of the active stress period at time ``t`` or ``None``."""
    if src.n_re == 0 or t < src.t0 or t >= src.t0 + src.duration:
        return None
    return min(int(math.floor((t - src.t0) / src.period_len)), src.n_re - 1)


def build_source_field(src, t, grid):
    """Mass-loading rate field (g/m^3/d) active at time ``t``."""
    out = np.zeros(grid.shape)
    p = stress_period(src, t)
    if p is None:
        return out
    out[locate_cell(src.sl_x, src.sl_y, src.layer, grid)] = src.q_s * src.strengths[p]
    return out


@dataclass(frozen=True)
class ParameterLayout:
    """Flat layout ``[z | sl_x, sl_y | ss]`` of the inversion unknowns."""

    latent_shape: tuple
    n_re: int
    n_loc: int = field(default=2, init=False)

    @property
    def n_latent(self):
        return int(np.prod(self.latent_shape))

    @property
    def size(self):
        return self.n_latent + self.n_loc + self.n_re

    @property
    def z_slice(self):
        return slice(0, self.n_latent)

    @property
    def sl_slice(self):
        return slice(self.n_latent, self.n_latent + 2)

    @property
    def ss_slice(self):
        return slice(self.n_latent + 2, self.size)

    def pack(self, z, sl, ss):
        """Pack components; works on single vectors or on column ensembles."""
        z, sl, ss = np.asarray(z, float), np.asarray(sl, float), np.asarray(ss, float)
        batched = sl.ndim == 2
        if batched and z.size != self.n_latent * sl.shape[-1]:
            raise LayoutError(f"latent block of size {z.size} does not fit {sl.shape[-1]} members")
        z = z.reshape(self.n_latent, -1) if batched else z.reshape(-1)
        if z.shape[0] != self.n_latent or sl.shape[0] != 2 or ss.shape[0] != self.n_re:
            raise LayoutError(
                f"component lengths ({z.shape[0]}, {sl.shape[0]}, {ss.shape[0]}) do not match "
                f"layout ({self.n_latent}, 2, {self.n_re})")
        return np.concatenate([z, sl, ss], axis=0)

    def unpack(self, flat):
        flat = np.asarray(flat, float)
        if flat.shape[0] != self.size:
            raise LayoutError(f"parameter vector has {flat.shape[0]} entries, layout needs {self.size}")
        return flat[self.z_slice], flat[self.sl_slice], flat[self.ss_slice]
