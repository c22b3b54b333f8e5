"""Finite-volume flow and reactive transport on a structured grid.

Steady confined flow ``div(K grad h) = 0`` with fixed heads on the two
x facets, followed by backward-Euler transport of a Freundlich-sorbing
solute with upwind advection and axis-aligned dispersion.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DomainError, LayoutError, SolverError
from .grid import build_source_field

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowBCs:
    h_left: float = 30.0
    h_right: float = 0.0


@dataclass(frozen=True)
class SolverOptions:
    rel_tol: float = 1e-10
    max_iter: int | None = None  # defaults to 10 * n_cells for the CG path
    picard_tol: float = 1e-8
    picard_max: int = 20
    substeps: int = 20
    c_floor: float = 1e-8
    method: str = "direct"  # or "cg"

    def __post_init__(self):
        if min(self.rel_tol, self.picard_tol, self.c_floor) <= 0:
            raise DomainError("solver tolerances must be positive")
        if self.method not in ("direct", "cg"):
            raise DomainError(f"unknown linear solver {self.method!r}")


@dataclass(frozen=True)
class VelocityField:
    """Face Darcy fluxes (m^3/d, positive along +axis) and cell pore velocity.

    ``qx`` has shape ``(nx+1, ny, nz)``, ``qy`` ``(nx, ny+1, nz)`` and ``qz``
    ``(nx, ny, nz+1)``; ``u`` is ``(3, nx, ny, nz)`` in m/d.
    """

    qx: np.ndarray
    qy: np.ndarray
    qz: np.ndarray
    u: np.ndarray

    def net_outflow(self):
        return (self.qx[1:] - self.qx[:-1]) + (self.qy[:, 1:] - self.qy[:, :-1]) \
            + (self.qz[:, :, 1:] - self.qz[:, :, :-1])


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def _face_pairs(shape, axis):
    """Flat indices of (left, right) cells for every interior face along ``axis``."""
    idx = np.arange(np.prod(shape)).reshape(shape)
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    return idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()


def _laplacian(shape, coeffs):
    """Sparse graph Laplacian with per-face conductances, one array per axis."""
    n = int(np.prod(shape))
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for axis, c in enumerate(coeffs):
        left, right = _face_pairs(shape, axis)
        c = c.ravel()
        rows += [left, right]
        cols += [right, left]
        vals += [-c, -c]
        np.add.at(diag, left, c)
        np.add.at(diag, right, c)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n))


def transmissibilities(K, grid):
    """Interior-face conductances (m^2/d) from harmonic-mean K, per axis."""
    ax, ay, az = grid.dy * grid.dz, grid.dx * grid.dz, grid.dx * grid.dy
    tx = ax * _harmonic(K[:-1], K[1:]) / grid.dx
    ty = ay * _harmonic(K[:, :-1], K[:, 1:]) / grid.dy
    tz = az * _harmonic(K[:, :, :-1], K[:, :, 1:]) / grid.dz
    return tx, ty, tz


def _boundary_transmissibility(K, grid):
    # Half-cell conductance between a boundary cell center and its facet.
    ax = grid.dy * grid.dz
    return 2.0 * K[0] * ax / grid.dx, 2.0 * K[-1] * ax / grid.dx


def flow_system(K, bcs, grid):
    """Assemble the SPD system ``A h = b`` of the steady flow problem."""
    K = grid.check_field(K, "K")
    if np.any(K <= 0):
        raise DomainError("hydraulic conductivity must be positive")
    A = _laplacian(grid.shape, transmissibilities(K, grid))
    t_left, t_right = _boundary_transmissibility(K, grid)
    bdiag = np.zeros(grid.shape)
    b = np.zeros(grid.shape)
    bdiag[0] += t_left
    bdiag[-1] += t_right
    b[0] += t_left * bcs.h_left
    b[-1] += t_right * bcs.h_right
    A = (A + sp.diags(bdiag.ravel())).tocsr()
    return A, b.ravel()


def _solve(A, b, opts, what):
    if not np.any(b):
        return np.zeros_like(b)
    if opts.method == "direct":
        x = spla.spsolve(A.tocsc(), b)
        iters = 1
    else:
        max_iter = opts.max_iter or 10 * A.shape[0]
        count = [0]

        def cb(_):
            count[0] += 1

        precond = sp.diags(1.0 / A.diagonal())
        x, info = spla.cg(A, b, rtol=opts.rel_tol, atol=0.0, maxiter=max_iter, M=precond,
                          callback=cb)
        iters = count[0]
        if info != 0:
            raise SolverError(f"{what}: CG did not converge in {iters} iterations", iters)
    res = np.linalg.norm(A @ x - b) / np.linalg.norm(b)
    if not np.isfinite(res) or res > max(opts.rel_tol, 1e3 * np.finfo(float).eps):
        raise SolverError(f"{what}: relative residual {res:.3e} above tolerance", iters)
    return x


def solve_flow(K, bcs, grid, opts=SolverOptions()):
    """Steady head field (m) for conductivity ``K`` (m/d)."""
    A, b = flow_system(K, bcs, grid)
    return _solve(A, b, opts, "flow solve").reshape(grid.shape)


def darcy_velocity(K, h, theta, grid, bcs=FlowBCs()):
    """Face fluxes and cell-centred pore velocity from a head solution."""
    K = grid.check_field(K, "K")
    h = grid.check_field(h, "head")
    tx, ty, tz = transmissibilities(K, grid)
    t_left, t_right = _boundary_transmissibility(K, grid)
    nx, ny, nz = grid.shape
    qx = np.zeros((nx + 1, ny, nz))
    qy = np.zeros((nx, ny + 1, nz))
    qz = np.zeros((nx, ny, nz + 1))
    qx[1:-1] = -tx * (h[1:] - h[:-1])
    qy[:, 1:-1] = -ty * (h[:, 1:] - h[:, :-1])
    qz[:, :, 1:-1] = -tz * (h[:, :, 1:] - h[:, :, :-1])
    qx[0] = -t_left * (h[0] - bcs.h_left)
    qx[-1] = -t_right * (bcs.h_right - h[-1])
    vx = qx / (theta * grid.dy * grid.dz)
    vy = qy / (theta * grid.dx * grid.dz)
    vz = qz / (theta * grid.dx * grid.dy)
    u = np.stack([0.5 * (vx[1:] + vx[:-1]),
                  0.5 * (vy[:, 1:] + vy[:, :-1]),
                  0.5 * (vz[:, :, 1:] + vz[:, :, :-1])])
    return VelocityField(qx, qy, qz, u)


def dispersion_coefficients(u, params):
    """Axis-aligned dispersion (D11, D22, D33) in m^2/d from cell velocity."""
    s = np.sqrt(np.sum(np.asarray(u) ** 2, axis=0))
    base = params.theta * params.D_m
    return (base + params.alpha_L * s, base + params.alpha_T * s, base + params.alpha_C * s)


def retardation_factor(c, params, c_floor=1e-8):
    """Freundlich retardation ``1 + (sorption/theta) * a * c**(a-1)``."""
    if params.a <= 0:
        raise DomainError("Freundlich exponent must be positive")
    c = np.maximum(np.asarray(c, dtype=float), c_floor)
    return 1.0 + params.sorption_coeff / params.theta * params.a * c ** (params.a - 1.0)


def total_mass_density(c, params):
    """Dissolved plus sorbed mass per bulk volume (g/m^3)."""
    c = np.asarray(c, dtype=float)
    return params.theta * c + params.sorption_coeff * np.maximum(c, 0.0) ** params.a


def transport_operator(vel, params, grid):
    """Sparse ``L`` with ``(L c)_P`` = net advective+dispersive inflow to cell P (g/d)."""
    shape = grid.shape
    n = grid.n_cells
    D = dispersion_coefficients(vel.u, params)
    areas = (grid.dy * grid.dz, grid.dx * grid.dz, grid.dx * grid.dy)
    spacing = (grid.dx, grid.dy, grid.dz)
    coeffs = []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        d_face = 0.5 * (D[axis][tuple(lo)] + D[axis][tuple(hi)])
        coeffs.append(params.theta * d_face * areas[axis] / spacing[axis])
    L = -_laplacian(shape, coeffs)

    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for axis, q in enumerate((vel.qx, vel.qy, vel.qz)):
        left, right = _face_pairs(shape, axis)
        inner = [slice(None)] * 3
        inner[axis] = slice(1, -1)
        qf = q[tuple(inner)].ravel()
        qp, qm = np.maximum(qf, 0.0), np.maximum(-qf, 0.0)
        np.subtract.at(diag, left, qp)
        np.subtract.at(diag, right, qm)
        rows += [right, left]
        cols += [left, right]
        vals += [qp, qm]
    # Outflow through the constant-head facets; inflow there carries c = 0.
    out_left = np.maximum(-vel.qx[0], 0.0).ravel()
    out_right = np.maximum(vel.qx[-1], 0.0).ravel()
    idx = np.arange(n).reshape(shape)
    np.subtract.at(diag, idx[0].ravel(), out_left)
    np.subtract.at(diag, idx[-1].ravel(), out_right)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    adv = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(n, n))
    return (L + adv).tocsr()


class TransportModel:
    """Precomputed transport operator for one velocity field.

    ``step`` advances one backward-Euler step.  The sorption nonlinearity is
    resolved with a mass-conservative Picard iteration: the storage term is
    linearised around the latest iterate with the lagged retardation, while
    the right-hand side carries the exact isotherm mass difference, so at
    convergence dissolved plus sorbed mass balances the boundary fluxes and
    sources.
    """

    def __init__(self, vel, params, grid, opts=SolverOptions()):
        self.params = params
        self.grid = grid
        self.opts = opts
        self.L = transport_operator(vel, params, grid)
        self.volume = grid.cell_volume
        self.linear = params.a == 1.0 or params.sorption_coeff == 0.0
        # -L with a structurally complete diagonal; storage terms are added in place.
        neg = (-self.L + sp.eye(grid.n_cells, format="csr")).tocsr()
        neg.sum_duplicates()
        neg.sort_indices()
        rows = np.repeat(np.arange(neg.shape[0]), np.diff(neg.indptr))
        self._diag_pos = np.flatnonzero(neg.indices == rows)
        neg.data[self._diag_pos] = -self.L.diagonal()
        self._neg_L = neg

    def capacity(self, c):
        """Storage derivative ``theta * R(c)`` per unit bulk volume."""
        p = self.params
        if self.linear:
            return np.full(np.shape(c), p.theta + p.sorption_coeff)
        return p.theta * retardation_factor(c, p, self.opts.c_floor)

    def system(self, c_iter, c_old, source, dt):
        """Linear system of one Picard iteration (flat arrays)."""
        p, V = self.params, self.volume
        cap = self.capacity(c_iter)
        A = self._neg_L.copy()
        A.data[self._diag_pos] += cap * V / dt
        rhs = V / dt * (cap * c_iter - total_mass_density(c_iter, p)
                        + total_mass_density(c_old, p)) + source * V
        return A, rhs

    def _linear_solve(self, A, rhs, x0):
        # Storage makes A strictly diagonally dominant; Jacobi-BiCGSTAB converges
        # in a handful of iterations.  Fall back to a direct solve otherwise.
        x, info = spla.bicgstab(A, rhs, x0=x0, rtol=1e-13, atol=0.0,
                                maxiter=self.opts.max_iter or 10 * A.shape[0],
                                M=sp.diags(1.0 / A.diagonal()))
        if info != 0 or not np.all(np.isfinite(x)):
            x = spla.spsolve(A.tocsc(), rhs)
        return x

    def step(self, c, source, dt):
        if dt <= 0:
            raise DomainError("time step must be positive")
        shape = c.shape
        c_old = np.asarray(c, float).ravel()
        src = np.asarray(source, float).ravel()
        if not np.any(c_old) and not np.any(src):
            return np.zeros(shape)
        c_it = c_old.copy()
        opts = self.opts
        for k in range(1, opts.picard_max + 1):
            A, rhs = self.system(c_it, c_old, src, dt)
            c_new = self._linear_solve(A, rhs, c_it)
            if not np.all(np.isfinite(c_new)):
                raise SolverError("transport solve produced non-finite values", k)
            delta = np.max(np.abs(c_new - c_it))
            c_it = c_new
            if self.linear or delta <= opts.picard_tol:
                return c_it.reshape(shape)
        raise SolverError(f"Picard iteration did not converge (last change {delta:.3e})",
                          opts.picard_max)


def transport_step(c, vel, params, source, dt, grid, opts=SolverOptions()):
    """One backward-Euler transport step; see :class:`TransportModel`."""
    if np.shape(c) != grid.shape or np.shape(source) != grid.shape:
        raise LayoutError("concentration and source fields must match the grid")
    return TransportModel(vel, params, grid, opts).step(c, source, dt)


def simulate(K, src, params, bcs, grid, output_times, opts=SolverOptions()):
    """Run flow then transport from ``t0 = 0`` and return snapshots and head.

    Returns ``(c, h)`` with ``c`` of shape ``(len(output_times),) + grid.shape``.
    """
    times = np.asarray(output_times, dtype=float)
    if times.ndim != 1 or len(times) == 0 or np.any(np.diff(times) <= 0) or times[0] <= 0:
        raise DomainError("output times must be positive and strictly increasing")
    dt = src.period_len / opts.substeps
    n_steps = times / dt
    if np.any(np.abs(n_steps - np.round(n_steps)) > 1e-9 * np.maximum(n_steps, 1)):
        raise DomainError("output times must align with transport substeps")
    n_steps = np.round(n_steps).astype(int)

    h = solve_flow(K, bcs, grid, opts)
    vel = darcy_velocity(K, h, params.theta, grid, bcs)
    model = TransportModel(vel, params, grid, opts)
    c = np.zeros(grid.shape)
    snaps = np.zeros((len(times),) + grid.shape)
    step = 0
    for i, target in enumerate(n_steps):
        while step < target:
            c = model.step(c, build_source_field(src, step * dt, grid), dt)
            step += 1
        snaps[i] = c
    return snaps, h
