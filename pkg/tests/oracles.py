"""Independent reference implementations used by the tests.

These are written cell by cell with explicit loops so they share no code
with the vectorised solver.
"""
import itertools

import numpy as np


def cell_index(shape, i, j, k):
    return (i * shape[1] + j) * shape[2] + k


def dense_flow_matrix(K, grid, h_left, h_right):
    nx, ny, nz = grid.shape
    n = grid.n_cells
    A = np.zeros((n, n))
    b = np.zeros(n)
    d = (grid.dx, grid.dy, grid.dz)
    area = (grid.dy * grid.dz, grid.dx * grid.dz, grid.dx * grid.dy)
    for i, j, k in itertools.product(range(nx), range(ny), range(nz)):
        p = cell_index(grid.shape, i, j, k)
        for axis in range(3):
            for step in (-1, 1):
                nb = [i, j, k]
                nb[axis] += step
                if 0 <= nb[axis] < grid.shape[axis]:
                    q = cell_index(grid.shape, *nb)
                    # series resistance of two half cells
                    t = area[axis] / (0.5 * d[axis] / K[i, j, k] + 0.5 * d[axis] / K[tuple(nb)])
                    A[p, p] += t
                    A[p, q] -= t
                elif axis == 0:
                    t = area[0] / (0.5 * d[0] / K[i, j, k])
                    A[p, p] += t
                    b[p] += t * (h_left if step < 0 else h_right)
    return A, b


def dense_transport_solve(c_old, vel, params, source, dt, grid, retardation):
    """Backward-Euler upwind step for a linear isotherm (constant ``retardation``)."""
    nx, ny, nz = grid.shape
    n = grid.n_cells
    d = (grid.dx, grid.dy, grid.dz)
    area = (grid.dy * grid.dz, grid.dx * grid.dz, grid.dx * grid.dy)
    alphas = (params.alpha_L, params.alpha_T, params.alpha_C)
    speed = np.sqrt((vel.u ** 2).sum(axis=0))
    Dcell = [params.theta * params.D_m + a * speed for a in alphas]
    faces = (vel.qx, vel.qy, vel.qz)
    V = grid.cell_volume
    A = np.zeros((n, n))
    rhs = np.zeros(n)
    for i, j, k in itertools.product(range(nx), range(ny), range(nz)):
        p = cell_index(grid.shape, i, j, k)
        store = params.theta * retardation * V / dt
        A[p, p] += store
        rhs[p] += store * c_old[i, j, k] + source[i, j, k] * V
        for axis in range(3):
            for side in (0, 1):  # 0 = low face, 1 = high face
                face = [i, j, k]
                face[axis] += side
                q = faces[axis][tuple(face)]  # positive along +axis
                out = q if side == 1 else -q   # outward flux
                nb = [i, j, k]
                nb[axis] += 1 if side else -1
                inside = 0 <= nb[axis] < grid.shape[axis]
                if inside:
                    qn = cell_index(grid.shape, *nb)
                    D_face = 0.5 * (Dcell[axis][i, j, k] + Dcell[axis][tuple(nb)])
                    cond = params.theta * D_face * area[axis] / d[axis]
                    A[p, p] += cond
                    A[p, qn] -= cond
                    if out > 0:
                        A[p, p] += out
                    else:
                        A[p, qn] += out
                elif out > 0:
                    A[p, p] += out   # advective outflow through a facet
    return np.linalg.solve(A, rhs).reshape(grid.shape)


def circulating_velocity(grid, theta, seed=0):
    """Divergence-free face fluxes with zero normal flux on every facet."""
    from aquinv.forward import VelocityField

    rng = np.random.default_rng(seed)
    nx, ny, nz = grid.shape
    psi = np.zeros((nx + 1, ny + 1, nz))
    psi[1:-1, 1:-1] = rng.uniform(-50, 50, (nx - 1, ny - 1, nz))
    qx = psi[:, 1:] - psi[:, :-1]
    qy = -(psi[1:, :] - psi[:-1, :])
    qz = np.zeros((nx, ny, nz + 1))
    vx = qx / (theta * grid.dy * grid.dz)
    vy = qy / (theta * grid.dx * grid.dz)
    u = np.stack([0.5 * (vx[1:] + vx[:-1]), 0.5 * (vy[:, 1:] + vy[:, :-1]), np.zeros((nx, ny, nz))])
    return VelocityField(qx, qy, qz, u)
