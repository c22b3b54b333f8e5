import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aquinv.errors import DomainError, LayoutError, SolverError
from aquinv.forward import (FlowBCs, SolverOptions, TransportModel, VelocityField, darcy_velocity,
                            dispersion_coefficients, flow_system, retardation_factor, simulate,
                            solve_flow, total_mass_density, transport_step)
from aquinv.grid import DAYS_PER_YEAR, Grid3, SourceConfig, TransportParams

from oracles import circulating_velocity, dense_flow_matrix, dense_transport_solve

BCS = FlowBCs(30.0, 0.0)


def linear_profile(grid):
    return 30.0 + (0.0 - 30.0) * grid.centers(0) / grid.lx


@pytest.mark.parametrize("method", ["direct", "cg"])
def test_homogeneous_flow_is_linear(method):
    g = Grid3(20, 6, 3, 2500.0, 1250.0, 300.0)
    h = solve_flow(np.full(g.shape, 7.0), BCS, g, SolverOptions(method=method))
    assert np.max(np.abs(h - linear_profile(g)[:, None, None])) <= 1e-6


def test_two_slabs_in_series():
    g = Grid3(10, 3, 2, 1000.0, 300.0, 20.0)
    K1, K2 = 2.0, 12.0
    K = np.full(g.shape, K1)
    K[5:] = K2
    h = solve_flow(K, BCS, g)
    L1 = L2 = 500.0
    q = (30.0 - 0.0) / (L1 / K1 + L2 / K2)  # two-resistor series formula
    x = g.centers(0)
    expect = np.where(x < L1, 30.0 - q * x / K1, 0.0 + q * (1000.0 - x) / K2)
    assert np.max(np.abs(h - expect[:, None, None])) <= 1e-6


def test_flow_matches_dense_oracle(rng):
    g = Grid3(5, 4, 3, 50.0, 40.0, 15.0)
    K = np.exp(rng.normal(0.0, 1.0, g.shape))
    A_ref, b_ref = dense_flow_matrix(K, g, 30.0, 0.0)
    A, b = flow_system(K, BCS, g)
    assert np.allclose(A.toarray(), A_ref, rtol=1e-12, atol=1e-12)
    assert np.allclose(b, b_ref, rtol=1e-12)
    h_ref = np.linalg.solve(A_ref, b_ref).reshape(g.shape)
    h = solve_flow(K, BCS, g)
    assert np.linalg.norm(h - h_ref) / np.linalg.norm(h_ref) <= 1e-8


def test_flow_rejects_nonpositive_k(small_grid):
    K = np.ones(small_grid.shape)
    K[1, 1, 1] = 0.0
    with pytest.raises(DomainError):
        solve_flow(K, BCS, small_grid)
    with pytest.raises(LayoutError):
        solve_flow(np.ones((3, 3, 3)), BCS, small_grid)


def test_cg_reports_non_convergence(rng, small_grid):
    K = np.exp(rng.normal(0, 2, small_grid.shape))
    with pytest.raises(SolverError) as info:
        solve_flow(K, BCS, small_grid, SolverOptions(method="cg", max_iter=2))
    assert info.value.iterations is not None


def test_maximum_principle(rng):
    g = Grid3(8, 6, 3, 800.0, 600.0, 30.0)
    K = np.exp(rng.normal(0, 1.5, g.shape))
    h = solve_flow(K, BCS, g)
    assert h.min() >= -1e-9 and h.max() <= 30.0 + 1e-9


def test_darcy_velocity_homogeneous():
    g = Grid3(50, 4, 3, 2500.0, 1250.0, 300.0)
    K = np.full(g.shape, 10.0)
    vel = darcy_velocity(K, solve_flow(K, BCS, g), 0.3, g, BCS)
    # u = (K / theta) * (30 / 2500)
    assert np.allclose(vel.u[0], 10.0 / 0.3 * 30.0 / 2500.0, rtol=1e-9)
    assert np.allclose(vel.u[1:], 0.0, atol=1e-12)


def test_uniform_head_gives_zero_velocity(small_grid):
    K = np.ones(small_grid.shape)
    vel = darcy_velocity(K, np.full(small_grid.shape, 4.0), 0.3, small_grid, FlowBCs(4.0, 4.0))
    assert not vel.u.any() and not vel.qx.any()


def test_closed_faces_and_divergence(rng):
    g = Grid3(9, 7, 4, 900.0, 700.0, 40.0)
    K = np.exp(rng.normal(0, 1, g.shape))
    vel = darcy_velocity(K, solve_flow(K, BCS, g), 0.3, g, BCS)
    assert not vel.qy[:, 0].any() and not vel.qy[:, -1].any()
    assert not vel.qz[:, :, 0].any() and not vel.qz[:, :, -1].any()
    scale = np.abs(vel.qx).max()
    assert np.max(np.abs(vel.net_outflow())) <= 1e-8 * scale


def test_darcy_velocity_grid_mismatch(small_grid):
    with pytest.raises(LayoutError):
        darcy_velocity(np.ones((2, 2, 2)), np.ones(small_grid.shape), 0.3, small_grid)


def test_dispersion_examples():
    p = TransportParams(theta=0.3, D_m=1e-9, alpha_L=35.0, alpha_T=10.5, alpha_C=10.5)
    d0 = dispersion_coefficients(np.zeros((3, 1)), p)
    assert all(np.allclose(d, 0.3e-9) for d in d0)
    u = np.array([[2.0], [0.0], [0.0]])
    d11, d22, d33 = dispersion_coefficients(u, p)
    assert d11[0] == pytest.approx(70.0, rel=1e-9) and d22[0] == pytest.approx(21.0, rel=1e-9)
    assert d33[0] == pytest.approx(21.0, rel=1e-9)
    d11b = dispersion_coefficients(2 * u, p)[0]
    assert d11b[0] - 0.3e-9 == pytest.approx(2 * (d11[0] - 0.3e-9))


def test_retardation_examples():
    p = TransportParams(a=1.0)
    assert np.allclose(retardation_factor([1e-3, 1.0, 50.0], p), 1 + 1e-6 * 1.587e6 / 0.3 * 0.1)
    literal = TransportParams(unit_scale=1.0)
    assert retardation_factor(1.0, literal) == pytest.approx(476101.0, rel=1e-12)
    assert retardation_factor(1.0, TransportParams()) == pytest.approx(1.4761, rel=1e-12)
    assert np.all(retardation_factor(np.linspace(0, 1e3, 50), TransportParams()) >= 1.0)


def test_retardation_floor():
    p = TransportParams()
    assert retardation_factor(0.0, p, c_floor=1e-8) == retardation_factor(1e-8, p, c_floor=1e-8)
    with pytest.raises(DomainError):
        TransportParams(a=-1.0)


def _linear_params(R=2.0, **kw):
    # sorption coefficient theta * (R - 1) with a = 1
    theta = kw.pop("theta", 0.3)
    return TransportParams(theta=theta, rho_b=theta * (R - 1.0), K_f=1.0, a=1.0, unit_scale=1.0, **kw)


def test_transport_identity_without_dynamics(small_grid, rng):
    p = TransportParams(alpha_L=0.0, alpha_T=0.0, alpha_C=0.0, D_m=0.0)
    zero = VelocityField(np.zeros((6, 4, 3)), np.zeros((5, 5, 3)), np.zeros((5, 4, 4)), np.zeros((3, 5, 4, 3)))
    c = rng.uniform(0, 10, small_grid.shape)
    out = transport_step(c, zero, p, np.zeros(small_grid.shape), 73.0, small_grid)
    assert np.allclose(out, c, rtol=0, atol=1e-9)


def test_transport_matches_dense_oracle(rng):
    g = Grid3(6, 5, 4, 600.0, 500.0, 40.0)
    K = np.exp(rng.normal(0, 1, g.shape))
    p = _linear_params(R=1.7)
    vel = darcy_velocity(K, solve_flow(K, BCS, g), p.theta, g, BCS)
    c0 = rng.uniform(0, 5, g.shape)
    src = np.zeros(g.shape)
    src[2, 2, 1] = 0.3
    ref = dense_transport_solve(c0, vel, p, src, 50.0, g, retardation=1.7)
    out = transport_step(c0, vel, p, src, 50.0, g)
    assert np.linalg.norm(out - ref) / np.linalg.norm(ref) <= 1e-8


@pytest.mark.parametrize("a", [1.0, 0.9, 0.6])
def test_closed_domain_conserves_total_mass(a, rng):
    g = Grid3(6, 5, 3, 300.0, 250.0, 30.0)
    p = TransportParams(a=a)
    vel = circulating_velocity(g, p.theta, seed=3)
    model = TransportModel(vel, p, g)
    c = rng.uniform(0, 20, g.shape)
    mass = total_mass_density(c, p).sum()
    for _ in range(20):
        c = model.step(c, np.zeros(g.shape), 30.0)
        new = total_mass_density(c, p).sum()
        assert abs(new - mass) / mass <= 1e-8
        mass = new


def test_first_moment_moves_with_retarded_velocity():
    g = Grid3(200, 2, 2, 200.0, 2.0, 2.0)
    p = _linear_params(R=2.0, alpha_L=0.0, alpha_T=0.0, alpha_C=0.0, D_m=0.0)
    u = 0.5
    q = u * p.theta * g.dy * g.dz
    qx = np.full((201, 2, 2), q)
    vel = VelocityField(qx, np.zeros((200, 3, 2)), np.zeros((200, 2, 3)),
                        np.stack([np.full(g.shape, u), np.zeros(g.shape), np.zeros(g.shape)]))
    c = np.zeros(g.shape)
    c[60:70] = 1.0
    x = g.centers(0)[:, None, None]
    dt = 1.0
    model = TransportModel(vel, p, g)
    start = (x * c).sum() / c.sum()
    for _ in range(10):
        c = model.step(c, np.zeros(g.shape), dt)
    moved = (x * c).sum() / c.sum() - start
    assert moved == pytest.approx(10 * u / 2.0 * dt, rel=0.05)


def test_picard_non_convergence_raises(rng):
    g = Grid3(4, 3, 2, 40.0, 30.0, 20.0)
    p = TransportParams(a=0.5, unit_scale=1e-3)
    vel = circulating_velocity(g, p.theta)
    c = rng.uniform(0, 5, g.shape)
    with pytest.raises(SolverError):
        TransportModel(vel, p, g, SolverOptions(picard_max=1, picard_tol=1e-14)).step(c, np.zeros(g.shape), 100.0)


DESK = Grid3(12, 6, 3, 1200.0, 600.0, 90.0)
TIMES = [4 * DAYS_PER_YEAR * (i + 1) for i in range(4)]


def _run(lnk, strengths, a=0.9):
    src = SourceConfig(250.0, 320.0, 1, strengths, q_s=1e-3)
    opts = SolverOptions(substeps=5)
    return simulate(np.exp(lnk), src, TransportParams(a=a), BCS, DESK, TIMES, opts)


def test_simulate_zero_source(rng):
    lnk = rng.normal(0, 1, DESK.shape)
    c, h = _run(lnk, (0.0, 0.0, 0.0))
    assert c.shape == (4,) + DESK.shape and not c.any()
    assert np.allclose(h, solve_flow(np.exp(lnk), BCS, DESK))


def test_simulate_linear_isotherm_scales(rng):
    lnk = rng.normal(0, 1, DESK.shape)
    c1, _ = _run(lnk, (100.0, 300.0, 50.0), a=1.0)
    c2, _ = _run(lnk, (200.0, 600.0, 100.0), a=1.0)
    assert np.allclose(c2, 2 * c1, rtol=1e-7, atol=1e-9 * c1.max())


def test_simulate_nonnegative_and_deterministic(rng):
    lnk = rng.normal(0, 1, DESK.shape)
    c1, h1 = _run(lnk, (500.0, 20.0, 900.0))
    c2, h2 = _run(lnk, (500.0, 20.0, 900.0))
    assert np.array_equal(c1, c2) and np.array_equal(h1, h2)
    assert c1.min() >= -1e-9 * c1.max()
    assert c1.max() > 0


def test_simulate_requires_aligned_times(rng):
    src = SourceConfig(250.0, 320.0, 1, (1.0,))
    with pytest.raises(DomainError):
        simulate(np.ones(DESK.shape), src, TransportParams(), BCS, DESK, [100.0], SolverOptions())
    with pytest.raises(DomainError):
        simulate(np.ones(DESK.shape), src, TransportParams(), BCS, DESK, [146.0, 73.0], SolverOptions())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_flow_solution_is_bounded_for_random_fields(seed):
    rng = np.random.default_rng(seed)
    g = Grid3(5, 4, 3, 500.0, 400.0, 30.0)
    h = solve_flow(np.exp(rng.normal(0, 2, g.shape)), BCS, g)
    assert -1e-9 <= h.min() and h.max() <= 30 + 1e-9
