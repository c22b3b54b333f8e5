import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aquinv.errors import DomainError, LayoutError
from aquinv.grid import (DAYS_PER_YEAR, Grid3, ParameterLayout, SourceConfig, TransportParams,
                         build_source_field, locate_cell, stress_period)

PAPER = Grid3(81, 41, 6, 2500.0, 1250.0, 300.0)


def test_grid_spacing_and_volume():
    g = PAPER
    assert g.shape == (81, 41, 6)
    assert g.n_cells == 81 * 41 * 6
    assert g.dx == pytest.approx(2500 / 81)
    assert g.cell_volume == pytest.approx(2500 / 81 * 1250 / 41 * 50)


@pytest.mark.parametrize("dims", [(1, 4, 4), (4, 1, 4), (4, 4, 1)])
def test_grid_needs_two_cells(dims):
    with pytest.raises(DomainError):
        Grid3(*dims, 1.0, 1.0, 1.0)


def test_check_field_rejects_wrong_shape_and_nan():
    g = Grid3(2, 2, 2, 1, 1, 1)
    with pytest.raises(LayoutError):
        g.check_field(np.zeros(7))
    bad = np.zeros(g.shape)
    bad[0, 0, 0] = np.nan
    with pytest.raises(DomainError):
        g.check_field(bad)


def test_locate_cell_examples():
    assert locate_cell(0.0, 0.0, 0, PAPER) == (0, 0, 0)
    # floor(291 / 30.8642) = 9, floor(625 / 30.4878) = 20
    assert locate_cell(291.0, 625.0, 3, PAPER) == (math.floor(291 / (2500 / 81)), math.floor(625 / (1250 / 41)), 3)
    assert locate_cell(291.0, 625.0, 3, PAPER) == (9, 20, 3)
    assert locate_cell(2499.9, 1249.9, 5, PAPER) == (80, 40, 5)
    assert locate_cell(2500.0, 1250.0, 5, PAPER) == (80, 40, 5)


@pytest.mark.parametrize("x,y,layer", [(-1, 5, 0), (5, 1300, 0), (5, 5, 6), (5, 5, -1)])
def test_locate_cell_out_of_domain(x, y, layer):
    with pytest.raises(DomainError):
        locate_cell(x, y, layer, PAPER)


@given(st.integers(0, 80), st.integers(0, 40), st.integers(0, 5))
def test_locate_cell_idempotent_on_centres(i, j, k):
    xc, yc = PAPER.centers(0)[i], PAPER.centers(1)[j]
    assert locate_cell(xc, yc, k, PAPER) == (i, j, k)


def test_source_field_periods():
    src = SourceConfig(291.0, 625.0, 3, (224, 174, 869, 201, 741), q_s=2e-5)
    year = DAYS_PER_YEAR
    assert not build_source_field(src, 25 * year, PAPER).any()
    # floor(3650 / 1460) = 2
    assert stress_period(src, 10 * year) == 2
    f = build_source_field(src, 10 * year, PAPER)
    assert f[9, 20, 3] == pytest.approx(2e-5 * 869)
    assert np.count_nonzero(f) == 1


def test_source_field_integrates_to_loading():
    src = SourceConfig(1000.0, 300.0, 1, (10.0, 20.0), q_s=3e-4)
    f = build_source_field(src, 1.5 * src.period_len, PAPER)
    assert f.sum() * PAPER.cell_volume == pytest.approx(3e-4 * 20.0 * PAPER.cell_volume)


def test_zero_strengths_give_zero_field():
    src = SourceConfig(100.0, 100.0, 0, (0.0,) * 5)
    for t in np.linspace(0, 30 * DAYS_PER_YEAR, 7):
        assert not build_source_field(src, t, PAPER).any()
    empty = SourceConfig(100.0, 100.0, 0, ())
    assert not build_source_field(empty, 0.0, PAPER).any()


def test_source_rejects_negative_strength():
    with pytest.raises(DomainError):
        SourceConfig(1.0, 1.0, 0, (1.0, -2.0))


def test_transport_params_validation():
    with pytest.raises(DomainError):
        TransportParams(theta=1.2)
    with pytest.raises(DomainError):
        TransportParams(a=0.0)
    assert TransportParams().sorption_coeff == pytest.approx(1e-6 * 1.587e6 * 0.1)


def test_layout_sizes():
    assert ParameterLayout((2, 21, 11, 2), 5).size == 924 + 2 + 5 == 931
    assert ParameterLayout((2, 10, 5, 1), 5).size == 100 + 2 + 5 == 107


def test_layout_length_mismatch():
    lay = ParameterLayout((2, 3), 2)
    with pytest.raises(LayoutError):
        lay.unpack(np.zeros(lay.size + 1))
    with pytest.raises(LayoutError):
        lay.pack(np.zeros(5), [1, 2], [3, 4])


@settings(max_examples=50)
@given(st.integers(1, 30), st.integers(1, 8), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_pack_unpack_round_trip(n_latent, n_re, n_e, seed):
    rng = np.random.default_rng(seed)
    lay = ParameterLayout((n_latent,), n_re)
    z = rng.standard_normal((n_latent, n_e))
    sl = rng.uniform(0, 100, (2, n_e))
    ss = rng.uniform(0, 100, (n_re, n_e))
    flat = lay.pack(z, sl, ss)
    assert flat.shape == (lay.size, n_e)
    z2, sl2, ss2 = lay.unpack(flat)
    assert np.array_equal(z2, z) and np.array_equal(sl2, sl) and np.array_equal(ss2, ss)
    assert np.array_equal(lay.pack(z2, sl2, ss2), flat)
