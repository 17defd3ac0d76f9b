import math

import numpy as np
import pytest
from scipy import constants as sc

from atomreadout.constants import BOHR_MHZ_PER_GAUSS
from atomreadout.fields import (
    FieldGeometry,
    TrapField,
    fictitious_coefficient,
    fictitious_field,
    mismatch_angle,
    precession_overlap_bound,
    precession_timeseries,
    precession_timeseries_integrated,
)


def larmor_period(geom, g=0.5):
    b = np.linalg.norm(geom.total_vector)
    return 1.0 / (BOHR_MHZ_PER_GAUSS * 1e6 * g * b)


def test_fictitious_coefficient():
    assert fictitious_coefficient(0.5) == pytest.approx(29.77, rel=1e-3)
    mu_b = sc.physical_constants["Bohr magneton"][0]
    assert fictitious_coefficient(0.5) == pytest.approx(sc.k / (mu_b * 0.5) * 10, rel=1e-12)
    b = fictitious_field(TrapField(1.0, 1.0, polarizability_ratio=1.0))
    np.testing.assert_allclose(b, [fictitious_coefficient(0.5), 0, 0])


def test_fictitious_field_operating_point():
    assert np.all(fictitious_field(TrapField(3.0, 0.0)) == 0)
    per_mk = np.linalg.norm(fictitious_field(TrapField(1.0, 2e-4)))
    assert per_mk == pytest.approx(0.3e-3, rel=0.01)
    with pytest.raises(ValueError):
        TrapField(-1.0)
    with pytest.raises(ValueError):
        TrapField(1.0, 1.5)
    with pytest.raises(ValueError):
        TrapField(1.0, k_hat=(1.0, 1.0, 0.0))


def test_mismatch_angle():
    assert mismatch_angle(0.0, 1.0) == 0.0
    np.testing.assert_allclose(mismatch_angle(np.logspace(-4, 1, 6), 0.0), 0.0)
    assert mismatch_angle(1.5e-4, math.radians(60)) == pytest.approx(1.2990e-4, rel=1e-3)
    with pytest.raises(ValueError):
        mismatch_angle(-1.0, 0.3)


def test_overlap_bound_operating_point():
    b = precession_overlap_bound(1.5e-4, math.radians(60))
    assert b == pytest.approx(6.7e-8, rel=0.05)
    assert 7500 * b == pytest.approx(5.1e-4, rel=0.05)


def test_overlap_bound_small_x_limit():
    for a in (0.3, 1.0, 2.0):
        x = 1e-7
        assert precession_overlap_bound(x, a) / (4 * x * x * math.sin(a) ** 2) == pytest.approx(1.0, rel=1e-5)


def test_overlap_bound_closed_form_and_cap():
    x, a = 0.2, 1.1
    th0 = mismatch_angle(x, a)
    assert th0 < math.pi / 6
    assert precession_overlap_bound(x, a) == pytest.approx(4 * math.cos(th0) ** 6 * math.sin(th0) ** 2)
    assert precession_overlap_bound(1.0, 2.0) == pytest.approx(27 / 64)
    assert precession_overlap_bound(1.0, math.pi) == 0.0
    with pytest.raises(ValueError):
        precession_overlap_bound(-0.1, 0.2)


def test_timeseries_constant_without_fictitious_field():
    t, p = precession_timeseries(FieldGeometry(20.0, 0.0, 1.0), 1e-6, 50)
    np.testing.assert_allclose(p[:, -1], 1.0, atol=1e-15)
    t, p = precession_timeseries(FieldGeometry(0.0, 0.0, 1.0), 1e-6, 50)
    np.testing.assert_allclose(p[:, -1], 1.0)
    with pytest.raises(ValueError):
        precession_timeseries(FieldGeometry(1.0, 0.1, 1.0), 1e-6, 1)


def test_timeseries_reference_configurations():
    g = FieldGeometry(20.0, 20 * 1.5e-4, math.radians(60))
    T = larmor_period(g)
    t, p = precession_timeseries(g, T, 801)
    assert p[:, 3].max() == pytest.approx(6.7e-8, rel=0.05)
    # back to the start after one Larmor period
    assert p[-1, -1] == pytest.approx(1.0, abs=1e-12)
    assert np.argmax(p[:, 3]) == pytest.approx(400, abs=2)
    g = FieldGeometry(5.0, 0.3, math.radians(60))
    t, p = precession_timeseries(g, larmor_period(g), 801)
    assert p[:, 3].max() > 1e-2
    assert p[:, :3].max() < 1e-4


def test_unitarity_and_oracle_agreement():
    g = FieldGeometry(5.0, 0.3, math.radians(60))
    T = larmor_period(g)
    t, p = precession_timeseries(g, 2 * T, 201)
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-12
    _, q = precession_timeseries_integrated(g, 2 * T, 201, substeps=100)
    assert np.abs(p - q).max() < 1e-9


def test_bound_holds_on_grid():
    for x in np.logspace(-5, 0, 20):
        for a in np.linspace(0, math.pi, 20):
            g = FieldGeometry(1.0, x, a)
            if np.linalg.norm(g.total_vector) < 1e-12:
                continue
            _, p = precession_timeseries(g, larmor_period(g), 721)
            assert p[:, 3].max() <= precession_overlap_bound(x, a) * (1 + 1e-9) + 1e-15
