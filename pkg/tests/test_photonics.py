import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atomreadout.photonics import (
    CollectionGeometry,
    DetectionBudget,
    collection_efficiency,
    contrast_from_purity,
    detection_efficiency,
    purity_from_contrast,
)


def test_collection_efficiency_operating_point_and_isotropic():
    assert collection_efficiency(CollectionGeometry(0.40, math.radians(60))) == pytest.approx(0.0394, abs=2e-4)
    assert collection_efficiency(CollectionGeometry(0.40), "isotropic") == pytest.approx(0.0417, abs=2e-4)
    # isotropic reference: solid-angle fraction of the cone
    iso = (1 - math.sqrt(1 - 0.4**2)) / 2
    assert collection_efficiency(CollectionGeometry(0.40), "isotropic") == pytest.approx(iso, abs=1e-8)


def test_collection_efficiency_limits():
    assert collection_efficiency(CollectionGeometry(0.0, 0.3)) == 0.0
    assert collection_efficiency(CollectionGeometry(1e-3, 0.3)) < 1e-6
    for a in (0.0, 0.7, math.pi / 2):
        for pattern in ("sigma", "pi", "isotropic"):
            # a full hemisphere collects half; the opposite hemisphere the other half
            assert collection_efficiency(CollectionGeometry(1.0, a), pattern) == pytest.approx(0.5, abs=1e-6)


def test_collection_efficiency_monotone_in_na_and_symmetric():
    a = math.radians(40)
    vals = [collection_efficiency(CollectionGeometry(na, a)) for na in np.linspace(0.05, 0.95, 10)]
    assert all(x < y for x, y in zip(vals, vals[1:]))
    for a in (0.2, 0.9, 1.3):
        assert collection_efficiency(CollectionGeometry(0.4, a)) == pytest.approx(
            collection_efficiency(CollectionGeometry(0.4, math.pi - a)), abs=1e-9
        )


def test_rotating_dipole_favours_axis_along_lens():
    along = collection_efficiency(CollectionGeometry(0.4, 0.0))
    across = collection_efficiency(CollectionGeometry(0.4, math.pi / 2))
    assert along > collection_efficiency(CollectionGeometry(0.4), "isotropic") > across
    with pytest.raises(ValueError):
        collection_efficiency(CollectionGeometry(0.4), "quadrupole")
    with pytest.raises(ValueError):
        CollectionGeometry(1.2)


def test_purity_from_contrast_examples():
    exact, approx = purity_from_contrast(20)
    s = math.sqrt(1 - 1 / 400)
    assert exact == pytest.approx((1 + s) / (1 - s), rel=1e-12)
    assert exact == pytest.approx(1600, rel=0.002)
    assert purity_from_contrast(50).exact == pytest.approx(1e4, rel=0.001)
    assert purity_from_contrast(1).exact == pytest.approx(1.0)
    for c in np.linspace(10, 200, 40):
        e, a = purity_from_contrast(c)
        assert abs(a - e) / e < 0.01


def test_purity_domain():
    with pytest.raises(ValueError):
        purity_from_contrast(0.75)
    with pytest.raises(ValueError):
        purity_from_contrast(float("nan"))
    with pytest.raises(ValueError):
        contrast_from_purity(0.5)


@given(st.floats(min_value=1.0, max_value=1e6))
@settings(max_examples=300)
def test_contrast_purity_round_trip(p):
    assert purity_from_contrast(contrast_from_purity(p)).exact == pytest.approx(p, rel=1e-10)


def test_detection_efficiency_budget():
    assert detection_efficiency(DetectionBudget(0.039, 0.74, 0.75, 0.76)) == pytest.approx(0.0165, abs=3e-4)
    assert detection_efficiency(DetectionBudget(0.039, 0.74, 0.75, 0.92)) == pytest.approx(0.020, abs=3e-4)
    assert detection_efficiency(DetectionBudget(0.0, 0.74, 0.75, 0.92)) == 0.0
    with pytest.raises(ValueError):
        DetectionBudget(1.2, 0.5, 0.5, 0.5)
