"""Photon collection and polarization calibration arithmetic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import integrate

__all__ = [
    "CollectionGeometry",
    "DetectionBudget",
    "PurityEstimate",
    "collection_efficiency",
    "purity_from_contrast",
    "contrast_from_purity",
    "detection_efficiency",
]

QUAD_TOL = 1e-10


@dataclass(frozen=True)
class CollectionGeometry:
    """Lens of numerical aperture NA looking along +x; the atom's quantization
    axis makes angle ``tilt_alpha`` with the lens axis."""

    numerical_aperture: float
    tilt_alpha: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.numerical_aperture <= 1.0:
            raise ValueError("numerical aperture must lie in [0, 1]")


@dataclass(frozen=True)
class DetectionBudget:
    collection_efficiency: float
    optics_transmission: float
    quantum_efficiency: float
    roi_fraction: float

    def __post_init__(self):
        for name in ("collection_efficiency", "optics_transmission", "quantum_efficiency", "roi_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


class PurityEstimate(NamedTuple):
    exact: float
    approx: float


def _half_width(theta, na):
    # azimuthal half-width of the acceptance cone at polar angle theta;
    # the argument touches 1 at the cone's edges, so clamp it
    arg = (na * na - np.cos(theta) ** 2) / np.sin(theta) ** 2
    return np.arcsin(np.sqrt(np.clip(arg, 0.0, 1.0)))


def collection_efficiency(geometry: CollectionGeometry, pattern="sigma") -> float:
    """Fraction of emitted photons entering the lens.

    ``pattern`` is ``"sigma"`` for a rotating (circular) dipole,
    3/(16 pi) (1 + cos^2 psi), ``"pi"`` for a linear dipole along the axis,
    3/(8 pi) sin^2 psi, or ``"isotropic"``. psi is the angle between the
    emission direction and the quantization axis.
    """
    na = geometry.numerical_aperture
    if na == 0.0:
        return 0.0
    a = geometry.tilt_alpha
    ca, sa = math.cos(a), math.sin(a)
    opening = math.asin(na)
    lo, hi = math.pi / 2 - opening, math.pi / 2 + opening

    def density(phi, theta):
        st = math.sin(theta)
        cos_psi = ca * st * math.cos(phi) + sa * math.cos(theta)
        if pattern == "sigma":
            w = 3.0 / (16.0 * math.pi) * (1.0 + cos_psi**2)
        elif pattern == "pi":
            w = 3.0 / (8.0 * math.pi) * (1.0 - cos_psi**2)
        elif pattern == "isotropic":
            w = 1.0 / (4.0 * math.pi)
        else:
            raise ValueError(f"unknown emission pattern {pattern!r}")
        return w * st

    val, _ = integrate.dblquad(
        density,
        lo,
        hi,
        lambda th: -float(_half_width(th, na)),
        lambda th: float(_half_width(th, na)),
        epsabs=QUAD_TOL,
        epsrel=QUAD_TOL,
    )
    return val


def purity_from_contrast(contrast) -> PurityEstimate:
    """Intensity ratio I+/I- from the rotating-polarizer contrast C = DC/AC.

    Uses (1+s)/(1-s) with s = sqrt(1 - 1/C^2), written as (1+s)^2 C^2 to stay
    accurate at large C. C must be at least 1 (C = 1 is linear light).
    """
    c = float(contrast)
    if not c >= 1.0:
        raise ValueError(f"contrast must be >= 1, got {contrast}")
    s = math.sqrt(1.0 - 1.0 / (c * c))
    return PurityEstimate((1.0 + s) ** 2 * c * c, 4.0 * c * c)


def contrast_from_purity(purity) -> float:
    """Inverse of :func:`purity_from_contrast` for I+/I- >= 1."""
    p = float(purity)
    if not p >= 1.0:
        raise ValueError(f"purity ratio must be >= 1, got {purity}")
    return (p + 1.0) / (2.0 * math.sqrt(p))


def detection_efficiency(budget: DetectionBudget) -> float:
    return (
        budget.collection_efficiency
        * budget.optics_transmission
        * budget.quantum_efficiency
        * budget.roi_fraction
    )
