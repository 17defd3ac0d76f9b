"""Vector light shift of the dipole trap as a fictitious magnetic field, and
the Larmor precession it causes when it tilts the total field away from the
quantization axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import constants as sc

from .angular import spin_matrices, wigner_small_d_matrix
from .constants import BOHR_MHZ_PER_GAUSS, TWO_PI, load_constants

__all__ = [
    "TrapField",
    "FieldGeometry",
    "fictitious_coefficient",
    "fictitious_field",
    "mismatch_angle",
    "precession_overlap_bound",
    "precession_timeseries",
    "precession_timeseries_integrated",
]

SPIN = 2
MS = np.arange(-SPIN, SPIN + 1)
# beyond this tilt the single-step overlap 4 cos^6 u sin^2 u has passed its maximum
PEAK_TILT = math.pi / 6
PEAK_OVERLAP = 27.0 / 64.0


@dataclass(frozen=True)
class TrapField:
    depth: float  # mK
    circularity_A: float = 0.0
    wavelength: float = 1040.0  # nm
    polarizability_ratio: float | None = None
    k_hat: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("trap depth must be non-negative")
        if abs(self.circularity_A) > 1:
            raise ValueError("circularity must lie in [-1, 1]")
        if not math.isclose(float(np.linalg.norm(self.k_hat)), 1.0, rel_tol=1e-9):
            raise ValueError("k_hat must be a unit vector")


@dataclass(frozen=True)
class FieldGeometry:
    """External bias (along z) and fictitious field at angle ``angle_alpha``
    from it, both in gauss."""

    b_ext: float
    b_fict: float
    angle_alpha: float

    def __post_init__(self):
        if self.b_ext < 0 or self.b_fict < 0:
            raise ValueError("field magnitudes must be non-negative")

    @property
    def ratio_x(self) -> float:
        return math.inf if self.b_ext == 0 else self.b_fict / self.b_ext

    @property
    def total_vector(self) -> np.ndarray:
        a = self.angle_alpha
        return np.array([self.b_fict * math.sin(a), 0.0, self.b_ext + self.b_fict * math.cos(a)])


def fictitious_coefficient(g_factor=0.5) -> float:
    """Fictitious field per unit trap depth and unit circularity-polarizability
    product, k_B / (mu_B g), in G/mK."""
    tesla_per_kelvin = sc.k / (sc.physical_constants["Bohr magneton"][0] * g_factor)
    return tesla_per_kelvin * 1e4 * 1e-3


def fictitious_field(trap: TrapField, g_factor=0.5) -> np.ndarray:
    """Fictitious field vector in gauss, along the trap beam's k-vector."""
    ratio = trap.polarizability_ratio
    if ratio is None:
        ratio = load_constants().vector_polarizability_ratio
    magnitude = trap.depth * fictitious_coefficient(g_factor) * trap.circularity_A * ratio
    return magnitude * np.asarray(trap.k_hat, dtype=float)


def mismatch_angle(x, alpha):
    """Angle between the bias axis and the total field for field ratio x."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("field ratio must be non-negative")
    out = np.arctan2(x * np.sin(alpha), 1.0 + x * np.cos(alpha))
    return out if out.ndim else float(out)


def precession_overlap_bound(x, alpha) -> float:
    """Largest population |2,+1> can reach while |2,+2> precesses.

    The spin direction sweeps a cone of half-angle theta0 about the total
    field, so the m=+1 population is 4 cos^6 u sin^2 u for u in [0, theta0].
    That equals 4 x^2 sin^2(a) (1 + x cos a)^6 / (1 + x^2 + 2 x cos a)^4 while
    theta0 <= 30 deg and saturates at 27/64 beyond. A vanishing total field
    gives no evolution and hence 0.
    """
    if x < 0:
        raise ValueError("field ratio must be non-negative")
    norm_sq = 1.0 + x * x + 2.0 * x * math.cos(alpha)
    if norm_sq <= 1e-24:
        return 0.0
    theta0 = abs(mismatch_angle(x, alpha))
    if theta0 > PEAK_TILT:
        return PEAK_OVERLAP
    return 4.0 * x * x * math.sin(alpha) ** 2 * (1.0 + x * math.cos(alpha)) ** 6 / norm_sq**4


def _larmor(geometry: FieldGeometry, g_factor):
    b = float(np.linalg.norm(geometry.total_vector))
    return TWO_PI * 1e6 * BOHR_MHZ_PER_GAUSS * g_factor * b, b


def precession_timeseries(geometry: FieldGeometry, duration, steps, g_factor=0.5):
    """Populations of |2,m>, m = -2..2, for a spin starting in |2,+2>.

    The Hamiltonian mu_B g F.B is diagonal in the frame of the total field, so
    the evolution is d(theta0) exp(-i m w t) d(theta0)^T applied to |2,+2>.
    Returns (times in s, populations of shape (steps, 5)).
    """
    if steps < 2:
        raise ValueError("steps must be at least 2")
    t = np.linspace(0.0, duration, steps)
    omega, b = _larmor(geometry, g_factor)
    pops = np.zeros((steps, 2 * SPIN + 1))
    if b == 0.0:
        pops[:, -1] = 1.0
        return t, pops
    bx, _, bz = geometry.total_vector
    theta0 = math.atan2(bx, bz)
    d = wigner_small_d_matrix(SPIN, theta0)
    start = d[-1, :]  # <k| d(-theta0) |2> = d_{2,k}(theta0)
    phases = np.exp(-1j * np.outer(t, MS) * omega)
    amps = (phases * start) @ d.T
    return t, np.abs(amps) ** 2


def precession_timeseries_integrated(geometry: FieldGeometry, duration, steps, g_factor=0.5, substeps=200):
    """Oracle: fixed-step RK4 integration of the spin-2 Schrodinger equation."""
    if steps < 2:
        raise ValueError("steps must be at least 2")
    t = np.linspace(0.0, duration, steps)
    jx, jy, jz = spin_matrices(SPIN)
    scale = TWO_PI * 1e6 * BOHR_MHZ_PER_GAUSS * g_factor
    bx, by, bz = geometry.total_vector
    H = scale * (bx * jx + by * jy + bz * jz)
    A = -1j * H
    psi = np.zeros(2 * SPIN + 1, dtype=complex)
    psi[-1] = 1.0
    out = np.empty((steps, 2 * SPIN + 1))
    out[0] = np.abs(psi) ** 2
    for k in range(1, steps):
        h = (t[k] - t[k - 1]) / substeps
        for _ in range(substeps):
            k1 = A @ psi
            k2 = A @ (psi + 0.5 * h * k1)
            k3 = A @ (psi + 0.5 * h * k2)
            k4 = A @ (psi + h * k3)
            psi = psi + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k] = np.abs(psi) ** 2
    return t, out
