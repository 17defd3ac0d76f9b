"""Rb-87 D2 line constants loaded from the bundled, versioned data file.

Fundamental constants (h, c, k_B, Bohr magneton) come from ``scipy.constants``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from math import pi

from scipy import constants as sc

from .angular import clebsch_gordan, wigner_6j

__all__ = ["Rb87Constants", "load_constants", "BOHR_MHZ_PER_GAUSS", "TWO_PI"]

TWO_PI = 2 * pi
BOHR_MHZ_PER_GAUSS = sc.physical_constants["Bohr magneton in Hz/T"][0] * 1e-4 / 1e6


def _mean_stretched_strength(i_nuc: float, j_g: float, j_e: float) -> float:
    """Mean relative strength into the top excited level for one polarization
    component, averaged over ground sublevels of the top ground level.

    Relative to the stretched cycling line; 7/15 for Rb-87 D2.
    """
    f_g = i_nuc + j_g
    f_e = i_nuc + j_e

    def strength(m, q):
        if abs(m + q) > f_e:
            return 0.0
        cg = clebsch_gordan(f_g, m, 1, q, f_e, m + q)
        return (2 * f_g + 1) * (cg * wigner_6j(j_g, i_nuc, f_g, f_e, 1, j_e)) ** 2

    ref = strength(f_g, 1)
    ms = [f_g - k for k in range(int(2 * f_g) + 1)]
    total = sum(strength(m, q) for m in ms for q in (-1, 0, 1))
    return total / ref / (3 * len(ms))


@dataclass(frozen=True)
class Rb87Constants:
    """Angular frequencies are in rad/s, wavelength in m, intensities in mW/cm^2."""

    gamma: float
    wavelength: float
    ground_splitting: float
    excited_energy: dict
    g_ground: dict
    g_excited: dict
    nuclear_spin: float = 1.5
    j_ground: float = 0.5
    j_excited: float = 1.5
    vector_polarizability_ratio: float = 0.0
    version: str = ""

    def __post_init__(self):
        if self.gamma <= 0 or self.wavelength <= 0 or self.ground_splitting <= 0:
            raise ValueError("linewidth, wavelength and ground splitting must be positive")
        if self.delta_23 <= 0 or self.delta_13 <= 0:
            raise ValueError("excited hyperfine splittings must be positive")

    @property
    def delta_23(self) -> float:
        """Splitting between F'=3 and F'=2 (rad/s, positive)."""
        return self.excited_energy[3] - self.excited_energy[2]

    @property
    def delta_13(self) -> float:
        return self.excited_energy[3] - self.excited_energy[1]

    @property
    def isat_cycling(self) -> float:
        """Saturation intensity of the stretched cycling line, pi h c Gamma / (3 lambda^3)."""
        w_per_m2 = pi * sc.h * sc.c * self.gamma / (3 * self.wavelength**3)
        return w_per_m2 * 0.1

    @property
    def isotropic_strength(self) -> float:
        return _mean_stretched_strength(self.nuclear_spin, self.j_ground, self.j_excited)

    @property
    def isat_isotropic(self) -> float:
        """Saturation intensity for isotropic, unpolarized light on the F=2 -> F'=3 line."""
        return self.isat_cycling / self.isotropic_strength


@lru_cache(maxsize=None)
def load_constants(path: str | None = None) -> Rb87Constants:
    """Read the constants JSON (bundled file by default) and convert to SI angular units."""
    if path is None:
        text = resources.files("atomreadout").joinpath("data/rb87_constants.json").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    raw = json.loads(text)
    mhz = TWO_PI * 1e6
    return Rb87Constants(
        gamma=raw["gamma_mhz"] * mhz,
        wavelength=raw["wavelength_nm"] * 1e-9,
        ground_splitting=raw["ground_splitting_mhz"] * mhz,
        excited_energy={int(k): v * mhz for k, v in raw["excited_energy_mhz"].items()},
        g_ground={int(k): v for k, v in raw["g_factor_ground"].items()},
        g_excited={int(k): v for k, v in raw["g_factor_excited"].items()},
        nuclear_spin=raw["nuclear_spin"],
        j_ground=raw["j_ground"],
        j_excited=raw["j_excited"],
        vector_polarizability_ratio=raw.get("vector_polarizability_ratio_1040nm", 0.0),
        version=raw.get("version", ""),
    )
