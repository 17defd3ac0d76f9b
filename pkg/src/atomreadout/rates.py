"""Transition strengths, scattering rates and depumping figures of merit on the
Rb-87 D2 line.

Line strengths are expressed relative to the stretched cycling transition
|2,2> -> |3',3'>, so a saturation parameter ``s0`` referenced to the cycling
saturation intensity gives a channel saturation ``s0 * strength``.

Detunings are angular frequencies (rad/s) measured from the cycling line,
Zeeman shifted when the probe carries a bias field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .angular import clebsch_gordan, wigner_6j, wigner_small_d
from .constants import BOHR_MHZ_PER_GAUSS, TWO_PI, load_constants

__all__ = [
    "ZeemanState",
    "ProbeField",
    "GROUND_STATES",
    "EXCITED_STATES",
    "STRETCHED",
    "N_GAMMA_COEFFICIENT",
    "line_strength",
    "rabi_squared",
    "scattering_rate",
    "branching_ratio",
    "polarization_weights",
    "purity_fraction",
    "channel_detuning",
    "excitation_matrix",
    "decay_matrix",
    "depump_rates",
    "n_gamma_channel_sum",
    "n_gamma_unpolarized",
    "n_gamma_sigma",
    "sigma_angular_factor",
    "solve_theta_for_n_gamma",
    "depump_figure_sweep",
]

N_GAMMA_COEFFICIENT = 38340.0
CLOSED_FORM_MIN_PURITY = 0.99
# the closed form underweights the pi projection, so the alignment term must
# stay small next to the sigma- impurity for it to hold
CLOSED_FORM_ALIGNMENT_SHARE = 0.01
CLOSED_FORM_MAX_DETUNING_GAMMA = 2.0


@dataclass(frozen=True, order=True)
class ZeemanState:
    manifold: str
    F: int
    mF: int

    def __post_init__(self):
        if self.manifold not in ("ground", "excited"):
            raise ValueError(f"manifold must be 'ground' or 'excited', got {self.manifold!r}")
        allowed = (1, 2) if self.manifold == "ground" else (0, 1, 2, 3)
        if self.F not in allowed:
            raise ValueError(f"F={self.F} is not a {self.manifold} level of the D2 line")
        if abs(self.mF) > self.F:
            raise ValueError(f"|mF|={abs(self.mF)} exceeds F={self.F}")

    @classmethod
    def ground(cls, F, mF):
        return cls("ground", F, mF)

    @classmethod
    def excited(cls, F, mF):
        return cls("excited", F, mF)

    def __str__(self):
        tick = "'" if self.manifold == "excited" else ""
        return f"|{self.F}{tick},{self.mF:+d}{tick}>"


GROUND_STATES = tuple(ZeemanState.ground(F, m) for F in (1, 2) for m in range(-F, F + 1))
EXCITED_STATES = tuple(ZeemanState.excited(F, m) for F in range(4) for m in range(-F, F + 1))
STRETCHED = ZeemanState.ground(2, 2)
GROUND_INDEX = {s: i for i, s in enumerate(GROUND_STATES)}
EXCITED_INDEX = {s: i for i, s in enumerate(EXCITED_STATES)}


@dataclass(frozen=True)
class ProbeField:
    """Readout light.

    ``s0`` is referenced to the cycling saturation intensity for circular light
    and to the isotropic saturation intensity when ``unpolarized`` is set.
    ``purity_p`` is the sigma+ intensity fraction and ``theta`` the angle
    between the beam axis and the quantization axis. ``bias_field`` is in gauss.
    """

    s0: float
    delta: float = 0.0
    purity_p: float = 1.0
    theta: float = 0.0
    bias_field: float = 0.0
    duty_cycle: float = 1.0
    unpolarized: bool = False

    def __post_init__(self):
        if self.s0 < 0:
            raise ValueError("s0 must be non-negative")
        if not 0.0 <= self.purity_p <= 1.0:
            raise ValueError("purity_p must lie in [0, 1]")
        if not 0.0 <= self.theta < math.pi:
            raise ValueError("theta must lie in [0, pi)")
        if not 0.0 < self.duty_cycle <= 1.0:
            raise ValueError("duty_cycle must lie in (0, 1]")

    def with_(self, **changes) -> "ProbeField":
        return replace(self, **changes)


def _const(constants):
    return constants if constants is not None else load_constants()


@lru_cache(maxsize=None)
def _raw_strength(F, m, Fp, mp) -> float:
    c = load_constants()
    q = mp - m
    if abs(q) > 1:
        return 0.0
    cg = clebsch_gordan(F, m, 1, q, Fp, mp)
    six = wigner_6j(c.j_ground, c.nuclear_spin, F, Fp, 1, c.j_excited)
    return (2 * F + 1) * (cg * six) ** 2


def line_strength(ground: ZeemanState, excited: ZeemanState, q=None) -> float:
    """Relative strength (2F+1)|CG 6j|^2, normalized so the cycling line is 1.

    Zero when ``q`` is given and differs from the change in mF.
    """
    if q is not None and q != excited.mF - ground.mF:
        return 0.0
    ref = _raw_strength(2, 2, 3, 3)
    return _raw_strength(ground.F, ground.mF, excited.F, excited.mF) / ref


def rabi_squared(ground, excited, q, field_amplitude=1.0) -> float:
    """|Omega|^2 for one sublevel pair.

    ``field_amplitude`` is e*E_q*<J'||r||J>/hbar in rad/s, so the common
    reduced matrix element is folded into it.
    """
    if q != excited.mF - ground.mF:
        return 0.0
    return field_amplitude**2 * _raw_strength(ground.F, ground.mF, excited.F, excited.mF)


def _two_level_rate(s, delta, gamma, s_denominator=None):
    s_den = s if s_denominator is None else s_denominator
    return 0.5 * gamma * s / (1.0 + 4.0 * (delta / gamma) ** 2 + s_den)


def scattering_rate(transition, s0, delta_effective, constants=None):
    """Two-level scattering rate in 1/s.

    ``transition`` is a (ground, excited) pair, a relative strength, or None
    for the cycling line. The channel saturation is ``s0 * strength``.
    """
    if s0 < 0:
        raise ValueError("s0 must be non-negative")
    c = _const(constants)
    if transition is None:
        strength = 1.0
    elif isinstance(transition, tuple):
        strength = line_strength(*transition)
    else:
        strength = float(transition)
    if math.isinf(s0):
        return 0.5 * c.gamma if strength > 0 else 0.0
    return _two_level_rate(s0 * strength, delta_effective, c.gamma)


def branching_ratio(F_excited: int, F_ground: int, constants=None) -> float:
    """Fraction of decays from level F' that end in ground level F."""
    if abs(F_excited - F_ground) > 1:
        return 0.0
    c = _const(constants)
    six = wigner_6j(c.j_ground, c.nuclear_spin, F_ground, F_excited, 1, c.j_excited)
    return (2 * c.j_excited + 1) * (2 * F_ground + 1) * six**2


def purity_fraction(intensity_ratio: float) -> float:
    """Convert I+/I- into the sigma+ intensity fraction p."""
    if math.isinf(intensity_ratio):
        return 1.0
    return intensity_ratio / (1.0 + intensity_ratio)


def polarization_weights(theta: float, purity_p: float) -> np.ndarray:
    """Spherical weights (w_-1, w_0, w_+1) seen by atoms quantized along z.

    Light that is sigma+ (fraction p) or sigma- along a beam tilted by theta is
    projected with spin-1 rotation matrices.
    """
    out = np.empty(3)
    for i, q in enumerate((-1, 0, 1)):
        out[i] = purity_p * wigner_small_d(1, q, 1, theta) ** 2 + (1 - purity_p) * wigner_small_d(
            1, q, -1, theta
        ) ** 2
    return out


def channel_detuning(ground, excited, field: ProbeField, constants=None) -> float:
    """Laser detuning from one sublevel transition (rad/s).

    The reference is the cycling line including its own Zeeman shift, so for
    the cycling channel this returns ``field.delta`` unchanged.
    """
    c = _const(constants)
    offset = c.excited_energy[3] - c.excited_energy[excited.F]
    if ground.F == 1:
        offset -= c.ground_splitting
    if field.bias_field:
        larmor = TWO_PI * 1e6 * BOHR_MHZ_PER_GAUSS * field.bias_field
        shift = c.g_excited[excited.F] * excited.mF - c.g_ground[ground.F] * ground.mF
        cycling = c.g_excited[3] * 3 - c.g_ground[2] * 2
        offset += larmor * (cycling - shift)
    return field.delta + offset


def _channel_saturation(field: ProbeField, constants):
    """Per-channel saturation parameters, shape (8, 16)."""
    if field.unpolarized:
        w = np.full(3, 1.0 / 3.0)
        scale = field.s0 / constants.isotropic_strength
    else:
        w = polarization_weights(field.theta, field.purity_p)
        scale = field.s0
    sat = np.zeros((len(GROUND_STATES), len(EXCITED_STATES)))
    for i, g in enumerate(GROUND_STATES):
        for j, e in enumerate(EXCITED_STATES):
            q = e.mF - g.mF
            if abs(q) <= 1:
                sat[i, j] = scale * w[q + 1] * line_strength(g, e)
    return sat


def excitation_matrix(field: ProbeField, constants=None, saturation="shared") -> np.ndarray:
    """Instantaneous excitation rates R[g, e] in 1/s for every sublevel pair.

    With ``saturation="shared"`` each channel's denominator carries the total
    saturation of its excited hyperfine level, which makes the isotropic case
    reduce exactly to 1 + 4 delta^2/gamma^2 + s0 on the F=2 -> F'=3 line.
    ``"channel"`` saturates each channel on its own, ``"none"`` drops it.
    """
    c = _const(constants)
    sat = _channel_saturation(field, c)
    rates = np.zeros_like(sat)
    for i, g in enumerate(GROUND_STATES):
        for Fp in range(4):
            cols = [j for j, e in enumerate(EXCITED_STATES) if e.F == Fp]
            total = sat[i, cols].sum()
            for j in cols:
                if sat[i, j] == 0.0:
                    continue
                if saturation == "shared":
                    s_den = total
                elif saturation == "channel":
                    s_den = sat[i, j]
                elif saturation == "none":
                    s_den = 0.0
                else:
                    raise ValueError(f"unknown saturation mode {saturation!r}")
                delta = channel_detuning(g, EXCITED_STATES[j], field, c)
                rates[i, j] = _two_level_rate(sat[i, j], delta, c.gamma, s_den)
    return rates


@lru_cache(maxsize=None)
def _decay_matrix_cached() -> np.ndarray:
    out = np.zeros((len(EXCITED_STATES), len(GROUND_STATES)))
    for j, e in enumerate(EXCITED_STATES):
        for i, g in enumerate(GROUND_STATES):
            out[j, i] = line_strength(g, e)
    return out


def decay_matrix() -> np.ndarray:
    """Spontaneous decay probabilities P[e, g]; each row sums to one."""
    return _decay_matrix_cached().copy()


def depump_rates(field: ProbeField, initial="uniform", constants=None, saturation="shared"):
    """Bright-preserving and depumping scattering rates (r_c, r_R) in 1/s.

    ``initial`` is a ground ZeemanState or ``"uniform"`` (mean over |2,m>).
    Rates are summed over all excited sublevels and weighted by the
    hyperfine branching ratios, then scaled by the duty cycle.
    """
    c = _const(constants)
    R = excitation_matrix(field, c, saturation)
    if initial == "uniform":
        rows = [GROUND_INDEX[ZeemanState.ground(2, m)] for m in range(-2, 3)]
    else:
        rows = [GROUND_INDEX[initial]]
    per_level = np.array([R[rows][:, [j for j, e in enumerate(EXCITED_STATES) if e.F == Fp]].sum() for Fp in range(4)])
    per_level /= len(rows)
    b2 = np.array([branching_ratio(Fp, 2, c) for Fp in range(4)])
    b1 = np.array([branching_ratio(Fp, 1, c) for Fp in range(4)])
    duty = field.duty_cycle
    return duty * float(per_level @ b2), duty * float(per_level @ b1)


def n_gamma_channel_sum(field: ProbeField, initial=None, constants=None, saturation="shared") -> float:
    """Mean photons per depumping event from the full channel sum.

    Defaults to the uniform |2,m> mixture for unpolarized light and to the
    stretched state otherwise.
    """
    if initial is None:
        initial = "uniform" if field.unpolarized else STRETCHED
    rc, rr = depump_rates(field, initial, constants, saturation)
    return math.inf if rr == 0 else rc / rr


def n_gamma_unpolarized(s0, delta, constants=None):
    """Closed-form photons per depumping event for isotropic light (delta in rad/s)."""
    g = _const(constants).gamma
    return N_GAMMA_COEFFICIENT / (1.0 + 4.0 * (np.asarray(delta) / g) ** 2 + np.asarray(s0))


def sigma_angular_factor(theta, purity_p):
    h = np.asarray(theta) / 2
    c4 = np.cos(h) ** 4
    s2 = np.sin(h) ** 2
    den = purity_p * s2**2 + s2 + (1 - purity_p) * c4
    with np.errstate(divide="ignore"):
        return np.where(den > 0, purity_p * c4 / np.where(den > 0, den, 1.0), np.inf)


def _closed_form_valid(s0, delta, theta, purity_p, gamma):
    alignment = math.sin(theta / 2) ** 2
    return (
        alignment <= CLOSED_FORM_ALIGNMENT_SHARE * (1.0 - purity_p)
        and purity_p >= CLOSED_FORM_MIN_PURITY
        and abs(delta) <= CLOSED_FORM_MAX_DETUNING_GAMMA * gamma
    )


def n_gamma_sigma(s0, delta, theta=0.0, purity_p=1.0, constants=None, method="auto"):
    """Photons per depumping event for circular light from the stretched state.

    ``method="closed"`` uses the small-angle closed form, ``"channel"`` the full
    channel sum, ``"auto"`` the closed form inside its validity window and the
    channel sum outside it.
    """
    c = _const(constants)
    if method == "auto":
        method = "closed" if _closed_form_valid(s0, delta, theta, purity_p, c.gamma) else "channel"
    if method == "closed":
        base = float(n_gamma_unpolarized(s0, delta, c))
        return float(sigma_angular_factor(theta, purity_p)) * 1.75 * base
    if method == "channel":
        field = ProbeField(s0=s0, delta=delta, theta=theta, purity_p=purity_p)
        return n_gamma_channel_sum(field, STRETCHED, c)
    raise ValueError(f"unknown method {method!r}")


def solve_theta_for_n_gamma(target, s0, delta, purity_p, constants=None, method="closed") -> float:
    """Alignment angle at which N_gamma,sigma falls to ``target`` photons."""
    f = lambda th: n_gamma_sigma(s0, delta, th, purity_p, constants, method) - target
    lo, hi = 0.0, math.pi / 2
    if f(lo) <= 0:
        raise ValueError("target exceeds the perfectly aligned value")
    if f(hi) > 0:
        raise ValueError("target is below the closed-form range on [0, pi/2]")
    return brentq(f, lo, hi, xtol=1e-14)


def depump_figure_sweep(kind, values, field: ProbeField, constants=None) -> list:
    """Rows of N values for the three depumping figures.

    ``kind`` selects the swept quantity: ``"detuning"`` (rad/s, isotropic
    light, full channel sum across neighbouring levels), ``"intensity"`` (s0)
    or ``"contrast"`` (I+/I- at the field's alignment angle).
    """
    c = _const(constants)
    rows = []
    for v in values:
        v = float(v)
        if kind == "detuning":
            f = field.with_(delta=v, unpolarized=True)
            rows.append(
                {
                    "delta_mhz": v / (TWO_PI * 1e6),
                    "s0": f.s0,
                    "n_gamma_channel": n_gamma_channel_sum(f, constants=c),
                    "n_gamma_closed": float(n_gamma_unpolarized(f.s0, v, c)),
                }
            )
        elif kind == "intensity":
            f = field.with_(s0=v, unpolarized=True)
            rows.append(
                {
                    "s0": v,
                    "delta_mhz": f.delta / (TWO_PI * 1e6),
                    "n_gamma_channel": n_gamma_channel_sum(f, constants=c),
                    "n_gamma_closed": float(n_gamma_unpolarized(v, f.delta, c)),
                }
            )
        elif kind == "contrast":
            p = purity_fraction(v)
            unpol = float(n_gamma_unpolarized(field.s0, field.delta, c))
            sig = n_gamma_sigma(field.s0, field.delta, field.theta, p, c, "closed")
            rows.append(
                {
                    "intensity_ratio": v,
                    "s0": field.s0,
                    "delta_mhz": field.delta / (TWO_PI * 1e6),
                    "theta_rad": field.theta,
                    "n_gamma_sigma": sig,
                    "enhancement": sig / unpol,
                }
            )
        else:
            raise ValueError(f"unknown sweep kind {kind!r}")
    return rows
