"""Zeeman-state dynamics during readout.

Excited states are adiabatically eliminated: every excitation is followed at
once by a branched decay, so the dynamics is a continuous-time Markov chain
on the eight ground sublevels. Each jump (including jumps back to the same
sublevel) emits one photon.

Two engines share the same rate matrix: a discrete-event sampler and a
deterministic rate-equation propagator used as an oracle.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import curve_fit
from scipy.stats import binomtest

from .constants import BOHR_MHZ_PER_GAUSS, TWO_PI, load_constants
from .rates import (
    GROUND_STATES,
    STRETCHED,
    ProbeField,
    ZeemanState,
    decay_matrix,
    excitation_matrix,
)

__all__ = [
    "PumpTrajectory",
    "TransitionModel",
    "DepumpEstimate",
    "FitError",
    "simulate_trajectory",
    "simulate_ensemble",
    "propagate_populations",
    "transient_depump_error",
    "transient_depump_exact",
    "alignment_diagnostic",
    "write_trajectories_csv",
]

N_GROUND = len(GROUND_STATES)
DARK = np.array([s.F == 1 for s in GROUND_STATES])
STRETCHED_INDEX = GROUND_STATES.index(STRETCHED)
BRIGHT_INDICES = [i for i, s in enumerate(GROUND_STATES) if s.F == 2]
CHOP_PERIOD = 800e-9


class FitError(RuntimeError):
    """Raised when a survival curve cannot be fitted by an exponential."""


@dataclass
class PumpTrajectory:
    jump_times: np.ndarray
    states: list
    photons_scattered: int
    depump_time: float | None
    final_state: ZeemanState
    cumulative_photons: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    photons_to_stretched: int | None = None


@dataclass(frozen=True)
class DepumpEstimate:
    probability: float
    ci_low: float
    ci_high: float
    n_trials: int
    mean_photons_to_stretched: float
    photons_to_stretched_se: float


class TransitionModel:
    """Ground-to-ground jump rates W[g, g'] (1/s) for a probe field.

    Rates are instantaneous (probe on). ``time_averaged`` applies the duty
    cycle, which is how the unchopped engines consume them.
    """

    def __init__(self, field: ProbeField, constants=None):
        self.field = field
        self.constants = constants if constants is not None else load_constants()
        R = excitation_matrix(field, self.constants)
        self.instantaneous = R @ decay_matrix()
        self.scatter_total = R.sum(axis=1)

    def rates(self, chopped=False):
        return self.instantaneous if chopped else self.instantaneous * self.field.duty_cycle

    def generator(self, absorbing_dark=True):
        """Rate-equation generator Q with dP/dt = P Q (rows sum to zero)."""
        W = self.rates().copy()
        if absorbing_dark:
            W[DARK, :] = 0.0
        np.fill_diagonal(W, 0.0)
        return W - np.diag(W.sum(axis=1))

    def photon_rate(self, absorbing_dark=True):
        r = self.scatter_total * self.field.duty_cycle
        if absorbing_dark:
            r = np.where(DARK, 0.0, r)
        return r


def _on_time_to_wall(on_time, duty, period=CHOP_PERIOD):
    """Map accumulated probe-on time to wall time for a square-wave probe that is
    on during the first ``duty`` fraction of each period."""
    if duty >= 1.0:
        return on_time
    window = duty * period
    cycles = math.floor(on_time / window)
    rest = on_time - cycles * window
    return cycles * period + rest


def _initial_index(initial, rng):
    if isinstance(initial, ZeemanState):
        if initial.manifold != "ground":
            raise ValueError("trajectories start in a ground sublevel")
        return GROUND_STATES.index(initial)
    if initial == "uniform":
        return BRIGHT_INDICES[rng.integers(len(BRIGHT_INDICES))]
    raise ValueError(f"unknown initial condition {initial!r}")


def _walk(model: TransitionModel, start, duration, rng, chopped=False, stop_at_stretched=False):
    """Core jump loop. Self-loop photons are drawn in bulk from a Poisson law."""
    W = model.rates(chopped)
    duty = model.field.duty_cycle
    # budget in the time variable the rates refer to
    budget = duration * duty if chopped else duration
    state = start
    clock = 0.0
    photons = 0
    times, states, cumulative = [0.0], [state], [0]
    depump_time = None
    to_stretched = 0 if state == STRETCHED_INDEX else None
    while True:
        if DARK[state]:
            break
        if stop_at_stretched and to_stretched is not None:
            break
        row = W[state]
        self_rate = row[state]
        leave = row.sum() - self_rate
        dwell = rng.exponential(1.0 / leave) if leave > 0 else math.inf
        remaining = budget - clock
        if dwell >= remaining:
            photons += int(rng.poisson(self_rate * remaining)) if math.isfinite(remaining) else 0
            clock = budget
            break
        photons += int(rng.poisson(self_rate * dwell))
        clock += dwell
        probs = row.copy()
        probs[state] = 0.0
        state = int(rng.choice(N_GROUND, p=probs / leave))
        photons += 1
        t_wall = _on_time_to_wall(clock, duty) if chopped else clock
        times.append(t_wall)
        states.append(state)
        cumulative.append(photons)
        if state == STRETCHED_INDEX and to_stretched is None:
            to_stretched = photons
        if DARK[state]:
            depump_time = t_wall
    return times, states, cumulative, photons, depump_time, to_stretched


def simulate_trajectory(initial, field: ProbeField, duration, rng_seed, constants=None, chopping=False,
                        model=None) -> PumpTrajectory:
    """Sample one quantum-jump trajectory over ``duration`` seconds.

    ``initial`` is a ground ZeemanState or ``"uniform"`` over |2,m>. The dark
    manifold F=1 is absorbing. Without ``chopping`` rates are time averaged
    by the duty cycle; with it the probe is a square wave (800 ns period) and
    no photons are scattered while it is off.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    model = model or TransitionModel(field, constants)
    start = _initial_index(initial, rng)
    times, states, cum, photons, depump_time, to_st = _walk(model, start, duration, rng, chopping)
    return PumpTrajectory(
        jump_times=np.asarray(times),
        states=[GROUND_STATES[i] for i in states],
        photons_scattered=photons,
        depump_time=depump_time,
        final_state=GROUND_STATES[states[-1]],
        cumulative_photons=np.asarray(cum, dtype=np.int64),
        photons_to_stretched=to_st,
    )


def simulate_ensemble(initial, field: ProbeField, duration, n_trajectories, seed, threads=1, constants=None,
                      chopping=False) -> list:
    """Independent trajectories; trajectory i uses the seed sequence (seed, i),
    so results do not depend on ``threads``."""
    model = TransitionModel(field, constants)

    def one(i):
        return simulate_trajectory(initial, field, duration, np.random.default_rng([seed, i]), model=model,
                                   chopping=chopping)

    if threads <= 1:
        return [one(i) for i in range(n_trajectories)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(n_trajectories)))


def _initial_vector(initial):
    if isinstance(initial, ZeemanState):
        v = np.zeros(N_GROUND)
        v[GROUND_STATES.index(initial)] = 1.0
        return v
    if isinstance(initial, str) and initial == "uniform":
        v = np.zeros(N_GROUND)
        v[BRIGHT_INDICES] = 1.0 / len(BRIGHT_INDICES)
        return v
    v = np.asarray(initial, dtype=float)
    if v.shape != (N_GROUND,):
        raise ValueError("population vector must have 8 entries")
    return v


def propagate_populations(initial, field: ProbeField, times, constants=None, absorbing_dark=True):
    """Rate-equation populations at ``times`` (seconds) and mean photon counts.

    Returns (populations of shape (len(times), 8), expected photons). The
    photon count is carried as an extra row of an augmented generator so both
    come out of a single matrix exponential per step.
    """
    model = TransitionModel(field, constants)
    Q = model.generator(absorbing_dark)
    r = model.photon_rate(absorbing_dark)
    A = np.zeros((N_GROUND + 1, N_GROUND + 1))
    A[:N_GROUND, :N_GROUND] = Q
    A[:N_GROUND, N_GROUND] = r
    p0 = np.append(_initial_vector(initial), 0.0)
    times = np.asarray(times, dtype=float)
    out = np.empty((len(times), N_GROUND + 1))
    prev_t, state = 0.0, p0
    for k, t in enumerate(times):
        if t < prev_t:
            raise ValueError("times must be non-decreasing")
        state = state @ expm(A * (t - prev_t))
        out[k] = state
        prev_t = t
    return out[:, :N_GROUND], out[:, N_GROUND]


def transient_depump_error(field: ProbeField, n_trials=10_000, seed=0, constants=None, confidence=0.95,
                           max_time=1e-3, initial="uniform", threads=1) -> DepumpEstimate:
    """Probability that an atom is depumped before it first reaches the
    stretched state, with a Clopper-Pearson CI.

    Also returns the mean number of photons scattered on the way to |2,2>
    (over trials that got there). Trial i draws from the seed sequence
    (seed, i), so ``threads`` does not change the result.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    model = TransitionModel(field, constants)

    def one(i):
        rng = np.random.default_rng([seed, i])
        start = _initial_index(initial, rng)
        _, states, _, _, _, to_st = _walk(model, start, max_time, rng, stop_at_stretched=True)
        return bool(DARK[states[-1]]), to_st

    if threads <= 1:
        outcomes = [one(i) for i in range(n_trials)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one, range(n_trials)))
    lost = sum(dark for dark, _ in outcomes)
    counts = np.asarray([n for dark, n in outcomes if not dark and n is not None], dtype=float)
    ci = binomtest(lost, n_trials).proportion_ci(confidence, method="exact")
    se = counts.std(ddof=1) / math.sqrt(len(counts)) if len(counts) > 1 else math.nan
    return DepumpEstimate(lost / n_trials, ci.low, ci.high, n_trials, float(counts.mean()), se)


def transient_depump_exact(field: ProbeField, constants=None):
    """Absorbing-chain values behind ``transient_depump_error``.

    Returns (probability of reaching F=1 before |2,2>, mean photons scattered
    before reaching |2,2> or F=1) for a uniform |2,m> start.
    """
    model = TransitionModel(field, constants)
    Q = model.generator()
    transient = [i for i in BRIGHT_INDICES if i != STRETCHED_INDEX]
    fundamental = np.linalg.inv(-Q[np.ix_(transient, transient)])
    to_dark = fundamental @ Q[np.ix_(transient, np.flatnonzero(DARK))].sum(axis=1)
    photons = fundamental @ model.photon_rate()[transient]
    w = 1.0 / len(BRIGHT_INDICES)
    return float(to_dark.sum() * w), float(photons.sum() * w)


def _fit_time_constant(t, dark):
    def model(tt, a, tau):
        return a * (1.0 - np.exp(-tt / tau))

    if not np.all(np.isfinite(dark)) or dark[-1] <= 0:
        raise FitError("survival curve never decays; no time constant to fit")
    idx = min(int(np.searchsorted(dark, 0.63 * dark[-1])), len(t) - 1)
    guess_tau = max(t[idx], t[1])
    try:
        (a, tau), _ = curve_fit(model, t, dark, p0=(dark[-1], guess_tau), bounds=([0, 0], [1.0, np.inf]),
                                maxfev=20000)
    except (RuntimeError, ValueError) as exc:
        raise FitError(f"exponential fit failed: {exc}") from exc
    if not np.isfinite(tau) or tau <= 0:
        raise FitError(f"non-physical fitted time constant {tau}")
    return tau


def alignment_diagnostic(field: ProbeField, bias=5.0, constants=None, n_points=200, return_curves=False):
    """Ratio of depumping time constants for |2,+2> over |2,-2>.

    The probe is set to the centre of the |2> -> |2'> line (no Zeeman shift
    at m=0) under a ``bias`` field in gauss; purity and angle come from
    ``field``. Time constants are fitted to rate-equation dark-state growth
    curves. A perfectly dark |2,+2> gives ``inf``.
    """
    c = constants if constants is not None else load_constants()
    larmor = TWO_PI * 1e6 * BOHR_MHZ_PER_GAUSS * bias
    cycling_shift = c.g_excited[3] * 3 - c.g_ground[2] * 2
    probe = field.with_(delta=-c.delta_23 - larmor * cycling_shift, bias_field=bias, unpolarized=False)
    model = TransitionModel(probe, c)
    Q = model.generator()
    taus = {}
    curves = {}
    for m in (2, -2):
        i = GROUND_STATES.index(ZeemanState.ground(2, m))
        rate0 = Q[i, DARK].sum()
        if rate0 <= 0:
            if m == 2:
                taus[m] = math.inf
                continue
            raise FitError("|2,-2> curve is degenerate: no depumping at all")
        # sample until the curve has settled, but no further than the fast
        # component needs
        t = np.linspace(0.0, 8.0 / rate0, n_points)
        pops, _ = propagate_populations(ZeemanState.ground(2, m), probe, t, c)
        dark = pops[:, DARK].sum(axis=1)
        curves[m] = (t, dark)
        taus[m] = _fit_time_constant(t, dark)
    ratio = taus[2] / taus[-2]
    if return_curves:
        return ratio, taus, curves
    return ratio


def write_trajectories_csv(trajectories, path):
    """One row per jump: trajectory, time, state label, cumulative photons."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trajectory", "time_s", "F", "mF", "cumulative_photons"])
        for k, tr in enumerate(trajectories):
            for t, s, n in zip(tr.jump_times, tr.states, tr.cumulative_photons):
                w.writerow([k, repr(float(t)), s.F, s.mF, int(n)])
