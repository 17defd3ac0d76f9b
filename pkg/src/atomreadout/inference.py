"""From photo-electron counts to state assignments, fidelity tables and
loss-rate estimates."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import integrate, optimize, stats

from .camera import SignalModel, mean_signals

__all__ = [
    "STATES",
    "ConfusionTable",
    "FitResult",
    "FitError",
    "SelectionError",
    "MixtureReadout",
    "readout_distributions",
    "choose_threshold",
    "misclassification",
    "classify",
    "confusion_table",
    "confusion_with_postselection",
    "fit_loss_model",
    "fidelity_summary",
]

STATES = ("B", "D")


class FitError(RuntimeError):
    """Raised when a likelihood fit fails; ``diagnostics`` holds the details."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SelectionError(ValueError):
    pass


def _wilson(successes, n, confidence):
    if n == 0:
        return math.nan, math.nan
    ci = stats.binomtest(int(successes), int(n)).proportion_ci(confidence_level=confidence, method="wilson")
    return ci.low, ci.high


@dataclass
class ConfusionTable:
    """Prepared state (rows) by detected state (columns), ordered (B, D).

    Rows with no trials hold NaN probabilities.
    """

    counts: np.ndarray
    confidence: float = 0.95
    label: str = ""
    probabilities: np.ndarray = dc_field(init=False)
    ci_low: np.ndarray = dc_field(init=False)
    ci_high: np.ndarray = dc_field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (2, 2) or np.any(self.counts < 0):
            raise ValueError("counts must be a non-negative 2x2 array")
        n = self.n_trials
        self.probabilities = np.full((2, 2), math.nan)
        self.ci_low = np.full((2, 2), math.nan)
        self.ci_high = np.full((2, 2), math.nan)
        for i in range(2):
            if n[i] == 0:
                continue
            self.probabilities[i] = self.counts[i] / n[i]
            for j in range(2):
                self.ci_low[i, j], self.ci_high[i, j] = _wilson(self.counts[i, j], n[i], self.confidence)

    @property
    def n_trials(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def fidelity(self, state) -> float:
        i = STATES.index(state)
        return float(self.probabilities[i, i])

    def to_rows(self):
        rows = []
        for i, prep in enumerate(STATES):
            for j, det in enumerate(STATES):
                rows.append({
                    "table": self.label,
                    "prepared": prep,
                    "detected": det,
                    "count": int(self.counts[i, j]),
                    "n_trials": int(self.n_trials[i]),
                    "probability": float(self.probabilities[i, j]),
                    "ci_low": float(self.ci_low[i, j]),
                    "ci_high": float(self.ci_high[i, j]),
                })
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.to_rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def format(self) -> str:
        """Percentages with the half-width of the interval in parentheses."""
        lines = [f"{self.label}".rstrip(), "initial | detected B      | detected D"]
        for i, prep in enumerate(STATES):
            cells = []
            for j in range(2):
                p = 100 * self.probabilities[i, j]
                half = 50 * (self.ci_high[i, j] - self.ci_low[i, j])
                cells.append(f"{p:6.1f} ({half:.1f})".ljust(15))
            lines.append(f"   {prep}    | " + " | ".join(cells))
        return "\n".join(line for line in lines if line)


@dataclass(frozen=True)
class FitResult:
    alpha_hat: float
    standard_error: float
    fixed: dict
    n_samples: int
    neg_log_likelihood: float
    chi_square: float
    dof: int
    method: str = "unbinned"


class MixtureReadout:
    """Bright-state count distribution with loss, with the frozen-distribution
    methods the threshold search needs."""

    def __init__(self, model: SignalModel):
        from .camera import mixture_density

        self.model = model
        self._pdf = lambda s: mixture_density(s, model)
        _, self._mu_b = mean_signals(model)
        self._width = math.hypot(model.sigma_B, model.sigma_D)

    def pdf(self, s):
        return self._pdf(s)

    def mean(self):
        m = self.model
        surv = m.survival
        if surv == 1.0:
            return self._mu_b
        a, t = m.alpha_loss, m.exposure
        # mean loss time given a loss before t
        t_loss = 1.0 / a - t * surv / (1.0 - surv)
        return surv * self._mu_b + (1.0 - surv) * (m.background_mean + m.gamma_B * t_loss)

    def std(self):
        m = self.model
        return math.sqrt(self._width**2 + (m.gamma_B * m.exposure) ** 2 * (1.0 - m.survival))


def readout_distributions(model: SignalModel):
    """(dark, bright) count distributions for a signal model."""
    mu_d, _ = mean_signals(model)
    return stats.norm(mu_d, model.sigma_D), MixtureReadout(model)


def misclassification(threshold, dark, bright, priors=(0.5, 0.5)):
    """(P(bright | dark), P(dark | bright), weighted total) for a threshold."""
    p_d, p_b = priors
    if hasattr(dark, "sf"):
        e_dark = float(dark.sf(threshold))
    else:
        e_dark = integrate.quad(dark.pdf, threshold, np.inf)[0]
    if hasattr(bright, "cdf"):
        e_bright = float(bright.cdf(threshold))
    else:
        e_bright = integrate.quad(bright.pdf, -np.inf, threshold, limit=200)[0]
    return e_dark, e_bright, p_d * e_dark + p_b * e_bright


def choose_threshold(dark, bright, priors=(0.5, 0.5), n_grid=4001):
    """Count threshold minimizing prior-weighted misclassification.

    ``dark`` and ``bright`` need ``pdf``, ``mean`` and ``std`` (scipy frozen
    distributions qualify). The total error is tabulated between the means and
    the best crossing of the weighted densities is refined by root finding.
    If the densities do not overlap numerically, or the means coincide, the
    midpoint of the means is returned.
    """
    p_d, p_b = priors
    if p_d < 0 or p_b < 0 or not math.isclose(p_d + p_b, 1.0):
        raise ValueError("priors must be non-negative and sum to 1")
    m_d, m_b = float(dark.mean()), float(bright.mean())
    midpoint = 0.5 * (m_d + m_b)
    if not m_d < m_b:
        return midpoint
    pad = 8.0 * max(float(dark.std()), float(bright.std()))
    x = np.linspace(m_d - pad, m_b + pad, n_grid)
    fd = p_d * np.asarray(dark.pdf(x))
    fb = p_b * np.asarray(bright.pdf(x))
    diff = fb - fd
    inside = (x >= m_d) & (x <= m_b)
    if not np.any(np.abs(diff[inside]) > 0) or np.all((fd[inside] == 0) | (fb[inside] == 0)):
        return midpoint
    # total error as a function of threshold
    cum_b = integrate.cumulative_trapezoid(fb, x, initial=0.0)
    cum_d = integrate.cumulative_trapezoid(fd, x, initial=0.0)
    err = cum_b + (cum_d[-1] - cum_d)
    k = int(np.argmin(np.where(inside, err, np.inf)))
    lo, hi = max(k - 1, 0), min(k + 1, len(x) - 1)
    g = lambda s: float(p_b * bright.pdf(s) - p_d * dark.pdf(s))
    if g(x[lo]) * g(x[hi]) < 0:
        return optimize.brentq(g, x[lo], x[hi], xtol=1e-10)
    return float(x[k])


def classify(count, threshold):
    """'bright' if count > threshold else 'dark' (ties go to dark)."""
    if np.ndim(count):
        return np.where(np.asarray(count) > threshold, "bright", "dark")
    return "bright" if count > threshold else "dark"


def confusion_table(prepared, detected, confidence=0.95, label="") -> ConfusionTable:
    counts = np.zeros((2, 2), dtype=np.int64)
    for p, d in zip(prepared, detected):
        counts[STATES.index(p), STATES.index(d)] += 1
    return ConfusionTable(counts, confidence=confidence, label=label)


def confusion_with_postselection(records, post_select: bool, confidence=0.95, label="") -> ConfusionTable:
    """Detection table from readout records.

    Records need ``prepared`` and ``detected`` ('B'/'D'), ``loaded`` (first
    readout saw an atom) and ``present_after`` (third readout saw an atom;
    None when the third readout was a blow-away). Only loaded records count;
    with ``post_select`` only those whose third readout confirms presence.
    """
    chosen = [r for r in records if r.loaded]
    if post_select:
        chosen = [r for r in chosen if r.present_after]
    if not chosen:
        raise SelectionError("no records survive the selection")
    return confusion_table([r.prepared for r in chosen], [r.detected for r in chosen], confidence, label)


class _LossLikelihood:
    """Negative log-likelihood in alpha with everything else fixed.

    The loss-time integral is done on fixed Gauss-Legendre nodes; the
    alpha-independent Gaussian kernel at those nodes is tabulated once.
    """

    MAX_CELLS = 20_000_000

    def __init__(self, samples, model: SignalModel, panels=12, order=16):
        self.s = np.asarray(samples, dtype=float)
        self.model = model
        t = model.exposure
        nodes, weights = np.polynomial.legendre.leggauss(order)
        edges = np.linspace(0.0, t, panels + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        self.tp = (mid[:, None] + half[:, None] * nodes).ravel()
        self.w = (half[:, None] * weights).ravel()
        _, mu_b = mean_signals(model)
        width = math.hypot(model.sigma_B, model.sigma_D)
        self.core = stats.norm.pdf(self.s, mu_b, width)
        self._kernel = self._tabulate() if self.s.size * self.tp.size <= self.MAX_CELLS else None

    def _kernel_block(self, s):
        m = self.model
        var = np.maximum(m.sigma_B**2 * self.tp / m.exposure + m.sigma_D**2, 1e-300)
        mean = m.gamma_B * self.tp + m.background_mean
        return np.exp(-0.5 * (s[:, None] - mean) ** 2 / var) / np.sqrt(2 * np.pi * var) * self.w

    def _tabulate(self):
        return self._kernel_block(self.s)

    def _tail_integral(self, alpha):
        decay = np.exp(-alpha * self.tp)
        if self._kernel is not None:
            return self._kernel @ decay
        out = np.empty(self.s.size)
        step = max(1, self.MAX_CELLS // self.tp.size)
        for i in range(0, self.s.size, step):
            out[i:i + step] = self._kernel_block(self.s[i:i + step]) @ decay
        return out

    def density(self, alpha):
        t = self.model.exposure
        surv = math.exp(-alpha * t)
        tail = self._tail_integral(alpha)
        # (1 - surv) * [alpha / (1 - surv)] * integral
        return surv * self.core + alpha * tail

    def __call__(self, alpha):
        d = self.density(alpha)
        if np.any(d <= 0):
            return math.inf
        return -float(np.sum(np.log(d)))


def _binned_chi_square(samples, pdf, n_bins=60):
    edges = np.quantile(samples, np.linspace(0, 1, n_bins + 1))
    edges = np.unique(edges)
    counts, _ = np.histogram(samples, edges)
    x = np.linspace(edges[0], edges[-1], 20 * len(edges))
    cdf = integrate.cumulative_trapezoid(pdf(x), x, initial=0.0)
    probs = np.diff(np.interp(edges, x, cdf))
    expected = probs / probs.sum() * counts.sum()
    keep = expected > 0
    chi = float(np.sum((counts[keep] - expected[keep]) ** 2 / expected[keep]))
    return chi, int(keep.sum()) - 2


def fit_loss_model(samples, fixed: SignalModel, alpha_max=None, method="unbinned", bins=None) -> FitResult:
    """Maximum-likelihood loss rate alpha (1/ms) with all other parameters fixed.

    ``samples`` are bright-state counts. ``fixed`` carries the no-loss
    parameters (gamma_B, sigma_B, background) from a lossless calibration;
    its ``alpha_loss`` is ignored. ``method="binned"`` maximizes a Poisson
    likelihood over a histogram instead (``bins`` edges, default 80 equal bins).
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size < 500:
        raise ValueError("need at least 500 counts to fit the loss rate")
    t = fixed.exposure
    alpha_max = alpha_max if alpha_max is not None else 50.0 / t
    like = _LossLikelihood(samples, fixed)
    if method == "unbinned":
        objective = like
    elif method == "binned":
        edges = np.asarray(bins) if bins is not None else np.linspace(samples.min(), samples.max(), 81)
        counts, _ = np.histogram(samples, edges)
        centers = 0.5 * (edges[1:] + edges[:-1])
        width = np.diff(edges)
        binned = _LossLikelihood(centers, fixed)

        def objective(alpha):
            mu = binned.density(alpha) * width * counts.sum()
            if np.any(mu <= 0):
                return math.inf
            return float(np.sum(mu - counts * np.log(mu)))
    else:
        raise ValueError(f"unknown fit method {method!r}")

    # coarse scan guards against a multimodal likelihood, then bounded refinement
    grid = np.concatenate([[0.0], np.geomspace(1e-3, alpha_max, 40)])
    values = np.array([objective(a) for a in grid])
    if not np.any(np.isfinite(values)):
        raise FitError("likelihood is not finite anywhere on the search grid", {"grid": grid.tolist()})
    k = int(np.nanargmin(values))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10 * max(1.0, hi)})
    if not res.success or not np.isfinite(res.fun):
        raise FitError("loss-rate optimisation did not converge",
                       {"message": getattr(res, "message", ""), "bracket": (lo, hi), "nfev": res.nfev})
    alpha_hat = float(res.x)
    if alpha_hat > 0.999 * alpha_max:
        raise FitError("loss rate ran to the upper search bound",
                       {"alpha_hat": alpha_hat, "alpha_max": alpha_max})
    if alpha_hat < 1e-8 * max(1.0, hi):
        alpha_hat = 0.0

    # observed information from a central (or one-sided at 0) second difference
    h = max(1e-4, 1e-3 * alpha_hat)
    if alpha_hat - h > 0:
        curv = (objective(alpha_hat + h) - 2 * objective(alpha_hat) + objective(alpha_hat - h)) / h**2
    else:
        curv = (objective(alpha_hat + 2 * h) - 2 * objective(alpha_hat + h) + objective(alpha_hat)) / h**2
    if not curv > 0:
        raise FitError("likelihood curvature is not positive at the optimum",
                       {"alpha_hat": alpha_hat, "curvature": curv})
    se = 1.0 / math.sqrt(curv)

    best = fixed.with_(alpha_loss=alpha_hat)
    from .camera import mixture_density

    chi, dof = _binned_chi_square(samples, lambda s: mixture_density(s, best))
    record = {k: getattr(fixed, k) for k in ("gamma_B", "gamma_bg", "mu_cic", "sigma_B", "sigma_D", "exposure")}
    return FitResult(alpha_hat, se, record, int(samples.size), float(objective(alpha_hat)), chi, dof, method)


def fidelity_summary(uncorrected, corrected=None) -> dict:
    """Mean of (P(B|B) + P(D|D)) / 2 over site tables."""
    def mean_fid(tables):
        tables = list(tables)
        if not tables:
            raise ValueError("need at least one table")
        return float(np.mean([0.5 * (t.fidelity("B") + t.fidelity("D")) for t in tables]))

    out = {"uncorrected": mean_fid(uncorrected)}
    if corrected is not None:
        out["corrected"] = mean_fid(corrected)
    return out
