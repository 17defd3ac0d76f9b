"""Three-readout protocol Monte Carlo over a small trap array.

Each shot: readout 1 checks loading, the atom is prepared in B or D, waits a
gap, is read non-destructively (readout 2), waits again, and readout 3 either
checks presence or, with the blow-away on, checks survival of a D atom. Times
are in ms unless a name says otherwise.
"""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np
from jsonschema import Draft202012Validator

from .camera import CameraConfig, SignalModel, sample_readout
from .constants import load_constants
from .inference import (
    STATES,
    choose_threshold,
    confusion_with_postselection,
    fidelity_summary,
    readout_distributions,
)
from .pumping import transient_depump_exact
from .rates import ProbeField, n_gamma_sigma, scattering_rate

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "ConfigError",
    "RetentionModel",
    "ProtocolConfig",
    "Variant",
    "VARIANTS",
    "ReadoutRecord",
    "ProtocolTables",
    "load_config",
    "run_protocol",
    "run_all_variants",
    "reproduce_tables",
    "retention_sweep",
    "write_records_csv",
    "histogram_rows",
]

CAUSES = ("background", "heating", "depump", "none")


class ConfigError(ValueError):
    """Invalid protocol configuration; ``keys`` names the offending entries."""

    def __init__(self, message, keys):
        super().__init__(message)
        self.keys = list(keys)


@dataclass(frozen=True)
class RetentionModel:
    """Probability that an atom survives one readout's heating, by trap depth.

    ``kind`` is "logistic" (1 / (1 + exp(-(U - midpoint) / width))),
    "constant" (``value`` at every depth) or "table" (linear interpolation of
    digitized ``depths``/``values``, clamped at the ends).
    """

    kind: str = "logistic"
    midpoint: float = 1.8
    width: float = 0.55
    value: float = 1.0
    depths: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("logistic", "constant", "table"):
            raise ValueError(f"unknown retention kind {self.kind!r}")
        if self.kind == "logistic" and self.width <= 0:
            raise ValueError("logistic width must be positive")
        if self.kind == "constant" and not 0.0 <= self.value <= 1.0:
            raise ValueError("constant retention must lie in [0, 1]")
        if self.kind == "table":
            if len(self.depths) != len(self.values) or len(self.depths) < 1:
                raise ValueError("table retention needs matching, non-empty depths and values")
            if np.any(np.diff(self.depths) <= 0):
                raise ValueError("table depths must increase")

    def __call__(self, depth):
        u = np.asarray(depth, dtype=float)
        if self.kind == "logistic":
            out = 0.5 * (1.0 + np.tanh(0.5 * (u - self.midpoint) / self.width))
        elif self.kind == "constant":
            out = np.full_like(u, self.value)
        else:
            out = np.interp(u, self.depths, self.values)
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self):
        if self.kind == "logistic":
            return {"kind": "logistic", "midpoint_mK": self.midpoint, "width_mK": self.width}
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        return {"kind": "table", "depths_mK": list(self.depths), "values": list(self.values)}


@dataclass(frozen=True)
class ProtocolConfig:
    """Everything a protocol run needs.

    ``photons_per_readout`` and ``n_gamma_sigma`` fall back to the rates
    module when None (the photon count from the duty-cycled cycling-line rate). ``transient_error`` is a probability, or None to take
    the absorbing-chain value for ``probe``.
    """

    trap_depths: tuple = (2.8, 4.4, 5.6, 3.9, 3.4)
    probe: ProbeField = dc_field(default_factory=lambda: ProbeField(
        s0=1.0, delta=-0.5 * load_constants().gamma, purity_p=1600 / 1601, bias_field=20.0, duty_cycle=0.5))
    camera: CameraConfig = dc_field(default_factory=CameraConfig)
    site_signal: tuple = (128.09, 148.31, 150.0, 155.06, 128.09)
    excess_noise_factor: float = 2.0
    gap_time: float = 100.0
    trap_lifetime: float = 5.0
    retention: RetentionModel = dc_field(default_factory=RetentionModel)
    prep_error_bright: tuple = (0.005,) * 5
    prep_error_dark: tuple = (0.0, 0.005, 0.005, 0.005, 0.0)
    photons_per_readout: float | None = None
    n_gamma_sigma: float | None = 3.7e5
    transient_error: float | None = None
    load_probability: float = 1.0
    n_shots: int = 2000
    center_site: int = 2
    sampling: str = "poisson"

    def __post_init__(self):
        n = len(self.trap_depths)
        per_site = {"site_signal": "camera/site_signal_pe", "prep_error_bright": "preparation/bright_error",
                    "prep_error_dark": "preparation/dark_error"}
        bad = [key for name, key in per_site.items() if len(getattr(self, name)) != n]
        if bad:
            raise ConfigError("per-site entries need one value per trap", bad)
        probs = [*self.prep_error_bright, *self.prep_error_dark, self.load_probability]
        if self.transient_error is not None:
            probs.append(self.transient_error)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigError("probabilities must lie in [0, 1]", ["preparation", "load_probability", "depumping/transient"])
        if self.n_shots < 1:
            raise ConfigError("n_shots must be at least 1", ["n_shots"])
        if not 0 <= self.center_site < n:
            raise ConfigError("center_site is not a trap index", ["center_site"])
        if self.gap_time < 0 or self.trap_lifetime <= 0:
            raise ConfigError("gap_time must be >= 0 and trap_lifetime > 0", ["gap_time_ms", "trap_lifetime_s"])
        if self.sampling not in ("poisson", "gaussian"):
            raise ConfigError("sampling must be 'poisson' or 'gaussian'", ["sampling"])

    def with_(self, **changes) -> "ProtocolConfig":
        return replace(self, **changes)

    @property
    def n_sites(self) -> int:
        return len(self.trap_depths)

    @property
    def exposure(self) -> float:
        return self.camera.exposure

    @property
    def background_loss(self) -> float:
        """Loss probability per gap from the finite trap lifetime."""
        return -math.expm1(-self.gap_time * 1e-3 / self.trap_lifetime)

    @property
    def scattered_photons(self) -> float:
        if self.photons_per_readout is not None:
            return self.photons_per_readout
        p = self.probe
        rate = scattering_rate(None, p.s0, p.delta) * p.duty_cycle
        return rate * self.exposure * 1e-3

    @property
    def photons_per_depump(self) -> float:
        if self.n_gamma_sigma is not None:
            return self.n_gamma_sigma
        p = self.probe
        return n_gamma_sigma(p.s0, p.delta, p.theta, p.purity_p)

    @property
    def depump_rate(self) -> float:
        """Raman depumping rate in the stretched state, 1/ms."""
        return self.scattered_photons / self.photons_per_depump / self.exposure

    @property
    def transient_probability(self) -> float:
        if self.transient_error is not None:
            return self.transient_error
        return _transient_for(self.probe)

    def heating_rate(self, site) -> float:
        """Loss hazard (1/ms) of a scattering atom, from the per-readout retention."""
        r = self.retention(self.trap_depths[site])
        return math.inf if r <= 0 else -math.log(r) / self.exposure

    def signal_model(self, site) -> SignalModel:
        cam = self.camera
        s = self.site_signal[site]
        sigma_d = math.sqrt(cam.background_rate * cam.exposure + cam.cic_mean + cam.read_noise_sigma**2)
        h = self.heating_rate(site)
        alpha = self.depump_rate + (h if math.isfinite(h) else 50.0 / self.exposure)
        return SignalModel(gamma_B=s / cam.exposure, gamma_bg=cam.background_rate, mu_cic=cam.cic_mean,
                           sigma_B=max(math.sqrt(self.excess_noise_factor * s), 1e-9), sigma_D=sigma_d,
                           alpha_loss=alpha, exposure=cam.exposure)

    def threshold(self, site) -> float:
        return _threshold_for(self.signal_model(site))

    def to_dict(self) -> dict:
        p, cam = self.probe, self.camera
        gamma = load_constants().gamma
        return {
            "schema_version": 1,
            "n_shots": self.n_shots,
            "center_site": self.center_site,
            "trap_depths_mK": list(self.trap_depths),
            "gap_time_ms": self.gap_time,
            "trap_lifetime_s": self.trap_lifetime,
            "exposure_ms": cam.exposure,
            "load_probability": self.load_probability,
            "sampling": self.sampling,
            "probe": {"s0": p.s0, "delta_gamma": p.delta / gamma, "purity_p": p.purity_p,
                      "theta_deg": math.degrees(p.theta), "bias_field_G": p.bias_field, "duty_cycle": p.duty_cycle},
            "depumping": {"photons_per_readout": "rates" if self.photons_per_readout is None else self.photons_per_readout,
                          "n_gamma_sigma": "rates" if self.n_gamma_sigma is None else self.n_gamma_sigma,
                          "transient": "exact" if self.transient_error is None else self.transient_error},
            "camera": {"site_signal_pe": list(self.site_signal), "excess_noise_factor": self.excess_noise_factor,
                       "background_rate": cam.background_rate, "cic_mean": cam.cic_mean,
                       "read_noise_sigma": cam.read_noise_sigma},
            "retention": self.retention.to_dict(),
            "preparation": {"bright_error": list(self.prep_error_bright), "dark_error": list(self.prep_error_dark)},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ProtocolConfig":
        _validate(raw)
        gamma = load_constants().gamma
        base = cls()
        probe_raw = raw.get("probe", {})
        bp = base.probe
        probe = ProbeField(
            s0=probe_raw.get("s0", bp.s0),
            delta=probe_raw.get("delta_gamma", bp.delta / gamma) * gamma,
            purity_p=probe_raw.get("purity_p", bp.purity_p),
            theta=math.radians(probe_raw.get("theta_deg", math.degrees(bp.theta))),
            bias_field=probe_raw.get("bias_field_G", bp.bias_field),
            duty_cycle=probe_raw.get("duty_cycle", bp.duty_cycle),
        )
        cam_raw = raw.get("camera", {})
        bc = base.camera
        camera = CameraConfig(
            cic_mean=cam_raw.get("cic_mean", bc.cic_mean),
            read_noise_sigma=cam_raw.get("read_noise_sigma", bc.read_noise_sigma),
            background_rate=cam_raw.get("background_rate", bc.background_rate),
            exposure=raw.get("exposure_ms", bc.exposure),
        )
        ret = raw.get("retention")
        if ret is None:
            retention = base.retention
        elif ret["kind"] == "logistic":
            retention = RetentionModel("logistic", midpoint=ret.get("midpoint_mK", 1.8), width=ret.get("width_mK", 0.55))
        elif ret["kind"] == "constant":
            retention = RetentionModel("constant", value=ret.get("value", 1.0))
        else:
            retention = RetentionModel("table", depths=tuple(ret.get("depths_mK", ())), values=tuple(ret.get("values", ())))
        dep = raw.get("depumping", {})
        transient = dep.get("transient", "exact")
        prep = raw.get("preparation", {})
        n = len(raw["trap_depths_mK"])
        default_sites = lambda values, fill: tuple(values) if len(values) == n else (fill,) * n
        return cls(
            trap_depths=tuple(raw["trap_depths_mK"]),
            probe=probe,
            camera=camera,
            site_signal=tuple(cam_raw.get("site_signal_pe", default_sites(base.site_signal, 150.0))),
            excess_noise_factor=cam_raw.get("excess_noise_factor", base.excess_noise_factor),
            gap_time=raw.get("gap_time_ms", base.gap_time),
            trap_lifetime=raw.get("trap_lifetime_s", base.trap_lifetime),
            retention=retention,
            prep_error_bright=tuple(prep.get("bright_error", default_sites(base.prep_error_bright, 0.0))),
            prep_error_dark=tuple(prep.get("dark_error", default_sites(base.prep_error_dark, 0.0))),
            photons_per_readout=_or_none(dep.get("photons_per_readout", base.photons_per_readout)),
            n_gamma_sigma=_or_none(dep.get("n_gamma_sigma", base.n_gamma_sigma)),
            transient_error=None if transient == "exact" else float(transient),
            load_probability=raw.get("load_probability", base.load_probability),
            n_shots=raw.get("n_shots", base.n_shots),
            center_site=raw.get("center_site", min(base.center_site, n - 1)),
            sampling=raw.get("sampling", base.sampling),
        )


def _or_none(value):
    return None if value in (None, "rates") else float(value)


@lru_cache(maxsize=None)
def _schema():
    return json.loads(resources.files("atomreadout").joinpath("data/protocol_schema.json").read_text())


def _validate(raw):
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping", ["<root>"])
    errors = sorted(Draft202012Validator(_schema()).iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        keys = []
        for e in errors:
            path = "/".join(str(p) for p in e.absolute_path)
            if e.validator == "additionalProperties":
                extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
                keys.extend(f"{path}/{k}" if path else k for k in extra)
            elif e.validator == "required":
                missing = [k for k in e.validator_value if k not in e.instance]
                keys.extend(f"{path}/{k}" if path else k for k in missing)
            else:
                keys.append(path or "<root>")
        keys = list(dict.fromkeys(keys))
        raise ConfigError("invalid configuration: " + "; ".join(e.message for e in errors), keys)


def load_config(source="paper_defaults") -> ProtocolConfig:
    """Build a config from a mapping, a TOML/JSON path or a bundled name.

    Raises ConfigError (listing offending keys) on unreadable or invalid input.
    """
    if isinstance(source, ProtocolConfig):
        return source
    if isinstance(source, dict):
        return ProtocolConfig.from_dict(source)
    text_source = str(source)
    bundled = resources.files("atomreadout").joinpath(f"data/{text_source}.toml")
    if "/" not in text_source and "." not in text_source and bundled.is_file():
        raw = tomllib.loads(bundled.read_text())
    else:
        path = Path(text_source)
        if not path.is_file():
            raise ConfigError(f"configuration file not found: {path}", ["<file>"])
        try:
            if path.suffix.lower() == ".toml":
                raw = tomllib.loads(path.read_text())
            else:
                raw = json.loads(path.read_text())
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}", ["<file>"]) from exc
    return ProtocolConfig.from_dict(raw)


@lru_cache(maxsize=None)
def _transient_for(probe: ProbeField) -> float:
    return transient_depump_exact(probe)[0]


@lru_cache(maxsize=None)
def _threshold_for(model: SignalModel) -> float:
    return choose_threshold(*readout_distributions(model))


class Variant(NamedTuple):
    prepared: str
    blow_away: bool

    @property
    def label(self) -> str:
        return f"{self.prepared}-{'on' if self.blow_away else 'off'}"

    @property
    def index(self) -> int:
        return 2 * STATES.index(self.prepared) + int(self.blow_away)

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, Variant):
            return value
        if isinstance(value, tuple):
            return cls(value[0], bool(value[1]))
        prep, _, blow = str(value).partition("-")
        if prep not in STATES or blow not in ("on", "off"):
            raise ValueError(f"variant must look like 'B-off' or 'D-on', got {value!r}")
        return cls(prep, blow == "on")


VARIANTS = tuple(Variant(p, b) for p in STATES for b in (False, True))


@dataclass(frozen=True)
class ReadoutRecord:
    """One site in one shot.

    ``present_after`` is the presence check of readout 3 (None with the
    blow-away on); ``survived_blowaway`` is its blow-away outcome (None with
    the blow-away off). ``cause`` names what removed the atom from the bright
    state, with losses taking precedence over depumping.
    """

    site: int
    shot: int
    prepared: str
    initial_state: str
    loaded: bool
    count: float
    detected: str
    present_after: bool | None
    survived_blowaway: bool | None
    cause: str


def _simulate_site(config: ProtocolConfig, variant: Variant, site: int, seed: int, n: int):
    rng = np.random.default_rng([seed, site, variant.index])
    t = config.exposure
    other = "D" if variant.prepared == "B" else "B"
    err = (config.prep_error_bright if variant.prepared == "B" else config.prep_error_dark)[site]

    loaded = rng.random(n) < config.load_probability
    flipped = rng.random(n) < err
    initial = np.where(flipped, other, variant.prepared)
    p_bg = config.background_loss
    lost1 = loaded & (rng.random(n) < p_bg)
    present2 = loaded & ~lost1
    bright = present2 & (initial == "B")

    a_dep = config.depump_rate
    h = config.heating_rate(site)
    transient = rng.random(n) < config.transient_probability
    t_dep = np.where(transient, 0.0, rng.exponential(1.0, n) / a_dep if a_dep > 0 else np.inf)
    t_heat = rng.exponential(1.0, n) / h if h > 0 else np.full(n, np.inf)
    heated = bright & (t_heat < np.minimum(t_dep, t))
    depumped = bright & ~heated & (t_dep < t)
    scatter = np.minimum(np.minimum(t_dep, t_heat), t)

    model = config.signal_model(site)
    counts = np.empty(n)
    for truth, mask in (("bright", bright), ("dark", present2 & ~bright), ("absent", ~present2)):
        k = int(mask.sum())
        if k:
            on = scatter[mask] if truth == "bright" else None
            counts[mask] = sample_readout(truth, model, config.camera, rng, size=k, mode=config.sampling, on_time=on)
    detected = np.where(counts > config.threshold(site), "B", "D")

    present = present2 & ~heated
    still_bright = bright & ~heated & ~depumped
    lost2 = present & (rng.random(n) < p_bg)
    present3 = present & ~lost2

    cause = np.full(n, "none", dtype=object)
    cause[depumped] = "depump"
    cause[lost2] = "background"
    cause[heated] = "heating"
    cause[lost1] = "background"

    records = []
    for i in range(n):
        if variant.blow_away:
            after, survived = None, bool(present3[i] and not still_bright[i])
        else:
            after, survived = bool(present3[i]), None
        records.append(ReadoutRecord(site, i, variant.prepared, str(initial[i]), bool(loaded[i]), float(counts[i]),
                                     str(detected[i]), after, survived, str(cause[i])))
    return records


def _run_tasks(config, tasks, seed, n, threads):
    work = lambda task: _simulate_site(config, task[0], task[1], seed, n)
    # warm the per-site caches in a fixed order so workers only read them
    for site in range(config.n_sites):
        config.threshold(site)
    config.transient_probability
    if threads <= 1:
        return [work(task) for task in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, tasks))


def run_protocol(config: ProtocolConfig, variant, seed=0, threads=1, n_shots=None) -> list:
    """Records of every site for one experiment variant ("B-off", "D-on", ...).

    Each (site, variant) stream is seeded from (seed, site, variant), so the
    output does not depend on ``threads``.
    """
    variant = Variant.parse(variant)
    n = config.n_shots if n_shots is None else int(n_shots)
    if n < 1:
        raise ValueError("n_shots must be at least 1")
    parts = _run_tasks(config, [(variant, s) for s in range(config.n_sites)], seed, n, threads)
    return [r for part in parts for r in part]


def run_all_variants(config: ProtocolConfig, seed=0, threads=1, n_shots=None) -> dict:
    """All four variants, keyed by their labels."""
    n = config.n_shots if n_shots is None else int(n_shots)
    tasks = [(v, s) for v in VARIANTS for s in range(config.n_sites)]
    parts = _run_tasks(config, tasks, seed, n, threads)
    out = {v.label: [] for v in VARIANTS}
    for (v, _), part in zip(tasks, parts):
        out[v.label].extend(part)
    return out


def _final_state(records_off, records_on, survival, confidence=0.95):
    """B / D / Lost fractions after readout 2, corrected for background loss."""
    from .inference import _wilson

    off = [r for r in records_off if r.loaded]
    on = [r for r in records_on if r.loaded]
    n_off, n_on = len(off), len(on)
    k_present = sum(r.present_after for r in off)
    k_dark = sum(r.survived_blowaway for r in on)
    lo_p, hi_p = _wilson(k_present, n_off, confidence)
    lo_d, hi_d = _wilson(k_dark, n_on, confidence)
    d = k_dark / n_on / survival
    lost = 1.0 - k_present / n_off / survival
    b = 1.0 - d - lost
    half_d = 0.5 * (hi_d - lo_d) / survival
    half_l = 0.5 * (hi_p - lo_p) / survival
    return {"B": b, "D": d, "Lost": lost, "B_half_width": math.hypot(half_d, half_l),
            "D_half_width": half_d, "Lost_half_width": half_l}


@dataclass
class ProtocolTables:
    """Detection tables per site, the centre-site final state and the mean fidelities."""

    uncorrected: list
    corrected: list
    final_state: dict
    summary: dict
    records: dict
    config: ProtocolConfig
    seed: int

    def table_rows(self):
        rows = []
        for kind, tables in (("uncorrected", self.uncorrected), ("corrected", self.corrected)):
            for site, table in enumerate(tables):
                for row in table.to_rows():
                    row = {"site": site, "correction": kind, **row}
                    row.pop("table")
                    rows.append(row)
        return rows

    def tables_csv(self) -> str:
        return _rows_to_csv(self.table_rows())

    def final_state_csv(self) -> str:
        rows = [{"site": self.config.center_site, "prepared": prep, **vals} for prep, vals in self.final_state.items()]
        return _rows_to_csv(rows)

    def format(self) -> str:
        c = self.config.center_site
        lines = [f"seed {self.seed}, {len(self.records['B-off']) // self.config.n_sites} shots per site and variant", ""]
        lines.append(f"site {c} (centre)")
        lines.append(self.uncorrected[c].format())
        lines.append(self.corrected[c].format())
        lines.append("final state (%):   B            D            Lost")
        for prep, v in self.final_state.items():
            cells = [f"{100 * v[k]:5.1f} ({100 * v[k + '_half_width']:.1f})".ljust(12) for k in ("B", "D", "Lost")]
            lines.append(f"   {prep}            " + " ".join(cells))
        lines.append("")
        for site in range(self.config.n_sites):
            if site != c:
                lines.append(f"site {site}")
                lines.append(self.corrected[site].format())
        lines.append("")
        lines.append(f"mean fidelity: uncorrected {100 * self.summary['uncorrected']:.2f}%, "
                     f"corrected {100 * self.summary['corrected']:.2f}%")
        return "\n".join(lines) + "\n"

    def write(self, outdir):
        """tables.csv, tables.txt, final_state.csv, records.csv and histograms.csv."""
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tables.csv").write_text(self.tables_csv())
        (out / "tables.txt").write_text(self.format())
        (out / "final_state.csv").write_text(self.final_state_csv())
        write_records_csv(self.records, out / "records.csv")
        (out / "histograms.csv").write_text(_rows_to_csv(histogram_rows(self.records)))
        return out


def _rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_records_csv(records, path):
    """One row per record. A dict of variant label -> records adds a leading
    ``variant`` column."""
    if isinstance(records, dict):
        rows = [{"variant": label, **asdict(r)} for label, recs in records.items() for r in recs]
    else:
        rows = [asdict(r) for r in records]
    Path(path).write_text(_rows_to_csv(rows) if rows else "")


def histogram_rows(records: dict, bin_width=5.0):
    """Readout-2 count histograms per site and prepared state (blow-away off
    runs), on shared bin edges."""
    counts = np.array([r.count for v in ("B-off", "D-off") for r in records[v] if r.loaded])
    lo = math.floor(counts.min() / bin_width) * bin_width
    hi = math.ceil(counts.max() / bin_width) * bin_width + bin_width
    edges = np.arange(lo, hi + 0.5 * bin_width, bin_width)
    rows = []
    for label in ("B-off", "D-off"):
        by_site = {}
        for r in records[label]:
            if r.loaded:
                by_site.setdefault(r.site, []).append(r.count)
        for site in sorted(by_site):
            h, _ = np.histogram(by_site[site], edges)
            for k in range(len(h)):
                rows.append({"site": site, "prepared": label[0], "bin_low": float(edges[k]),
                             "bin_high": float(edges[k + 1]), "count": int(h[k])})
    return rows


def reproduce_tables(config: ProtocolConfig, n_shots=None, seed=0, threads=1) -> ProtocolTables:
    """Uncorrected and presence-post-selected detection tables for every site,
    plus the final-state breakdown of the centre site."""
    records = run_all_variants(config, seed=seed, threads=threads, n_shots=n_shots)
    uncorrected, corrected = [], []
    for site in range(config.n_sites):
        recs = [r for label in ("B-off", "D-off") for r in records[label] if r.site == site]
        uncorrected.append(confusion_with_postselection(recs, False, label=f"site {site} uncorrected"))
        corrected.append(confusion_with_postselection(recs, True, label=f"site {site} post-selected"))
    survival = math.exp(-2.0 * config.gap_time * 1e-3 / config.trap_lifetime)
    c = config.center_site
    final = {}
    for prep in STATES:
        off = [r for r in records[f"{prep}-off"] if r.site == c]
        on = [r for r in records[f"{prep}-on"] if r.site == c]
        final[prep] = _final_state(off, on, survival)
    return ProtocolTables(uncorrected, corrected, final, fidelity_summary(uncorrected, corrected), records, config,
                          seed)


def retention_sweep(config: ProtocolConfig, depths) -> np.ndarray:
    """Probability that an atom present at readout 1 is still present at
    readout 3: heating retention of one readout times background survival of
    both gaps."""
    depths = np.asarray(depths, dtype=float)
    background = math.exp(-2.0 * config.gap_time * 1e-3 / config.trap_lifetime)
    return np.asarray(config.retention(depths), dtype=float) * background
