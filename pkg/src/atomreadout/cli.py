"""Command-line entry point: ``atomreadout <subcommand> [options]``.

Every subcommand accepts ``--seed``, ``--threads`` and ``--outdir``. With an
output directory the results are written there as CSV/JSON together with a
``manifest.json``; otherwise a short summary goes to stdout. Errors are
reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .constants import load_constants

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3

_DETUNING = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(gamma|mhz)\s*$", re.IGNORECASE)


def detuning(text) -> float:
    """Parse '-0.5gamma' or '-3MHz' into rad/s. A unit suffix is required."""
    m = _DETUNING.match(str(text))
    if not m:
        raise argparse.ArgumentTypeError(f"detuning {text!r} needs a unit suffix, e.g. -0.5gamma or -3MHz")
    value, unit = float(m.group(1)), m.group(2).lower()
    if unit == "gamma":
        return value * load_constants().gamma
    return value * 2 * math.pi * 1e6


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


class Output:
    """Collects named outputs; writes them (plus a manifest) to ``outdir``."""

    def __init__(self, args):
        self.args = args
        self.files = {}
        self.config = None

    def add(self, name, text):
        self.files[name] = text

    def finish(self, summary):
        out = self.args.outdir
        if out is None:
            sys.stdout.write(summary if summary.endswith("\n") else summary + "\n")
            return
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in self.files.items():
            (out / name).write_text(text, encoding="utf-8")
        manifest = {
            "subcommand": self.args.command,
            "argv": self.args.argv,
            "config": getattr(self.args, "config", None),
            "resolved_config": self.config,
            "seed": self.args.seed,
            "threads": self.args.threads,
            "outdir": str(out),
            "version": __version__,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "outputs": sorted(self.files),
        }
        (out / "manifest.json").write_text(_json_text(manifest), encoding="utf-8")
        sys.stdout.write(summary if summary.endswith("\n") else summary + "\n")


def _probe(args, unpolarized=False):
    from .rates import ProbeField, purity_fraction

    purity = args.purity
    if getattr(args, "contrast", None) is not None:
        purity = purity_fraction(args.contrast)
    return ProbeField(s0=args.s0, delta=args.delta, purity_p=purity, theta=math.radians(args.theta_deg),
                      bias_field=getattr(args, "bias", 0.0), unpolarized=unpolarized)


def cmd_rates(args, out: Output):
    from .rates import n_gamma_channel_sum, n_gamma_sigma, n_gamma_unpolarized

    if args.unpolarized:
        method = "closed" if args.method == "auto" else args.method
        if method == "closed":
            value = float(n_gamma_unpolarized(args.s0, args.delta))
        else:
            value = n_gamma_channel_sum(_probe(args, unpolarized=True))
    else:
        p = _probe(args)
        method = args.method
        value = n_gamma_sigma(p.s0, p.delta, p.theta, p.purity_p, method=method)
    result = {"n_gamma": value, "s0": args.s0, "delta_rad_per_s": args.delta, "unpolarized": args.unpolarized,
              "purity_p": _probe(args).purity_p, "theta_deg": args.theta_deg, "method": method}
    out.add("rates.json", _json_text(result))
    out.finish(f"n_gamma {value:.6g}")


def cmd_sweep(args, out: Output):
    from .rates import depump_figure_sweep

    if args.kind == "detuning":
        values = [detuning(v) for v in args.values.split(",")]
    else:
        values = [float(v) for v in args.values.split(",")]
    rows = depump_figure_sweep(args.kind, values, _probe(args))
    text = _csv_text(rows)
    out.add("sweep.csv", text)
    out.finish(text)


def cmd_pump(args, out: Output):
    from .pumping import transient_depump_error, transient_depump_exact

    field = _probe(args).with_(duty_cycle=1.0)
    est = transient_depump_error(field, n_trials=args.trials, seed=args.seed, threads=args.threads)
    p_exact, n_exact = transient_depump_exact(field)
    result = {"transient_error": est.probability, "ci_low": est.ci_low, "ci_high": est.ci_high,
              "n_trials": est.n_trials, "photons_to_stretched": est.mean_photons_to_stretched,
              "photons_to_stretched_se": est.photons_to_stretched_se, "exact_transient_error": p_exact,
              "exact_photons_to_stretched": n_exact, "seed": args.seed}
    out.add("pump.json", _json_text(result))
    out.finish(f"transient error {100 * est.probability:.3f}% "
               f"(95% CI {100 * est.ci_low:.3f}-{100 * est.ci_high:.3f}%), exact {100 * p_exact:.3f}%")


def cmd_fields(args, out: Output):
    from .fields import fictitious_coefficient, precession_overlap_bound

    xs = np.logspace(math.log10(args.x_min), math.log10(args.x_max), args.n_x)
    alphas = np.linspace(0.0, 180.0, args.n_alpha)
    rows = [{"x": float(x), "alpha_deg": float(a), "overlap_bound": precession_overlap_bound(x, math.radians(a))}
            for x in xs for a in alphas]
    bound = precession_overlap_bound(args.x, math.radians(args.alpha_deg))
    summary = {"coefficient_G_per_mK": fictitious_coefficient(), "x": args.x, "alpha_deg": args.alpha_deg,
               "overlap_bound": bound, "projections": args.projections,
               "per_readout": bound * args.projections}
    out.add("overlap_grid.csv", _csv_text(rows))
    out.add("fields.json", _json_text(summary))
    out.finish(f"coefficient {summary['coefficient_G_per_mK']:.6g} G/mK, bound {bound:.4g}, "
               f"per readout {summary['per_readout']:.4g}")


def _signal_model(args, alpha=None):
    from .camera import SignalModel

    return SignalModel(gamma_B=args.gamma_b, gamma_bg=args.background_rate, mu_cic=args.cic, sigma_B=args.sigma_b,
                       sigma_D=args.sigma_d, alpha_loss=args.alpha if alpha is None else alpha,
                       exposure=args.exposure)


def cmd_camera_sim(args, out: Output):
    from .camera import CameraConfig, default_camera, sample_readout, synth_frame, write_frames_binary, \
        write_frames_csv

    rng = np.random.default_rng(args.seed)
    if args.frames:
        cfg = default_camera()
        occ = rng.random((args.frames, cfg.site_psf.shape[0])) < args.load_probability
        frames = [synth_frame(o, args.site_signal, cfg, rng, shot=i) for i, o in enumerate(occ)]
        target = Path(args.outdir or ".") / ("frames.bin" if args.format == "binary" else "frames.csv")
        if args.outdir is not None:
            Path(args.outdir).mkdir(parents=True, exist_ok=True)
            (write_frames_binary if args.format == "binary" else write_frames_csv)(frames, target)
        rows = [{"shot": i, **{f"site{k}": int(v) for k, v in enumerate(o)}} for i, o in enumerate(occ)]
        out.add("occupancy.csv", _csv_text(rows))
        out.finish(f"{len(frames)} frames on a {cfg.pixel_grid[0]}x{cfg.pixel_grid[1]} grid")
        return
    model = _signal_model(args)
    cam = CameraConfig(read_noise_sigma=args.read_noise, exposure=args.exposure)
    counts = sample_readout(args.truth, model, cam, rng, size=args.n, mode=args.mode)
    out.add("samples.csv", _csv_text([{"count": float(c)} for c in counts]))
    out.finish(f"{args.n} {args.truth} samples, mean {counts.mean():.4f}, std {counts.std(ddof=1):.4f}")


def _read_counts(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "count" not in rows[0]:
        raise ValueError(f"{path}: expected a CSV with a 'count' column")
    return np.array([float(r["count"]) for r in rows])


def cmd_fit(args, out: Output):
    from .inference import fit_loss_model

    samples = _read_counts(args.input)
    res = fit_loss_model(samples, _signal_model(args, alpha=0.0), alpha_max=args.alpha_max, method=args.method)
    result = {"alpha_hat": res.alpha_hat, "standard_error": res.standard_error, "n_samples": res.n_samples,
              "neg_log_likelihood": res.neg_log_likelihood, "chi_square": res.chi_square, "dof": res.dof,
              "method": res.method, "fixed": res.fixed}
    out.add("fit.json", _json_text(result))
    out.finish(f"alpha {res.alpha_hat:.6g} +- {res.standard_error:.3g} per ms ({res.n_samples} samples)")


def cmd_roi(args, out: Output):
    from .camera import DEFAULT_SITE_CENTERS, default_camera, read_frames_binary, read_frames_csv
    from .roi import ica_decompose, loading_stack, select_roi, write_component_csv, write_roi_json

    sites = None
    if args.input:
        path = Path(args.input)
        frames = read_frames_binary(path) if path.suffix == ".bin" else read_frames_csv(path)
    else:
        cfg = default_camera()
        frames, _ = loading_stack(args.synthetic, cfg, load_probability=args.load_probability,
                                  site_signal=args.site_signal, rng=args.seed, noise=not args.noiseless)
        sites = [tuple(c) for c in DEFAULT_SITE_CENTERS]
    cm = ica_decompose(frames, args.sites, site_positions=sites)
    sel = select_roi(cm, args.pixels)
    rows = [{"site": k, "enclosed": float(sel.enclosed[k]),
             "pixels": " ".join(f"{r}:{c}" for r, c in sel.pixels[k])} for k in range(len(sel.pixels))]
    out.add("roi_summary.csv", _csv_text(rows))
    if args.outdir is not None:
        Path(args.outdir).mkdir(parents=True, exist_ok=True)
        write_component_csv(cm, Path(args.outdir) / "components.csv")
        write_roi_json(sel, Path(args.outdir) / "roi.json")
    enclosed = " ".join(f"{100 * e:.1f}" for e in sel.enclosed)
    out.finish(f"enclosed (%): {enclosed}; neighbour crosstalk {100 * sel.neighbour_crosstalk:.2f}%")


def _protocol_config(args, out: Output):
    from .experiment import load_config

    cfg = load_config(args.config)
    if args.shots is not None:
        cfg = cfg.with_(n_shots=args.shots)
    out.config = cfg.to_dict()
    return cfg


def cmd_protocol(args, out: Output):
    from .experiment import VARIANTS, _rows_to_csv, run_protocol
    from dataclasses import asdict

    cfg = _protocol_config(args, out)
    labels = [v.label for v in VARIANTS] if args.variant == "all" else [args.variant]
    rows = []
    for label in labels:
        rows.extend({"variant": label, **asdict(r)} for r in run_protocol(cfg, label, seed=args.seed,
                                                                           threads=args.threads))
    out.add("records.csv", _rows_to_csv(rows))
    out.finish(f"{len(rows)} records over {len(labels)} variant(s) and {cfg.n_sites} sites")


def cmd_tables(args, out: Output):
    from .experiment import histogram_rows, _rows_to_csv, reproduce_tables

    cfg = _protocol_config(args, out)
    tables = reproduce_tables(cfg, seed=args.seed, threads=args.threads)
    out.add("tables.csv", tables.tables_csv())
    out.add("tables.txt", tables.format())
    out.add("final_state.csv", tables.final_state_csv())
    out.add("histograms.csv", _rows_to_csv(histogram_rows(tables.records)))
    out.add("summary.json", _json_text({"seed": args.seed, "n_shots": cfg.n_shots, **tables.summary}))
    out.finish(tables.format())


def _add_probe_args(p, delta_default="-0.5gamma"):
    p.add_argument("--s0", type=float, default=1.0, help="saturation parameter")
    p.add_argument("--delta", type=detuning, default=detuning(delta_default),
                   help="detuning with unit suffix: gamma or MHz (e.g. -0.5gamma, -3MHz)")
    p.add_argument("--purity", type=float, default=1600 / 1601, help="sigma+ intensity fraction")
    p.add_argument("--contrast", type=float, default=None, help="I+/I- ratio (overrides --purity)")
    p.add_argument("--theta-deg", type=float, default=0.0, help="beam to quantization axis angle")


def _add_model_args(p, with_alpha=True):
    p.add_argument("--gamma-b", type=float, default=25.0, help="bright signal rate, pe/ms")
    p.add_argument("--background-rate", type=float, default=29.0, help="background rate, pe/ms")
    p.add_argument("--cic", type=float, default=0.5, help="clock-induced charge per ROI sum")
    p.add_argument("--sigma-b", type=float, default=20.0)
    p.add_argument("--sigma-d", type=float, default=14.0)
    p.add_argument("--exposure", type=float, default=6.0, help="ms")
    if with_alpha:
        p.add_argument("--alpha", type=float, default=0.0, help="loss rate, 1/ms")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads (never changes results)")
    common.add_argument("--outdir", default=None, help="write outputs and a manifest here")

    parser = argparse.ArgumentParser(prog="atomreadout", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")

    p = sub.add_parser("rates", parents=[common], help="photons per depumping event")
    _add_probe_args(p)
    p.add_argument("--unpolarized", action="store_true", help="isotropic light")
    p.add_argument("--method", choices=["auto", "closed", "channel"], default="auto")
    p.set_defaults(func=cmd_rates)

    p = sub.add_parser("sweep", parents=[common], help="depumping figure-of-merit sweeps")
    _add_probe_args(p)
    p.add_argument("--kind", choices=["detuning", "intensity", "contrast"], required=True)
    p.add_argument("--values", required=True, help="comma-separated values (detunings need units)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pump", parents=[common], help="transient depumping Monte Carlo")
    _add_probe_args(p, delta_default="-3MHz")
    p.add_argument("--bias", type=float, default=20.0, help="bias field, G")
    p.add_argument("--trials", type=int, default=10_000)
    p.set_defaults(func=cmd_pump)

    p = sub.add_parser("fields", parents=[common], help="fictitious-field precession bounds")
    p.add_argument("--x", type=float, default=1.5e-4, help="fictitious to bias field ratio")
    p.add_argument("--alpha-deg", type=float, default=60.0)
    p.add_argument("--projections", type=float, default=7500.0, help="chopping cycles per readout")
    p.add_argument("--x-min", type=float, default=1e-5)
    p.add_argument("--x-max", type=float, default=1.0)
    p.add_argument("--n-x", type=int, default=20)
    p.add_argument("--n-alpha", type=int, default=20)
    p.set_defaults(func=cmd_fields)

    p = sub.add_parser("camera-sim", parents=[common], help="sample ROI counts or pixel frames")
    _add_model_args(p)
    p.add_argument("--truth", choices=["bright", "dark", "absent"], default="bright")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--mode", choices=["poisson", "gaussian"], default="poisson")
    p.add_argument("--read-noise", type=float, default=math.sqrt(22.0), help="per ROI sum, pe")
    p.add_argument("--frames", type=int, default=0, help="simulate this many 5-site frames instead")
    p.add_argument("--format", choices=["csv", "binary"], default="csv")
    p.add_argument("--load-probability", type=float, default=0.5)
    p.add_argument("--site-signal", type=float, default=150.0)
    p.set_defaults(func=cmd_camera_sim)

    p = sub.add_parser("fit", parents=[common], help="maximum-likelihood loss-rate fit")
    _add_model_args(p, with_alpha=False)
    p.add_argument("--input", required=True, help="CSV with a 'count' column")
    p.add_argument("--method", choices=["unbinned", "binned"], default="unbinned")
    p.add_argument("--alpha-max", type=float, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("roi", parents=[common], help="ICA site maps and ROI selection")
    p.add_argument("--input", default=None, help="frames file (.csv or .bin)")
    p.add_argument("--synthetic", type=int, default=3000, help="frames to simulate when no input is given")
    p.add_argument("--sites", type=int, default=5)
    p.add_argument("--pixels", type=int, default=5)
    p.add_argument("--load-probability", type=float, default=0.25)
    p.add_argument("--site-signal", type=float, default=1000.0)
    p.add_argument("--noiseless", action="store_true")
    p.set_defaults(func=cmd_roi)

    for name, func, text in (("protocol", cmd_protocol, "three-readout protocol records"),
                             ("tables", cmd_tables, "detection and final-state tables")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--config", default="paper_defaults", help="bundled name or TOML/JSON path")
        p.add_argument("--shots", type=int, default=None, help="shots per site and variant")
        if name == "protocol":
            p.add_argument("--variant", choices=["all", "B-off", "B-on", "D-off", "D-on"], default="all")
        p.set_defaults(func=func)
    return parser


_VALUE_OPTIONS = ("--delta", "--values")


def _join_signed_values(argv):
    """argparse takes '-0.5gamma' for a flag; glue such values to their option."""
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        if tok in _VALUE_OPTIONS and i + 1 < len(argv) and re.match(r"^-[\d.]", argv[i + 1]):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def _error(kind, message, code, keys=None):
    payload = {"error": kind, "message": message}
    if keys is not None:
        payload["keys"] = keys
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def dispatch(argv) -> int:
    from .experiment import ConfigError

    argv = list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(_join_signed_values(argv))
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        return _error("usage", "--threads must be at least 1", EXIT_USAGE)
    args.argv = argv
    try:
        args.func(args, Output(args))
    except ConfigError as exc:
        return _error("config", str(exc), EXIT_CONFIG, exc.keys)
    except Exception as exc:  # reported as JSON rather than a traceback
        return _error(type(exc).__name__, str(exc), EXIT_FAILURE)
    return EXIT_OK


def main(argv=None) -> int:
    code = dispatch(sys.argv[1:] if argv is None else argv)
    if argv is None:
        sys.exit(code)
    return code
