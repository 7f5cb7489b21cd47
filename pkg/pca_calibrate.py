#!/usr/bin/env python3
"""
pca_calibrate.py
----------------

Command-line front end for the closed-form (PCA-aided) calibration of
multi-sensor systems and for the 12-gyroscope Monte-Carlo study.

Subcommands
-----------
calibrate      Calibrate from a readings CSV (rows = sensors, columns = positions).
               Writes a_hat.csv (d x m), v_hat.csv (d x n), diagnostics.csv.
check-design   Evaluate the counting bounds for m sensors, n positions, dimension d.
simulate       Run one Monte-Carlo scenario.
               Writes outcomes.csv, stats.csv, manifest.toml.
sweep          Repeat the scenario over a list of positions / noise-sigma /
               axis-sigma values and fit a power law to the medians and IQRs.
               Writes sweep.csv, sweep.xlsx, fit.txt, manifest.toml.

Common flags
------------
all subcommands:                 -v/--verbose, -q/--quiet
calibrate, simulate, sweep:      --output-dir, --config <file.toml>,
                                 --force/--no-force, --clamp-gram <floor>
simulate, sweep:                 --seed, --bias-protocol/--no-bias-protocol,
                                 --fixed-system/--no-fixed-system

Settings are resolved as: built-in defaults < --config file < flags.
A manifest.toml written by simulate/sweep can be passed back with --config to
reproduce a run byte-for-byte.

Usage
-----
    ./pca_calibrate.py calibrate readings.csv --dim 3 --magnitude 1.0 --output-dir out/
    ./pca_calibrate.py check-design --sensors 3 --positions 6 --dim 3
    ./pca_calibrate.py simulate --positions 20 --noise-sigma 1e-3 --trials 1000 --seed 42
    ./pca_calibrate.py sweep --vary noise-sigma --values 1e-4,3e-4,1e-3,3e-3,1e-2 --workers 4

Exit Status
-----------
0 success, 2 positions cannot determine the Gram matrix, 3 Gram matrix not
positive definite, 4 infeasible design, 5 unreadable readings file,
6 invalid configuration or arguments, 7 other numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from calibration_errors import (
    EXIT_INFEASIBLE,
    EXIT_NUMERICAL,
    EXIT_OK,
    CalibrationError,
    ConfigError,
    InfeasibleDesign,
    NonPositiveInput,
    exit_code_for,
)
from calibration_io import (
    CONFIG_KEYS,
    load_config_file,
    read_matrix_csv,
    read_readings_csv,
    write_diagnostics_csv,
    write_fit_txt,
    write_manifest,
    write_matrix_csv,
    write_outcomes_csv,
    write_stats_csv,
    write_sweep_csv,
    write_sweep_xlsx,
)
from gyro_simulation import (
    SWEEP_AXES,
    SimulationConfig,
    a_model,
    fit_sweep,
    run_monte_carlo,
    run_sweep,
    summarize,
)
from sensor_calibration import (
    RANK_TOL,
    SPD_FLOOR,
    CalibrationOptions,
    CalibrationProblem,
    __version__,
    calibrate,
    calibrate_noiseless,
    feasibility,
)

logger = logging.getLogger("pca_calibrate")

DEFAULTS: Dict[str, Any] = {
    "dim": 3,
    "model": None,
    "model_file": None,
    "axis_sigma": 0.01,
    "noise_sigma": 1e-3,
    "magnitude": None,
    "positions": 20,
    "trials": 1000,
    "seed": 42,
    "bias_protocol": False,
    "bias_range": 0.05,
    "static_noise_sigma": None,
    "fixed_system": False,
    "magnitude_jitter": 0.0,
    "rank_tol": RANK_TOL,
    "spd_floor": SPD_FLOOR,
    "clamp_gram": None,
    "force": False,
    "method": "svd",
    "output_dir": ".",
    "workers": 1,
    "vary": None,
    "values": None,
}

SCENARIO_KEYS = (
    "dim", "axis_sigma", "noise_sigma", "magnitude", "positions", "trials", "seed",
    "bias_protocol", "bias_range", "static_noise_sigma", "fixed_system",
    "magnitude_jitter", "rank_tol", "spd_floor", "clamp_gram", "force",
)


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors raise ConfigError so they share exit code 6."""

    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------
# Settings
# ----------------------------------------------------------------------

def resolve_settings(args: argparse.Namespace) -> Dict[str, Any]:
    settings = dict(DEFAULTS)
    if args.config is not None:
        settings.update(load_config_file(args.config))
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    # a model file given on the command line replaces a model matrix from the config file
    if getattr(args, "model_file", None) is not None:
        settings["model"] = None
    return settings


def calibration_options(settings: Dict[str, Any]) -> CalibrationOptions:
    return CalibrationOptions(
        rank_tol=float(settings["rank_tol"]),
        spd_floor=float(settings["spd_floor"]),
        clamp_floor=None if settings["clamp_gram"] is None else float(settings["clamp_gram"]),
        force=bool(settings["force"]),
    )


def simulation_config(settings: Dict[str, Any]) -> SimulationConfig:
    if settings["model_file"] is not None:
        model = read_matrix_csv(Path(settings["model_file"]))
    elif settings["model"] is not None:
        model = np.asarray(settings["model"], dtype=float)
    else:
        model = a_model()

    try:
        config = SimulationConfig(
            dim=int(settings["dim"]),
            model=model,
            axis_sigma=float(settings["axis_sigma"]),
            noise_sigma=float(settings["noise_sigma"]),
            magnitude=1.0 if settings["magnitude"] is None else float(settings["magnitude"]),
            positions=int(settings["positions"]),
            trials=int(settings["trials"]),
            seed=int(settings["seed"]),
            bias_protocol=bool(settings["bias_protocol"]),
            bias_range=float(settings["bias_range"]),
            static_noise_sigma=(
                None if settings["static_noise_sigma"] is None else float(settings["static_noise_sigma"])
            ),
            fixed_system=bool(settings["fixed_system"]),
            magnitude_jitter=float(settings["magnitude_jitter"]),
            options=calibration_options(settings),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid simulation setting: {e}")
    return config.validate()


def manifest_config(config: SimulationConfig, settings: Dict[str, Any]) -> Dict[str, Any]:
    """Fully resolved scenario, in config-file keys."""
    resolved = {key: settings[key] for key in SCENARIO_KEYS}
    resolved.update(
        dim=config.dim,
        axis_sigma=config.axis_sigma,
        noise_sigma=config.noise_sigma,
        magnitude=config.magnitude,
        positions=config.positions,
        trials=config.trials,
        seed=config.seed,
        bias_protocol=config.bias_protocol,
        bias_range=config.bias_range,
        fixed_system=config.fixed_system,
        magnitude_jitter=config.magnitude_jitter,
        model=np.asarray(config.model, dtype=float).tolist(),
    )
    return resolved


def output_dir(settings: Dict[str, Any]) -> Path:
    out = Path(settings["output_dir"]).expanduser()
    out.mkdir(parents=True, exist_ok=True)
    return out


def parse_values(tokens: Sequence[Any]) -> List[float]:
    values: List[float] = []
    for token in tokens:
        if isinstance(token, (int, float)):
            values.append(float(token))
            continue
        for part in str(token).split(","):
            part = part.strip()
            if not part:
                continue
            try:
                values.append(float(part))
            except ValueError:
                raise ConfigError(f"Sweep value {part!r} is not a number")
    return values


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------

def cmd_calibrate(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    rf = read_readings_csv(args.input)
    readings = rf.readings
    dim = int(settings["dim"])

    report = feasibility(readings.n, readings.m, dim)
    if not report:
        if not settings["force"]:
            print(report.describe(), file=sys.stderr)
            raise InfeasibleDesign("Calibration design is infeasible (use --force to try anyway)", report=report)
        logger.warning("Infeasible design, continuing because of --force")

    problem = CalibrationProblem(readings, dim=dim, magnitude=settings["magnitude"])
    options = calibration_options(settings)
    if settings["method"] == "exact":
        result = calibrate_noiseless(problem, options)
    elif settings["method"] == "svd":
        result = calibrate(problem, options)
    else:
        raise ConfigError(f"Unknown method {settings['method']!r}; choose svd or exact")

    out = output_dir(settings)
    a_path = write_matrix_csv(out / "a_hat.csv", result.a_hat, "sensor")
    v_path = write_matrix_csv(out / "v_hat.csv", result.v_hat, "position")
    d_path = write_diagnostics_csv(out / "diagnostics.csv", result, options.clamp_floor)

    print(f"Sensors: {readings.m}, positions: {readings.n}, dimension: {dim}")
    print(f"Fit residual:     {result.fit_residual:.6e}")
    print(f"Discarded energy: {result.discarded_energy:.6e}")
    print(f"Gram residual:    {result.gram.residual:.6e}")
    if result.scale_unresolved:
        print("WARNING: magnitude not given, c = 1 assumed: scale factors are relative only")
    print(f"Wrote: {a_path}")
    print(f"Wrote: {v_path}")
    print(f"Wrote: {d_path}")
    return EXIT_OK


def cmd_check_design(args: argparse.Namespace) -> int:
    report = feasibility(args.positions, args.sensors, args.dim)
    print(report.describe())
    return EXIT_OK if report else EXIT_INFEASIBLE


def cmd_simulate(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    config = simulation_config(settings)
    out = output_dir(settings)
    workers = int(settings["workers"])

    outcomes = run_monte_carlo(config, workers=workers, progress=not args.quiet)
    outcomes_path = write_outcomes_csv(out / "outcomes.csv", outcomes)
    manifest_path = write_manifest(
        out / "manifest.toml",
        manifest_config(config, settings),
        {"command": "simulate", "tool_version": __version__, "workers": workers},
    )
    stats = summarize(outcomes)
    stats_path = write_stats_csv(out / "stats.csv", stats)

    print(f"Trials:        {len(outcomes)}  (failed: {stats.failure_count})")
    print(f"Median error:  {stats.median:.6e}")
    print(f"IQR:           {stats.iqr:.6e}  [{stats.q1:.6e}, {stats.q3:.6e}]")
    print(f"Wrote: {outcomes_path}")
    print(f"Wrote: {stats_path}")
    print(f"Wrote: {manifest_path}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    if settings["vary"] is None:
        raise ConfigError(f"--vary is required ({', '.join(a.replace('_', '-') for a in SWEEP_AXES)})")
    vary = str(settings["vary"]).replace("-", "_")
    if vary not in SWEEP_AXES:
        raise ConfigError(
            f"Cannot sweep {settings['vary']!r}; choose one of {', '.join(a.replace('_', '-') for a in SWEEP_AXES)}"
        )
    values = parse_values(settings["values"] or [])
    if len(values) < 2:
        raise ConfigError(f"A sweep needs at least 2 values, got {len(values)}")

    config = simulation_config(settings)
    out = output_dir(settings)
    workers = int(settings["workers"])

    points = run_sweep(config, vary, values, workers=workers, progress=not args.quiet)

    sweep_path = write_sweep_csv(out / "sweep.csv", points, vary)
    xlsx_path = write_sweep_xlsx(out / "sweep.xlsx", points, vary)
    manifest = manifest_config(config, settings)
    manifest.update(vary=vary, values=values)
    manifest_path = write_manifest(
        out / "manifest.toml",
        manifest,
        {"command": "sweep", "tool_version": __version__, "workers": workers},
    )

    fits = {"median": fit_sweep(points, "median")}
    try:
        fits["iqr"] = fit_sweep(points, "iqr")
    except NonPositiveInput:
        logger.warning("IQR is zero for some sweep value; no IQR power law fitted")
    fit_path = write_fit_txt(out / "fit.txt", vary, fits)

    for p in points:
        print(f"{vary} = {p.value:<10g} median {p.stats.median:.4e}  IQR {p.stats.iqr:.4e}  failed {p.stats.failure_count}")
    median_fit = fits["median"]
    print(
        f"Median ~ {median_fit.prefactor:.4e} * {vary}^{median_fit.exponent:.4f}  "
        f"(r^2 = {median_fit.r_squared:.4f})"
    )
    for path in (sweep_path, xlsx_path, fit_path, manifest_path):
        print(f"Wrote: {path}")
    return EXIT_OK


# ----------------------------------------------------------------------
# CLI
# ----------------------------------------------------------------------

def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="Master seed (default: 42)")
    p.add_argument("--dim", type=int, default=None, help="Ambient dimension d (default: 3)")
    p.add_argument("--positions", type=int, default=None, help="Positions per trial n (default: 20)")
    p.add_argument("--noise-sigma", type=float, default=None, help="Reading noise std-dev (default: 1e-3)")
    p.add_argument("--axis-sigma", type=float, default=None, help="Axis perturbation std-dev (default: 0.01)")
    p.add_argument("--magnitude", type=float, default=None, help="Magnitude c of the measured vector (default: 1)")
    p.add_argument("--trials", type=int, default=None, help="Monte-Carlo trials (default: 1000)")
    p.add_argument("--bias-protocol", action=argparse.BooleanOptionalAction, default=None,
                   help="Simulate the rotating-minus-static bias removal (default: off)")
    p.add_argument("--bias-range", type=float, default=None,
                   help="Half-width of the uniform per-sensor bias (default: 0.05)")
    p.add_argument("--static-noise-sigma", type=float, default=None,
                   help="Noise std-dev of the static phase (default: same as --noise-sigma)")
    p.add_argument("--fixed-system", action=argparse.BooleanOptionalAction, default=None,
                   help="Use one perturbed system for all trials (default: off)")
    p.add_argument("--magnitude-jitter", type=float, default=None,
                   help="Relative std-dev of the measured vector length per position (default: 0)")
    p.add_argument("--model-file", type=Path, default=None,
                   help="CSV with a d x m sensitivity template (default: the 4-triad a_model)")
    p.add_argument("--workers", type=int, default=None, help="Worker processes for trials (default: 1)")
    p.add_argument("--rank-tol", type=float, default=None, help=argparse.SUPPRESS)
    p.add_argument("--spd-floor", type=float, default=None, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    verbosity = _ArgumentParser(add_help=False)
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings only, no progress bar")

    # shared by the subcommands that calibrate
    common = _ArgumentParser(add_help=False)
    common.add_argument("--output-dir", type=Path, default=None, help="Directory for output files (default: .)")
    common.add_argument("--config", type=Path, default=None, help="TOML config file or run manifest")
    common.add_argument("--force", action=argparse.BooleanOptionalAction, default=None,
                        help="Run even when the design violates the counting bounds (default: off)")
    common.add_argument("--clamp-gram", type=float, default=None, metavar="FLOOR",
                        help="Clamp Gram eigenvalues at FLOOR * lam_max instead of failing")

    parser = _ArgumentParser(
        description="Closed-form PCA-aided calibration of multi-sensor systems."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[verbosity, common], help="Calibrate from a readings CSV")
    p.add_argument("input", type=Path, help="Readings CSV: rows = sensors, columns = positions")
    p.add_argument("--dim", type=int, default=None, help="Ambient dimension d (default: 3)")
    p.add_argument("--magnitude", type=float, default=None,
                   help="Magnitude c of the measured vector (omit: c = 1, scale unresolved)")
    p.add_argument("--method", default=None, help="svd (default) or exact (noiseless readings only)")
    p.add_argument("--rank-tol", type=float, default=None, help=argparse.SUPPRESS)
    p.add_argument("--spd-floor", type=float, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("check-design", parents=[verbosity], help="Evaluate the counting bounds")
    p.add_argument("--sensors", type=int, required=True, help="Number of sensors m")
    p.add_argument("--positions", type=int, required=True, help="Number of positions n")
    p.add_argument("--dim", type=int, default=3, help="Ambient dimension d (default: 3)")
    p.set_defaults(func=cmd_check_design)

    p = sub.add_parser("simulate", parents=[verbosity, common], help="Run one Monte-Carlo scenario")
    _add_scenario_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", parents=[verbosity, common], help="Sweep one scenario parameter")
    _add_scenario_flags(p)
    p.add_argument("--vary", default=None, help="positions | noise-sigma | axis-sigma")
    p.add_argument("--values", nargs="+", default=None,
                   help="Swept values, comma- or space-separated (at least 2)")
    p.set_defaults(func=cmd_sweep)

    return parser


def configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s: %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args)
        return args.func(args)
    except CalibrationError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except (ValueError, np.linalg.LinAlgError) as exc:
        # numerical failure raised by numpy/scipy rather than this package
        print(f"ERROR: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
