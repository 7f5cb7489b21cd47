"""
gyro_simulation.py
------------------

Monte-Carlo study of the calibration accuracy for a system of four gyroscope
triads (12 single-axis gyroscopes) on a rotary table turning at a known rate.

One trial:
  1) draw the true sensitivity matrix: a_model columns plus independent
     Gaussian vectors with per-component std-dev axis_sigma
  2) draw n positions: measured vectors uniform on the sphere of radius c
  3) simulate averaged readings a^T v + noise, optionally through the
     two-phase bias-removal protocol:
         m' = a^T v + bias + noise_rot      (table rotating)
         b' = bias + noise_static           (table at rest)
         m  = m' - b'
  4) calibrate and compute the canonical-form calibration error

Reproducibility:
  trial t draws every random quantity from generators spawned from
  SeedSequence([seed, t]), so outcomes do not depend on execution order or on
  the number of worker processes.

Statistics follow the boxplot convention: median, quartiles (inclusive linear
interpolation), IQR, Tukey whiskers at 1.5 IQR, failure count.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy import stats
from tqdm import tqdm

from calibration_alignment import calibration_error, procrustes_distance
from calibration_errors import (
    AllTrialsFailed,
    CalibrationError,
    ConfigError,
    DegenerateDraw,
    DegenerateFit,
    InfeasibleDesign,
    NonPositiveInput,
    ShapeMismatch,
)
from sensor_calibration import (
    CalibrationOptions,
    CalibrationProblem,
    ReadingsMatrix,
    calibrate,
    feasibility,
)

logger = logging.getLogger(__name__)


# -------- study defaults --------
AXIS_SIGMA = 0.01
NOISE_SIGMA = 1e-3
POSITIONS = 20
TRIALS = 1000
SEED = 42
BIAS_RANGE = 0.05
MIN_DRAW_NORM = 1e-12
MAX_REDRAWS = 100
SWEEP_AXES = ("positions", "noise_sigma", "axis_sigma")
# --------------------------------

STATUS_SUCCESS = "success"


def a_model() -> np.ndarray:
    """Sensitivity vectors of the four nominally orthonormal triads (3 x 12)."""
    return np.array(
        [
            [1, 0, 0, 0, 1, 0, 0, -1, 0, 1, 0, 0],
            [0, 1, 0, -1, 0, 0, 1, 0, 0, 0, 0, -1],
            [0, 0, 1, 0, 0, 1, 0, 0, 1, 0, 1, 0],
        ],
        dtype=float,
    )


# ----------------------------------------------------------------------
# Configuration and records
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SimulationConfig:
    dim: int = 3
    model: np.ndarray = field(default_factory=a_model)
    axis_sigma: float = AXIS_SIGMA
    noise_sigma: float = NOISE_SIGMA
    magnitude: float = 1.0
    positions: int = POSITIONS
    trials: int = TRIALS
    seed: int = SEED
    bias_protocol: bool = False
    bias_range: float = BIAS_RANGE
    static_noise_sigma: Optional[float] = None   # None: same as noise_sigma
    fixed_system: bool = False
    magnitude_jitter: float = 0.0                # relative std-dev of ||v_j|| around c
    options: CalibrationOptions = field(default_factory=CalibrationOptions)

    @property
    def sensors(self) -> int:
        return int(np.asarray(self.model).shape[1])

    @property
    def effective_static_noise_sigma(self) -> float:
        return self.noise_sigma if self.static_noise_sigma is None else self.static_noise_sigma

    def validate(self) -> "SimulationConfig":
        model = np.asarray(self.model, dtype=float)
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if model.ndim != 2 or model.shape[0] != self.dim:
            raise ConfigError(f"model must be a {self.dim} x m matrix, got shape {model.shape}")
        if not np.all(np.isfinite(model)):
            raise ConfigError("model contains non-finite entries")
        for name in ("axis_sigma", "noise_sigma", "bias_range", "magnitude_jitter"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0.0):
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")
        if self.static_noise_sigma is not None and not self.static_noise_sigma >= 0.0:
            raise ConfigError(f"static_noise_sigma must be >= 0, got {self.static_noise_sigma}")
        if not (np.isfinite(self.magnitude) and self.magnitude > 0.0):
            raise ConfigError(f"magnitude must be > 0, got {self.magnitude}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if self.positions < 1:
            raise ConfigError(f"positions must be >= 1, got {self.positions}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        return self

    def as_dict(self) -> Dict[str, object]:
        """Flat, serializable view (model as nested lists, options expanded)."""
        out = asdict(self)
        out["model"] = np.asarray(self.model, dtype=float).tolist()
        out["options"] = asdict(self.options)
        return out


@dataclass(frozen=True)
class TrialOutcome:
    trial_index: int
    epsilon: float
    fit_residual: float
    status: str = STATUS_SUCCESS
    procrustes_distance: float = math.nan   # diagnostic only, <= epsilon

    @property
    def succeeded(self) -> bool:
        return self.status == STATUS_SUCCESS


@dataclass(frozen=True)
class ErrorStats:
    median: float
    q1: float
    q3: float
    iqr: float
    mean: float
    failure_count: int
    count: int
    minimum: float
    maximum: float
    whisker_low: float
    whisker_high: float
    outlier_count: int


class PowerLawFit(NamedTuple):
    exponent: float
    prefactor: float
    r_squared: float


@dataclass(frozen=True)
class SweepPoint:
    value: float
    stats: ErrorStats


class TrialStreams(NamedTuple):
    axes: np.random.Generator
    positions: np.random.Generator
    noise: np.random.Generator
    bias: np.random.Generator


def make_trial_streams(seed: int, trial_index: int, fixed_system: bool = False) -> TrialStreams:
    """
    Independent generators for one trial:

      SeedSequence([seed, trial])
        ├── axes        (replaced by SeedSequence([seed]) when the system is fixed)
        ├── positions
        ├── noise
        └── bias
    """
    root = np.random.SeedSequence([seed, trial_index])
    ss_axes, ss_positions, ss_noise, ss_bias = root.spawn(4)
    if fixed_system:
        ss_axes = np.random.SeedSequence([seed])
    return TrialStreams(
        axes=np.random.default_rng(ss_axes),
        positions=np.random.default_rng(ss_positions),
        noise=np.random.default_rng(ss_noise),
        bias=np.random.default_rng(ss_bias),
    )


# ----------------------------------------------------------------------
# Draws
# ----------------------------------------------------------------------

def perturb_axes(template: np.ndarray, axis_sigma: float, rng: np.random.Generator) -> np.ndarray:
    template = np.asarray(template, dtype=float)
    if axis_sigma < 0.0:
        raise ConfigError(f"axis_sigma must be >= 0, got {axis_sigma}")
    return template + rng.normal(0.0, axis_sigma, size=template.shape)


def random_positions(
    n: int,
    c: float,
    d: int,
    rng: np.random.Generator,
    magnitude_jitter: float = 0.0,
) -> np.ndarray:
    """n measured vectors (d x n), uniform on the sphere of radius c."""
    if n < 1 or d < 1:
        raise ConfigError(f"n and d must be >= 1, got n = {n}, d = {d}")
    if not c > 0.0:
        raise ConfigError(f"magnitude must be > 0, got {c}")

    draws = rng.standard_normal((d, n))
    norms = np.linalg.norm(draws, axis=0)
    for j in np.flatnonzero(norms < MIN_DRAW_NORM):
        for _ in range(MAX_REDRAWS):
            draws[:, j] = rng.standard_normal(d)
            norms[j] = np.linalg.norm(draws[:, j])
            if norms[j] >= MIN_DRAW_NORM:
                break
        else:
            raise DegenerateDraw(f"Position {j + 1}: {MAX_REDRAWS} Gaussian redraws all had norm < {MIN_DRAW_NORM}")

    lengths = np.full(n, float(c))
    if magnitude_jitter > 0.0:
        lengths = lengths * np.abs(1.0 + magnitude_jitter * rng.standard_normal(n))
    return draws / norms * lengths


def simulate_readings(
    a: np.ndarray, v: np.ndarray, noise_sigma: float, rng: np.random.Generator
) -> ReadingsMatrix:
    a = np.asarray(a, dtype=float)
    v = np.asarray(v, dtype=float)
    if a.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"a {a.shape} and v {v.shape} do not share the dimension d")
    clean = a.T @ v
    return ReadingsMatrix(clean + rng.normal(0.0, noise_sigma, size=clean.shape))


def simulate_bias_protocol(
    a: np.ndarray,
    v: np.ndarray,
    biases: np.ndarray,
    noise_sigma: float,
    static_noise_sigma: float,
    rng: np.random.Generator,
) -> ReadingsMatrix:
    """Rotating-minus-static readings; the per-sensor bias cancels exactly."""
    a = np.asarray(a, dtype=float)
    v = np.asarray(v, dtype=float)
    biases = np.asarray(biases, dtype=float)
    if a.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"a {a.shape} and v {v.shape} do not share the dimension d")
    if biases.shape != (a.shape[1],):
        raise ShapeMismatch(f"Expected {a.shape[1]} biases, got shape {biases.shape}")

    clean = a.T @ v
    rotating_offset = biases[:, None] + rng.normal(0.0, noise_sigma, size=clean.shape)
    static_offset = biases[:, None] + rng.normal(0.0, static_noise_sigma, size=clean.shape)
    # offsets are differenced before adding the signal: bias - bias is exactly 0
    return ReadingsMatrix(clean + (rotating_offset - static_offset))


# ----------------------------------------------------------------------
# Monte Carlo
# ----------------------------------------------------------------------

def run_trial(config: SimulationConfig, trial_index: int) -> TrialOutcome:
    streams = make_trial_streams(config.seed, trial_index, config.fixed_system)

    try:
        a_true = perturb_axes(config.model, config.axis_sigma, streams.axes)
        v = random_positions(
            config.positions, config.magnitude, config.dim, streams.positions, config.magnitude_jitter
        )
        if config.bias_protocol:
            biases = streams.bias.uniform(-config.bias_range, config.bias_range, size=config.sensors)
            readings = simulate_bias_protocol(
                a_true, v, biases, config.noise_sigma, config.effective_static_noise_sigma, streams.noise
            )
        else:
            readings = simulate_readings(a_true, v, config.noise_sigma, streams.noise)

        problem = CalibrationProblem(readings, dim=config.dim, magnitude=config.magnitude)
        result = calibrate(problem, config.options)
        eps = calibration_error(a_true, result.a_hat)
        distance = procrustes_distance(a_true, result.a_hat)
    except (CalibrationError, np.linalg.LinAlgError) as exc:
        logger.debug("Trial %d failed: %s", trial_index, exc)
        return TrialOutcome(trial_index, float("nan"), float("nan"), type(exc).__name__)

    return TrialOutcome(trial_index, eps, result.fit_residual, procrustes_distance=distance)


def _check_runnable(config: SimulationConfig) -> None:
    config.validate()
    report = feasibility(config.positions, config.sensors, config.dim)
    if not report:
        reasons = "; ".join(report.failures)
        if not config.options.force:
            raise InfeasibleDesign(f"Simulated design is infeasible: {reasons}", report=report)
        logger.warning("Simulating an infeasible design (forced): %s", reasons)


def run_monte_carlo(
    config: SimulationConfig,
    workers: int = 1,
    progress: bool = False,
) -> List[TrialOutcome]:
    _check_runnable(config)

    indices = range(config.trials)
    bar = tqdm(total=config.trials, desc="trials", unit="trial", disable=not progress, leave=False)
    outcomes: List[TrialOutcome] = []
    try:
        if workers > 1:
            chunk = max(1, config.trials // (8 * workers))
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for outcome in pool.map(partial(run_trial, config), indices, chunksize=chunk):
                    outcomes.append(outcome)
                    bar.update()
        else:
            for t in indices:
                outcomes.append(run_trial(config, t))
                bar.update()
    finally:
        bar.close()

    outcomes.sort(key=lambda o: o.trial_index)
    failed = sum(1 for o in outcomes if not o.succeeded)
    if failed:
        logger.warning("%d of %d trials failed", failed, len(outcomes))
    return outcomes


def summarize(outcomes: Iterable[TrialOutcome]) -> ErrorStats:
    ordered = sorted(outcomes, key=lambda o: o.trial_index)
    eps = np.array([o.epsilon for o in ordered if o.succeeded], dtype=float)
    failures = sum(1 for o in ordered if not o.succeeded)
    if eps.size == 0:
        raise AllTrialsFailed(f"No successful trials to summarize ({failures} failed)")

    q1, median, q3 = np.quantile(eps, [0.25, 0.5, 0.75], method="linear")
    iqr = q3 - q1
    low_fence, high_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = eps[(eps >= low_fence) & (eps <= high_fence)]

    return ErrorStats(
        median=float(median),
        q1=float(q1),
        q3=float(q3),
        iqr=float(iqr),
        mean=float(np.mean(eps)),
        failure_count=failures,
        count=int(eps.size),
        minimum=float(np.min(eps)),
        maximum=float(np.max(eps)),
        whisker_low=float(np.min(inside)),
        whisker_high=float(np.max(inside)),
        outlier_count=int(eps.size - inside.size),
    )


def fit_power_law(xs: Sequence[float], ys: Sequence[float]) -> PowerLawFit:
    """Least-squares line through (log x, log y): y ~ prefactor * x**exponent."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeMismatch(f"xs and ys must be equal-length sequences, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise DegenerateFit(f"Need at least 2 points, got {x.size}")
    if np.any(~np.isfinite(x)) or np.any(~np.isfinite(y)) or np.any(x <= 0.0) or np.any(y <= 0.0):
        raise NonPositiveInput("Power-law fit needs finite, strictly positive xs and ys")
    if np.unique(x).size < 2:
        raise DegenerateFit("All xs are equal; the exponent is undefined")

    fit = stats.linregress(np.log(x), np.log(y))
    r_squared = float(fit.rvalue) ** 2 if np.isfinite(fit.rvalue) else 0.0
    return PowerLawFit(float(fit.slope), float(np.exp(fit.intercept)), r_squared)


def sweep_config(config: SimulationConfig, vary: str, value: float) -> SimulationConfig:
    if vary == "positions":
        if float(value) != int(value):
            raise ConfigError(f"positions must be integers, got {value}")
        return replace(config, positions=int(value))
    if vary in ("noise_sigma", "axis_sigma"):
        return replace(config, **{vary: float(value)})
    raise ConfigError(f"Cannot sweep {vary!r}; choose one of {', '.join(SWEEP_AXES)}")


def run_sweep(
    config: SimulationConfig,
    vary: str,
    values: Sequence[float],
    workers: int = 1,
    progress: bool = False,
) -> List[SweepPoint]:
    if len(values) < 2:
        raise ConfigError(f"A sweep needs at least 2 values, got {len(values)}")
    configs = [sweep_config(config, vary, v) for v in values]
    for cfg in configs:
        _check_runnable(cfg)

    points: List[SweepPoint] = []
    for value, cfg in zip(values, configs):
        outcomes = run_monte_carlo(cfg, workers=workers, progress=progress)
        point = SweepPoint(value=float(value), stats=summarize(outcomes))
        logger.info(
            "%s = %g: median %.4e, IQR %.4e, failures %d",
            vary, value, point.stats.median, point.stats.iqr, point.stats.failure_count,
        )
        points.append(point)
    return points


def fit_sweep(points: Sequence[SweepPoint], statistic: str = "median") -> PowerLawFit:
    xs = [p.value for p in points]
    ys = [getattr(p.stats, statistic) for p in points]
    return fit_power_law(xs, ys)
