"""
calibration_io.py
-----------------

File formats used by pca_calibrate.py.

Readings CSV
------------
    rows    = sensors (m)
    columns = positions (n)
    delimiter comma, decimal point, UTF-8

An optional single header row of position labels is recognised when none of
its cells parses as a number (numeric labels such as "1,2,3" are read as data).
Every remaining cell must parse as a finite real, and rows must all have the
same length.

Matrix CSV (a_hat.csv, v_hat.csv)
---------------------------------
One header row of column labels (sensor_1.., position_1..), then one row per
axis component. Values are written with 17 significant digits so that
re-reading reproduces every double exactly. LF line endings.

Config file / manifest (TOML)
-----------------------------
Flat keys mirroring the CLI flags with dashes replaced by underscores, e.g.

    positions = 20
    noise_sigma = 0.001
    bias_protocol = true
    clamp_gram = 1e-6

A run manifest (manifest.toml) carries the fully resolved configuration in the
same keys plus a [run] table (command, tool version, sweep axis); it can be
passed back through --config to replay a run.

Sweep report (sweep.xlsx)
-------------------------
One row per swept value with the error statistics; rows are coloured
green if every trial succeeded and red otherwise.
"""

from __future__ import annotations

import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import tomli_w
from openpyxl import Workbook
from openpyxl.styles import Font, PatternFill
from openpyxl.utils import get_column_letter

from calibration_errors import ConfigError, ReadingsParseError
from gyro_simulation import ErrorStats, PowerLawFit, SweepPoint, TrialOutcome
from sensor_calibration import CalibrationResult, ReadingsMatrix

FLOAT_FORMAT = "%.17g"
LINE_END = "\n"

CONFIG_KEYS = {
    # simulation scenario
    "dim", "model", "model_file", "axis_sigma", "noise_sigma", "magnitude",
    "positions", "trials", "seed", "bias_protocol", "bias_range",
    "static_noise_sigma", "fixed_system", "magnitude_jitter",
    # calibration options
    "rank_tol", "spd_floor", "clamp_gram", "force", "method",
    # orchestration
    "output_dir", "workers", "vary", "values",
}
RUN_TABLE = "run"


# ----------------------------------------------------------------------
# Readings CSV
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReadingsFile:
    path: Path
    readings: ReadingsMatrix
    position_labels: Optional[Tuple[str, ...]] = None


def _parse_cell(cell: object) -> float:
    """Cell text -> float; NaN for anything that is not a number."""
    if not isinstance(cell, str):
        return math.nan
    try:
        return float(cell.strip())
    except ValueError:
        return math.nan


def _is_number(cell: object) -> bool:
    return not math.isnan(_parse_cell(cell))


def read_readings_csv(path: Path) -> ReadingsFile:
    path = Path(path)
    try:
        raw = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise ReadingsParseError(f"Readings file not found: {path}")
    except pd.errors.EmptyDataError:
        raise ReadingsParseError(f"Readings file is empty: {path}")
    except pd.errors.ParserError as e:
        raise ReadingsParseError(f"Readings file is not rectangular: {path} ({e})")
    except UnicodeDecodeError as e:
        raise ReadingsParseError(f"Readings file is not valid UTF-8: {path} ({e})")

    labels: Optional[Tuple[str, ...]] = None
    first_data_row = 1
    first = raw.iloc[0].tolist()
    if not any(_is_number(c) for c in first):
        labels = tuple(str(c).strip() for c in first)
        raw = raw.iloc[1:]
        first_data_row = 2
    if raw.empty:
        raise ReadingsParseError(f"Readings file has a header but no data rows: {path}")

    values = np.array([[_parse_cell(c) for c in row] for row in raw.to_numpy(dtype=object)], dtype=float)
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        i, j = (int(x) for x in bad[0])
        cell = raw.iat[i, j]
        shown = "<missing>" if not isinstance(cell, str) or not cell.strip() else repr(cell)
        raise ReadingsParseError(
            f"{path}: line {i + first_data_row}, column {j + 1}: {shown} is not a finite number",
            row=i + first_data_row,
            column=j + 1,
        )

    return ReadingsFile(path=path, readings=ReadingsMatrix(values), position_labels=labels)


# ----------------------------------------------------------------------
# Matrix / table CSV output
# ----------------------------------------------------------------------

def write_matrix_csv(path: Path, matrix: np.ndarray, column_prefix: str) -> Path:
    matrix = np.asarray(matrix, dtype=float)
    columns = [f"{column_prefix}_{j + 1}" for j in range(matrix.shape[1])]
    pd.DataFrame(matrix, columns=columns).to_csv(
        path, index=False, float_format=FLOAT_FORMAT, lineterminator=LINE_END, encoding="utf-8"
    )
    return Path(path)


def read_matrix_csv(path: Path) -> np.ndarray:
    return read_readings_csv(path).readings.values


def _write_frame(df: pd.DataFrame, path: Path) -> Path:
    df.to_csv(
        path, index=False, float_format=FLOAT_FORMAT, lineterminator=LINE_END,
        encoding="utf-8", na_rep="",
    )
    return Path(path)


def diagnostics_frame(result: CalibrationResult, clamp_gram: Optional[float] = None) -> pd.DataFrame:
    """Long table: quantity, index, value."""
    rows: List[Dict[str, object]] = []

    def add(quantity: str, value: object, index: object = "") -> None:
        rows.append({"quantity": quantity, "index": index, "value": value})

    add("method", result.method)
    add("magnitude", result.magnitude)
    add("scale_unresolved", result.scale_unresolved)
    if result.factors is not None:
        for k, s in enumerate(result.factors.singular_values, start=1):
            add("singular_value", float(s), k)
    for k, lam in enumerate(result.gram.eigenvalues, start=1):
        add("gram_eigenvalue", float(lam), k)
    add("gram_residual", result.gram.residual)
    add("gram_ill_conditioned", result.gram.ill_conditioned)
    add("gram_clamped", result.gram.clamped)
    add("clamp_gram", "" if clamp_gram is None else clamp_gram)
    add("fit_residual", result.fit_residual)
    add("discarded_energy", result.discarded_energy)
    # hypot: no overflow for readings near the float range
    for i, norm in enumerate(np.hypot.reduce(result.a_hat, axis=0), start=1):
        add("scale_factor", float(norm), i)
    return pd.DataFrame(rows, columns=["quantity", "index", "value"])


def _format_cell(value: object) -> object:
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % value
    return value


def write_diagnostics_csv(path: Path, result: CalibrationResult, clamp_gram: Optional[float] = None) -> Path:
    df = diagnostics_frame(result, clamp_gram)
    # mixed-type value column: format floats here, to_csv's float_format skips object columns
    df["value"] = df["value"].map(_format_cell)
    return _write_frame(df, path)


def outcomes_frame(outcomes: Sequence[TrialOutcome]) -> pd.DataFrame:
    return pd.DataFrame(
        [asdict(o) for o in outcomes],
        columns=["trial_index", "epsilon", "procrustes_distance", "fit_residual", "status"],
    )


def write_outcomes_csv(path: Path, outcomes: Sequence[TrialOutcome]) -> Path:
    return _write_frame(outcomes_frame(outcomes), path)


def write_stats_csv(path: Path, stats: ErrorStats) -> Path:
    return _write_frame(pd.DataFrame([asdict(stats)]), path)


def sweep_frame(points: Sequence[SweepPoint], vary: str) -> pd.DataFrame:
    return pd.DataFrame([{vary: p.value, **asdict(p.stats)} for p in points])


def write_sweep_csv(path: Path, points: Sequence[SweepPoint], vary: str) -> Path:
    return _write_frame(sweep_frame(points, vary), path)


def write_fit_txt(path: Path, vary: str, fits: Mapping[str, PowerLawFit]) -> Path:
    lines = [f"# power law fitted over log({vary}) vs log(statistic)"]
    for statistic, fit in fits.items():
        lines += [
            f"[{statistic}]",
            f"exponent = {fit.exponent:.17g}",
            f"prefactor = {fit.prefactor:.17g}",
            f"r_squared = {fit.r_squared:.17g}",
        ]
    Path(path).write_text(LINE_END.join(lines) + LINE_END, encoding="utf-8")
    return Path(path)


# ----------------------------------------------------------------------
# Config file / manifest
# ----------------------------------------------------------------------

def load_config_file(path: Path) -> Dict[str, Any]:
    path = Path(path)
    try:
        with path.open("rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Config file is not valid TOML: {path} ({e})")

    data.pop(RUN_TABLE, None)
    unknown = sorted(set(data) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"Unknown key(s) in {path}: {', '.join(unknown)}")
    return data


def _toml_ready(value: Any) -> Any:
    """numpy scalars/arrays and paths -> plain types tomli_w can write."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (list, tuple)):
        return [_toml_ready(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def write_manifest(path: Path, config: Mapping[str, Any], run: Mapping[str, Any]) -> Path:
    """Resolved config as flat keys plus a [run] table; None values are left out."""
    doc: Dict[str, Any] = {k: _toml_ready(v) for k, v in sorted(config.items()) if v is not None}
    doc[RUN_TABLE] = {k: _toml_ready(v) for k, v in sorted(run.items()) if v is not None}
    try:
        with Path(path).open("wb") as f:
            tomli_w.dump(doc, f)
    except TypeError as e:
        raise ConfigError(f"Cannot write manifest {path}: {e}")
    return Path(path)


# ----------------------------------------------------------------------
# XLSX sweep report
# ----------------------------------------------------------------------

_GREEN_FILL = PatternFill(start_color="C6EFCE", end_color="C6EFCE", fill_type="solid")
_RED_FILL = PatternFill(start_color="FFC7CE", end_color="FFC7CE", fill_type="solid")
_HEADER_FILL = PatternFill(start_color="D9E1F2", end_color="D9E1F2", fill_type="solid")

SCI_FORMAT = "0.000E+00"

# (header, ErrorStats field, number format); None = integer count
_SWEEP_COLUMNS = [
    ("median", "median", SCI_FORMAT),
    ("q1", "q1", SCI_FORMAT),
    ("q3", "q3", SCI_FORMAT),
    ("iqr", "iqr", SCI_FORMAT),
    ("mean", "mean", SCI_FORMAT),
    ("whisker_low", "whisker_low", SCI_FORMAT),
    ("whisker_high", "whisker_high", SCI_FORMAT),
    ("minimum", "minimum", SCI_FORMAT),
    ("maximum", "maximum", SCI_FORMAT),
    ("count", "count", None),
    ("failure_count", "failure_count", None),
    ("outlier_count", "outlier_count", None),
]


def write_sweep_xlsx(path: Path, points: Sequence[SweepPoint], vary: str) -> Path:
    """
    One row per swept value. The row is green when every trial succeeded and
    red when some failed; the failed-trial count sits in its own column.
    """
    wb = Workbook()
    ws = wb.active
    ws.title = "Sweep"

    ws.append([vary] + [header for header, _, _ in _SWEEP_COLUMNS])
    for cell in ws[1]:
        cell.font = Font(bold=True)
        cell.fill = _HEADER_FILL

    # positions are integers, the sigmas span decades
    value_format = "0" if vary == "positions" else SCI_FORMAT
    for point in points:
        stats = point.stats
        ws.append([point.value] + [getattr(stats, name) for _, name, _ in _SWEEP_COLUMNS])
        fill = _GREEN_FILL if stats.failure_count == 0 else _RED_FILL
        row = ws[ws.max_row]
        row[0].number_format = value_format
        for cell, (_, _, fmt) in zip(row[1:], _SWEEP_COLUMNS):
            if fmt is not None:
                cell.number_format = fmt
        for cell in row:
            cell.fill = fill

    for i, (header, _, fmt) in enumerate([(vary, None, value_format)] + _SWEEP_COLUMNS, start=1):
        ws.column_dimensions[get_column_letter(i)].width = max(len(header), 11 if fmt else 6) + 2
    ws.freeze_panes = "A2"
    ws.auto_filter.ref = ws.dimensions

    wb.save(path)
    return Path(path)
