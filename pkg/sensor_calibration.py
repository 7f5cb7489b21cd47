"""
sensor_calibration.py
---------------------

Closed-form calibration of a system of m single-axis sensors that all observe
the same vector quantity of constant magnitude c.

Measurement model (rows = sensors, columns = positions):

    readings = a^T v + noise,     ||v_j|| = c  for every position j

where column i of `a` (d x m) is the sensitivity vector of sensor i (sensitive
axis times scale factor) and column j of `v` (d x n) is the measured vector at
position j.

Procedure:
  1) rank-d truncated SVD of the readings: readings ~ u s w^T
     (no mean-centering; the model has no offset term)
  2) b = s w^T, and solve c^2 = b_j^T g b_j (j = 1..n) for the symmetric g
     in the least-squares sense
  3) eigendecomposition g = q^T diag(lam) q
  4) v_hat = diag(lam)^(1/2) q b,   a_hat = diag(lam)^(-1/2) q u^T

`a_hat` and `v_hat` are recovered up to a common left orthogonal factor. If the
magnitude c is unknown, c = 1 is used and the result is flagged
`scale_unresolved`: sensitive axes are still found, scale factors only up to a
common factor.

Also provided:
  - calibrate_noiseless(): exact-rank path using any basis of the column space
    (column-pivoted QR)
  - min_positions() / feasibility(): counting bounds on positions and sensors
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple, Union

import numpy as np
from scipy import linalg

from calibration_errors import (
    DeficientPositions,
    DimensionTooLarge,
    IllConditionedGram,
    InfeasibleDesign,
    InvalidParameter,
    NonFiniteInput,
    RankMismatch,
    ShapeMismatch,
)

__version__ = "0.3.0"

logger = logging.getLogger(__name__)


# -------- default tolerances --------
RANK_TOL = 1e-10       # relative singular-value cutoff for the Gram design matrix
SPD_FLOOR = 1e-9       # lam_min below SPD_FLOOR * lam_max flags the Gram matrix
# ------------------------------------


def _frobenius(x: np.ndarray) -> float:
    """Frobenius norm without overflow of the squared entries."""
    return float(np.hypot.reduce(np.ravel(x), initial=0.0))


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


# ----------------------------------------------------------------------
# Domain types
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReadingsMatrix:
    """m x n sensor read-outs: row i = sensor i, column j = position j."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim != 2:
            raise ShapeMismatch(f"Readings must be a 2-D matrix, got {arr.ndim} dimension(s)")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatch(f"Readings must have at least one sensor and one position, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise NonFiniteInput(f"Non-finite reading at sensor {bad[0] + 1}, position {bad[1] + 1}")
        object.__setattr__(self, "values", _frozen(arr))

    @property
    def m(self) -> int:
        return int(self.values.shape[0])

    @property
    def n(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    """Readings plus ambient dimension d and magnitude c (None = unknown)."""

    readings: ReadingsMatrix
    dim: int = 3
    magnitude: Optional[float] = None

    def __post_init__(self) -> None:
        if not isinstance(self.readings, ReadingsMatrix):
            object.__setattr__(self, "readings", ReadingsMatrix(self.readings))
        if int(self.dim) != self.dim or self.dim < 1:
            raise InvalidParameter(f"Dimension must be a positive integer, got {self.dim}")
        object.__setattr__(self, "dim", int(self.dim))
        limit = min(self.readings.m, self.readings.n)
        if self.dim > limit:
            raise DimensionTooLarge(
                f"Dimension d = {self.dim} exceeds min(m, n) = {limit} "
                f"for a {self.readings.m} x {self.readings.n} readings matrix"
            )
        if self.magnitude is not None:
            c = float(self.magnitude)
            if not np.isfinite(c) or c <= 0.0:
                raise InvalidParameter(f"Magnitude must be a positive finite number, got {self.magnitude}")
            object.__setattr__(self, "magnitude", c)

    @property
    def scale_unresolved(self) -> bool:
        return self.magnitude is None

    @property
    def effective_magnitude(self) -> float:
        return 1.0 if self.magnitude is None else float(self.magnitude)


@dataclass(frozen=True)
class CalibrationOptions:
    rank_tol: float = RANK_TOL
    spd_floor: float = SPD_FLOOR
    clamp_floor: Optional[float] = None   # opt-in clamping of the Gram spectrum at clamp_floor * lam_max
    force: bool = False                   # run even when the counting bounds fail

    def __post_init__(self) -> None:
        if not self.rank_tol > 0.0:
            raise InvalidParameter(f"rank_tol must be positive, got {self.rank_tol}")
        if not self.spd_floor >= 0.0:
            raise InvalidParameter(f"spd_floor must be non-negative, got {self.spd_floor}")
        if self.clamp_floor is not None and not 0.0 < self.clamp_floor < 1.0:
            raise InvalidParameter(f"clamp_floor must lie in (0, 1), got {self.clamp_floor}")


@dataclass(frozen=True, eq=False)
class TruncatedFactors:
    """Rank-d truncated SVD: readings ~ u @ s @ w.T, coords_b = s @ w.T."""

    u: np.ndarray                 # m x d, orthonormal columns
    s: np.ndarray                 # d x d diagonal, descending
    w: np.ndarray                 # n x d, orthonormal columns
    coords_b: np.ndarray          # d x n
    singular_values: np.ndarray   # full spectrum, descending

    @property
    def dim(self) -> int:
        return int(self.s.shape[0])

    @property
    def discarded_energy(self) -> float:
        tail = self.singular_values[self.dim:]
        return _frobenius(tail)

    def approximation(self) -> np.ndarray:
        return self.u @ self.coords_b


@dataclass(frozen=True, eq=False)
class GramSolution:
    """
    Symmetric g with g = q^T diag(eigenvalues) q and factor_f = diag(eigenvalues)^(1/2) q.

    solve_gram() fills g and residual; factor_gram() completes the spectrum.
    """

    g: np.ndarray
    residual: float = 0.0
    eigenvalues: Optional[np.ndarray] = None
    eigenvectors: Optional[np.ndarray] = None    # rows paired with eigenvalues
    factor_f: Optional[np.ndarray] = None
    ill_conditioned: bool = False
    clamped: bool = False

    @property
    def is_factored(self) -> bool:
        return self.factor_f is not None


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    a_hat: np.ndarray              # d x m, column i = sensitivity vector of sensor i
    v_hat: np.ndarray              # d x n, column j = measured vector at position j
    gram: GramSolution
    factors: Optional[TruncatedFactors]
    fit_residual: float            # ||readings - a_hat^T v_hat||_F
    discarded_energy: float
    basis: np.ndarray              # e, m x d
    coords_b: np.ndarray           # b, d x n
    magnitude: float               # c actually used
    scale_unresolved: bool = False
    method: str = "svd"

    def reconstruction(self) -> np.ndarray:
        return self.a_hat.T @ self.v_hat


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    n: int
    m: int
    dim: int
    min_positions: int
    counting_lhs: int                   # (n - d)(m - d + 1)
    counting_rhs: int                   # d(d - 1)/2
    failures: Tuple[str, ...] = field(default_factory=tuple)

    def __bool__(self) -> bool:
        return self.feasible

    def describe(self) -> str:
        lines = [
            f"sensors m = {self.m}, positions n = {self.n}, dimension d = {self.dim}",
            f"minimum positions d(d+1)/2 = {self.min_positions}",
            f"counting bound (n-d)(m-d+1) = {self.counting_lhs} >= d(d-1)/2 = {self.counting_rhs}",
        ]
        if self.feasible:
            lines.append("feasible: yes")
        else:
            lines.append("feasible: no")
            lines.extend(f"  - {reason}" for reason in self.failures)
        return "\n".join(lines)


# ----------------------------------------------------------------------
# Counting bounds
# ----------------------------------------------------------------------

def min_positions(dim: int) -> int:
    """Number of Gram unknowns d(d+1)/2, the least number of positions."""
    if dim < 1:
        raise InvalidParameter(f"Dimension must be >= 1, got {dim}")
    return dim * (dim + 1) // 2


def feasibility(n: int, m: int, dim: int) -> FeasibilityReport:
    for name, value in (("n", n), ("m", m), ("dim", dim)):
        if value < 1:
            raise InvalidParameter(f"{name} must be >= 1, got {value}")

    n_min = min_positions(dim)
    lhs = (n - dim) * (m - dim + 1)
    rhs = dim * (dim - 1) // 2

    failures = []
    if m < dim:
        failures.append(f"too few sensors: m = {m} < d = {dim}")
    if n < n_min:
        failures.append(f"too few positions: n = {n} < d(d+1)/2 = {n_min}")
    if lhs < rhs:
        failures.append(f"counting bound violated: (n-d)(m-d+1) = {lhs} < d(d-1)/2 = {rhs}")

    return FeasibilityReport(
        feasible=not failures,
        n=n,
        m=m,
        dim=dim,
        min_positions=n_min,
        counting_lhs=lhs,
        counting_rhs=rhs,
        failures=tuple(failures),
    )


# ----------------------------------------------------------------------
# Subspace identification
# ----------------------------------------------------------------------

def _largest_entry_positive(columns: np.ndarray) -> np.ndarray:
    """+1/-1 per column so that each column's largest-magnitude entry becomes positive."""
    # argmax returns the first maximum, so ties go to the lowest row index
    idx = np.argmax(np.abs(columns), axis=0)
    picked = columns[idx, np.arange(columns.shape[1])]
    return np.where(picked < 0.0, -1.0, 1.0)


def truncated_svd(readings: Union[ReadingsMatrix, np.ndarray], dim: int) -> TruncatedFactors:
    if not isinstance(readings, ReadingsMatrix):
        readings = ReadingsMatrix(readings)
    if dim < 1:
        raise InvalidParameter(f"Dimension must be >= 1, got {dim}")
    if dim > min(readings.m, readings.n):
        raise DimensionTooLarge(
            f"Dimension d = {dim} exceeds min(m, n) = {min(readings.m, readings.n)} "
            f"for a {readings.m} x {readings.n} readings matrix"
        )

    u_full, sv, vt_full = linalg.svd(readings.values, full_matrices=False)

    signs = _largest_entry_positive(u_full[:, :dim])
    u = u_full[:, :dim] * signs
    vt = vt_full[:dim, :] * signs[:, None]
    s = np.diag(sv[:dim])

    return TruncatedFactors(
        u=_frozen(u),
        s=_frozen(s),
        w=_frozen(vt.T),
        coords_b=_frozen(sv[:dim, None] * vt),
        singular_values=_frozen(sv),
    )


# ----------------------------------------------------------------------
# Gram matrix
# ----------------------------------------------------------------------

def gram_unknowns(dim: int) -> int:
    return dim * (dim + 1) // 2


def _dim_from_unknowns(p: int) -> int:
    d = int(round((np.sqrt(8 * p + 1) - 1) / 2))
    if gram_unknowns(d) != p:
        raise ShapeMismatch(f"{p} columns is not a triangular number d(d+1)/2")
    return d


def build_gram_system(coords_b: np.ndarray, magnitude: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Linear system for the upper triangle of g from c^2 = b_j^T g b_j.

    Unknown ordering: (1,1), (1,2), ..., (1,d), (2,2), ..., (d,d).
    Off-diagonal coefficients are doubled, so g is symmetric by construction.
    """
    b = np.asarray(coords_b, dtype=float)
    if b.ndim != 2 or b.shape[1] < 1:
        raise ShapeMismatch(f"coords_b must be a d x n matrix with n >= 1, got shape {b.shape}")

    rows, cols = np.triu_indices(b.shape[0])
    weight = np.where(rows == cols, 1.0, 2.0)
    design = (b[rows, :] * b[cols, :]).T * weight
    rhs = np.full(b.shape[1], float(magnitude) ** 2)
    return design, rhs


def solve_gram(design: np.ndarray, rhs: np.ndarray, rank_tol: float = RANK_TOL) -> GramSolution:
    """Minimum-norm least squares via SVD; a rank-deficient design is refused."""
    design = np.asarray(design, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if design.ndim != 2 or rhs.shape != (design.shape[0],):
        raise ShapeMismatch(f"Design {design.shape} and right-hand side {rhs.shape} do not conform")

    unknowns = design.shape[1]
    dim = _dim_from_unknowns(unknowns)

    if design.shape[0] < unknowns:
        raise DeficientPositions(
            f"{design.shape[0]} equation(s) cannot determine {unknowns} Gram entries",
            rank=design.shape[0],
            unknowns=unknowns,
        )

    u, sv, vt = linalg.svd(design, full_matrices=False)
    rank = int(np.sum(sv > sv[0] * rank_tol)) if sv[0] > 0.0 else 0
    if rank < unknowns:
        raise DeficientPositions(
            f"Gram system has numerical rank {rank} < {unknowns}: "
            "the positions do not determine g uniquely",
            rank=rank,
            unknowns=unknowns,
        )

    theta = vt.T @ ((u.T @ rhs) / sv)
    residual = float(np.sqrt(np.mean((rhs - design @ theta) ** 2)))

    g = np.zeros((dim, dim))
    rows, cols = np.triu_indices(dim)
    g[rows, cols] = theta
    g[cols, rows] = theta

    return GramSolution(g=_frozen(g), residual=residual)


def factor_gram(
    gram: Union[GramSolution, np.ndarray],
    spd_floor: float = SPD_FLOOR,
    clamp_floor: Optional[float] = None,
) -> GramSolution:
    if not isinstance(gram, GramSolution):
        gram = GramSolution(g=_frozen(gram))
    g = gram.g
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeMismatch(f"Gram matrix must be square, got shape {g.shape}")
    if not np.allclose(g, g.T, rtol=1e-12, atol=1e-14 * max(1.0, float(np.max(np.abs(g))))):
        raise ShapeMismatch("Gram matrix is not symmetric")

    lam_asc, vecs = linalg.eigh(0.5 * (g + g.T))
    lam = lam_asc[::-1].copy()
    q = vecs[:, ::-1].T.copy()
    q *= _largest_entry_positive(q.T)[:, None]

    lam_max, lam_min = lam[0], lam[-1]
    if lam_max <= 0.0 or (lam_min <= 0.0 and clamp_floor is None):
        raise IllConditionedGram(
            f"Gram matrix is not positive definite (eigenvalues {np.array2string(lam, precision=6)}); "
            "no real sensitivity factor exists",
            eigenvalues=lam,
        )

    clamped = False
    if clamp_floor is not None:
        floor = clamp_floor * lam_max
        if np.any(lam < floor):
            logger.warning(
                "Clamping Gram eigenvalues %s at %.3e", np.array2string(lam, precision=6), floor
            )
            lam = np.maximum(lam, floor)
            clamped = True

    ill = bool(lam[-1] < spd_floor * lam_max)
    if ill:
        logger.warning(
            "Gram matrix is ill-conditioned: lam_min / lam_max = %.3e", lam[-1] / lam_max
        )

    return replace(
        gram,
        eigenvalues=_frozen(lam),
        eigenvectors=_frozen(q),
        factor_f=_frozen(np.sqrt(lam)[:, None] * q),
        ill_conditioned=ill,
        clamped=clamped,
    )


# ----------------------------------------------------------------------
# Reconstruction
# ----------------------------------------------------------------------

def _check_feasible(problem: CalibrationProblem, options: CalibrationOptions) -> None:
    report = feasibility(problem.readings.n, problem.readings.m, problem.dim)
    if report:
        return
    reasons = "; ".join(report.failures)
    if not options.force:
        raise InfeasibleDesign(f"Calibration design is infeasible: {reasons}", report=report)
    logger.warning("Proceeding with an infeasible design (forced): %s", reasons)


def _reconstruct(
    problem: CalibrationProblem,
    basis: np.ndarray,
    coords_b: np.ndarray,
    options: CalibrationOptions,
) -> Tuple[np.ndarray, np.ndarray, GramSolution]:
    """
    The Gram system is solved for b / sigma and c = 1, where sigma is the
    largest |b| entry. c^2 = b^T g b is homogeneous, so g = (c / sigma)^2 g_unit
    and the squares in the design matrix stay in range for any reading scale.
    """
    c = problem.effective_magnitude
    sigma = float(np.max(np.abs(coords_b)))
    if sigma == 0.0:
        unknowns = gram_unknowns(problem.dim)
        raise DeficientPositions("All readings are zero", rank=0, unknowns=unknowns)
    b_unit = coords_b / sigma
    ratio = c / sigma

    design, rhs = build_gram_system(b_unit, 1.0)
    unit = solve_gram(design, rhs, rank_tol=options.rank_tol)
    try:
        unit = factor_gram(unit, spd_floor=options.spd_floor, clamp_floor=options.clamp_floor)
    except IllConditionedGram as exc:
        with np.errstate(over="ignore"):
            lam = np.asarray(exc.eigenvalues) * ratio**2
        raise IllConditionedGram(
            f"Gram matrix is not positive definite (eigenvalues {np.array2string(lam, precision=6)}); "
            "no real sensitivity factor exists",
            eigenvalues=lam,
        ) from None

    lam_unit = unit.eigenvalues
    q = unit.eigenvectors
    v_hat = c * (unit.factor_f @ b_unit)
    a_hat = (sigma / c) * ((q / np.sqrt(lam_unit)[:, None]) @ basis.T)

    # reported in the units of the readings; may overflow to inf for extreme scales
    with np.errstate(over="ignore"):
        gram = replace(
            unit,
            g=_frozen(ratio**2 * unit.g),
            residual=c * c * unit.residual,
            eigenvalues=_frozen(ratio**2 * lam_unit),
            factor_f=_frozen(ratio * unit.factor_f),
        )

    logger.debug(
        "Gram eigenvalues %s, residual %.3e", np.array2string(gram.eigenvalues, precision=6), gram.residual
    )
    return a_hat, v_hat, gram


def calibrate(problem: CalibrationProblem, options: Optional[CalibrationOptions] = None) -> CalibrationResult:
    """Sensitivity vectors and measured vectors from noisy readings (rank-d SVD path)."""
    options = options or CalibrationOptions()
    _check_feasible(problem, options)

    factors = truncated_svd(problem.readings, problem.dim)
    a_hat, v_hat, gram = _reconstruct(problem, factors.u, factors.coords_b, options)
    fit = _frobenius(problem.readings.values - a_hat.T @ v_hat)

    return CalibrationResult(
        a_hat=_frozen(a_hat),
        v_hat=_frozen(v_hat),
        gram=gram,
        factors=factors,
        fit_residual=fit,
        discarded_energy=factors.discarded_energy,
        basis=factors.u,
        coords_b=factors.coords_b,
        magnitude=problem.effective_magnitude,
        scale_unresolved=problem.scale_unresolved,
        method="svd",
    )


def calibrate_noiseless(
    problem: CalibrationProblem, options: Optional[CalibrationOptions] = None
) -> CalibrationResult:
    """
    Exact-rank path: any basis of the column space works, here the one given
    by a column-pivoted QR factorization. The readings must have numerical
    rank exactly d.
    """
    options = options or CalibrationOptions()
    _check_feasible(problem, options)

    values = problem.readings.values
    d = problem.dim

    q_full, r_full, _ = linalg.qr(values, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_full))
    rank = int(np.sum(diag > diag[0] * options.rank_tol)) if diag[0] > 0.0 else 0
    if rank != d:
        raise RankMismatch(
            f"Readings have numerical rank {rank}, expected exactly {d} for the exact path",
            rank=rank,
            expected=d,
        )

    basis = q_full[:, :d] * _largest_entry_positive(q_full[:, :d])
    coords_b = basis.T @ values
    a_hat, v_hat, gram = _reconstruct(problem, basis, coords_b, options)

    return CalibrationResult(
        a_hat=_frozen(a_hat),
        v_hat=_frozen(v_hat),
        gram=gram,
        factors=None,
        fit_residual=_frobenius(values - a_hat.T @ v_hat),
        discarded_energy=_frobenius(values - basis @ coords_b),
        basis=_frozen(basis),
        coords_b=_frozen(coords_b),
        magnitude=problem.effective_magnitude,
        scale_unresolved=problem.scale_unresolved,
        method="exact",
    )
