"""
calibration_alignment.py
------------------------

Compare a reference and an estimated sensitivity matrix (both d x m) modulo
the orthogonal ambiguity left by the calibration.

Each matrix is rotated into its canonical form: the orthogonal matrix h for
which h @ a has an upper-triangular leading d x d block with a strictly
positive diagonal. The calibration error is the Frobenius norm of the
difference of the two canonical forms:

    eps = || h a - k a_hat ||_F

No column pivoting is done: the leading d columns must have full rank (true
for a_model, whose first three columns form the identity).

procrustes_distance() is an extra diagnostic (min over orthogonal r of
||r a_hat - a||_F); it is NOT the canonical-form metric above.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from calibration_errors import RankDeficient, ShapeMismatch

ALIGN_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class CanonicalForm:
    rotation: np.ndarray     # d x d orthogonal
    triangular: np.ndarray   # rotation @ original, leading block upper-triangular, positive diagonal


def _as_sensitivity(a: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be a d x m matrix, got {arr.ndim} dimension(s)")
    d, m = arr.shape
    if d < 1 or m < d:
        raise ShapeMismatch(f"{name} must have at least d columns, got shape {arr.shape}")
    return arr


def canonical_triangular(a: np.ndarray, tol: float = ALIGN_TOL) -> CanonicalForm:
    arr = _as_sensitivity(a, "a")
    d = arr.shape[0]

    scale = float(linalg.norm(arr, 2))
    if scale == 0.0:
        raise RankDeficient("Sensitivity matrix is zero")

    q, r = linalg.qr(arr[:, :d])
    diag = np.diag(r)
    if np.any(np.abs(diag) <= tol * scale):
        raise RankDeficient(
            f"Leading {d} x {d} block is rank deficient "
            f"(|diag R| = {np.array2string(np.abs(diag), precision=3)}, scale {scale:.3e})"
        )

    signs = np.sign(diag)
    rotation = signs[:, None] * q.T
    triangular = rotation @ arr
    triangular[:, :d] = np.triu(triangular[:, :d])

    rotation.setflags(write=False)
    triangular.setflags(write=False)
    return CanonicalForm(rotation=rotation, triangular=triangular)


def _check_pair(a_ref: np.ndarray, a_est: np.ndarray):
    ref = _as_sensitivity(a_ref, "a_ref")
    est = _as_sensitivity(a_est, "a_est")
    if ref.shape != est.shape:
        raise ShapeMismatch(f"Shapes differ: {ref.shape} vs {est.shape}")
    return ref, est


def calibration_error(a_true: np.ndarray, a_est: np.ndarray, tol: float = ALIGN_TOL) -> float:
    ref, est = _check_pair(a_true, a_est)
    diff = canonical_triangular(ref, tol).triangular - canonical_triangular(est, tol).triangular
    return float(linalg.norm(diff))


def recover_gauge(a_ref: np.ndarray, a_est: np.ndarray, tol: float = ALIGN_TOL) -> np.ndarray:
    """Orthogonal r with a_est ~ r @ a_ref, from the two canonical rotations."""
    ref, est = _check_pair(a_ref, a_est)
    h = canonical_triangular(ref, tol).rotation
    k = canonical_triangular(est, tol).rotation
    return k.T @ h


def procrustes_distance(a_ref: np.ndarray, a_est: np.ndarray) -> float:
    ref, est = _check_pair(a_ref, a_est)
    r, _ = linalg.orthogonal_procrustes(est.T, ref.T)
    return float(linalg.norm(est.T @ r - ref.T))
