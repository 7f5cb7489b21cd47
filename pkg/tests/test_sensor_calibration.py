import numpy as np
import pytest
from scipy.stats import ortho_group

from calibration_alignment import calibration_error
from calibration_errors import (
    DeficientPositions,
    DimensionTooLarge,
    IllConditionedGram,
    InfeasibleDesign,
    InvalidParameter,
    NonFiniteInput,
    RankMismatch,
)
from gyro_simulation import a_model
from sensor_calibration import (
    CalibrationOptions,
    CalibrationProblem,
    ReadingsMatrix,
    build_gram_system,
    calibrate,
    calibrate_noiseless,
    factor_gram,
    feasibility,
    min_positions,
    solve_gram,
    truncated_svd,
)


def unit_columns(rng, d, n, c=1.0):
    v = rng.standard_normal((d, n))
    return c * v / np.linalg.norm(v, axis=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


@pytest.fixture
def perturbed_system(rng):
    a = a_model() + rng.normal(0.0, 0.01, size=(3, 12))
    v = unit_columns(rng, 3, 20)
    return a, v


# ----------------------------------------------------------------------
# Counting bounds
# ----------------------------------------------------------------------

@pytest.mark.parametrize("dim, expected", [(1, 1), (2, 3), (3, 6), (4, 10)])
def test_min_positions(dim, expected):
    assert min_positions(dim) == expected


def test_min_positions_rejects_zero_dim():
    with pytest.raises(InvalidParameter):
        min_positions(0)


@pytest.mark.parametrize(
    "n, m, d, expected",
    [
        (6, 3, 3, True),
        (5, 3, 3, False),
        (100, 2, 3, False),
        (3, 2, 2, True),
        (20, 12, 3, True),
        (2, 5, 2, False),
    ],
)
def test_feasibility(n, m, d, expected):
    report = feasibility(n, m, d)
    assert bool(report) is expected
    assert report.feasible is expected
    assert (len(report.failures) == 0) is expected


def test_feasibility_explains_failures():
    report = feasibility(5, 3, 3)
    assert report.counting_lhs == 2
    assert report.counting_rhs == 3
    assert any("positions" in f for f in report.failures)
    assert any("counting bound" in f for f in report.failures)

    report = feasibility(100, 2, 3)
    assert any("sensors" in f for f in report.failures)
    assert "feasible: no" in report.describe()


# ----------------------------------------------------------------------
# Truncated SVD
# ----------------------------------------------------------------------

def test_truncated_svd_identity():
    f = truncated_svd(np.eye(3), 3)
    np.testing.assert_allclose(f.s, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(f.approximation(), np.eye(3), atol=1e-12)
    assert f.discarded_energy == 0.0


def test_truncated_svd_exact_rank():
    readings = a_model().T @ unit_columns(np.random.default_rng(1), 3, 20)
    f = truncated_svd(readings, 3)

    assert f.discarded_energy < 1e-10 * np.linalg.norm(readings)
    np.testing.assert_allclose(f.approximation(), readings, atol=1e-10)
    np.testing.assert_allclose(f.u.T @ f.u, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(f.w.T @ f.w, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(f.coords_b, f.s @ f.w.T, atol=1e-12)


def test_truncated_svd_discarded_energy_of_diagonal():
    f = truncated_svd(np.diag([3.0, 2.0, 1.0, 0.1]), 2)
    np.testing.assert_allclose(np.diag(f.s), [3.0, 2.0])
    assert f.discarded_energy == pytest.approx(np.sqrt(1.0 + 0.01), rel=1e-12)
    assert f.discarded_energy == pytest.approx(1.00499, abs=1e-5)


def test_truncated_svd_sign_convention_and_determinism(rng):
    readings = rng.standard_normal((12, 20))
    f1 = truncated_svd(readings, 3)
    f2 = truncated_svd(readings.copy(), 3)

    idx = np.argmax(np.abs(f1.u), axis=0)
    assert np.all(f1.u[idx, np.arange(3)] > 0.0)
    assert np.all(np.diff(np.diag(f1.s)) <= 0.0)
    assert np.array_equal(f1.u, f2.u)
    assert np.array_equal(f1.coords_b, f2.coords_b)


def test_truncated_svd_errors():
    with pytest.raises(DimensionTooLarge):
        truncated_svd(np.ones((3, 2)), 3)
    with pytest.raises(NonFiniteInput):
        truncated_svd(np.array([[1.0, np.nan], [0.0, 1.0]]), 1)


# ----------------------------------------------------------------------
# Gram system
# ----------------------------------------------------------------------

@pytest.mark.parametrize(
    "b, row",
    [
        ((1.0, 0.0), (1.0, 0.0, 0.0)),
        ((1.0, 1.0), (1.0, 2.0, 1.0)),
        ((2.0, 3.0), (4.0, 12.0, 9.0)),
    ],
)
def test_build_gram_system_rows(b, row):
    design, rhs = build_gram_system(np.array(b).reshape(2, 1), 1.0)
    np.testing.assert_allclose(design, [row])
    np.testing.assert_allclose(rhs, [1.0])


def test_build_gram_system_unit_vectors_pick_diagonal():
    design, rhs = build_gram_system(np.eye(3), 2.0)
    # ordering g11, g12, g13, g22, g23, g33
    expected = np.zeros((3, 6))
    expected[0, 0] = expected[1, 3] = expected[2, 5] = 1.0
    np.testing.assert_allclose(design, expected)
    np.testing.assert_allclose(rhs, [4.0, 4.0, 4.0])


def test_solve_gram_recovers_identity():
    b = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    design, _ = build_gram_system(b, 1.0)
    sol = solve_gram(design, np.array([1.0, 1.0, 2.0]))

    expected = np.linalg.solve(design, [1.0, 1.0, 2.0])
    np.testing.assert_allclose(expected, [1.0, 0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(sol.g, np.eye(2), atol=1e-12)
    assert sol.residual < 1e-10
    assert np.array_equal(sol.g, sol.g.T)


def test_solve_gram_consistent_overdetermined(rng):
    g_true = np.array([[2.0, 0.3, -0.1], [0.3, 1.5, 0.2], [-0.1, 0.2, 1.0]])
    b = rng.standard_normal((3, 15))
    design, _ = build_gram_system(b, 1.0)
    rhs = np.einsum("ij,ik,kj->j", b, g_true, b)

    sol = solve_gram(design, rhs)
    np.testing.assert_allclose(sol.g, g_true, atol=1e-10)
    assert sol.residual < 1e-10


def test_solve_gram_least_squares_optimality(rng):
    design, _ = build_gram_system(rng.standard_normal((2, 12)), 1.0)
    rhs = 1.0 + 0.1 * rng.standard_normal(12)
    sol = solve_gram(design, rhs)
    rows, cols = np.triu_indices(2)
    theta = sol.g[rows, cols]

    def rms(x):
        return np.sqrt(np.mean((rhs - design @ x) ** 2))

    assert sol.residual == pytest.approx(rms(theta), rel=1e-12)
    for _ in range(100):
        assert sol.residual <= rms(theta + 1e-3 * rng.standard_normal(3)) + 1e-15


def test_solve_gram_too_few_rows():
    design, rhs = build_gram_system(np.array([[1.0, 0.0], [0.0, 1.0]]), 1.0)
    with pytest.raises(DeficientPositions) as exc:
        solve_gram(design, rhs)
    assert exc.value.unknowns == 3


def test_solve_gram_rank_deficient_positions():
    # all positions along one direction: the off-diagonal entry is undetermined
    b = np.array([[1.0, 2.0, -1.0, 0.5], [0.0, 0.0, 0.0, 0.0]])
    design, rhs = build_gram_system(b, 1.0)
    with pytest.raises(DeficientPositions) as exc:
        solve_gram(design, rhs)
    assert exc.value.rank == 1


# ----------------------------------------------------------------------
# Gram factorization
# ----------------------------------------------------------------------

def test_factor_gram_identity():
    sol = factor_gram(np.eye(3))
    np.testing.assert_allclose(sol.eigenvalues, [1.0, 1.0, 1.0])
    f = sol.factor_f
    np.testing.assert_allclose(f.T @ f, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(f @ f.T, np.eye(3), atol=1e-12)
    assert not sol.ill_conditioned


def test_factor_gram_diagonal():
    sol = factor_gram(np.diag([4.0, 1.0]))
    np.testing.assert_allclose(sol.eigenvalues, [4.0, 1.0])
    q = sol.eigenvectors
    np.testing.assert_allclose(np.abs(q), np.eye(2), atol=1e-14)
    np.testing.assert_allclose(sol.factor_f, np.diag([2.0, 1.0]) @ q)
    np.testing.assert_allclose(sol.factor_f.T @ sol.factor_f, np.diag([4.0, 1.0]), atol=1e-12)


def test_factor_gram_reproduces_g(rng):
    x = rng.standard_normal((3, 3))
    g = x.T @ x + 0.1 * np.eye(3)
    sol = factor_gram(g)
    q, lam = sol.eigenvectors, sol.eigenvalues
    np.testing.assert_allclose(q.T @ np.diag(lam) @ q, g, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(sol.factor_f.T @ sol.factor_f, g, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(q @ q.T, np.eye(3), atol=1e-12)
    assert np.all(np.diff(lam) <= 0.0)


def test_factor_gram_negative_eigenvalue():
    with pytest.raises(IllConditionedGram) as exc:
        factor_gram(np.diag([1.0, -0.01]))
    assert exc.value.eigenvalues == pytest.approx((1.0, -0.01))


def test_factor_gram_clamps_on_request():
    sol = factor_gram(np.diag([1.0, -0.01]), clamp_floor=1e-6)
    assert sol.clamped
    np.testing.assert_allclose(sol.eigenvalues, [1.0, 1e-6])


def test_factor_gram_flags_small_spectrum():
    sol = factor_gram(np.diag([1.0, 1e-12]))
    assert sol.ill_conditioned
    assert not sol.clamped


# ----------------------------------------------------------------------
# End-to-end calibration
# ----------------------------------------------------------------------

def test_calibrate_noiseless_exact_recovery(perturbed_system):
    a, v = perturbed_system
    readings = a.T @ v
    result = calibrate(CalibrationProblem(readings, dim=3, magnitude=1.0))

    assert calibration_error(a, result.a_hat) < 1e-9
    np.testing.assert_allclose(result.reconstruction(), readings, rtol=0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(result.v_hat, axis=0), 1.0, rtol=1e-8)
    assert not result.scale_unresolved
    assert result.method == "svd"


def test_calibrate_planar_three_positions():
    theta = np.deg2rad([0.0, 60.0, 120.0])
    v = np.vstack([np.cos(theta), np.sin(theta)])
    readings = np.eye(2).T @ v

    # brute-force oracle: the 3 x 3 Gram system in the SVD coordinates has g = identity
    f = truncated_svd(readings, 2)
    design, rhs = build_gram_system(f.coords_b, 1.0)
    np.testing.assert_allclose(np.linalg.solve(design, rhs), [1.0, 0.0, 1.0], atol=1e-12)

    result = calibrate(CalibrationProblem(readings, dim=2, magnitude=1.0))
    np.testing.assert_allclose(result.gram.g, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(result.reconstruction(), readings, atol=1e-10)
    np.testing.assert_allclose(np.linalg.norm(result.v_hat, axis=0), 1.0, rtol=1e-10)
    np.testing.assert_allclose(result.a_hat @ result.a_hat.T, np.eye(2), atol=1e-10)


def test_calibrate_magnitude_homogeneity(perturbed_system, rng):
    a, v = perturbed_system
    readings = a.T @ v + 1e-3 * rng.standard_normal((12, 20))

    r1 = calibrate(CalibrationProblem(readings, dim=3, magnitude=1.0))
    r2 = calibrate(CalibrationProblem(readings, dim=3, magnitude=2.0))

    assert calibration_error(r1.a_hat / 2.0, r2.a_hat) < 1e-10
    assert calibration_error(2.0 * r1.v_hat, r2.v_hat) < 1e-9
    np.testing.assert_allclose(r2.gram.eigenvalues, 4.0 * r1.gram.eigenvalues, rtol=1e-10)


@pytest.mark.parametrize("scale", [1e-170, 1e-100, 1e-8, 1e8, 1e100, 1e160])
def test_calibrate_any_reading_scale(perturbed_system, scale):
    a, v = perturbed_system
    result = calibrate(CalibrationProblem(scale * (a.T @ v), dim=3, magnitude=1.0))

    assert np.all(np.isfinite(result.a_hat))
    assert calibration_error(a, result.a_hat / scale) < 1e-9
    np.testing.assert_allclose(np.linalg.norm(result.v_hat, axis=0), 1.0, rtol=1e-9)
    assert result.fit_residual < 1e-9 * scale * np.linalg.norm(a.T @ v)


@pytest.mark.parametrize("scale", [1e-170, 1e160])
def test_calibrate_noiseless_any_reading_scale(perturbed_system, scale):
    a, v = perturbed_system
    result = calibrate_noiseless(CalibrationProblem(scale * (a.T @ v), dim=3, magnitude=1.0))
    assert calibration_error(a, result.a_hat / scale) < 1e-9


def test_gram_reported_in_reading_units(perturbed_system):
    a, v = perturbed_system
    r1 = calibrate(CalibrationProblem(a.T @ v, dim=3, magnitude=1.0))
    r2 = calibrate(CalibrationProblem(1e3 * (a.T @ v), dim=3, magnitude=1.0))
    np.testing.assert_allclose(r2.gram.g, 1e-6 * r1.gram.g, rtol=1e-9)
    np.testing.assert_allclose(r2.gram.eigenvalues, 1e-6 * r1.gram.eigenvalues, rtol=1e-9)


def test_zero_readings_are_deficient():
    with pytest.raises(DeficientPositions):
        calibrate(CalibrationProblem(np.zeros((3, 6)), dim=3, magnitude=1.0))


def test_calibrate_orthogonal_gauge_freedom(perturbed_system, rng):
    a, v = perturbed_system
    noise = 1e-3 * rng.standard_normal((12, 20))
    r = ortho_group.rvs(3, random_state=5)

    res1 = calibrate(CalibrationProblem(a.T @ v + noise, dim=3, magnitude=1.0))
    res2 = calibrate(CalibrationProblem((r @ a).T @ (r @ v) + noise, dim=3, magnitude=1.0))

    np.testing.assert_allclose(res1.reconstruction(), res2.reconstruction(), rtol=1e-10, atol=1e-12)
    assert calibration_error(a, res1.a_hat) == pytest.approx(calibration_error(a, res2.a_hat), rel=1e-6)


def test_calibrate_eckart_young_identity():
    rng = np.random.default_rng(11)
    for _ in range(100):
        a = a_model() + rng.normal(0.0, 0.01, size=(3, 12))
        readings = a.T @ unit_columns(rng, 3, 20) + 0.05 * rng.standard_normal((12, 20))
        result = calibrate(CalibrationProblem(readings, dim=3, magnitude=1.0))

        assert result.fit_residual == pytest.approx(result.discarded_energy, rel=1e-10)
        kept = result.factors.singular_values[:3]
        assert np.sum(kept ** 2) + result.fit_residual ** 2 == pytest.approx(
            np.linalg.norm(readings) ** 2, rel=1e-10
        )


def test_calibrate_is_deterministic(perturbed_system, rng):
    a, v = perturbed_system
    readings = a.T @ v + 1e-3 * rng.standard_normal((12, 20))
    r1 = calibrate(CalibrationProblem(readings, dim=3, magnitude=1.0))
    r2 = calibrate(CalibrationProblem(readings.copy(), dim=3, magnitude=1.0))
    assert np.array_equal(r1.a_hat, r2.a_hat)
    assert np.array_equal(r1.v_hat, r2.v_hat)


def test_calibrate_unknown_magnitude_is_flagged(perturbed_system):
    a, v = perturbed_system
    result = calibrate(CalibrationProblem(3.0 * a.T @ v, dim=3))
    assert result.scale_unresolved
    assert result.magnitude == 1.0
    # axes recovered, scale only up to the common factor 3
    assert calibration_error(3.0 * a, result.a_hat) < 1e-9


def test_calibrate_refuses_infeasible_design(rng):
    readings = rng.standard_normal((3, 5))
    with pytest.raises(InfeasibleDesign) as exc:
        calibrate(CalibrationProblem(readings, dim=3, magnitude=1.0))
    assert not exc.value.report.feasible

    # forcing gets past the bound, but 5 positions cannot fix 6 Gram entries
    with pytest.raises(DeficientPositions):
        calibrate(CalibrationProblem(readings, dim=3, magnitude=1.0), CalibrationOptions(force=True))


def test_problem_validation():
    with pytest.raises(DimensionTooLarge):
        CalibrationProblem(np.ones((3, 2)), dim=3)
    with pytest.raises(InvalidParameter):
        CalibrationProblem(np.eye(3), dim=3, magnitude=0.0)
    with pytest.raises(NonFiniteInput):
        ReadingsMatrix(np.array([[np.inf]]))


def test_readings_are_immutable():
    readings = ReadingsMatrix(np.eye(2))
    with pytest.raises(ValueError):
        readings.values[0, 0] = 5.0


# ----------------------------------------------------------------------
# Exact-rank path
# ----------------------------------------------------------------------

def test_calibrate_noiseless_path_matches_svd_path(perturbed_system):
    a, v = perturbed_system
    problem = CalibrationProblem(a.T @ v, dim=3, magnitude=1.0)

    exact = calibrate_noiseless(problem)
    svd = calibrate(problem)

    assert exact.method == "exact"
    assert exact.factors is None
    assert calibration_error(a, exact.a_hat) < 1e-9
    assert calibration_error(svd.a_hat, exact.a_hat) < 1e-9
    np.testing.assert_allclose(exact.reconstruction(), a.T @ v, atol=1e-9)


def test_calibrate_noiseless_rejects_noisy_readings(perturbed_system, rng):
    a, v = perturbed_system
    problem = CalibrationProblem(a.T @ v + 1e-3 * rng.standard_normal((12, 20)), dim=3, magnitude=1.0)
    with pytest.raises(RankMismatch) as exc:
        calibrate_noiseless(problem)
    assert exc.value.rank > 3
