import csv
import math

import numpy as np
import pytest

from imabench.contrast import (
    ContrastEstimate,
    cima_global,
    cima_local,
    column_angle,
    decompose_2d,
    isoperimetric_check,
    log_sin_theta_profile,
    write_isoperimetric_csv,
    write_profile_csv,
)
from imabench.errors import SingularJacobian


def test_cima_local_closed_forms():
    assert abs(float(cima_local(np.eye(3)))) < 1e-15
    assert float(cima_local([[1.0, 1.0], [0.0, 1.0]])) == pytest.approx(0.5 * math.log(2.0), abs=1e-12)


def test_cima_local_zero_on_scaled_orthogonal():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    J = q @ np.diag([0.2, 3.0, 1.5, 7.0])
    assert abs(float(cima_local(J))) < 1e-12


def test_cima_local_nonnegative_and_invariant():
    rng = np.random.default_rng(1)
    for trial in range(200):
        n = 2 + trial % 4
        J = rng.standard_normal((n, n)) + 0.5 * np.eye(n)
        value = float(cima_local(J))
        assert value >= -1e-12
        D = np.diag(rng.choice([-1.0, 1.0], n) * np.exp(rng.standard_normal(n)))
        P = np.eye(n)[rng.permutation(n)]
        assert abs(float(cima_local(J @ D @ P)) - value) < 1e-10


def test_cima_local_rejects_singular():
    with pytest.raises(SingularJacobian):
        cima_local([[1.0, 2.0], [2.0, 4.0]])


def test_cima_global_on_linear_map():
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    points = np.random.default_rng(2).standard_normal((50, 2))
    estimate = cima_global(lambda pts: np.tile(A, (len(pts), 1, 1)), points, batched=True)
    assert estimate.value == pytest.approx(0.5 * math.log(2.0), abs=1e-12)
    assert estimate.std_error < 1e-12
    assert estimate.sample_count == 50


def test_cima_global_with_pointwise_provider():
    def provider(p):
        return np.array([[1.0, p[0]], [0.0, 1.0]])

    points = np.array([[0.0, 5.0], [1.0, -2.0]])
    estimate = cima_global(provider, points)
    assert estimate.value == pytest.approx(0.25 * math.log(2.0), abs=1e-12)
    assert estimate.sample_count == 2
    with pytest.raises(ValueError):
        cima_global(lambda p: np.eye(3), points)


def test_cima_global_needs_two_points():
    with pytest.raises(ValueError):
        cima_global(lambda pts: np.tile(np.eye(2), (len(pts), 1, 1)), np.zeros((1, 2)), batched=True)


def test_cima_global_reports_singular_index():
    def provider(pts):
        J = np.tile(np.eye(2), (len(pts), 1, 1))
        J[3] = 0.0
        return J

    with pytest.raises(SingularJacobian) as e:
        cima_global(provider, np.zeros((6, 2)), batched=True)
    assert e.value.index == 3


def test_contrast_estimate_rejects_negative_values():
    with pytest.raises(ValueError):
        ContrastEstimate(value=-0.1, std_error=0.0, sample_count=2)


def test_column_angle():
    assert column_angle(np.eye(2)) == pytest.approx(math.pi / 2)
    assert column_angle([[1.0, 1.0], [0.0, 1.0]]) == pytest.approx(math.pi / 4)


def test_decomposition_identities():
    rng = np.random.default_rng(3)
    for _ in range(500):
        J = rng.standard_normal((2, 2))
        if abs(np.linalg.det(J)) < 1e-6:
            continue
        logdet = math.log(abs(np.linalg.det(J)))
        cima = float(cima_local(J))
        for lam in (0.0, 0.5, 1.0):
            d = decompose_2d(J, log_base_density=-2.0, lam=lam)
            assert abs(cima + d.term_iii) < 1e-9
            assert abs(d.log_abs_det - logdet) < 1e-9
            assert abs(d.likelihood - (-2.0 - logdet - lam * cima)) < 1e-9


def test_decompose_2d_validation():
    with pytest.raises(ValueError):
        decompose_2d(np.eye(2), 0.0, lam=1.5)
    with pytest.raises(ValueError):
        decompose_2d(np.eye(3), 0.0, lam=0.5)
    with pytest.raises(SingularJacobian):
        decompose_2d(np.zeros((2, 2)), 0.0, lam=0.5)


def test_log_sin_profile():
    rows = log_sin_theta_profile([math.pi / 2, math.pi / 6])
    assert rows[0, 1] == pytest.approx(0.0, abs=1e-15)
    assert rows[0, 2] == pytest.approx(0.0, abs=1e-15)
    assert rows[1, 1] == pytest.approx(math.log(0.5), abs=1e-12)
    h = 1e-6
    numeric = (math.log(math.sin(math.pi / 6 + h)) - math.log(math.sin(math.pi / 6 - h))) / (2 * h)
    assert rows[1, 2] == pytest.approx(numeric, rel=1e-6)
    with pytest.raises(ValueError):
        log_sin_theta_profile([0.0])
    with pytest.raises(ValueError):
        log_sin_theta_profile([math.pi])


@pytest.mark.parametrize("area", [0.25, 1.0, 4.0])
def test_isoperimetric_bound(area):
    report = isoperimetric_check(area, trials=500, seed=0)
    assert report.passed
    assert report.min_sum >= report.lower_bound - 1e-12
    assert -1e-12 <= report.gap < 1e-3


def test_isoperimetric_minimum_approaches_log_area():
    report = isoperimetric_check(2.0, trials=10_000, seed=0)
    assert abs(report.min_sum - math.log(2.0)) < 1e-3
    assert report.minimizer_sin > 0.99


def test_isoperimetric_reports_unreached_minimum():
    report = isoperimetric_check(1.0, trials=20, seed=3, near_orthogonal_share=0.0, tol=1e-9)
    assert report.bound_holds
    assert not report.minimum_reached and not report.passed


def test_isoperimetric_validation():
    with pytest.raises(ValueError):
        isoperimetric_check(0.0, 10, 0)
    with pytest.raises(ValueError):
        isoperimetric_check(1.0, 0, 0)
    with pytest.raises(ValueError):
        isoperimetric_check(1.0, 10, 0, tol=0.0)


def test_profile_and_isoperimetric_csv(tmp_path):
    profile = write_profile_csv(log_sin_theta_profile(np.linspace(0.1, 3.0, 5)), tmp_path / "profile.csv")
    iso = write_isoperimetric_csv([isoperimetric_check(1.0, 50, 0)], tmp_path / "iso.csv")
    with open(profile) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["theta", "log_sin", "grad"] and len(rows) == 6
    with open(iso) as f:
        rows = list(csv.reader(f))
    assert rows[0][-1] == "passed" and rows[1][-1] == "1"
