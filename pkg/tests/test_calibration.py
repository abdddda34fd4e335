import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from probseq.calibration import (
    PredictionRecords,
    binned_calibration,
    calibration_report,
    coverage,
    coverage_curve,
    ece_binned,
    ece_coverage,
    error_uncertainty_correlation,
    gaussian_records,
    select_case_studies,
    sharpness,
    temporal_curves,
    trajectory,
    z_value,
)
from probseq.errors import ContractError, InsufficientDataError, SchemaError, UndefinedCorrelationError, UnsupportedMetricError


def records_from(err, sigma, session=None, t=None):
    err = np.asarray(err, dtype=float)
    return gaussian_records(err, np.zeros_like(err), np.asarray(sigma, dtype=float), session=session, t=t)


def test_z_values():
    assert z_value(0.68) == pytest.approx(0.994457883, abs=1e-9)
    assert z_value(0.68, convention="sigma") == 1.0
    assert z_value(0.95, convention="sigma") == pytest.approx(1.959963985, abs=1e-9)
    assert z_value(0.9, nu=5.0) == pytest.approx(stats.t.ppf(0.95, 5))
    with pytest.raises(ContractError):
        z_value(1.0)
    with pytest.raises(ContractError):
        z_value(0.5, convention="wide")


def test_ece_binned_hand_cases():
    sigma = np.linspace(0.5, 3, 20)
    assert ece_binned(records_from(sigma, sigma)) == 0.0
    rec = records_from([2.0, 2.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0])
    assert ece_binned(rec, n_bins=2) == 0.5
    rows = binned_calibration(rec, n_bins=2)
    assert [(r["mean_sigma"], r["mean_abs_error"]) for r in rows] == [(1.0, 2.0), (2.0, 2.0)]
    with pytest.raises(InsufficientDataError):
        ece_binned(records_from([1.0], [1.0]))


def test_coverage_monte_carlo():
    r = np.random.default_rng(7)
    n = 50_000
    sigma = r.uniform(0.5, 2.0, n)
    err = sigma * r.normal(size=n)
    rec = records_from(err, sigma)
    assert coverage(rec, 0.68) == pytest.approx(0.68, abs=0.01)
    assert coverage(rec, 0.6826894921370859) == pytest.approx(0.6827, abs=0.01)
    assert ece_coverage(rec) < 0.01
    halved = records_from(err, sigma / 2)
    # a one-sigma interval built from half the true spread covers P(|Z| < 1/2)
    assert coverage(halved, 0.68, convention="sigma") == pytest.approx(2 * stats.norm.cdf(0.5) - 1, abs=0.01)


def test_zero_error_degenerate():
    rec = records_from([0.0, 0.0, 0.0], [1.0, 2.0, 3.0])
    assert coverage(rec, 0.68) == 1.0
    assert ece_coverage(rec, levels=(0.68,)) == pytest.approx(0.32)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=40), st.integers(0, 2**31))
def test_coverage_monotone_in_level(errs, seed):
    sigma = np.random.default_rng(seed).uniform(0.1, 3, len(errs))
    rec = records_from(errs, sigma)
    levels = np.linspace(0.01, 0.999, 30)
    cov = [coverage(rec, q) for q in levels]
    assert all(a <= b for a, b in zip(cov, cov[1:]))


@given(st.lists(st.tuples(st.floats(-5, 5), st.sampled_from([0.5, 1.0, 1.5, 2.0])), min_size=2, max_size=30),
       st.randoms())
def test_metrics_ignore_record_order(pairs, rnd):
    err, sigma = map(np.array, zip(*pairs))
    perm = list(range(len(err)))
    rnd.shuffle(perm)
    a, b = records_from(err, sigma), records_from(err[perm], sigma[perm])
    assert ece_binned(a, 4) == pytest.approx(ece_binned(b, 4), abs=1e-12)
    assert ece_coverage(a) == ece_coverage(b)


def test_correlations():
    assert error_uncertainty_correlation(records_from([2, 4, 6], [1, 2, 3])) == pytest.approx((1.0, 1.0))
    assert error_uncertainty_correlation(records_from([6, 4, 2], [1, 2, 3]))[0] == pytest.approx(-1.0)
    _, rho = error_uncertainty_correlation(records_from([1, 2, 2, 3], [1, 2, 2, 3]))
    assert rho == pytest.approx(1.0)
    with pytest.raises(UndefinedCorrelationError):
        error_uncertainty_correlation(records_from([1, 2, 3], [1, 1, 1]))


def test_temporal_curves():
    one = records_from([1, 2, 3], [1, 1, 1], session=["a"] * 3, t=[0, 1, 2])
    assert [r["count"] for r in temporal_curves(one)] == [1, 1, 1]
    err = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    sig = np.array([0.5, 1.0, 1.5, 2.0, 2.5, 3.0])
    two = records_from(err, sig, session=["a", "a", "b", "b", "b", "b"], t=[0, 1, 0, 1, 2, 3])
    rows = temporal_curves(two)
    assert [r["count"] for r in rows] == [2, 2, 1, 1]
    assert rows[0]["mean_abs_error"] == 2.0 and rows[1]["mean_sigma"] == 1.5


def test_case_studies():
    single = records_from([1, 2], [1, 1], session=["only", "only"], t=[0, 1])
    picks = select_case_studies(single)
    assert {p["session"] for p in picks.values()} == {"only"}
    assert len(picks["best_predicted"]["trajectory"]) == 2

    session = ["calm"] * 2 + ["wild"] * 3 + ["sharp"] * 2
    err = [1.0, 1.0, 9.0, 8.0, 7.0, 0.1, 0.1]
    sigma = [1.0, 1.0, 5.0, 5.0, 5.0, 2.0, 2.0]
    rec = records_from(err, sigma, session=session, t=[0, 1, 0, 1, 2, 0, 1])
    picks = select_case_studies(rec)
    assert picks["well_calibrated"]["session"] == "calm"
    assert picks["high_error_high_uncertainty"]["session"] == "wild"
    assert picks["best_predicted"]["session"] == "sharp"
    assert [p["t"] for p in picks["high_error_high_uncertainty"]["trajectory"]] == [0, 1, 2]


def test_trajectory_sorted_by_time():
    rec = records_from([1, 2, 3], [1, 1, 1], session=["a"] * 3, t=[2, 0, 1])
    assert [p["t"] for p in trajectory(rec, "a")] == [0, 1, 2]


def test_report_rates_in_unit_interval(rng):
    n = 300
    sigma = rng.uniform(0.5, 2, n)
    rec = records_from(sigma * rng.normal(size=n), sigma, session=[f"s{i % 30}" for i in range(n)],
                       t=[i // 30 for i in range(n)])
    report = calibration_report(rec).to_dict()
    assert 0 <= report["ece_coverage"] <= 1
    assert all(0 <= v <= 1 for v in report["coverage"].values())
    assert report["n_records"] == n and set(report["case_studies"]) == {
        "well_calibrated", "high_error_high_uncertainty", "best_predicted"}
    curve = coverage_curve(rec)
    assert len(curve) == 19 and all(0 <= c["coverage"] <= 1 for c in curve)
    sh = sharpness(rec)
    assert sh["mean_sigma"] == pytest.approx(sigma.mean()) and sum(sh["histogram"]["counts"]) == n


def test_records_need_sigma_and_consistent_columns():
    point = PredictionRecords(["a"], [0], [1.0], [1.0])
    with pytest.raises(UnsupportedMetricError):
        coverage(point, 0.5)
    with pytest.raises(SchemaError):
        PredictionRecords(["a", "b"], [0, 0], [1.0, 2.0], [1.0])
    with pytest.raises(SchemaError):
        PredictionRecords(["a"], [0], [1.0], [1.0], sigma=[0.0])


def test_csv_roundtrip(tmp_path, rng):
    rec = PredictionRecords(["a", "b"], [0, 3], rng.normal(size=2), rng.normal(size=2), rng.uniform(1, 2, 2), [3.0, 4.0])
    rec.to_csv(tmp_path / "p.csv")
    back = PredictionRecords.from_csv(tmp_path / "p.csv")
    for col in ("y", "mu", "sigma", "nu", "t"):
        np.testing.assert_array_equal(getattr(back, col), getattr(rec, col))
    assert list(back.session) == ["a", "b"]


def test_student_t_records_use_t_quantiles():
    nu = np.full(4, 3.0)
    z95 = stats.t.ppf(0.975, 3)
    rec = PredictionRecords(["a"] * 4, [0, 1, 2, 3], [z95 * 0.999, z95 * 1.001, 0.0, 0.0], np.zeros(4),
                            np.ones(4), nu)
    assert coverage(rec, 0.95) == 0.75
    assert math.isclose(coverage(gaussian_records(rec.y, rec.mu, rec.sigma), 0.95), 0.5)
