import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zoforge.estimators import ScaleVector
from zoforge.objectives import Quadratic, rank_r_spectrum
from zoforge.theorylab import (SUITES, CheckReport, TheoryParams, check_descent_bound, check_norm_ratio,
                               check_sigma_trace_bound, check_single_mode_contraction, check_sgd_rate,
                               check_unbiasedness, check_zo_vs_sgd_decrease, gamma_gaussian, gamma_sphere,
                               iterations_to_target, mc_reduce, mean_iterations, norm_ratio_gaussian,
                               norm_ratio_sphere, run_suite, theory_lr)


# --- closed forms ------------------------------------------------------------------------


def test_gamma_values():
    assert gamma_sphere(50, 2, 1) == pytest.approx((50 * 2 + 50 - 2) / (1 * 52) + 1)
    assert gamma_sphere(50, 2, 1) == pytest.approx(3.8461538, rel=1e-7)
    assert gamma_gaussian(2, 1) == 4.0
    assert theory_lr(2.0, 4.0) == 0.125


@settings(max_examples=100)
@given(st.integers(2, 500), st.integers(1, 16))
def test_sphere_gamma_at_full_rank_is_norm_ratio(d, n):
    # with r = d the constant collapses to (d + n - 1) / n only when n = 1; check the n = 1 identity
    if n == 1:
        assert gamma_sphere(d, d, 1) == pytest.approx(norm_ratio_sphere(d, 1), rel=1e-12)
    assert gamma_sphere(d, 1, n) <= gamma_sphere(d, 2, n)


def test_norm_ratio_values():
    assert norm_ratio_sphere(10, 1) == 10.0
    assert norm_ratio_sphere(1, 1) == 1.0
    assert norm_ratio_sphere(10, 4) == 3.25
    assert norm_ratio_gaussian(1, 1) == 3.0


def test_theory_params_of_quadratic():
    q = Quadratic(rank_r_spectrum(50, 2, 2.0))
    tp = TheoryParams.of_quadratic(q)
    assert tp.gamma == pytest.approx(gamma_sphere(50, 2, 1))
    assert tp.lr == pytest.approx(1.0 / (2.0 * tp.gamma))


# --- reports ------------------------------------------------------------------------------


@pytest.mark.parametrize("rule,measured,predicted,tol,ok", [
    ("rel", 1.04, 1.0, 0.05, True), ("rel", 1.06, 1.0, 0.05, False),
    ("abs", 0.3, 0.0, 0.5, True), ("le", 1.0, 0.5, 0.4, False), ("ge", 0.2, 0.5, 0.4, True),
    ("band", 7.9, 4.0, 2.0, True), ("band", 1.9, 4.0, 2.0, False), ("rel", math.nan, 1.0, 1.0, False),
])
def test_report_rules(rule, measured, predicted, tol, ok):
    assert CheckReport("s", "n", measured, predicted, tol, rule).passed is ok


def test_report_line_format():
    line = CheckReport("normratio", "x", 10.03, 10.0, 0.05).line()
    assert line == "SUITE normratio.x PASS measured=10.03 predicted=10 tol=0.05"


def test_pass_rule_recheckable_from_row():
    for rep in (CheckReport("a", "b", 0.97, 1.0, 0.05), CheckReport("a", "c", 3.1, 0.0, 3.0, "le")):
        row = rep.row()
        again = CheckReport(row["suite"], row["name"], float(row["measured"]), float(row["predicted"]),
                            float(row["tol"]), row["rule"])
        assert again.passed == bool(row["pass"]) == rep.passed


def test_mc_reduce_worker_invariant():
    def fn(a, b):
        return np.array([sum(math.sin(i) for i in range(a, b)), b - a], dtype=float)

    one = mc_reduce(fn, 10_007, workers=1)
    four = mc_reduce(fn, 10_007, workers=4)
    assert np.array_equal(one, four)
    assert one[1] == 10_007


# --- Monte Carlo checks ---------------------------------------------------------------------


def test_norm_ratio_worker_invariant_and_deterministic():
    q = Quadratic(np.linspace(0.5, 1.5, 10))
    theta = q.init_store(seed=3)
    a = check_norm_ratio(q, theta, 1, "sphere", 2000, seed=5, workers=1)
    b = check_norm_ratio(q, theta, 1, "sphere", 2000, seed=5, workers=3)
    assert a.measured == b.measured and a.se == b.se


def test_norm_ratio_one_dimensional_cases():
    q = Quadratic([1.0])
    theta = q.store_from([1.5])
    sph = check_norm_ratio(q, theta, 1, "sphere", 500)
    assert sph.measured == pytest.approx(1.0, abs=1e-9)
    gau = check_norm_ratio(q, theta, 1, "gaussian", 20000)
    assert gau.predicted == 3.0
    assert gau.passed, gau.line()


def test_unbiasedness_at_optimum():
    q = Quadratic(np.ones(3))
    theta = q.store_from(np.zeros(3))
    rep = check_unbiasedness(q, theta, "spsa", 200)
    assert np.allclose(rep.extra["mean"], 0.0)


def test_expectation_modified_fails_unbiasedness():
    q = Quadratic(np.ones(4))
    theta = q.store_from([1.0, 2.0, -1.0, 0.5], group_sizes=(2, 2))
    rep = check_unbiasedness(q, theta, "expectation_modified", 20000, dvec=ScaleVector({"g0": 3.0, "g1": 0.5}))
    assert not rep.passed


def test_descent_bound_zero_lr():
    q = Quadratic(rank_r_spectrum(10, 2))
    theta = q.init_store(seed=1)
    zo, fo = check_descent_bound(q, theta, 0.0, 1, 100)
    assert zo.measured == pytest.approx(0.0, abs=1e-15) and zo.predicted == 0.0
    assert fo.measured == 0.0 and fo.predicted == 0.0


@pytest.mark.parametrize("d,r", [(20, 20), (100, 2)])
def test_descent_bound_holds(d, r):
    q = Quadratic(rank_r_spectrum(d, r))
    theta = q.init_store(seed=d + r)
    zo, fo = check_descent_bound(q, theta, TheoryParams.of_quadratic(q).lr, 1, 10_000, seed=1)
    assert zo.passed, zo.line()
    assert fo.passed, fo.line()


def test_iterations_deterministic():
    assert iterations_to_target(32, 2, 7) == iterations_to_target(32, 2, 7)


def test_full_rank_vs_tenth_rank():
    full = mean_iterations(40, 40, 0, reps=3)
    tenth = mean_iterations(40, 4, 0, reps=3)
    assert 5.0 <= full / tenth <= 15.0


def test_single_mode_contraction():
    rep = check_single_mode_contraction(samples=20000)
    assert rep.passed, rep.line()


def test_sigma_trace_bound():
    rep, rows = check_sigma_trace_bound()
    assert len(rows) == 201
    assert all(r["ratio"] <= 1.0 for r in rows)
    assert rep.passed


def test_sgd_rate_exact():
    rep = check_sgd_rate()
    assert rep.passed and rep.measured <= 1e-12


def test_zo_vs_sgd_decrease_ratio():
    rep = check_zo_vs_sgd_decrease()
    assert rep.passed, rep.line()


# --- suites --------------------------------------------------------------------------------


def test_suite_registry():
    assert set(SUITES) == {"normratio", "gausscov", "unbiased", "descent", "rankscale", "sigmatrace", "sgdbaseline"}
    with pytest.raises(KeyError):
        run_suite("nope")


def test_run_suite_writes_csv_and_repeats(tmp_path):
    first = run_suite("sgdbaseline", seed=0, csv_dir=tmp_path)
    second = run_suite("sgdbaseline", seed=0)
    assert [r.line() for r in first] == [r.line() for r in second]
    with open(tmp_path / "sgdbaseline_reports.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["name"] for r in rows] == [r.name for r in first]
    assert all(r["pass"] == "1" for r in rows)
