import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neural_reserve.stats import (
    adjust_pvalues,
    chi_squared_tail,
    dunn_test,
    fit_exponential,
    fit_linear,
    kruskal_wallis,
    normal_tail,
    r_squared,
    rank_with_ties,
)

NO_TIES = [[1, 2, 3], [4, 5, 6], [7, 8, 9]]
TIES = [[1, 2, 2], [2, 3, 4]]


def _two_sided(z):
    return math.erfc(abs(z) / math.sqrt(2))


def test_kruskal_wallis_no_ties_hand_value():
    # Mean ranks 2, 5, 8 of N=9: H = 12/90 * 3 * (4 + 25 + 64) - 30 = 7.2; df=2 tail is exp(-H/2).
    h, p = kruskal_wallis(NO_TIES)
    assert abs(h - 7.2) <= 1e-9
    assert abs(p - math.exp(-3.6)) <= 1e-9


def test_kruskal_wallis_ties_hand_value():
    # Ranks 1,3,3 | 3,5,6; uncorrected H = 7/3; tie factor 1 - 24/210 = 31/35.
    h, p = kruskal_wallis(TIES)
    assert abs(h - 245 / 93) <= 1e-9
    assert abs(p - math.erfc(math.sqrt(h / 2))) <= 1e-9


def test_kruskal_wallis_agrees_with_scipy():
    stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(0)
    groups = [rng.integers(0, 8, size=n) for n in (7, 9, 5, 11)]
    h, p = kruskal_wallis(groups)
    ref = stats.kruskal(*groups)
    assert h == pytest.approx(ref.statistic, abs=1e-9)
    assert p == pytest.approx(ref.pvalue, abs=1e-9)


def test_all_identical_values():
    assert kruskal_wallis([[2, 2], [2, 2, 2]]) == (0.0, 1.0)


def test_dunn_no_ties_hand_values():
    report = dunn_test(NO_TIES, names=["a", "b", "c"])
    se = math.sqrt(9 * 10 / 12 * (1 / 3 + 1 / 3))
    for (x, y), diff in {("a", "b"): -3, ("a", "c"): -6, ("b", "c"): -3}.items():
        pair = report.pair(x, y)
        z = diff / se
        assert abs(pair.z - z) <= 1e-9
        assert abs(pair.p_raw - _two_sided(z)) <= 1e-9
        assert abs(pair.p_adj - min(1.0, 3 * _two_sided(z))) <= 1e-9


def test_dunn_ties_hand_values():
    report = dunn_test(TIES, adjustment="none", names=["a", "b"])
    se = math.sqrt((6 * 7 / 12 - 24 / (12 * 5)) * (1 / 3 + 1 / 3))
    z = (7 / 3 - 14 / 3) / se
    pair = report.pair("a", "b")
    assert abs(pair.z - z) <= 1e-9
    assert abs(pair.p_raw - _two_sided(z)) <= 1e-9
    assert pair.p_adj == pair.p_raw


def test_identical_groups_adjusted_p_is_one():
    curve = [3.1, 3.4, 3.9, 4.6, 5.5]
    report = dunn_test([curve, curve, curve])
    assert all(p.p_adj == pytest.approx(1.0) for p in report.pairs)


def test_holm_adjustment_hand_values():
    got = adjust_pvalues([0.01, 0.04, 0.03], "holm")
    np.testing.assert_allclose(got, [0.03, 0.06, 0.06])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_adjusted_p_not_below_raw(p):
    raw = np.array(p)
    bonf = adjust_pvalues(raw, "bonferroni")
    holm = adjust_pvalues(raw, "holm")
    assert (bonf >= raw).all()
    assert (holm >= raw).all()
    assert (holm <= bonf + 1e-15).all()
    assert (bonf <= 1).all()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(0, 6), min_size=1, max_size=8), min_size=2, max_size=5))
def test_dunn_bonferroni_never_below_raw(groups):
    for pair in dunn_test(groups).pairs:
        assert pair.p_adj >= pair.p_raw


def test_group_errors():
    with pytest.raises(ValueError):
        kruskal_wallis([[1, 2]])
    with pytest.raises(ValueError):
        kruskal_wallis([[1, 2], []])
    with pytest.raises(ValueError):
        dunn_test(NO_TIES, adjustment="sidak")


def test_rank_with_ties():
    ranks, ties = rank_with_ties([10, 20, 20, 5])
    np.testing.assert_array_equal(ranks, [2, 3.5, 3.5, 1])
    np.testing.assert_array_equal(sorted(ties), [1, 1, 2])


# tails ------------------------------------------------------------------------


@pytest.mark.parametrize("x", [0.0, 0.3, 2.0, 7.2, 30.0])
def test_chi_squared_tail_closed_forms(x):
    assert chi_squared_tail(x, 2) == pytest.approx(math.exp(-x / 2), rel=1e-12)
    assert chi_squared_tail(x, 1) == pytest.approx(math.erfc(math.sqrt(x / 2)), rel=1e-12)
    # df=4: exp(-x/2) * (1 + x/2)
    assert chi_squared_tail(x, 4) == pytest.approx(math.exp(-x / 2) * (1 + x / 2), rel=1e-12)


def test_tail_errors():
    with pytest.raises(ValueError):
        chi_squared_tail(1.0, 0)
    with pytest.raises(ValueError):
        chi_squared_tail(-1.0, 2)


def test_normal_tail():
    assert normal_tail(0.0) == 0.5
    assert normal_tail(1.959963984540054) == pytest.approx(0.025, rel=1e-12)


# fits -------------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 60))
def test_linear_fit_matches_normal_equations(seed, n):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, 1, n))
    if np.ptp(x) < 1e-3:
        return
    y = rng.normal(size=n) + 3 * x
    design = np.stack([x, np.ones(n)], axis=1)
    slope, intercept = np.linalg.solve(design.T @ design, design.T @ y)
    fit = fit_linear(x, y)
    assert abs(fit.params["slope"] - slope) <= 1e-10 * max(1.0, abs(slope))
    assert abs(fit.params["intercept"] - intercept) <= 1e-10 * max(1.0, abs(intercept))


def test_linear_data_gives_unit_r2():
    x = np.linspace(0, 1, 11)
    fit = fit_linear(x, 2 * x + 1)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)


def test_r2_zero_for_constant_target():
    y = np.full(5, 2.0)
    assert r_squared(y, y) == 0.0


def test_linear_fit_errors():
    with pytest.raises(ValueError):
        fit_linear([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        fit_linear([1, 2], [1, 2])


@pytest.mark.parametrize("a,b", [(1.0, 2.0), (3.0, -1.5), (0.5, 4.0)])
def test_exponential_recovers_exact_curves(a, b):
    x = np.linspace(0, 1, 21)
    fit = fit_exponential(x, a * np.exp(b * x))
    assert fit.converged
    assert abs(fit.params["b"] - b) <= 1e-6
    assert abs(fit.params["a"] - a) <= 1e-6


def test_exponential_with_offset():
    x = np.linspace(0, 1, 21)
    fit = fit_exponential(x, 0.5 * np.exp(2.5 * x) + 3.0, offset=True)
    assert fit.converged
    assert fit.params["c"] == pytest.approx(3.0, abs=1e-5)
    assert fit.params["b"] == pytest.approx(2.5, abs=1e-5)


def test_exponential_beats_linear_on_concave_curve():
    x = np.linspace(0, 1, 21)
    y = 3.0 + 0.05 * np.exp(4.0 * x)
    exp_fit = fit_exponential(x, y, offset=True)
    lin_fit = fit_linear(x, y)
    assert exp_fit.converged
    assert exp_fit.r2 > lin_fit.r2


def test_exponential_on_linear_data_reports_status():
    x = np.linspace(0, 1, 10)
    fit = fit_exponential(x, x)
    assert isinstance(fit.converged, bool)
    assert fit.status


def test_iteration_cap_reported_not_raised():
    x = np.linspace(0, 1, 10)
    fit = fit_exponential(x, x, max_iter=1)
    assert fit.converged is False
    assert "no convergence" in fit.status


def test_fit_report_predict():
    x = np.linspace(0, 1, 5)
    fit = fit_exponential(x, np.exp(2 * x))
    np.testing.assert_allclose(fit.predict(x), np.exp(2 * x), rtol=1e-9)


def test_plain_exponential_on_flat_then_rising_curve():
    x = np.linspace(0, 1, 21)
    fit = fit_exponential(x, 3.0 + 0.5 * np.exp(3.0 * x))
    assert fit.converged
    assert fit.r2 > 0.95
