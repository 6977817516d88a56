import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from bigjump._rng import rng_stream
from bigjump.laws import make_law
from bigjump.normalizers import solve_a_n
from bigjump.oracle import (
    backward_sample,
    conditional_max_cdf,
    conditional_overshoot_tail,
    decompose,
    enumerate_sum_distribution,
    p_sum_eq,
    p_sum_geq,
    sequential_sum_distribution,
    sum_distribution,
    tv_remaining_vs_product,
)
from bigjump.predictors import c_beta, x_for_gamma
from bigjump.tilt import solve_lambda


@pytest.fixture(scope="module")
def five_point():
    return make_law("Bounded", {"values": [-2, 0, 1, 3, 7], "masses": [0.1, 0.3, 0.3, 0.2, 0.1]})


def test_binomial_atom():
    law = make_law("Bounded", {"values": [0, 1], "masses": [0.5, 0.5]})
    assert p_sum_eq(law, 3, 2, centered=False) == pytest.approx(3 / 8, abs=1e-15)


def test_three_point_against_enumeration():
    law = make_law("Bounded", {"values": [0, 1, 2], "masses": [0.25, 0.5, 0.25]})
    ref = enumerate_sum_distribution([0, 1, 2], [0.25, 0.5, 0.25], 4)
    d = sum_distribution(law, 4, None, (0, 8))
    for s, p in ref.items():
        assert abs(d.prob_eq(s) - p) <= 1e-14


def test_cap_below_support_gives_zero_mass(five_point):
    d = sum_distribution(five_point, 5, -3, (-10, 35))
    assert d.total == 0.0


def test_threshold_above_reach(five_point):
    assert p_sum_geq(five_point, 4, 29, centered=False) == 0.0
    assert p_sum_geq(five_point, 4, 8, m=1, centered=False) == 0.0


def test_fair_coin_against_binomial(coin):
    n, x = 10_000, 300
    # S = 2B - n, so S >= x iff B >= (n + x) / 2
    ref = stats.binom.sf((n + x) // 2 - 1, n, 0.5)
    assert p_sum_geq(coin, n, x) == pytest.approx(ref, rel=1e-12)


def test_zrp_sum_against_sequential_lower_tail(zrp4):
    # the step is nonnegative, so truncating partial sums above s0 leaves
    # P(S_n < s0) exact; this gives an independent sequential reference
    n = 1000
    a = solve_a_n(zrp4, n)
    s0 = math.floor(n * zrp4.mean) + math.ceil(a)
    p = zrp4.pmf(np.arange(0, s0 + 1))
    acc = np.zeros(s0 + 1)
    acc[0] = 1.0
    for _ in range(n):
        acc = np.convolve(acc, p)[: s0 + 1]
    ref = 1.0 - acc[:s0].sum()
    got = p_sum_geq(zrp4, n, a)
    assert 0 < got < 1
    assert got == pytest.approx(ref, rel=1e-11)


@pytest.mark.parametrize("n", [7, 31, 100])
def test_doubling_matches_sequential(five_point, n):
    lo, ref = sequential_sum_distribution(five_point, n)
    d = sum_distribution(five_point, n, None, (lo, lo + ref.size - 1))
    got = d.pmf(np.arange(lo, lo + ref.size))
    keep = ref >= 1e-200
    assert np.max(np.abs(got[keep] / ref[keep] - 1)) <= 1e-13


@pytest.mark.parametrize("n,m", [(3, 0), (10, 1), (25, 3), (60, 7)])
def test_constrained_total_is_power_of_cdf(five_point, n, m):
    d = sum_distribution(five_point, n, m, (-2 * n, 7 * n))
    assert d.total == pytest.approx(five_point.cdf(m) ** n, rel=1e-10)


def test_monotone_in_cap_and_threshold(zrp4_small):
    n = 200
    xs = [0, 5, 10, 20, 40]
    ms = [3, 6, 12, 25, 60]
    grid = np.array([[p_sum_geq(zrp4_small, n, x, m) for m in ms] for x in xs])
    assert np.all(np.diff(grid, axis=0) <= 0)
    assert np.all(np.diff(grid, axis=1) >= 0)


def test_unconstrained_mass_accounting(zrp4_small):
    d = sum_distribution(zrp4_small, 500, None)
    assert 1 - d.truncation_error_bound <= d.total <= 1 + 1e-12
    assert np.all(d.masses >= 0)


# -- decomposition -------------------------------------------------------------------


def test_decomposition_is_additive(zrp4):
    n = 10**4
    x = 3 * solve_a_n(zrp4, n)
    d = decompose(zrp4, n, x)
    assert d.gauss_part + d.jump_part == pytest.approx(p_sum_geq(zrp4, n, x), rel=1e-12)


def test_one_jump_ratio_vanishes_for_negative_gamma(zrp4):
    n = 10**5
    ratios = [decompose(zrp4, n, x_for_gamma(zrp4, n, g)).s_ratio for g in (-2.0, -4.0, -6.0)]
    assert ratios[0] > ratios[1] > ratios[2]
    assert ratios[2] < 0.02


@pytest.mark.xfail(strict=True, reason="finite-n: s_ratio is 0.34 at n=1e5 against the 0.56 limit")
def test_zrp4_one_jump_ratio_at_gamma_zero(zrp4):
    n = 10**5
    d = decompose(zrp4, n, x_for_gamma(zrp4, n, 0.0))
    assert abs(d.s_ratio - 1 / (1 + c_beta(3.0))) <= 0.1


# -- conditional laws ----------------------------------------------------------------


def test_conditional_max_trivial_cases(zrp4_small):
    cdf = conditional_max_cdf(zrp4_small, 20, 15, mode="sum_eq")
    x_raw = math.floor(20 * zrp4_small.mean) + 15
    assert cdf([x_raw, x_raw + 5])[0] == pytest.approx(1.0, rel=1e-14)
    one = conditional_max_cdf(zrp4_small, 1, 4, mode="sum_eq")
    # n = 1: S_1 = M_1 = floor(mu) + 4
    s = math.floor(zrp4_small.mean) + 4
    np.testing.assert_allclose(one([s - 1, s, s + 1]), [0.0, 1.0, 1.0])


def test_conditional_max_structure(zrp4):
    middle = []
    for n in (10**4, 10**5):
        x = round(x_for_gamma(zrp4, n, 0.0, "local_general"))
        cdf = conditional_max_cdf(zrp4, n, x, mode="sum_eq")
        d = decompose(zrp4, n, x, local=True)
        # below the cap r_n the conditional law of the max is the no-jump part
        assert cdf([d.m])[0] == pytest.approx(1 - d.s_exact, rel=1e-10)
        lo, hi = cdf([int(0.2 * x), int(0.8 * x)])
        middle.append(hi - lo)
    # the jump sits at x minus a Gaussian fluctuation of size a_n, which is
    # still comparable to x here; the spread in between shrinks with n
    assert middle[1] < middle[0] < 0.5


def test_overshoot_tail_big_jump_regime(pareto25):
    n = 10**4
    x = 10 * solve_a_n(pareto25, n)
    f = conditional_overshoot_tail(pareto25, n, x, "max_gt_r")
    assert f([0.0])[0] == 1.0
    ratio = f([x])[0] / (pareto25.tail(pareto25.mean + 2 * x) / pareto25.tail(pareto25.mean + x))
    assert ratio == pytest.approx(1.0, abs=0.05)


def test_overshoot_tail_no_jump_rate(pareto25):
    n = 10**4
    x = 4 * solve_a_n(pareto25, n)
    f = conditional_overshoot_tail(pareto25, n, x, "max_le_r")
    assert f([0.0])[0] == 1.0
    ts = np.arange(0, 60)
    v = f(ts)
    rate = -np.polyfit(ts, np.log(v), 1)[0]
    lam = solve_lambda(pareto25, x / n, f.r).lam
    assert rate / lam == pytest.approx(1.0, abs=0.10)


# -- backward sampling ---------------------------------------------------------------


def test_backward_sample_forced_path():
    law = make_law("Bounded", {"values": [0, 1], "masses": [0.5, 0.5]})
    out = backward_sample(law, 3, 3, rng_stream(0), size=5)
    np.testing.assert_array_equal(out, np.ones((5, 3), dtype=int))


def test_backward_sample_marginal(zrp4_small):
    n, x = 12, 30
    out = backward_sample(zrp4_small, n, x, rng_stream(7), size=100_000)
    assert np.all(out.sum(axis=1) == x)
    # exact marginal of xi_1: pmf(y) P(S_{n-1} = x - y) / P(S_n = x)
    ys = np.arange(0, x + 1)
    lo, rest = sequential_sum_distribution(zrp4_small, n - 1, m=x)
    exact = zrp4_small.pmf(ys) * rest[x - ys - lo]
    exact /= exact.sum()
    emp = np.bincount(out[:, 0], minlength=x + 1) / out.shape[0]
    assert 0.5 * np.abs(emp - exact).sum() <= 0.01


@given(st.lists(st.sampled_from([0, 1, 2, 5]), min_size=2, max_size=6), st.integers(0, 2**31))
def test_backward_sample_sums(path, seed):
    law = make_law("Bounded", {"values": [0, 1, 2, 5], "masses": [0.4, 0.3, 0.2, 0.1]})
    n, x = len(path), sum(path)
    out = backward_sample(law, n, x, rng_stream(seed), size=20)
    assert np.all(out.sum(axis=1) == x)
    assert np.all(out >= 0)


# -- total variation -----------------------------------------------------------------


def test_tv_sure_event_with_symmetric_coin(coin):
    # with +-1 steps every coordinate ties in absolute value, so the first is
    # removed and the rest are exactly i.i.d.
    assert tv_remaining_vs_product(coin, 6, "M>=x", -1) == pytest.approx(0.0, abs=1e-15)


def test_tv_dichotomy_small_support():
    p = 1 / 600
    law = make_law("Bounded", {"values": [0, 1, 2, 3, 20], "masses": [0.4, 0.3, 0.2, 0.1 - p, p]})
    assert 6 * law.tail(19) == pytest.approx(0.01, rel=1e-12)
    assert tv_remaining_vs_product(law, 6, "M>=x", 20) <= 0.05
    assert tv_remaining_vs_product(law, 6, "S=x&M<=r", 17, r=3) >= 0.9


def test_tv_rejects_infinite_support(zrp4_small):
    with pytest.raises(ValueError):
        tv_remaining_vs_product(zrp4_small, 4, "M>=x", 3)
