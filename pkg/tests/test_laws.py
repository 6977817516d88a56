import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special

from bigjump.laws import (
    SlowlyVaryingSpec,
    claim_tail_constant,
    law_from_spec_text,
    law_to_spec_text,
    make_law,
    mixture,
    q_bar,
    q_of,
    q_star,
    q_tilde,
    read_pmf_csv,
    regvar_diagnostic,
    write_pmf_csv,
    zrp_weights,
)

ZETA3 = float(special.zeta(3.0))


@st.composite
def bounded_laws(draw, max_support=8):
    size = draw(st.integers(1, max_support))
    values = draw(st.lists(st.integers(-10, 10), min_size=size, max_size=size, unique=True))
    raw = draw(st.lists(st.floats(0.01, 1.0), min_size=size, max_size=size))
    masses = np.asarray(raw) / np.sum(raw)
    return make_law("Bounded", {"values": values, "masses": masses.tolist()})


# -- construction ------------------------------------------------------------


def test_zrp_power_weights_are_exact_powers():
    w = zrp_weights(3.0, "power", 1000)
    n = np.arange(1, 1001, dtype=float)
    assert w[0] == 1.0
    np.testing.assert_array_equal(w[1:], n**-3.0)


def test_zrp_linear_weights_match_product_of_rates():
    b = 3.0
    w = zrp_weights(b, "linear", 50)
    prod = np.cumprod([1.0 / (1.0 + b / k) for k in range(1, 51)])
    np.testing.assert_allclose(w[1:], prod, rtol=1e-12)


def test_zrp_pmf_without_empty_site():
    law = make_law("ZrpOccupation", {"b": 3, "zero_site": False})
    ks = np.array([1, 2, 5, 100, 5000])
    np.testing.assert_allclose(law.pmf(ks), ks**-3.0 / ZETA3, rtol=1e-13)


def test_zrp_pmf_with_empty_site(zrp3):
    ks = np.array([1, 2, 5, 100])
    np.testing.assert_allclose(zrp3.pmf(ks), ks**-3.0 / (1 + ZETA3), rtol=1e-13)
    assert zrp3.pmf(0) == pytest.approx(1 / (1 + ZETA3), rel=1e-13)


def test_coin_basics(coin):
    assert coin.mean == 0.0
    assert coin.truncated_variance(0.5) == 0.0
    assert coin.truncated_variance(1.0) == 1.0
    assert coin.truncated_variance(2.0) == 1.0
    assert coin.sigma_bar_sq(0.5) == pytest.approx(0.25, abs=1e-15)
    assert coin.tail(0) == 0.5


def test_pareto_mass_and_mean_against_zeta():
    law = make_law("ParetoZeta", {"beta": 2.5}, K_cap=10_000)
    assert abs(law.total_mass - 1.0) <= 1e-12
    mpmath.mp.dps = 30
    mean = mpmath.zeta(2.5) / mpmath.zeta(3.5)
    assert abs(law.mean - float(mean)) <= 1e-12


def test_pareto_tail_against_hurwitz_zeta(pareto25):
    mpmath.mp.dps = 30
    exact = mpmath.zeta(3.5, 1001) / mpmath.zeta(3.5)
    assert pareto25.tail(1000) == pytest.approx(float(exact), rel=1e-14)
    # beyond the table the analytic model takes over
    far = mpmath.zeta(3.5, 10**7 + 1) / mpmath.zeta(3.5)
    assert pareto25.tail(10**7) == pytest.approx(float(far), rel=1e-12)


@pytest.mark.parametrize("zero_site", [True, False])
def test_zrp_b3_tail_asymptotics(zero_site):
    law = make_law("ZrpOccupation", {"b": 3, "zero_site": zero_site})
    c = 1 / (1 + ZETA3) if zero_site else 1 / ZETA3
    assert law.tail(1000) / (0.5 * c * 1000.0**-2) == pytest.approx(1.0, abs=0.01)


def test_zrp_b3_truncated_variance_grows_like_c_log(zrp3):
    # sigma^2(n) = c log n + O(1); the slope in log n converges much faster
    # than the ratio itself (which still carries the O(1) term at 1e5).
    c = 1 / (1 + ZETA3)
    slope = (zrp3.truncated_variance(1e5) - zrp3.truncated_variance(1e4)) / math.log(10)
    assert slope / c == pytest.approx(1.0, abs=0.05)
    ratio = zrp3.truncated_variance(1e5) / (c * math.log(1e5))
    assert 0.9 < ratio < 1.0


def test_zrp_b3_q_decay(zrp3):
    assert q_of(zrp3, 1e6) * 2 * math.log(1e6) == pytest.approx(1.0, abs=0.10)


def test_q_matches_direct_definition(pareto25):
    x = 500.0
    mu = pareto25.mean
    ks = np.arange(1, 200_001, dtype=float)
    d = ks - mu
    pm = pareto25.pmf(ks)
    s2 = float(np.sum(np.where(np.abs(d) <= x, d * d * pm, 0.0)))
    tail = float(np.sum(pm[d > x])) + pareto25.tail(200_000)
    assert q_of(pareto25, x) == pytest.approx(x * x * tail / s2, rel=1e-10)


def test_q_undefined_where_variance_vanishes(coin):
    with pytest.raises(ValueError):
        q_of(coin, 0.5)


def test_q_star_dominates_and_decreases(pareto25):
    xs = np.geomspace(5, 5e3, 12)
    qs = [q_star(pareto25, x) for x in xs]
    for x, qs_x in zip(xs, qs):
        assert qs_x >= q_bar(pareto25, x)
    assert all(b <= a for a, b in zip(qs, qs[1:]))


def test_q_tilde_against_quadrature(coin, zrp4_small):
    # coin: q-bar(t) = 0 for t < 1 and t^2 * 0 beyond (no mass outside), so 0
    assert q_tilde(coin, 3.0) == 0.0
    x = 40.0
    grid = np.linspace(1e-9, x, 40_001)
    vals = []
    for t in grid:
        s2 = zrp4_small.truncated_variance(t)
        vals.append(t * t * zrp4_small.abs_tail(t) / s2 if s2 > 0 else 0.0)
    approx = np.trapezoid(vals, grid) / x
    assert q_tilde(zrp4_small, x) == pytest.approx(approx, rel=2e-3)


def test_claim_tail_constant_is_moderate(pareto25_small, zrp4_small, zrp3):
    xs = np.geomspace(2, 1e4, 25)
    for law in (pareto25_small, zrp4_small, zrp3):
        assert claim_tail_constant(law, xs) <= 10.0


@pytest.mark.parametrize("family,params", [
    ("ParetoZeta", {"beta": 2.5}),
    ("ParetoZeta", {"beta": 3}),
    ("ZrpOccupation", {"b": 4}),
])
def test_q_falls_below_one_percent(family, params):
    law = make_law(family, params)
    assert min(q_of(law, 2.0**j) for j in range(1, 27)) < 0.01


@pytest.mark.parametrize("law_fixture", ["zrp3"])
def test_q_for_tail_index_two_decays_like_inverse_log(law_fixture, request):
    # For tail index 2 the 1% level is only reached near x ~ e^50; the
    # measurable statement is q(x) * 2 log x -> 1.
    law = request.getfixturevalue(law_fixture)
    vals = [q_of(law, 2.0**j) * 2 * j * math.log(2) for j in range(16, 27, 2)]
    assert all(0.9 < v < 1.2 for v in vals)
    assert all(b < a for a, b in zip(vals, vals[1:]))


# -- regular variation ---------------------------------------------------------


def test_regvar_pareto_ratio(pareto25):
    rep = regvar_diagnostic(pareto25, [1.0, 2.0], [1e4])
    assert rep.sup_ratio[0] == 1.0 and rep.inf_ratio[0] == 1.0
    assert rep.sup_ratio[1] / 2**-2.5 == pytest.approx(1.0, abs=0.02)


def test_regvar_oscillating_bracket():
    gamma = 3.5
    law = make_law("Custom", {"tail": "oscillating", "gamma": gamma})
    xs = np.geomspace(1e3, 1e50, 4000)
    rep = regvar_diagnostic(law, [2.0], xs)
    # the local log-slope is -gamma + sin(log log x) + cos(log log x), whose
    # minimum -gamma - sqrt(2) is reached near x ~ 1e22
    assert rep.lower_index == pytest.approx(-gamma - math.sqrt(2), abs=0.01)
    assert rep.upper_index > -gamma
    assert -gamma - math.sqrt(2) - 1e-9 <= rep.lower_index <= rep.upper_index <= -gamma + math.sqrt(2)


def test_oscillating_requires_large_gamma():
    with pytest.raises(ValueError):
        make_law("Custom", {"tail": "oscillating", "gamma": 1.3})


def test_slowly_varying_variants():
    x = np.array([20.0, 1e3, 1e6])
    np.testing.assert_allclose(SlowlyVaryingSpec.log_power(2)(x), np.log(x) ** 2)
    # below the floor the factor is frozen at its floor value
    assert SlowlyVaryingSpec.loglog_power(1)(10.0) == pytest.approx(1.0)
    np.testing.assert_allclose(SlowlyVaryingSpec.loglog_power(1)(x), np.log(np.log(x)))
    g = SlowlyVaryingSpec.gamma_ratio(3.0)(np.array([1e6]))
    assert g[0] == pytest.approx(special.gamma(4.0), rel=1e-5)
    with pytest.raises(ValueError):
        SlowlyVaryingSpec("nonsense")


# -- errors --------------------------------------------------------------------


def test_bad_parameters_rejected():
    with pytest.raises(ValueError):
        make_law("ParetoZeta", {"beta": 1.0})
    with pytest.raises(ValueError):
        make_law("ParetoZeta", {"beta": 2.5}, K_cap=100)
    with pytest.raises(ValueError):
        make_law("ZrpOccupation", {"b": 2})
    with pytest.raises(ValueError):
        make_law("Bounded", {"values": [0, 1], "masses": [0.5, -0.5]})


# -- invariants ------------------------------------------------------------------


@pytest.mark.parametrize("name", ["pareto25", "zrp3", "zrp4", "coin"])
def test_normalisation(name, request):
    law = request.getfixturevalue(name)
    assert abs(law.total_mass - 1.0) <= 1e-12


@pytest.mark.parametrize("name", ["pareto25", "zrp3", "zrp4"])
@pytest.mark.parametrize("x", [1.0, 10.0, 100.0])
def test_sigma_bar_identity(name, x, request):
    law = request.getfixturevalue(name)
    lhs = law.sigma_bar_sq(x) - law.truncated_variance(x)
    assert lhs == pytest.approx(x * x * law.abs_tail(x), rel=1e-12, abs=1e-14)


def test_two_sided_stable_is_normalised():
    law = make_law("TwoSidedStable", {"alpha": 1.5, "p": 0.7}, K_cap=1 << 14)
    assert abs(law.total_mass - 1.0) <= 1e-12
    assert law.tail(100) / law.cdf(-101) == pytest.approx(0.7 / 0.3, rel=1e-3)


@given(bounded_laws())
def test_bounded_invariants(law):
    assert abs(law.total_mass - 1.0) <= 1e-12
    grid = np.arange(-12, 13)
    tails = law.tail(grid)
    assert np.all(np.diff(tails) <= 0)
    s2 = [law.truncated_variance(x) for x in range(0, 25)]
    sb = [law.sigma_bar_sq(x) for x in range(0, 25)]
    assert all(b >= a - 1e-15 for a, b in zip(s2, s2[1:]))
    assert all(b >= a - 1e-15 for a, b in zip(sb, sb[1:]))
    for x in (0.5, 1.0, 3.0, 7.5):
        gap = law.sigma_bar_sq(x) - law.truncated_variance(x)
        assert gap == pytest.approx(x * x * law.abs_tail(x), abs=1e-12)


@given(bounded_laws(), bounded_laws(), st.floats(0.05, 0.95))
def test_mixture_is_normalised(a, b, w):
    m = mixture([a, b], [w, 1 - w])
    assert abs(m.total_mass - 1.0) <= 1e-12
    assert m.mean == pytest.approx(w * a.mean + (1 - w) * b.mean, abs=1e-12)


# -- serialisation ---------------------------------------------------------------


def test_spec_text_round_trip():
    text = law_to_spec_text("ZrpOccupation", {"b": 4, "g": "power"}, 4096)
    law = law_from_spec_text(text + "# trailing comment\n")
    assert law.K_cap == 4096
    assert law.pmf(3) == pytest.approx(3.0**-4 / (1 + special.zeta(4)), rel=1e-13)
    with pytest.raises(ValueError):
        law_from_spec_text("beta = 2.5\n")


def test_pmf_csv_round_trip(tmp_path, zrp4_small):
    path = tmp_path / "law.csv"
    write_pmf_csv(zrp4_small, path, 0, 200)
    ks, ms = read_pmf_csv(path)
    np.testing.assert_array_equal(ks, np.arange(0, 201))
    np.testing.assert_array_equal(ms, zrp4_small.pmf(ks))
