import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bigjump.laws import make_law
from bigjump.montecarlo import (
    ConditionalSampler,
    EstimatorReport,
    LawSampler,
    RunningMoments,
    estimate_big_jump,
    estimate_direct,
    estimate_gaussian_window,
    max_scaling_experiment,
    overshoot_experiment,
    rng_stream,
)
from bigjump.normalizers import solve_a_n, solve_r_n
from bigjump.oracle import p_sum_geq, raw_cap
from bigjump.tilt import solve_lambda


def z_score(rep, exact):
    return abs(rep.estimate - exact) / rep.std_error


# -- random streams ------------------------------------------------------------------


def test_streams_are_reproducible_and_distinct():
    a = rng_stream(5, 3).random(1000)
    b = rng_stream(5, 3).random(1000)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, rng_stream(5, 4).random(1000))
    assert not np.array_equal(a, rng_stream(6, 3).random(1000))


def test_streams_uncorrelated():
    n = 200_000
    u = np.array([rng_stream(11, i).random(n) for i in range(4)])
    c = np.corrcoef(u)
    off = c[~np.eye(4, dtype=bool)]
    assert np.max(np.abs(off)) < 4 / math.sqrt(n)


def test_negative_seed_rejected():
    with pytest.raises(ValueError):
        rng_stream(-1)


# -- running moments -----------------------------------------------------------------


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=60), st.integers(1, 59))
def test_merge_matches_single_pass(xs, cut):
    cut = min(cut, len(xs) - 1)
    left, right = RunningMoments(), RunningMoments()
    left.add_batch(xs[:cut])
    right.add_batch(xs[cut:])
    left.merge(right)
    arr = np.array(xs)
    assert left.count == arr.size
    assert left.mean == pytest.approx(arr.mean(), abs=1e-9)
    assert left.variance == pytest.approx(arr.var(ddof=1), rel=1e-9, abs=1e-9)


def test_empty_moments():
    m = RunningMoments()
    m.add_batch([])
    assert m.count == 0 and math.isnan(m.variance)
    assert m.merge(RunningMoments()) is m


def test_report_rejects_unknown_method():
    with pytest.raises(ValueError):
        EstimatorReport(0.0, 0.0, 1, "bogus", 0, 1)


# -- alias sampler -------------------------------------------------------------------


def test_sampler_marginal_on_table(zrp4_small):
    s = LawSampler(zrp4_small)
    v, _ = s.sum_paths(np.ones(400_000, dtype=np.int64), rng_stream(1))
    emp = np.bincount(v, minlength=40)[:40] / v.size
    exact = zrp4_small.pmf(np.arange(40))
    assert 0.5 * np.abs(emp - exact).sum() < 0.004


def test_sampler_resolves_right_overflow():
    law = make_law("ParetoZeta", {"beta": 1.2}, K_cap=1000)
    v, M = LawSampler(law).sum_paths(np.ones(200_000, dtype=np.int64), rng_stream(2))
    np.testing.assert_array_equal(v, M)
    for k in (500, 1000, 4000, 20000):
        p = float(law.tail(k))
        emp = float(np.mean(v > k))
        assert abs(emp - p) <= 4 * math.sqrt(p * (1 - p) / v.size)


def test_sampler_resolves_left_overflow():
    law = make_law("TwoSidedStable", {"alpha": 1.1, "p": 0.3}, K_cap=1000)
    v, _ = LawSampler(law).sum_paths(np.ones(200_000, dtype=np.int64), rng_stream(3))
    for k in (-500, -1001, -5000):
        p = float(law.cdf(k))
        emp = float(np.mean(v <= k))
        assert abs(emp - p) <= 4 * math.sqrt(p * (1 - p) / v.size)


def test_capped_tilted_sampler(zrp4_small):
    m, lam = 12, 0.2
    s = LawSampler(zrp4_small, m, lam)
    ks = np.arange(0, m + 1)
    w = zrp4_small.pmf(ks) * np.exp(lam * (ks - zrp4_small.mean))
    assert s.log_norm == pytest.approx(math.log(w.sum()), rel=1e-13)
    v, _ = s.sum_paths(np.ones(300_000, dtype=np.int64), rng_stream(4))
    assert v.max() <= m
    emp = np.bincount(v, minlength=m + 1) / v.size
    assert 0.5 * np.abs(emp - w / w.sum()).sum() < 0.005


def test_sampler_rejects_bad_caps(zrp4_small):
    with pytest.raises(ValueError):
        LawSampler(zrp4_small, -1)
    with pytest.raises(ValueError):
        LawSampler(zrp4_small, None, 0.1)


# -- estimators ----------------------------------------------------------------------


def test_direct_estimator_unbiased(zrp4_small):
    n, x = 10, 5
    rep = estimate_direct(zrp4_small, n, x, 200_000, seed=3, streams=4)
    assert rep.n_samples == 200_000 and rep.stream_count == 4
    assert z_score(rep, p_sum_geq(zrp4_small, n, x)) < 4


def test_direct_estimator_deterministic(zrp4_small):
    a = estimate_direct(zrp4_small, 20, 6, 20_000, seed=9, streams=3)
    b = estimate_direct(zrp4_small, 20, 6, 20_000, seed=9, streams=3)
    assert (a.estimate, a.std_error) == (b.estimate, b.std_error)


def test_zero_hits_flag(coin):
    rep = estimate_direct(coin, 10, 50, 1000)
    assert rep.hits == 0 and "zero_hits" in rep.flags
    assert rep.estimate == 0.0 and rep.std_error == 0.0


def test_gaussian_window_unbiased_and_bounded(zrp4_small):
    n = 200
    x = 3 * solve_a_n(zrp4_small, n)
    r = solve_r_n(zrp4_small, n, x).r
    m = raw_cap(zrp4_small, r)
    rep = estimate_gaussian_window(zrp4_small, n, x, 100_000, seed=5)
    assert z_score(rep, p_sum_geq(zrp4_small, n, x, m)) < 4
    # every weight is at most exp(-n H) at the threshold
    s = math.floor(n * zrp4_small.mean) + math.ceil(x)
    sol = solve_lambda(zrp4_small, (s - n * zrp4_small.mean) / n, m - zrp4_small.mean + 0.5)
    assert rep.details["weight_cap"] == pytest.approx(math.exp(-n * sol.H), rel=1e-9)
    assert rep.estimate <= rep.details["weight_cap"]


def test_big_jump_unbiased(zrp4_small):
    n = 200
    x = 3 * solve_a_n(zrp4_small, n)
    m = raw_cap(zrp4_small, solve_r_n(zrp4_small, n, x).r)
    exact = p_sum_geq(zrp4_small, n, x) - p_sum_geq(zrp4_small, n, x, m)
    rep = estimate_big_jump(zrp4_small, n, x, 100_000, seed=6)
    assert z_score(rep, exact) < 4


def test_single_jump_variant_reports_bias(zrp4_small):
    n = 200
    x = 3 * solve_a_n(zrp4_small, n)
    full = estimate_big_jump(zrp4_small, n, x, 50_000, seed=7)
    one = estimate_big_jump(zrp4_small, n, x, 50_000, seed=7, single_jump=True)
    m = full.details["m"]
    assert one.bias_bound == pytest.approx(0.5 * n * (n - 1) * float(zrp4_small.tail(m)) ** 2)
    assert one.estimate == pytest.approx(full.estimate, abs=4 * math.hypot(one.std_error, full.std_error)
                                         + one.bias_bound)


def test_streams_csv(tmp_path, zrp4_small):
    rep = estimate_direct(zrp4_small, 5, 2, 3000, streams=3)
    path = tmp_path / "streams.csv"
    rep.write_streams_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "stream,count,mean,m2"
    assert sum(int(l.split(",")[1]) for l in lines[1:]) == 3000


# -- conditional sampling ------------------------------------------------------------


def test_conditional_sampler_matches_exact_tail(zrp4_small):
    n = 100
    x = 4 * solve_a_n(zrp4_small, n)
    cs = ConditionalSampler(zrp4_small, n, x, "max_gt_r")
    S = cs.sample(rng_stream(8), 50_000)
    assert np.all(S >= cs.values[0])
    base = cs.base
    for t in (0.0, 5.0, 20.0, 60.0):
        emp = float(np.mean(S - base >= math.ceil(x + t)))
        exact = float(cs.tail([t])[0])
        assert abs(emp - exact) <= 4 * math.sqrt(exact * (1 - exact) / S.size) + 1e-12
    assert cs.unresolved_mass < 0.01


def test_conditional_sampler_rejects_regime(zrp4_small):
    with pytest.raises(ValueError):
        ConditionalSampler(zrp4_small, 10, 3.0, "bogus")


def test_overshoot_experiment_fields(pareto25):
    n = 10**4
    x = 4 * solve_a_n(pareto25, n)
    rep = overshoot_experiment(pareto25, n, x, "max_le_r", 2000, seed=1)
    assert rep.n_samples == 2000
    assert rep.best_scale == "inverse_lambda"
    assert 0.0 <= rep.ks_exp_inverse_lambda <= 1.0
    assert rep.empirical_cdf_at_zero == 0.0


def test_max_scaling_experiment(zrp4_small):
    n = 500
    x = 3 * solve_a_n(zrp4_small, n)
    rep = max_scaling_experiment(zrp4_small, n, x, budget=5000, seed=2)
    assert np.all((rep.exact_conditional >= 0) & (rep.exact_conditional <= 1))
    assert np.all(np.diff(rep.levels) <= 0)
    assert np.all(np.diff(rep.exact_conditional) <= 1e-12)
    np.testing.assert_allclose(rep.predicted, np.exp(-rep.t_grid))
