"""Monte Carlo estimators for sums of lattice variables.

Draws come from Walker alias tables (one uniform per draw) fed by Philox
streams, see :func:`bigjump._rng.rng_stream`.  Every estimator averages i.i.d.
per-path weights; reports from several streams are merged with the
parallel Welford rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit
from scipy import stats

from ._rng import rng_stream
from .laws import LatticeLaw
from .normalizers import solve_a_n, solve_r_n
from .oracle import raw_cap, sum_distribution
from .tilt import solve_lambda

__all__ = [
    "EstimatorReport",
    "LawSampler",
    "RunningMoments",
    "rng_stream",
    "estimate_direct",
    "estimate_gaussian_window",
    "estimate_big_jump",
    "ConditionalSampler",
    "OvershootReport",
    "overshoot_experiment",
    "MaxScalingReport",
    "max_scaling_experiment",
]

METHODS = ("direct", "tilted_window", "big_jump")


# ---------------------------------------------------------------------------
# Moments and reports
# ---------------------------------------------------------------------------


@dataclass
class RunningMoments:
    """Count, mean and centred second moment, mergeable across streams."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def add_batch(self, w: np.ndarray) -> None:
        w = np.asarray(w, dtype=np.float64)
        if w.size == 0:
            return
        bm = float(np.mean(w))
        b2 = float(np.sum((w - bm) ** 2))
        self.merge(RunningMoments(int(w.size), bm, b2))

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean, other.m2
            return self
        n = self.count + other.count
        d = other.mean - self.mean
        self.mean += d * other.count / n
        self.m2 += other.m2 + d * d * self.count * other.count / n
        self.count = n
        return self

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else math.nan

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count > 1 else math.nan


@dataclass
class EstimatorReport:
    estimate: float
    std_error: float
    n_samples: int
    method: str
    seed: int
    stream_count: int
    bias_bound: float = 0.0
    hits: int = 0
    flags: tuple = ()
    details: dict = field(default_factory=dict)
    per_stream: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def rel_std_error(self) -> float:
        return self.std_error / self.estimate if self.estimate > 0 else math.inf

    def write_streams_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("stream,count,mean,m2\n")
            for i, m in enumerate(self.per_stream):
                fh.write(f"{i},{m.count},{m.mean:.17g},{m.m2:.17g}\n")


def _report(streams: list, method: str, seed: int, hits: int, bias: float = 0.0, flags=()) -> EstimatorReport:
    tot = RunningMoments()
    for s in streams:
        tot.merge(RunningMoments(s.count, s.mean, s.m2))
    flags = list(flags)
    if hits == 0:
        flags.append("zero_hits")
    return EstimatorReport(max(tot.mean, 0.0), tot.std_error if hits else 0.0, tot.count, method, seed,
                           len(streams), bias, hits, tuple(flags), {}, streams)


# ---------------------------------------------------------------------------
# Alias sampling
# ---------------------------------------------------------------------------


@njit(cache=True)
def _build_alias(p):
    """Walker/Vose alias table for a probability vector p (sums to one)."""
    K = p.size
    prob = np.empty(K)
    alias = np.arange(K)
    scaled = p * K
    small = np.empty(K, dtype=np.int64)
    large = np.empty(K, dtype=np.int64)
    ns = 0
    nl = 0
    for i in range(K):
        if scaled[i] < 1.0:
            small[ns] = i
            ns += 1
        else:
            large[nl] = i
            nl += 1
    while ns > 0 and nl > 0:
        ns -= 1
        s = small[ns]
        nl -= 1
        g = large[nl]
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        if scaled[g] < 1.0:
            small[ns] = g
            ns += 1
        else:
            large[nl] = g
            nl += 1
    for i in range(nl):
        prob[large[i]] = 1.0
    for i in range(ns):
        prob[small[i]] = 1.0
    return prob, alias


@njit(cache=True)
def _sum_draws(u, counts, prob, alias, k0, n_table):
    """Sum counts[i] alias draws for each path i.

    Category n_table is the right overflow bucket and n_table + 1 the left
    one; they contribute placeholders K_cap + 1 and k0 - 1 and are counted.
    """
    K = prob.size
    ns = counts.size
    S = np.zeros(ns, dtype=np.int64)
    M = np.full(ns, np.iinfo(np.int64).min, dtype=np.int64)
    over_r = np.zeros(ns, dtype=np.int64)
    over_l = np.zeros(ns, dtype=np.int64)
    pos = 0
    for i in range(ns):
        s = 0
        mx = np.iinfo(np.int64).min
        for _ in range(counts[i]):
            v = u[pos] * K
            pos += 1
            j = int(v)
            if j >= K:
                j = K - 1
            if v - j >= prob[j]:
                j = alias[j]
            if j < n_table:
                val = k0 + j
            elif j == n_table:
                val = k0 + n_table
                over_r[i] += 1
            else:
                val = k0 - 1
                over_l[i] += 1
            s += val
            if val > mx:
                mx = val
        S[i] = s
        M[i] = mx
    return S, M, over_r, over_l


class LawSampler:
    """Alias sampler for a law, optionally capped at m and tilted.

    With a tilt the masses are p(k) exp(tilt (k - mu)) for k <= m, normalised;
    ``log_norm`` is the log of their total, so the likelihood ratio of a path
    is exp(n log_norm - tilt (S - n mu)).  Without a cap the masses beyond the
    stored table are two overflow categories, resolved afterwards by exact
    inversion of the tail.
    """

    def __init__(self, law: LatticeLaw, m: Optional[int] = None, tilt: float = 0.0):
        self.law = law
        self.m = m
        self.tilt = float(tilt)
        k0 = law.k_min
        top = law.K_cap if m is None else min(int(m), law.K_cap)
        if top < k0:
            raise ValueError("cap below the support")
        ks = np.arange(k0, top + 1)
        p = np.array(law.pmf_table[: top - k0 + 1], dtype=np.float64)
        right = law.tail(law.K_cap) if m is None or m > law.K_cap else 0.0
        if m is not None and m > law.K_cap:
            right -= law.tail(m)
        left = float(law.cdf(k0 - 1)) if law.left_tail is not None else 0.0
        if self.tilt != 0.0:
            if right > 0 or left > 0:
                raise ValueError("tilted sampling needs a cap inside the table and no left remainder")
            d = ks - law.mean
            lw = self.tilt * d
            shift = float(lw.max())
            p = p * np.exp(lw - shift)
            self.log_norm = math.log(float(np.sum(p))) + shift
        else:
            self.log_norm = math.log(float(np.sum(p)) + right + left)
        full = np.concatenate((p, [right, left]))
        full /= full.sum()
        self.k0 = k0
        self.n_table = ks.size
        self.prob, self.alias = _build_alias(full)
        self.right_mass, self.left_mass = right, left
        self.mean = float(np.dot(full[: ks.size], ks)) + right * (top + 1) + left * (k0 - 1)

    def _resolve(self, values_needed: int, rng, side: str) -> np.ndarray:
        """Exact draws from the law beyond the table on one side."""
        law = self.law
        u = rng.random(values_needed)
        if side == "right":
            base = law.tail(law.K_cap)
            cap_mass = 0.0 if self.m is None else law.tail(self.m)
            targets = cap_mass + u * (base - cap_mass)
            out = np.empty(values_needed, dtype=np.int64)
            for i, t in enumerate(targets):
                lo, hi = law.K_cap, 2 * law.K_cap
                while law.tail(hi) > t:
                    lo, hi = hi, 2 * hi
                while hi - lo > 1:  # smallest k with tail(k) <= t, i.e. P(xi <= k) >= 1 - t
                    mid = (lo + hi) // 2
                    if law.tail(mid) > t:
                        lo = mid
                    else:
                        hi = mid
                out[i] = hi
            return out
        base = float(law.cdf(law.k_min - 1))
        targets = u * base
        out = np.empty(values_needed, dtype=np.int64)
        for i, t in enumerate(targets):
            lo, hi = 2 * law.k_min, law.k_min - 1
            while law.cdf(lo) > t:
                lo, hi = 2 * lo, lo
            while hi - lo > 1:  # largest k with cdf(k) <= t, then +1
                mid = (lo + hi) // 2
                if law.cdf(mid) > t:
                    hi = mid
                else:
                    lo = mid
            out[i] = hi
        return out

    def sum_paths(self, counts: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """(S, M) for paths with counts[i] draws each (M = -inf-ish for empty paths)."""
        counts = np.asarray(counts, dtype=np.int64)
        u = rng.random(int(counts.sum()))
        S, M, over_r, over_l = _sum_draws(u, counts, self.prob, self.alias, self.k0, self.n_table)
        for side, over, placeholder in (("right", over_r, self.k0 + self.n_table), ("left", over_l, self.k0 - 1)):
            idx = np.flatnonzero(over)
            if idx.size == 0:
                continue
            vals = self._resolve(int(over[idx].sum()), rng, side)
            pos = 0
            for i in idx:
                v = vals[pos: pos + over[i]]
                pos += over[i]
                S[i] += int(v.sum()) - placeholder * over[i]
                if side == "right":
                    M[i] = max(M[i], int(v.max()))
        return S, M


def _chunks(total: int, n: int, max_draws: int = 1 << 22):
    per = max(1, max_draws // max(n, 1))
    done = 0
    while done < total:
        k = min(per, total - done)
        yield k
        done += k


def _split_budget(budget: int, streams: int) -> list[int]:
    base, extra = divmod(int(budget), int(streams))
    return [base + (1 if i < extra else 0) for i in range(streams)]


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


def _threshold(law: LatticeLaw, n: int, x: float) -> int:
    """Raw threshold s with {S_n - floor(n mu) >= x} = {S_n >= s}."""
    return int(math.floor(n * law.mean)) + int(math.ceil(x))


def estimate_direct(law: LatticeLaw, n: int, x: float, budget: int, *, seed: int = 0, streams: int = 1,
                    m: Optional[int] = None) -> EstimatorReport:
    """Plain simulation of P(S_n - floor(n mu) >= x[, M_n <= m])."""
    s = _threshold(law, n, x)
    sampler = LawSampler(law)
    parts, hits = [], 0
    for sid, size in enumerate(_split_budget(budget, streams)):
        rng = rng_stream(seed, sid)
        mom = RunningMoments()
        for k in _chunks(size, n):
            S, M = sampler.sum_paths(np.full(k, n), rng)
            ok = S >= s
            if m is not None:
                ok &= M <= m
            hits += int(ok.sum())
            mom.add_batch(ok.astype(np.float64))
        parts.append(mom)
    return _report(parts, "direct", seed, hits)


def estimate_gaussian_window(law: LatticeLaw, n: int, x: float, budget: int, *, seed: int = 0,
                             streams: int = 1, r: Optional[float] = None) -> EstimatorReport:
    """Importance sampling of P(S_n - floor(n mu) >= x, M_n <= m), m = floor(mu + r_n).

    Draws come from the law restricted to k <= m and tilted so that the mean
    of S_n sits on the threshold.  The weight of a path is
    exp(n log M(lambda) - lambda (S_n - n mu)) on the event, which is at most
    exp(-n H) (H the tilted entropy at the threshold).  When the threshold is
    at or below the capped mean the tilt is zero and this is direct
    simulation of the capped event.
    """
    if r is None:
        r = solve_r_n(law, n, x).r
    m = raw_cap(law, r)
    s = _threshold(law, n, x)
    mu = law.mean
    target = (s - n * mu) / n
    sampler0 = LawSampler(law, m)
    if target <= sampler0.mean - mu:
        lam = 0.0
    else:
        lam = solve_lambda(law, target, m - mu + 0.5).lam
    sampler = LawSampler(law, m, lam)
    parts, hits = [], 0
    for sid, size in enumerate(_split_budget(budget, streams)):
        rng = rng_stream(seed, sid)
        mom = RunningMoments()
        for k in _chunks(size, n):
            S, _ = sampler.sum_paths(np.full(k, n), rng)
            ok = S >= s
            w = np.zeros(k)
            w[ok] = np.exp(n * sampler.log_norm - lam * (S[ok] - n * mu))
            hits += int(ok.sum())
            mom.add_batch(w)
        parts.append(mom)
    rep = _report(parts, "tilted_window", seed, hits)
    rep.details.update(tilt=lam, m=m, weight_cap=math.exp(n * sampler.log_norm - lam * (s - n * mu)))
    return rep


def estimate_big_jump(law: LatticeLaw, n: int, x: float, budget: int, *, seed: int = 0, streams: int = 1,
                      r: Optional[float] = None, single_jump: bool = False) -> EstimatorReport:
    """Estimate P(S_n - floor(n mu) >= x, M_n > m), m = floor(mu + r_n).

    The default conditions on the first index I whose value exceeds m: with I
    uniform on 1..n, the first I - 1 values drawn from the law capped at m and
    the last n - I from the full law, the weight
    n F(m)^{I-1} P(xi >= max(m + 1, s - R)) (R the sum of the other values)
    is unbiased.  ``single_jump=True`` keeps all other values capped, which
    estimates the probability of exactly one exceedance; the missing part is
    at most C(n, 2) Fbar(m)^2 and is reported as ``bias_bound``.
    """
    if r is None:
        r = solve_r_n(law, n, x).r
    m = raw_cap(law, r)
    s = _threshold(law, n, x)
    capped = LawSampler(law, m)
    full = LawSampler(law) if not single_jump else None
    logF = capped.log_norm  # log P(xi <= m)
    fbar = float(law.tail(m))
    bias = 0.5 * n * (n - 1) * fbar * fbar if single_jump else 0.0
    parts, hits = [], 0
    for sid, size in enumerate(_split_budget(budget, streams)):
        rng = rng_stream(seed, sid)
        mom = RunningMoments()
        for k in _chunks(size, n):
            if single_jump:
                R, _ = capped.sum_paths(np.full(k, n - 1), rng)
                logw = np.full(k, math.log(n) + (n - 1) * logF)
            else:
                idx = rng.integers(1, n + 1, size=k)
                R1, _ = capped.sum_paths(idx - 1, rng)
                R2, _ = full.sum_paths(n - idx, rng)
                R = R1 + R2
                logw = math.log(n) + (idx - 1) * logF
            need = np.maximum(m + 1, s - R)
            w = np.exp(logw) * law.tail(need - 1)
            hits += int(np.count_nonzero(w))
            mom.add_batch(w)
        parts.append(mom)
    rep = _report(parts, "big_jump", seed, hits, bias)
    if single_jump and bias > 0.1 * rep.estimate:
        rep.flags = rep.flags + ("bias_bound_exceeds_10pct",)
    rep.details.update(m=m)
    return rep


# ---------------------------------------------------------------------------
# Conditional laws of the sum
# ---------------------------------------------------------------------------


class ConditionalSampler:
    """Exact inverse-CDF draws of S_n given {S_n - floor(n mu) >= x} and a regime.

    The masses come from the oracle on a window reaching ``reach`` times x
    above the threshold.  Mass beyond the window is reported as
    ``unresolved_mass`` (relative to the conditioning event); draws never
    land there.
    """

    def __init__(self, law: LatticeLaw, n: int, x: float, regime: str, r: Optional[float] = None,
                 reach: float = 400.0, kernel: str = "auto"):
        if regime not in ("max_le_r", "max_gt_r", "any"):
            raise ValueError("regime must be max_le_r, max_gt_r or any")
        if r is None:
            r = solve_r_n(law, n, x).r
        self.law, self.n, self.x, self.regime, self.r = law, n, x, regime, r
        self.m = raw_cap(law, r)
        self.base = int(math.floor(n * law.mean))
        s0 = _threshold(law, n, x)
        a = solve_a_n(law, n)
        lo = int(self.base - 40 * a)
        if regime == "max_le_r":
            hi = int(s0 + 60 * a)
        else:
            hi = int(s0 + reach * max(x, a))
        self.values = np.arange(s0, hi + 1)
        self._tabulate((lo, hi), s0, kernel)
        if kernel == "auto" and self.probability < 1e-10:
            # FFT round-off is of order 1e-16 of the peak mass; redo with the
            # direct kernel when the event is that rare
            self._tabulate((lo, hi), s0, "direct")

    def _tabulate(self, window, s0, kernel):
        law, n, regime = self.law, self.n, self.regime
        cap = sum_distribution(law, n, self.m, window, kernel=kernel) if regime != "any" else None
        full = sum_distribution(law, n, None, window, kernel=kernel) if regime != "max_le_r" else None
        i0 = s0 - window[0]
        if regime == "max_le_r":
            w = cap.masses[i0:].copy()
            beyond = cap.overflow_mass
        elif regime == "any":
            w = full.masses[i0:].copy()
            beyond = full.overflow_mass
        else:
            w = np.maximum(full.masses[i0:] - cap.masses[i0:], 0.0)
            beyond = max(full.overflow_mass - cap.overflow_mass, 0.0)
        inside = float(np.sum(w[::-1]))
        self.cdf = np.cumsum(w) / inside
        self.cdf[-1] = 1.0
        self.probability = inside + beyond
        self.unresolved_mass = beyond / self.probability
        self.kernel = kernel

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Raw sums S_n."""
        idx = np.searchsorted(self.cdf, rng.random(size), side="right")
        return self.values[np.minimum(idx, self.values.size - 1)]

    def tail(self, t) -> np.ndarray:
        """Exact P(S_n - floor(n mu) >= x + t | condition) for t inside the window."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        k = np.ceil(self.x + t).astype(np.int64) + self.base - self.values[0]
        inside_mass = 1.0 - self.unresolved_mass
        out = np.where(k <= 0, 1.0, 0.0)
        ok = (k > 0) & (k < self.values.size)
        out[ok] = (1.0 - self.cdf[k[ok] - 1]) * inside_mass + self.unresolved_mass
        out[k >= self.values.size] = self.unresolved_mass
        return out


@dataclass
class OvershootReport:
    regime: str
    n_samples: int
    ks_exp_inverse_lambda: float
    ks_exp_sqrt_x_over_r: float
    best_scale: str
    scale_inverse_lambda: float
    scale_sqrt_x_over_r: float
    ks_pareto: float
    tail_ratio_max_rel_error: float
    unresolved_mass: float
    empirical_cdf_at_zero: float
    flags: tuple = ()


def overshoot_experiment(law: LatticeLaw, n: int, x: float, regime: str, budget: int = 10_000, *,
                         seed: int = 0, r: Optional[float] = None, beta: Optional[float] = None,
                         t_grid: Optional[np.ndarray] = None, kernel: str = "auto") -> OvershootReport:
    """Overshoot of S_n over x conditioned on the regime, against the candidate limits.

    Exact conditional draws of S_n are jittered by an independent uniform on
    [0, 1) so the lattice values can be compared with continuous laws.  The
    overshoot D = S_n - floor(n mu) - x is compared with Exp(1) after dividing
    by 1/lambda_n and by sqrt(x / r_n); (S_n - floor(n mu)) / x with Pareto(beta).
    The exact conditional tail is also compared with Fbar(x + t) / Fbar(x) on
    ``t_grid`` (default: 64 points in [0, x]).
    """
    x = float(math.ceil(x))
    sampler = ConditionalSampler(law, n, x, regime, r, kernel=kernel)
    rng = rng_stream(seed, 0)
    S = sampler.sample(rng, budget)
    jitter = rng.random(budget)
    D = S - sampler.base - x + jitter
    beta = law.beta if beta is None else beta
    lam = solve_lambda(law, x / n, sampler.r).lam if x / n > 0 else math.nan
    scale_l = 1.0 / lam if lam > 0 else math.inf
    scale_r = math.sqrt(x / sampler.r)
    ks_l = float(stats.kstest(D / scale_l, "expon").statistic) if math.isfinite(scale_l) else 1.0
    ks_r = float(stats.kstest(D / scale_r, "expon").statistic)
    best = "inverse_lambda" if ks_l <= ks_r else "sqrt_x_over_r"
    ks_p = float(stats.kstest((S - sampler.base + jitter) / x, "pareto", args=(beta,)).statistic)
    if t_grid is None:
        t_grid = np.linspace(0.0, x, 64)
    exact = sampler.tail(t_grid)
    mu = law.mean
    fb = lambda y: law.tail(np.ceil(mu + y) - 1)
    pred = fb(x + t_grid) / fb(x)
    rel = float(np.max(np.abs(exact / pred - 1.0)))
    flags = ()
    if sampler.unresolved_mass * budget > 0.1:
        flags = ("sample_starvation",)
    return OvershootReport(regime, budget, ks_l, ks_r, best, scale_l, scale_r, ks_p, rel,
                           sampler.unresolved_mass, float(np.mean(D <= 0)), flags)


@dataclass
class MaxScalingReport:
    t_grid: np.ndarray
    levels: np.ndarray
    predicted: np.ndarray
    exact_conditional: np.ndarray
    max_distance: float
    ks_normal_rest: float
    n_jump_samples: int


def max_scaling_experiment(law: LatticeLaw, n: int, x: float, budget: int = 20_000, *, seed: int = 0,
                           r: Optional[float] = None, t_grid=None) -> MaxScalingReport:
    """Exploratory look at the maximum under both regimes.

    Without a big jump: the exact P(M_n <= t_n | S_n - floor(n mu) >= x, M_n <= r_n),
    with n Fbar(t_n) = t, is compared with the unconditioned prediction e^{-t}.
    With one: paths are simulated, those with M_n > r_n kept, and
    (S_n - n mu - M_n) / a_n is compared with the standard normal.
    """
    from .oracle import p_sum_geq

    if r is None:
        r = solve_r_n(law, n, x).r
    m = raw_cap(law, r)
    if t_grid is None:
        t_grid = np.array([0.25, 0.5, 1.0, 2.0, 4.0])
    t_grid = np.asarray(t_grid, dtype=np.float64)
    den = p_sum_geq(law, n, x, m)
    exact = np.empty(t_grid.size)
    levels = np.empty(t_grid.size, dtype=np.int64)
    for i, t in enumerate(t_grid):
        # smallest level with n Fbar(level) <= t
        lo, hi = law.k_min, max(m, law.k_min + 1)
        while n * law.tail(hi) > t:
            hi *= 2
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if n * law.tail(mid) > t:
                lo = mid
            else:
                hi = mid
        levels[i] = hi
        # levels at or above the cap are certain under the conditioning
        exact[i] = p_sum_geq(law, n, x, hi) / den if hi < m else 1.0
    pred = np.exp(-t_grid)
    a = solve_a_n(law, n)
    sampler = LawSampler(law)
    rng = rng_stream(seed, 0)
    rest = []
    for k in _chunks(budget, n):
        S, M = sampler.sum_paths(np.full(k, n), rng)
        keep = M > m
        rest.append((S[keep] - n * law.mean - M[keep]) / a)
    rest = np.concatenate(rest) if rest else np.zeros(0)
    ks = float(stats.kstest(rest, "norm").statistic) if rest.size else math.nan
    return MaxScalingReport(t_grid, levels, pred, exact, float(np.max(np.abs(exact - pred))), ks, int(rest.size))
