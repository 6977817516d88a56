"""Exact law of lattice sums S_n, with and without a cap on the maximum.

The n-fold convolution is built by binary exponentiation.  Each partial
convolution lives on a window; mass that leaves the window is kept in two
lumped buckets (below / above) so that every distribution carries its full
mass.  Whenever a bucketed mass could in principle re-enter a later window,
the amount that could do so is bounded from the stored tables and added to a
rigorous ``truncation_error_bound``.

The cap ``M_n <= m`` is applied by truncating the single-step masses at ``m``
before convolving; ``M_n > m`` is obtained by subtraction.
"""

from __future__ import annotations

import hashlib
import itertools
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import signal

from .laws import LatticeLaw
from .normalizers import solve_a_n, solve_r_n

__all__ = [
    "SumDistribution",
    "sum_distribution",
    "sequential_sum_distribution",
    "enumerate_sum_distribution",
    "p_sum_geq",
    "p_sum_eq",
    "log_p_sum_eq",
    "log_p_sum_geq",
    "Decomposition",
    "decompose",
    "conditional_max_cdf",
    "conditional_overshoot_tail",
    "backward_sample",
    "tv_remaining_vs_product",
    "raw_cap",
    "default_window",
]

DIRECT_KERNEL_MAX = 4096
CLAMP = 1e-16


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass
class SumDistribution:
    """Law of S_n on the integer window [lo, hi] plus lumped outer masses.

    With ``tilt == 0`` the entries are probabilities.  Otherwise they are
    masses of the exponentially tilted law and the true probabilities are
    ``masses[s - lo] * exp(log_scale - tilt * (s - center))``.
    """

    n: int
    lo: int
    hi: int
    masses: np.ndarray
    underflow_mass: float
    overflow_mass: float
    max_constraint: Optional[int]
    truncation_error_bound: float
    tilt: float = 0.0
    log_scale: float = 0.0
    center: float = 0.0
    clamp_audit: float = 0.0

    @property
    def window(self) -> tuple[int, int]:
        return self.lo, self.hi

    @property
    def total(self) -> float:
        return float(np.sum(self.masses)) + self.underflow_mass + self.overflow_mass

    def _weights(self, s: np.ndarray) -> np.ndarray:
        if self.tilt == 0.0 and self.log_scale == 0.0:
            return np.ones_like(s, dtype=np.float64)
        return np.exp(self.log_scale - self.tilt * (s - self.center))

    def pmf(self, s) -> np.ndarray:
        """P(S_n = s) for s inside the window (0 outside)."""
        s = np.atleast_1d(np.asarray(s, dtype=np.int64))
        out = np.zeros(s.shape)
        ok = (s >= self.lo) & (s <= self.hi)
        out[ok] = self.masses[s[ok] - self.lo] * self._weights(s[ok].astype(np.float64))
        return out

    def prob_eq(self, s: int) -> float:
        return float(self.pmf(s)[0])

    def prob_geq(self, s: int) -> float:
        """P(S_n >= s); requires s inside the window (or above it)."""
        s = int(math.ceil(s))
        if s > self.hi:
            return self.overflow_mass if self.tilt == 0.0 else float("nan")
        if s < self.lo:
            raise ValueError(f"threshold {s} below the window start {self.lo}")
        ks = np.arange(s, self.hi + 1, dtype=np.float64)
        part = self.masses[s - self.lo:]
        if self.tilt == 0.0 and self.log_scale == 0.0:
            return float(np.sum(part[::-1])) + self.overflow_mass
        return float(np.sum(part * self._weights(ks)))

    def tail_array(self) -> np.ndarray:
        """P(S_n >= s) for every s in the window (untilted only)."""
        if self.tilt != 0.0:
            raise ValueError("tail_array needs an untilted distribution")
        return np.cumsum(self.masses[::-1])[::-1] + self.overflow_mass

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("s,mass\n")
            for s, m in zip(range(self.lo, self.hi + 1), self.masses):
                fh.write(f"{s},{m:.17g}\n")


@dataclass
class _Part:
    """Partial convolution: masses on [lo, lo+len-1], lumped under/over."""

    lo: int
    w: np.ndarray
    under: float
    over: float

    @property
    def hi(self) -> int:
        return self.lo + self.w.size - 1

    @property
    def total(self) -> float:
        return math.fsum(self.w) + self.under + self.over


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def _convolve(a: np.ndarray, b: np.ndarray, kernel: str = "auto") -> tuple[np.ndarray, float]:
    """Linear convolution; direct for small windows, FFT otherwise.

    The direct kernel is accurate relative to every entry (all terms are
    nonnegative), the FFT kernel only relative to the largest entry.
    ``kernel="direct"`` forces the former for deep-tail work.
    Returns the result and the clamped negative mass (audit value).
    """
    if kernel == "direct" or (kernel == "auto" and (min(a.size, b.size) <= 64 or max(a.size, b.size) <= DIRECT_KERNEL_MAX)):
        return np.convolve(a, b), 0.0
    c = signal.fftconvolve(a, b)
    peak = float(c.max()) if c.size else 0.0
    neg = c < 0
    clamped = float(-c[neg].sum())
    if np.any(c < -CLAMP * 64 * peak):
        # Genuine negative excursions beyond round-off would signal a bug.
        raise FloatingPointError("FFT convolution produced large negative masses")
    c[neg] = 0.0
    # Renormalisation audit: the FFT total drifts by O(1e-15) per call and the
    # drift doubles at every squaring, so restore the exact product of masses.
    target = math.fsum(a) * math.fsum(b)
    got = math.fsum(c)
    if got > 0 and target > 0:
        c *= target / got
        clamped += abs(got - target)
    return c, clamped


def _combine(A: _Part, B: _Part, lo: int, hi: int,
             target: Optional[float] = None, kernel: str = "auto") -> tuple[_Part, float, float, float]:
    """Convolve two partial laws and clip to [lo, hi].

    Returns the new part, the freshly lumped masses (below, above) produced by
    clipping the window convolution, and the clamp audit value.  Mass that was
    already lumped in A or B stays lumped on the same side; pairs lumped on
    opposite sides are assigned to the upper bucket.
    """
    c, clamped = _convolve(A.w, B.w, kernel)
    c_lo = A.lo + B.lo
    start = max(lo, c_lo)
    stop = min(hi, c_lo + c.size - 1)
    below = float(np.sum(c[: max(0, min(c.size, lo - c_lo))]))
    above = float(np.sum(c[max(0, hi - c_lo + 1):]))
    out = np.zeros(hi - lo + 1)
    if start <= stop:
        out[start - lo: stop - lo + 1] = c[start - c_lo: stop - c_lo + 1]
    wA = A.total - A.under - A.over
    wB = B.total - B.under - B.over
    over = above + A.over * (wB + B.over + B.under) + B.over * (wA + A.under)
    under = below + A.under * (wB + B.under) + B.under * wA
    if target is not None and target > 0:
        # Rounding in the total would double at every squaring; pin it to
        # the known total (step mass to the power k).
        got = math.fsum(out) + under + over
        if got > 0:
            f = target / got
            out *= f
            under *= f
            over *= f
            below *= f
            above *= f
            clamped += abs(got - target)
    return _Part(lo, out, under, over), below, above, clamped


# ---------------------------------------------------------------------------
# Step law
# ---------------------------------------------------------------------------


def raw_cap(law: LatticeLaw, r: float) -> int:
    """Raw cap m with {xi - mu <= r} = {xi <= m}."""
    return int(math.floor(law.mean + r))


def _step_part(law: LatticeLaw, lo: int, hi: int, m: Optional[int], tilt: float) -> tuple[_Part, float, float]:
    """Single-step masses on [lo, hi] (truncated at m), lumped outside.

    Returns the part, the tilted normaliser log M (0 when untilted) and an
    error bound for lumped masses that could only be bounded.
    """
    top = law.support_max if m is None else min(m, law.support_max)
    bottom = law.support_min
    err = 0.0
    mu = law.mean
    if top < bottom:
        return _Part(lo, np.zeros(hi - lo + 1), 0.0, 0.0), -math.inf, 0.0
    ks = np.arange(lo, hi + 1)
    p = law.pmf(ks)
    if m is not None:
        p[ks > m] = 0.0
    if tilt == 0.0:
        under = float(law.cdf(lo - 1)) if lo > bottom else 0.0
        if hi >= top:
            over = 0.0
        elif m is None:
            over = float(law.tail(hi))
        else:
            over = float(law.cdf(m)) - float(law.cdf(hi))
            over = max(over, 0.0)
        # Table and analytic tail agree to a few ulp; n-fold convolution
        # would amplify that by n, so pin the step total to F(m) (or one).
        want = 1.0 if m is None else min(1.0, float(law.cdf(m)))
        z = math.fsum(p) + under + over
        if z > 0 and want > 0:
            f = want / z
            p, under, over = p * f, under * f, over * f
        return _Part(lo, p, under, over), 0.0, 0.0
    # tilted: weights p(k) exp(tilt (k - mu)), normalised
    if tilt > 0 and not math.isfinite(top):
        raise ValueError("a positive tilt needs a finite cap m")
    # work in log space relative to the top of the represented range
    ref = float(min(hi, top)) - mu if tilt > 0 else float(max(lo, bottom)) - mu
    wts = p * np.exp(tilt * (ks - mu) - tilt * ref)
    over = 0.0
    if hi < top:
        kk = np.arange(hi + 1, int(top) + 1)
        over = float(np.sum(law.pmf(kk) * np.exp(tilt * (kk - mu) - tilt * ref)))
    under = 0.0
    if lo > bottom:
        if math.isfinite(bottom):
            kk = np.arange(int(bottom), lo)
            under = float(np.sum(law.pmf(kk) * np.exp(tilt * (kk - mu) - tilt * ref)))
        else:
            # analytic left tail: bound by its mass times the largest weight
            under = float(law.cdf(lo - 1)) * math.exp(tilt * (lo - 1 - mu) - tilt * ref)
            err = under
    Z = float(np.sum(wts)) + over + under
    log_M = math.log(Z) + tilt * ref
    return _Part(lo, wts / Z, under / Z, over / Z), log_M, err / Z


class _DeviationBound:
    """Rigorous bounds on P(S_m <= c) and P(S_m >= c) for sums of the step law.

    Truncated Chernoff: for a cut y and theta > 0,
    P(S_m - m mu <= -g) <= m P(xi - mu < -y) + exp(-theta g) E[exp(-theta (xi - mu)); xi - mu >= -y]^m.
    Log-moment sums are tabulated once on a geometric theta grid and a few
    cuts, then minimised per query.
    """

    _THETA_STEPS = np.arange(-20, 41)

    def __init__(self, law: LatticeLaw, m: Optional[int], tilt: float, center: float, spread: int):
        spread = max(int(spread), 64)
        top = law.support_max if m is None else min(m, law.support_max)
        a = int(math.floor(center - spread))
        b = int(math.ceil(center + spread))
        if math.isfinite(law.support_min):
            a = max(a, int(law.support_min))
        if math.isfinite(top):
            b = min(b, int(top))
        b = max(a, b)
        part, _, _ = _step_part(law, a, b, m, tilt)
        tot = part.total
        self.p = part.w / tot
        self.below = part.under / tot
        self.above = part.over / tot
        self.d = np.arange(part.lo, part.hi + 1, dtype=np.float64) - center
        self.center = center
        self.spread = spread
        self.thetas = 2.0 ** (self._THETA_STEPS / 2.0) / spread
        self._tables: dict = {}

    def _table(self, side: str):
        """(cut tail masses, log-moment table [cut, theta]) for the given side."""
        if side in self._tables:
            return self._tables[side]
        if side == "left":
            d, p, lump_out, lump_in = self.d, self.p, self.below, self.above
        else:
            d, p, lump_out, lump_in = -self.d[::-1], self.p[::-1], self.above, self.below
        # lump_out sits beyond d.min() in the deviation direction, lump_in beyond d.max()
        logp = np.log(np.where(p > 0, p, 1.0))
        logp[p <= 0] = -np.inf
        if lump_out > 0:
            cuts = [self.spread * f for f in (1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0)]
        else:
            cuts = [math.inf]
        cut_mass = []
        logm = np.full((len(cuts), self.thetas.size), np.inf)
        dmax = d.max() if d.size else 0.0
        for i, y in enumerate(cuts):
            keep = d >= -y
            cut_mass.append(lump_out + float(np.sum(p[~keep])))
            dk, lk = d[keep], logp[keep]
            for j, th in enumerate(self.thetas):
                terms = lk - th * dk
                if lump_in > 0:
                    terms = np.append(terms, math.log(lump_in) - th * (dmax + 1.0))
                mx = terms.max() if terms.size else -np.inf
                logm[i, j] = mx + math.log(np.sum(np.exp(terms - mx))) if np.isfinite(mx) else -np.inf
        self._tables[side] = (np.array(cut_mass), logm)
        return self._tables[side]

    def _bound(self, side: str, m: int, g: float) -> float:
        if g <= 0:
            return 1.0
        cut_mass, logm = self._table(side)
        expo = -self.thetas[None, :] * g + m * logm
        best = np.exp(np.min(expo, axis=1)) + m * cut_mass
        return float(min(1.0, best.min()))

    def left(self, m: int, c: float) -> float:
        """Upper bound on P(S_m <= c)."""
        return self._bound("left", m, m * self.center - c)

    def right(self, m: int, c: float) -> float:
        """Upper bound on P(S_m >= c)."""
        return self._bound("right", m, c - m * self.center)


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


def default_window(law: LatticeLaw, n: int, x_hi: float, width: float = 40.0,
                   centered: bool = True) -> tuple[int, int]:
    """[mu n - width a_n, x + width a_n] in raw coordinates.

    ``x_hi`` is in recentred coordinates (relative to floor(n mu)) when
    ``centered``.
    """
    a = solve_a_n(law, n)
    base = math.floor(n * law.mean) if centered else 0
    lo = int(math.floor(n * law.mean - width * a))
    hi = int(math.ceil(base + x_hi + width * a))
    if math.isfinite(law.support_min):
        lo = max(lo, int(n * law.support_min))
    if math.isfinite(law.support_max):
        hi = min(hi, int(n * law.support_max))
    return lo, max(hi, lo)


_CACHE: dict = {}
_CACHE_MAX = 24


def _cache_key(law, n, m, lo, hi, tilt, guard):
    return (law.hash, n, m, lo, hi, float(tilt), guard)


def sum_distribution(law: LatticeLaw, n: int, m: Optional[int] = None,
                     window: Optional[tuple[int, int]] = None, *, x_hi: Optional[float] = None,
                     eps: Optional[float] = None, tilt: float = 0.0, guard: Optional[int] = None,
                     cache_dir: Optional[str] = None, kernel: str = "auto") -> SumDistribution:
    """Exact law of S_n (jointly with M_n <= m when m is given).

    Parameters
    ----------
    window : raw window [lo, hi]; by default ``default_window`` around
        ``x_hi`` (recentred) or around the mean.
    eps : if given, raise when the declared truncation error bound exceeds it.
    tilt : exponential tilt applied to the centred step, see
        :class:`SumDistribution`.
    guard : extra room kept on intermediate windows (default: half the
        window width plus 64).
    kernel : ``auto`` (direct up to width 4096, FFT above) or ``direct``
        (entrywise relative accuracy, needed for probabilities far below
        1e-12 of the peak mass).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if window is None:
        window = default_window(law, n, 0.0 if x_hi is None else x_hi)
    lo, hi = int(window[0]), int(window[1])
    if hi < lo:
        raise ValueError("empty window")
    if guard is None:
        guard = (hi - lo) // 2 + 64
    key = _cache_key(law, n, m, lo, hi, tilt, guard) + (kernel,)
    if key in _CACHE:
        return _CACHE[key]
    if cache_dir is not None:
        path = os.path.join(cache_dir, hashlib.sha256(repr(key).encode()).hexdigest()[:24] + ".npz")
        if os.path.exists(path):
            d = np.load(path)
            res = SumDistribution(n, lo, hi, d["masses"], *map(float, d["scalars"][:2]), m,
                                  float(d["scalars"][2]), tilt, float(d["scalars"][3]),
                                  float(d["scalars"][4]), float(d["scalars"][5]))
            _CACHE[key] = res
            return res

    mu = law.mean
    top = law.support_max if m is None else min(m, law.support_max)
    bottom = law.support_min
    if top < bottom:
        # the cap excludes every value of the step: M_n <= m is impossible
        return SumDistribution(n, lo, hi, np.zeros(hi - lo + 1), 0.0, 0.0, m, 0.0)

    # effective mean of the (possibly capped) step, for window placement
    if m is not None and math.isfinite(top):
        mu_eff = mu if top >= law.K_cap else float(
            np.dot(np.arange(law.k_min, int(top) + 1), law.pmf_table[: int(top) - law.k_min + 1])
            / max(law.cdf(top), 1e-300))
    else:
        mu_eff = mu
    if tilt != 0.0:
        mu_eff = None  # recomputed from the tilted step below

    def win(k: int, mean: float) -> tuple[int, int]:
        rest = n - k
        h = hi + guard - int(math.floor(mean * rest))
        if math.isfinite(bottom):
            h = min(h, hi - rest * int(bottom))
        l_ = lo - guard - int(math.ceil(mean * rest))
        if math.isfinite(top):
            l_ = max(l_, lo - rest * int(top))
        if math.isfinite(bottom):
            l_ = max(l_, k * int(bottom))
        if math.isfinite(top):
            h = min(h, k * int(top))
        return l_, max(h, l_)

    if tilt != 0.0:
        # mean of the tilted step from a provisional wide representation
        lo1p = int(bottom) if math.isfinite(bottom) else law.k_min
        probe, _, _ = _step_part(law, lo1p, int(top), m, tilt)
        ks = np.arange(probe.lo, probe.hi + 1)
        mu_eff = float(np.dot(ks, probe.w) / max(np.sum(probe.w), 1e-300))

    l1, h1 = win(1, mu_eff)
    step, log_M, err = _step_part(law, l1, h1, m, tilt)
    error = err * n
    clamp_total = 0.0
    if tilt == 0.0:
        step_total = 1.0 if m is None else min(1.0, float(law.cdf(m)))
    else:
        step_total = step.total
    log_total = math.log(step_total) if step_total > 0 else -math.inf

    def target(k: int) -> Optional[float]:
        return math.exp(k * log_total) if step_total > 0 else None

    # (k, multiplicity in the expanded convolution tree, fresh below, fresh above)
    nodes = [(1, n, step.under, step.over)]

    result: Optional[_Part] = None
    k_res = 0
    power = step
    j = 0
    bits = n
    while True:
        if bits & 1:
            k_pow = 1 << j
            if result is None:
                result, k_res = power, k_pow
            else:
                k_res += k_pow
                lw, hw = win(k_res, mu_eff)
                result, fb, fa, cl = _combine(result, power, lw, hw, target(k_res), kernel)
                clamp_total += cl
                if k_res < n:
                    nodes.append((k_res, 1, fb, fa))
        bits >>= 1
        if not bits:
            break
        j += 1
        lw, hw = win(1 << j, mu_eff)
        power, fb, fa, cl = _combine(power, power, lw, hw, target(1 << j), kernel)
        clamp_total += cl
        nodes.append((1 << j, n >> j, fb, fa))

    assert result is not None and k_res == n
    if (result.lo, result.hi) != (lo, hi):
        result, _, _, _ = _combine(result, _Part(0, np.ones(1), 0.0, 0.0), lo, hi, target(n))

    # Lumped mass from a node covering k steps can only re-enter the final
    # window if the remaining n - k steps deviate past the window gap.
    dev = _DeviationBound(law, m, tilt, mu_eff, hi - lo + 2 * guard)
    for k, count, fb, fa in nodes:
        if k >= n:
            continue
        lw, hw = win(k, mu_eff)
        if fa > 0:
            error += count * fa * dev.left(n - k, hi - hw - 1)
        if fb > 0:
            error += count * fb * dev.right(n - k, lo - lw + 1)
    error = min(error, 1.0)
    res = SumDistribution(
        n=n, lo=lo, hi=hi, masses=result.w, underflow_mass=result.under, overflow_mass=result.over,
        max_constraint=m, truncation_error_bound=error,
        tilt=tilt, log_scale=n * log_M if tilt != 0.0 else 0.0, center=n * mu if tilt != 0.0 else 0.0,
        clamp_audit=clamp_total,
    )
    if eps is not None and res.truncation_error_bound > eps:
        raise ValueError(f"window too narrow: error bound {res.truncation_error_bound:.3g} > {eps:.3g}")
    if len(_CACHE) >= _CACHE_MAX:
        _CACHE.pop(next(iter(_CACHE)))
    _CACHE[key] = res
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        np.savez(path, masses=res.masses, scalars=np.array([
            res.underflow_mass, res.overflow_mass, res.truncation_error_bound,
            res.log_scale, res.center, res.clamp_audit]))
    return res


def clear_cache() -> None:
    _CACHE.clear()


# ---------------------------------------------------------------------------
# Independent reference routes
# ---------------------------------------------------------------------------


def sequential_sum_distribution(law: LatticeLaw, n: int, m: Optional[int] = None) -> tuple[int, np.ndarray]:
    """n-fold sequential convolution of a finite-support (or capped) step.

    Returns (lo, masses) with no windowing at all; used as an independent
    reference for the doubling algorithm.
    """
    top = law.support_max if m is None else min(m, law.support_max)
    if not (math.isfinite(top) and math.isfinite(law.support_min)):
        raise ValueError("sequential reference needs a bounded (or capped) step")
    k0 = int(law.support_min)
    ks = np.arange(k0, int(top) + 1)
    p = law.pmf(ks)
    out = np.ones(1)
    for _ in range(n):
        out = np.convolve(out, p)
    return n * k0, out


def enumerate_sum_distribution(support: Sequence[int], masses: Sequence[float], n: int,
                               m: Optional[int] = None) -> dict:
    """Brute-force enumeration of all n-paths; returns {s: P(S_n = s, M_n <= m)}."""
    out: dict = {}
    for path in itertools.product(range(len(support)), repeat=n):
        vals = [support[i] for i in path]
        if m is not None and max(vals) > m:
            continue
        pr = 1.0
        for i in path:
            pr *= masses[i]
        s = sum(vals)
        out[s] = out.get(s, 0.0) + pr
    return out


# ---------------------------------------------------------------------------
# Probability queries
# ---------------------------------------------------------------------------


def _base(law: LatticeLaw, n: int, centered: bool) -> int:
    return int(math.floor(n * law.mean)) if centered else 0


def p_sum_geq(law: LatticeLaw, n: int, x: float, m: Optional[int] = None, *, centered: bool = True,
              window: Optional[tuple[int, int]] = None, kernel: str = "auto") -> float:
    """P(S_n - floor(n mu) >= x, M_n <= m) (raw threshold when ``centered=False``)."""
    s = _base(law, n, centered) + int(math.ceil(x))
    top = law.support_max if m is None else min(m, law.support_max)
    if s > n * top:
        return 0.0
    if window is None:
        window = default_window(law, n, x if centered else x - _base(law, n, True))
    if s < window[0]:
        window = (s, max(window[1], s))
    d = sum_distribution(law, n, m, window, kernel=kernel)
    return d.prob_geq(s)


def p_sum_eq(law: LatticeLaw, n: int, x: int, m: Optional[int] = None, *, centered: bool = True,
             window: Optional[tuple[int, int]] = None, kernel: str = "auto") -> float:
    """P(S_n - floor(n mu) = x, M_n <= m)."""
    s = _base(law, n, centered) + int(x)
    top = law.support_max if m is None else min(m, law.support_max)
    if s > n * top or s < n * law.support_min:
        return 0.0
    if window is None:
        window = default_window(law, n, x if centered else x - _base(law, n, True))
    if s < window[0]:
        window = (s, max(window[1], s))
    d = sum_distribution(law, n, m, window, kernel=kernel)
    return d.prob_eq(s)


def _tilt_for_target(law: LatticeLaw, n: int, s: float, m: Optional[int]) -> float:
    from .tilt import solve_lambda  # local import: tilt depends on laws only

    top = law.support_max if m is None else min(m, law.support_max)
    r = top - law.mean
    t = (s - n * law.mean) / n
    sol = solve_lambda(law, t, r, allow_below=True)
    return sol.lam


def log_p_sum_eq(law: LatticeLaw, n: int, s: int, m: Optional[int] = None) -> float:
    """log P(S_n = s, M_n <= m) through a tilted convolution (raw s).

    The tilt centres the convolution at s, so the computed masses there are
    of order one and the result is valid far below the double-precision
    underflow threshold.
    """
    theta = _tilt_for_target(law, n, s, m)
    top = law.support_max if m is None else min(m, law.support_max)
    half = int(20 * math.sqrt(n) * max(1.0, float(np.std(np.arange(3)))))
    lo = max(int(n * law.support_min), s - max(half, 64)) if math.isfinite(law.support_min) else s - max(half, 64)
    hi = min(int(n * top), s + max(half, 64))
    d = sum_distribution(law, n, m, (lo, hi), tilt=theta)
    val = d.masses[s - d.lo]
    if val <= 0:
        return -math.inf
    return math.log(val) + d.log_scale - theta * (s - d.center)


def log_p_sum_geq(law: LatticeLaw, n: int, s: int, m: Optional[int] = None) -> float:
    """log P(S_n >= s, M_n <= m) for a capped or bounded step (raw s)."""
    theta = _tilt_for_target(law, n, s, m)
    top = law.support_max if m is None else min(m, law.support_max)
    if not math.isfinite(top):
        raise ValueError("log_p_sum_geq needs a bounded or capped step")
    lo = max(int(n * law.support_min), s - 64) if math.isfinite(law.support_min) else s - 64
    hi = int(n * top)
    d = sum_distribution(law, n, m, (lo, hi), tilt=theta)
    ks = np.arange(s, hi + 1, dtype=np.float64)
    logs = np.log(np.maximum(d.masses[s - d.lo:], 1e-320)) - theta * (ks - d.center)
    mx = float(np.max(logs))
    return mx + math.log(float(np.sum(np.exp(logs - mx)))) + d.log_scale


# ---------------------------------------------------------------------------
# Decompositions and conditional laws
# ---------------------------------------------------------------------------


@dataclass
class Decomposition:
    """P(S_n - floor(b_n) >= x) (or = x) split by M_n <= r_n.

    ``s_exact`` is the conditional probability of a big jump,
    P(M_n > r_n | condition); ``s_ratio`` is the one-jump term divided by the
    total (n P(xi - mu >= y), resp. n P(xi = round(mu + y)), y = x - frac(b_n)).
    Both tend to the same mixture weight.
    """

    gauss_part: float
    jump_part: float
    total: float
    s_exact: float
    s_ratio: float
    r: float
    m: int
    jump_term: float


def decompose(law: LatticeLaw, n: int, x: float, r: Optional[float] = None, *, local: bool = False,
              window: Optional[tuple[int, int]] = None, kernel: str = "auto") -> Decomposition:
    """Exact split of P(S_n - floor(b_n) >= x) (or = x) according to M_n <= r_n."""
    from .predictors import jump_pmf, jump_tail

    if r is None:
        r = solve_r_n(law, n, x).r
    m = raw_cap(law, r)
    if window is None:
        window = default_window(law, n, x)
    if local:
        xi = int(round(x))
        tot = p_sum_eq(law, n, xi, window=window, kernel=kernel)
        g = p_sum_eq(law, n, xi, m, window=window, kernel=kernel)
        jump_term = jump_pmf(law, n, xi)
    else:
        tot = p_sum_geq(law, n, x, window=window, kernel=kernel)
        g = p_sum_geq(law, n, x, m, window=window, kernel=kernel)
        jump_term = jump_tail(law, n, x)
    if tot <= 0:
        return Decomposition(g, 0.0, tot, math.nan, math.nan, r, m, jump_term)
    jump = max(tot - g, 0.0)
    return Decomposition(g, jump, tot, jump / tot, jump_term / tot, r, m, jump_term)


def conditional_max_cdf(law: LatticeLaw, n: int, x: float, mode: str = "sum_geq",
                        window: Optional[tuple[int, int]] = None) -> Callable[[Iterable[int]], np.ndarray]:
    """Return m -> P(M_n <= m | S_n - floor(b_n) = / >= x), exact.

    Each evaluation point costs one capped convolution.
    """
    if mode not in ("sum_geq", "sum_eq"):
        raise ValueError("mode must be sum_geq or sum_eq")
    if window is None:
        window = default_window(law, n, x)
    f = p_sum_eq if mode == "sum_eq" else p_sum_geq
    xx = int(x) if mode == "sum_eq" else x
    denom = f(law, n, xx, window=window)

    def cdf(ms):
        ms = np.atleast_1d(np.asarray(ms, dtype=np.int64))
        out = np.empty(ms.size)
        for i, m in enumerate(ms):
            if m < law.support_min:
                out[i] = 0.0
                continue
            out[i] = f(law, n, xx, int(m), window=window) / denom
        return out

    cdf.denominator = denom
    return cdf


def conditional_overshoot_tail(law: LatticeLaw, n: int, x: float, regime: str, r: Optional[float] = None,
                               window: Optional[tuple[int, int]] = None) -> Callable[[Iterable[float]], np.ndarray]:
    """Return t -> P(S_n - floor(b_n) >= x + t | S_n - floor(b_n) >= x, regime), exact.

    ``regime`` is ``max_le_r`` (M_n <= r_n) or ``max_gt_r`` (M_n > r_n).
    """
    if regime not in ("max_le_r", "max_gt_r"):
        raise ValueError("regime must be max_le_r or max_gt_r")
    if r is None:
        r = solve_r_n(law, n, x).r
    m = raw_cap(law, r)
    base = _base(law, n, True)
    if window is None:
        window = default_window(law, n, 2 * x)
    capped = sum_distribution(law, n, m, window)
    full = sum_distribution(law, n, None, window) if regime == "max_gt_r" else None
    s0 = base + int(math.ceil(x))
    cap_tail = capped.tail_array()
    full_tail = full.tail_array() if full is not None else None

    def tail_at(s):
        i = s - capped.lo
        if regime == "max_le_r":
            return cap_tail[i] if i < cap_tail.size else capped.overflow_mass
        if i < cap_tail.size:
            return full_tail[i] - cap_tail[i]
        return full.overflow_mass - capped.overflow_mass

    den = tail_at(s0)

    def f(ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        out = np.empty(ts.size)
        for i, t in enumerate(ts):
            s = base + int(math.ceil(x + t))
            out[i] = tail_at(s) / den
        return out

    f.denominator = den
    f.m = m
    f.r = r
    return f


# ---------------------------------------------------------------------------
# Exact conditional sampling
# ---------------------------------------------------------------------------


def backward_sample(law: LatticeLaw, n: int, x: int, rng: np.random.Generator, size: int = 1,
                    m: Optional[int] = None) -> np.ndarray:
    """Exact draws of (xi_1, ..., xi_n) given S_n = x (raw), optionally with M_n <= m.

    Tables P(S_k = s) for k < n are built by sequential convolution over the
    reachable range; then xi_n is drawn with weights pmf(y) P(S_{n-1} = x - y)
    and the recursion continues with x - xi_n.  All samples sharing the same
    remaining total are drawn together.
    """
    if not math.isfinite(law.support_min):
        raise ValueError("backward sampling needs a law bounded below")
    k0 = int(law.support_min)
    span = x - n * k0
    if span < 0:
        raise ValueError("x is not reachable")
    top = span + k0
    if m is not None:
        top = min(top, m)
    if (n + 1) * (span + 1) > 5e8:
        raise MemoryError("conditional sampling tables exceed the memory budget")
    ys = np.arange(k0, top + 1)
    p = law.pmf(ys)
    # tables[k][j] = P(S_k = k*k0 + j, M_k <= m), j = 0..span
    tables = np.zeros((n, span + 1))
    tables[0, 0] = 1.0
    step = p  # offsets j = y - k0
    for k in range(1, n):
        tables[k] = np.convolve(tables[k - 1], step)[: span + 1]
    if tables[n - 1].size == 0:
        raise ValueError("x is not reachable")
    out = np.empty((size, n), dtype=np.int64)
    rem = np.full(size, span, dtype=np.int64)  # remaining offset total
    for k in range(n, 0, -1):
        prev = tables[k - 1]
        for r_val in np.unique(rem):
            idx = np.flatnonzero(rem == r_val)
            # choose offset j of this step: weight step[j] * prev[r_val - j]
            jmax = min(r_val, step.size - 1)
            j = np.arange(0, jmax + 1)
            wts = step[j] * prev[r_val - j]
            tot = wts.sum()
            if tot <= 0:
                raise ValueError("x is not reachable under the constraint")
            cdf = np.cumsum(wts) / tot
            u = rng.random(idx.size)
            pick = np.minimum(np.searchsorted(cdf, u, side="right"), jmax)
            out[idx, k - 1] = pick + k0
            rem[idx] = r_val - pick
    return out


# ---------------------------------------------------------------------------
# Total variation of the remaining coordinates
# ---------------------------------------------------------------------------

_CONDITIONS = ("S>=x&M>r", "S>=x&M<=r", "S=x&M>r", "S=x&M<=r", "M>=x", "M=x")


def tv_remaining_vs_product(law: LatticeLaw, n: int, condition: str, x: int, r: Optional[int] = None,
                            budget: int = 20_000_000) -> float:
    """Exact TV distance between the law of R(xi) given the condition and the (n-1)-fold product.

    R removes the coordinate of largest absolute value (first index on ties).
    ``r`` is a raw cap on M_n.  Finite-support laws only, enumerated over the
    (n-1)-dimensional remaining vector.
    """
    if condition not in _CONDITIONS:
        raise ValueError(f"condition must be one of {_CONDITIONS}")
    if law.left_tail is not None or law.right_tail is not None:
        raise ValueError("enumeration needs a finite-support law")
    vals = np.flatnonzero(law.pmf_table > 0) + law.k_min
    probs = law.pmf_table[vals - law.k_min]
    K = vals.size
    if K > 20 or n > 8 or K ** (n - 1) > budget:
        raise ValueError("enumeration budget exceeded")
    d = n - 1
    grids = np.indices((K,) * d).reshape(d, -1) if d > 0 else np.zeros((0, 1), dtype=np.int64)
    yv = vals[grids]  # values, shape (d, cells)
    prod = np.prod(probs[grids], axis=0) if d > 0 else np.ones(1)
    ysum = yv.sum(axis=0) if d > 0 else np.zeros(1, dtype=np.int64)
    ymax = yv.max(axis=0) if d > 0 else np.full(1, np.iinfo(np.int64).min)
    absy = np.abs(yv)
    # prefix max over first i coords (strict condition) and suffix max (non-strict)
    pre = np.full((d + 1, prod.size), -1, dtype=np.int64)
    suf = np.full((d + 1, prod.size), -1, dtype=np.int64)
    for i in range(1, d + 1):
        pre[i] = np.maximum(pre[i - 1], absy[i - 1])
    for i in range(d - 1, -1, -1):
        suf[i] = np.maximum(suf[i + 1], absy[i])
    joint = np.zeros(prod.size)
    for i in range(n):  # position of the removed coordinate
        for v, pv in zip(vals, probs):
            ok = (pre[i] < abs(v)) & (suf[i] <= abs(v))
            S = ysum + v
            M = np.maximum(ymax, v)
            if condition == "S>=x&M>r":
                c = (S >= x) & (M > r)
            elif condition == "S>=x&M<=r":
                c = (S >= x) & (M <= r)
            elif condition == "S=x&M>r":
                c = (S == x) & (M > r)
            elif condition == "S=x&M<=r":
                c = (S == x) & (M <= r)
            elif condition == "M>=x":
                c = M >= x
            else:
                c = M == x
            joint += np.where(ok & c, pv * prod, 0.0)
    z = joint.sum()
    if z <= 0:
        raise ValueError("conditioning event has probability zero")
    return 0.5 * float(np.sum(np.abs(joint / z - prod)))
