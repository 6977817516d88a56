"""Truncated exponential tilting: M(u), m(u), lambda(t) and the entropy H(t).

All sums run over the centred lattice d = k - mu restricted to d <= r.  The
moment generating function is kept in log form together with the tilted mean
and variance, so large u * r never overflows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate

from .laws import LatticeLaw
from .normalizers import solve_a_n, solve_r_n

__all__ = [
    "TiltMoments",
    "TiltSolution",
    "tilt_moments",
    "truncated_mgf",
    "solve_lambda",
    "entropy_by_quadrature",
    "entropy_asymptotic_check",
    "EntropyCheck",
    "gaussian_window_predictor",
    "log_gaussian_window_predictor",
]


@dataclass(frozen=True)
class TiltMoments:
    """log M(u), tilted mean m(u) = M'/M and tilted variance M''/M - m^2."""

    u: float
    log_M: float
    mean: float
    var: float

    @property
    def M(self) -> float:
        return math.exp(self.log_M)

    @property
    def M1(self) -> float:
        return self.M * self.mean

    @property
    def M2(self) -> float:
        return self.M * (self.var + self.mean * self.mean)


def _lattice(law: LatticeLaw, r: float):
    """Centred offsets d <= r with their masses, plus the left remainder mass."""
    mu = law.mean
    top = math.floor(mu + r)
    if top < law.support_min:
        raise ValueError("truncation level below the support")
    top = int(min(top, law.support_max))
    lo = law.k_min
    if top - lo > 50_000_000:
        raise ValueError("truncation level too far beyond the support start for a lattice sum")
    ks = np.arange(lo, top + 1)
    p = law.pmf(ks)
    left = float(law.cdf(lo - 1)) if law.left_tail is not None else 0.0
    return ks.astype(np.float64) - mu, p, left, lo - 1 - mu


_LATTICE_CACHE: dict = {}


def _cached_lattice(law: LatticeLaw, r: float):
    key = (law.hash, int(math.floor(law.mean + r)))
    hit = _LATTICE_CACHE.get(key)
    if hit is None:
        if len(_LATTICE_CACHE) > 16:
            _LATTICE_CACHE.clear()
        hit = _lattice(law, r)
        _LATTICE_CACHE[key] = hit
    return hit


def tilt_moments(law: LatticeLaw, u: float, r: float) -> TiltMoments:
    """Tilted moments of the law restricted to xi - mu <= r.

    The left remainder beyond the stored table (two-sided laws only) is put at
    its edge; its weight e^{u d} is below 1e-300 for any u of interest and it
    is exact at u = 0.
    """
    d, p, left, d_left = _cached_lattice(law, r)
    ud = u * d
    shift = float(ud.max()) if d.size else 0.0
    w = p * np.exp(ud - shift)
    wl = left * math.exp(u * d_left - shift) if left > 0 else 0.0
    s0 = float(np.sum(w)) + wl
    if s0 <= 0:
        raise FloatingPointError("truncated mgf underflowed")
    m = (float(np.dot(w, d)) + wl * d_left) / s0
    dd = d - m
    v = (float(np.dot(w, dd * dd)) + wl * (d_left - m) ** 2) / s0
    return TiltMoments(u, math.log(s0) + shift, m, v)


def truncated_mgf(law: LatticeLaw, u: float, r: float) -> tuple[float, float, float]:
    """(M(u), M'(u), M''(u)) of the centred law truncated at r."""
    if u < 0:
        raise ValueError("u must be nonnegative")
    t = tilt_moments(law, u, r)
    return t.M, t.M1, t.M2


@dataclass(frozen=True)
class TiltSolution:
    r: float
    t: float
    lam: float
    log_M: float
    mean: float
    var: float
    H: float
    residual: float

    @property
    def M(self) -> float:
        return math.exp(self.log_M)

    @property
    def M1(self) -> float:
        return self.M * self.mean

    @property
    def M2(self) -> float:
        return self.M * (self.var + self.mean * self.mean)


def solve_lambda(law: LatticeLaw, t: float, r: float, *, allow_below: bool = False,
                 rtol: float = 1e-13) -> TiltSolution:
    """Solve m(lambda) = t by safeguarded Newton.

    The bracket starts at [0, 3/r] and is widened geometrically.  With
    ``allow_below`` a target below m(0) is reached with a negative tilt
    (needs a law bounded below).
    """
    base = tilt_moments(law, 0.0, r)
    m0 = base.mean
    d_max = math.floor(law.mean + r) - law.mean
    if law.support_max < math.floor(law.mean + r):
        d_max = law.support_max - law.mean
    if t >= d_max:
        raise ValueError(f"target mean {t} not below the truncated maximum {d_max}")
    if math.isfinite(law.support_min) and t <= law.support_min - law.mean:
        raise ValueError(f"target mean {t} not above the support minimum")
    if t == m0:
        return TiltSolution(r, t, 0.0, base.log_M, m0, base.var, -base.log_M, 0.0)
    if t < m0:
        if not allow_below:
            raise ValueError(f"target mean {t} below m(0) = {m0}")
        if not math.isfinite(law.support_min):
            raise ValueError("negative tilts need a law bounded below")
        sign = -1.0
    else:
        sign = 1.0

    def mom(u):
        return tilt_moments(law, u, r)

    lo, hi = 0.0, 3.0 / max(r, 1.0)
    while sign * (mom(sign * hi).mean - t) < 0:
        lo, hi = hi, 2.0 * hi
        if hi > 1e6:
            raise RuntimeError("could not bracket lambda")
    # Newton steps on u = sign * s, s in [lo, hi]
    s = 0.5 * (lo + hi)
    for _ in range(200):
        tm = mom(sign * s)
        f = tm.mean - t
        if sign * f < 0:
            lo = s
        else:
            hi = s
        if abs(f) <= rtol * max(abs(t), 1e-300) or hi - lo <= 1e-16 * hi:
            break
        step = f / tm.var if tm.var > 0 else math.inf
        s_new = s - sign * step
        if not (lo < s_new < hi):
            s_new = 0.5 * (lo + hi)
        s = s_new
    tm = mom(sign * s)
    lam = sign * s
    H = t * lam - tm.log_M
    return TiltSolution(r, t, lam, tm.log_M, tm.mean, tm.var, H, abs(tm.mean - t) / max(abs(t), 1e-300))


def entropy_by_quadrature(law: LatticeLaw, t: float, r: float) -> float:
    """H(t) = -log M(0) + integral_0^lambda u m'(u) du, an independent route to H."""
    sol = solve_lambda(law, t, r)
    base = tilt_moments(law, 0.0, r)
    val, _ = integrate.quad(lambda u: u * tilt_moments(law, u, r).var, 0.0, sol.lam,
                            epsabs=0.0, epsrel=1e-12, limit=200)
    return -base.log_M + val


@dataclass
class EntropyCheck:
    ratio: float
    nH: float
    r_n: float
    degenerate: bool


def entropy_asymptotic_check(law: LatticeLaw, n: int, x: float, a: float = 1.0) -> EntropyCheck:
    """n H(x/n) * 2 n sigma^2(r_n) / x^2, which should tend to one.

    At the degenerate target t = m(0) the ratio is meaningless and flagged.
    """
    r = a * solve_r_n(law, n, x).r
    t = x / n
    base = tilt_moments(law, 0.0, r)
    if t <= base.mean:
        nH = -n * base.log_M
        return EntropyCheck(math.nan, nH, r, True)
    sol = solve_lambda(law, t, r)
    s2 = law.truncated_variance(r / a)
    nH = n * sol.H
    return EntropyCheck(nH * 2.0 * n * s2 / (x * x), nH, r, False)


def log_gaussian_window_predictor(law: LatticeLaw, n: int, x: float, mode: str = "integral",
                                  a: float = 1.0, a_n: Optional[float] = None) -> float:
    """Logarithm of :func:`gaussian_window_predictor`."""
    if mode not in ("integral", "local"):
        raise ValueError("mode must be integral or local")
    if a_n is None:
        a_n = solve_a_n(law, n)
    r_n = solve_r_n(law, n, x).r
    sol = solve_lambda(law, x / n, a * r_n, allow_below=False)
    nH = n * sol.H
    s2r = law.truncated_variance(r_n)
    if mode == "integral":
        s2a = law.truncated_variance(a_n)
        return -0.5 * math.log(2 * math.pi) + math.log(a_n / x) + 0.5 * math.log(s2r / s2a) - nH
    return -nH - 0.5 * math.log(2 * math.pi * n * s2r)


def gaussian_window_predictor(law: LatticeLaw, n: int, x: float, mode: str = "integral",
                              a: float = 1.0, a_n: Optional[float] = None) -> float:
    """Gaussian-window approximation of P(S_n - b_n >= x, M_n <= r_n) (or = x).

    integral: (a_n / x) sqrt(sigma^2(r_n) / sigma^2(a_n)) exp(-n H(x/n)) / sqrt(2 pi)
    local:    exp(-n H(x/n)) / sqrt(2 pi n sigma^2(r_n))
    The tilt is truncated at a * r_n.
    """
    return math.exp(log_gaussian_window_predictor(law, n, x, mode, a, a_n))
