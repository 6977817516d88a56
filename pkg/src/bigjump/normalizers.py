"""Normalising and centering sequences and the diagnostics built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .laws import LatticeLaw, q_of

__all__ = [
    "NormalizerTable",
    "RnResult",
    "solve_a_n",
    "centering_b_n",
    "solve_r_n",
    "omega_n",
    "rozovskii_diagnostic",
    "final_condition_diagnostic",
    "normalizer_table",
    "converges_to_zero",
    "write_normalizer_csv",
]


def _bisect(f, lo: float, hi: float, rtol: float = 1e-15, maxit: int = 400) -> tuple[float, float]:
    """Bisection for a sign change of f with f(lo) < 0 <= f(hi)."""
    for _ in range(maxit):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rtol * hi:
            break
    return lo, hi


def solve_a_n(law: LatticeLaw, n: int, mode: str = "sigma_bar") -> float:
    """Normalising sequence a_n.

    ``mode="sigma_bar"`` (default): the unique root of a^2 = n * sigma_bar^2(a).
    ``mode="sqrt_n"``: sigma * sqrt(n), requires finite variance.
    ``mode="stable"``: root of n P(|xi - mu| > a) = 1, for laws in a stable
    domain of attraction with index below 2.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mode == "sqrt_n":
        var = law.variance
        if not math.isfinite(var):
            raise ValueError("sqrt_n mode needs a finite variance")
        return math.sqrt(var * n)
    if mode == "stable":
        f = lambda a: 1.0 - n * law.abs_tail(a)
        lo, hi = 1e-9, 1.0
        while f(hi) < 0:
            lo, hi = hi, 2 * hi
        lo, hi = _bisect(f, lo, hi)
        return hi
    if mode != "sigma_bar":
        raise ValueError(f"unknown mode {mode!r}")

    # a^2 / sigma_bar^2(a) is non-decreasing; below the nearest atom it is
    # constant (= 1), so for n = 1 a whole interval solves the equation.  We
    # take the largest root: the boundary of the set where g <= 0.
    def g(a):
        v = a * a - n * law.sigma_bar_sq(a)
        return v if v > 0 else -1.0

    lo, hi = 1e-6, 1.0
    while g(hi) < 0:
        lo, hi = hi, 2.0 * hi
    while g(lo) >= 0 and lo > 1e-300:
        lo *= 0.5
    lo, hi = _bisect(g, lo, hi)
    # Between breakpoints |k - mu|, sigma_bar^2(a) = S + a^2 P exactly, so the
    # root solves a^2 = n S / (1 - n P).  Polish with that closed form.
    a = hi
    mu = law.mean
    S = law.truncated_variance(a)
    P = law.abs_tail(a)
    if n * P < 1:
        cand = math.sqrt(n * S / (1.0 - n * P))
        if abs(cand - a) <= 1e-6 * a and law.truncated_variance(cand) == S and law.abs_tail(cand) == P:
            a = cand
    return a


def centering_b_n(law: LatticeLaw, n: int, alpha: float, a_n: float | None = None) -> float:
    """Centering b_n: 0 for alpha < 1, n E[xi; |xi| <= a_n] for alpha = 1, n mu otherwise."""
    if not 0 < alpha <= 2:
        raise ValueError("alpha must lie in (0, 2]")
    if alpha < 1:
        return 0.0
    if alpha == 1:
        if a_n is None:
            a_n = solve_a_n(law, n, mode="stable")
        return n * law.truncated_mean(a_n)
    return n * law.mean


@dataclass
class RnResult:
    r: float
    at_floor: bool
    bounded_regime: bool
    residual: float


def solve_r_n(law: LatticeLaw, n: int, x: float, r_floor: float = 2.0) -> RnResult:
    """Truncation level r with r / sigma^2(r) = n / x.

    Doubling from ``r_floor`` finds the first dyadic point where the map
    r -> r / sigma^2(r) reaches the target, bisection then locates the
    crossing.  On the final piece sigma^2 is constant, so the root is exactly
    r = (n/x) sigma^2(r).
    """
    if x <= 0:
        raise ValueError("x must be positive")
    target = n / x

    def h(r):
        s2 = law.truncated_variance(r)
        return (r / s2 if s2 > 0 else math.inf) - target

    if h(r_floor) >= 0:
        return RnResult(r_floor, True, True, 0.0)
    lo, hi = r_floor, 2.0 * r_floor
    while h(hi) < 0:
        lo, hi = hi, 2.0 * hi
        if hi > 1e300:
            raise RuntimeError("no crossing for r_n")
    lo, hi = _bisect(h, lo, hi)
    s2 = law.truncated_variance(hi)
    cand = target * s2
    r = cand if law.truncated_variance(cand) == s2 and cand >= r_floor else hi
    res = abs(r / law.truncated_variance(r) - target) / target
    return RnResult(r, False, r < 10.0, res)


def omega_n(law: LatticeLaw, a_n: float) -> float:
    """omega_n = a_n / sqrt(|log q(a_n)|)."""
    return a_n / math.sqrt(abs(math.log(q_of(law, a_n))))


def rozovskii_diagnostic(law: LatticeLaw, n: int, a_n: float | None = None) -> float:
    """n P(xi - mu <= -omega_n) + |n sigma^2(omega_n) - a_n^2| / omega_n^2."""
    if a_n is None:
        a_n = solve_a_n(law, n)
    w = omega_n(law, a_n)
    left = float(law.cdf(math.floor(law.mean - w)))
    return n * left + abs(n * law.truncated_variance(w) - a_n * a_n) / (w * w)


def final_condition_diagnostic(law: LatticeLaw, x: float) -> float:
    """[sigma^2(x sqrt|log q(x)|) - sigma^2(x)] |log q(x)| / sigma^2(x)."""
    q = q_of(law, x)
    if q >= 1:
        raise ValueError("q(x) >= 1: the diagnostic needs log q(x) < 0")
    lq = abs(math.log(q))
    s2 = law.truncated_variance(x)
    return (law.truncated_variance(x * math.sqrt(lq)) - s2) * lq / s2


@dataclass
class NormalizerTable:
    n: int
    a_n: float
    b_n: float
    omega_n: float
    q_an: float
    rozovskii_lhs: float
    final_lhs: float


def normalizer_table(law: LatticeLaw, ns: Iterable[int], alpha: float = 2.0) -> list[NormalizerTable]:
    rows = []
    for n in ns:
        a = solve_a_n(law, n)
        q = q_of(law, a)
        w = a / math.sqrt(abs(math.log(q)))
        rows.append(NormalizerTable(
            n=int(n), a_n=a, b_n=centering_b_n(law, n, alpha, a), omega_n=w, q_an=q,
            rozovskii_lhs=rozovskii_diagnostic(law, n, a),
            final_lhs=final_condition_diagnostic(law, a),
        ))
    return rows


def converges_to_zero(values: Sequence[float], threshold: float = 0.05, window: int = 5) -> bool:
    """Finite decision rule: last value below threshold and non-increasing over the last doublings."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window + 1:
        raise ValueError("need at least window + 1 values")
    tail = v[-(window + 1):]
    return bool(v[-1] < threshold and np.all(np.diff(tail) <= 0))


def write_normalizer_csv(rows: Sequence[NormalizerTable], path) -> None:
    with open(path, "w") as fh:
        fh.write("n,a_n,b_n,omega_n,q_an,rozovskii_lhs,final_lhs\n")
        for r in rows:
            fh.write(f"{r.n},{r.a_n:.17g},{r.b_n:.17g},{r.omega_n:.17g},{r.q_an:.17g},"
                     f"{r.rozovskii_lhs:.17g},{r.final_lhs:.17g}\n")
