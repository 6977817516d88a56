"""Integer-lattice laws with heavy power tails and exact truncated moments.

A :class:`LatticeLaw` stores an explicit mass table on ``[k_min, K_cap]``
and, optionally, analytic tails beyond either end of the table.  All
functionals (tail probabilities, truncated variances, the ratios ``q``) are
evaluated exactly: table contributions come from prefix sums and the analytic
tails from closed-form power sums or Euler-Maclaurin summation.

Conventions used throughout the package:

* ``tail(x) = P(xi > x)`` refers to the raw variable.
* ``centered_tail(x) = P(xi - mu > x)``; all second-order functionals
  (``truncated_variance``, ``sigma_bar_sq``, ``q_*``) use the centered
  variable ``xi - mu``.
* A right tail model means ``P(xi = k) = C * L(k) * k**-(1 + beta)`` for
  ``k > K_cap``, so that ``P(xi > x) ~ (C / beta) L(x) x**-beta``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special

from ._series import power_sum, smooth_sum

__all__ = [
    "Family",
    "SlowlyVaryingSpec",
    "TailModel",
    "OscillatingTail",
    "LatticeLaw",
    "RegVarReport",
    "make_law",
    "tail",
    "truncated_variance",
    "sigma_bar",
    "q_of",
    "q_bar",
    "q_star",
    "q_tilde",
    "regvar_diagnostic",
    "claim_tail_constant",
    "write_pmf_csv",
    "read_pmf_csv",
    "law_from_spec_text",
    "law_to_spec_text",
]

E = math.e
E_E = math.exp(math.e)


class Family(str, enum.Enum):
    PARETO_ZETA = "ParetoZeta"
    ZRP_OCCUPATION = "ZrpOccupation"
    TWO_SIDED_STABLE = "TwoSidedStable"
    BOUNDED = "Bounded"
    CUSTOM = "Custom"


# ---------------------------------------------------------------------------
# Slowly varying factors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlowlyVaryingSpec:
    """Slowly varying factor ``L`` of a power tail.

    ``variant`` is one of ``constant``, ``log_power``, ``loglog_power``,
    ``oscillating_exponent`` or ``gamma_ratio``.  The oscillating variant
    evaluates to ``x**sin(log log x)``: it multiplies ``x**-gamma`` to give the
    tail function itself rather than a factor of the mass function.  The
    ``gamma_ratio`` variant is ``Gamma(b+1) Gamma(x+1) x**b / Gamma(x+b+1)``,
    the exact correction carried by zero-range weights with rates ``1 + b/k``.
    """

    variant: str = "constant"
    c: float = 1.0
    a: float = 0.0
    x_floor: float = 1.0
    gamma: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.variant == "constant":
            if not self.c > 0:
                raise ValueError("constant slowly varying factor must be positive")
        elif self.variant == "log_power":
            if self.x_floor < E:
                raise ValueError("log_power requires x_floor >= e")
        elif self.variant == "loglog_power":
            if self.x_floor < E_E:
                raise ValueError("loglog_power requires x_floor >= e^e")
        elif self.variant == "oscillating_exponent":
            if self.x_floor < E_E:
                raise ValueError("oscillating_exponent requires x_floor >= e^e")
        elif self.variant == "gamma_ratio":
            if not self.b > 0:
                raise ValueError("gamma_ratio requires b > 0")
        else:
            raise ValueError(f"unknown slowly varying variant {self.variant!r}")

    @classmethod
    def constant(cls, c: float = 1.0) -> "SlowlyVaryingSpec":
        return cls("constant", c=c)

    @classmethod
    def log_power(cls, a: float, x_floor: float = E) -> "SlowlyVaryingSpec":
        return cls("log_power", a=a, x_floor=x_floor)

    @classmethod
    def loglog_power(cls, a: float, x_floor: float = E_E) -> "SlowlyVaryingSpec":
        return cls("loglog_power", a=a, x_floor=x_floor)

    @classmethod
    def oscillating(cls, gamma: float, x_floor: float = E_E) -> "SlowlyVaryingSpec":
        return cls("oscillating_exponent", gamma=gamma, x_floor=x_floor)

    @classmethod
    def gamma_ratio(cls, b: float) -> "SlowlyVaryingSpec":
        return cls("gamma_ratio", b=b)

    @property
    def is_constant(self) -> bool:
        return self.variant == "constant"

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        v = self.variant
        if v == "constant":
            return np.full_like(x, self.c)
        if v == "log_power":
            return np.log(np.maximum(x, self.x_floor)) ** self.a
        if v == "loglog_power":
            return np.log(np.log(np.maximum(x, self.x_floor))) ** self.a
        if v == "oscillating_exponent":
            xx = np.maximum(x, self.x_floor)
            return xx ** np.sin(np.log(np.log(xx)))
        # gamma_ratio
        xx = np.maximum(x, 1.0)
        return special.gamma(self.b + 1.0) * xx**self.b / special.poch(xx + 1.0, self.b)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "c": self.c, "a": self.a, "x_floor": self.x_floor,
                "gamma": self.gamma, "b": self.b}


# ---------------------------------------------------------------------------
# Analytic tails
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TailModel:
    """Mass function ``C * L(k) * k**-(1 + beta)`` on magnitudes ``k >= 1``."""

    beta: float
    L: SlowlyVaryingSpec
    C: float

    def pmf(self, k):
        k = np.asarray(k, dtype=np.float64)
        return self.C * self.L(k) * k ** (-(1.0 + self.beta))

    def moment(self, p: int, lower: int, upper: float = math.inf) -> float:
        """Return sum over lower < j <= upper of j**p * pmf(j)."""
        if self.L.is_constant:
            return self.C * self.L.c * power_sum(1.0 + self.beta - p, lower, upper)
        f = lambda j: j**p * self.pmf(j)
        return smooth_sum(f, lower, upper)

    def regvar_L(self, x):
        """Factor ``l(x)`` with ``P(xi > x) ~ l(x) x**-beta``."""
        return self.C * self.L(x) / self.beta


@dataclass(frozen=True)
class OscillatingTail:
    """Tail ``Fbar(x) = C * x**(-gamma + sin(log log x))`` with differenced masses.

    Masses are ``Fbar(k - 1) - Fbar(k)``; they are nonnegative exactly when
    ``gamma >= sqrt(2)``.
    """

    gamma: float
    C: float = 1.0
    x_floor: float = E_E

    @property
    def beta(self) -> float:
        return self.gamma

    @property
    def L(self) -> SlowlyVaryingSpec:
        return SlowlyVaryingSpec.oscillating(self.gamma, self.x_floor)

    def fbar(self, x):
        x = np.maximum(np.asarray(x, dtype=np.float64), self.x_floor)
        return self.C * x ** (-self.gamma + np.sin(np.log(np.log(x))))

    def pmf(self, k):
        k = np.asarray(k, dtype=np.float64)
        return self.fbar(k - 1.0) - self.fbar(k)

    def moment(self, p: int, lower: int, upper: float = math.inf) -> float:
        # Abel summation: sum_{K<j<=J} g(j)(F(j-1)-F(j))
        #   = g(K+1)F(K) - g(J)F(J) + sum_{K<j<J} (g(j+1)-g(j)) F(j).
        K = int(lower)
        g = lambda j: np.asarray(j, dtype=np.float64) ** p
        head = float(g(K + 1) * self.fbar(K))
        if p == 0:
            end = 0.0 if upper == math.inf else float(self.fbar(upper))
            return head - end
        dg = lambda j: (j + 1.0) ** p - j**p
        f = lambda j: dg(j) * self.fbar(j)
        if upper == math.inf:
            return head + smooth_sum(f, K)
        J = int(upper)
        if J <= K:
            return 0.0
        return head - float(g(J) * self.fbar(J)) + smooth_sum(f, K, J - 1)

    def regvar_L(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.fbar(x) * x**self.gamma


# ---------------------------------------------------------------------------
# The law
# ---------------------------------------------------------------------------


def _stable_diff(fwd: np.ndarray, rev: np.ndarray, i0: int, i1: int) -> float:
    """Sum of entries i0..i1 from forward/reverse prefix sums, cancellation-aware."""
    n = fwd.shape[0]
    a = fwd[i1] - (fwd[i0 - 1] if i0 > 0 else 0.0)
    b = rev[i0] - (rev[i1 + 1] if i1 + 1 < n else 0.0)
    # Use the route whose subtracted term is smaller in magnitude.
    sub_a = abs(fwd[i0 - 1]) if i0 > 0 else 0.0
    sub_b = abs(rev[i1 + 1]) if i1 + 1 < n else 0.0
    return float(a if sub_a <= sub_b else b)


@dataclass(frozen=True, eq=False)
class LatticeLaw:
    """Integer-valued law: explicit table plus optional analytic tails.

    Parameters
    ----------
    k_min : first lattice point of the table.
    pmf_table : masses for ``k = k_min .. K_cap``.
    right_tail : analytic masses for ``k > K_cap`` (or ``None``).
    left_tail : analytic masses for ``k < k_min`` as a function of ``|k|``
        (requires ``k_min <= 0``).
    family, params : provenance tag and constructor parameters.
    """

    k_min: int
    pmf_table: np.ndarray
    right_tail: Optional[object] = None
    left_tail: Optional[object] = None
    family: Family = Family.CUSTOM
    params: dict = field(default_factory=dict)
    aperiodic: bool = True

    def __post_init__(self):
        p = np.asarray(self.pmf_table, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("pmf_table must be a non-empty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("masses must be finite and nonnegative")
        if self.left_tail is not None and self.k_min > 0:
            raise ValueError("a left tail requires k_min <= 0")
        p.setflags(write=False)
        object.__setattr__(self, "pmf_table", p)
        object.__setattr__(self, "_moment_cache", {})
        K_cap = self.k_min + p.size - 1
        object.__setattr__(self, "K_cap", K_cap)
        ks = np.arange(self.k_min, K_cap + 1, dtype=np.float64)
        right_mass = self._right_moment(0, K_cap)
        left_mass = self._left_moment(0)
        total = float(np.sum(p)) + right_mass + left_mass
        object.__setattr__(self, "total_mass", total)
        mean = float(np.sum(ks * p)) + self._right_moment(1, K_cap) + self._left_moment(1)
        object.__setattr__(self, "mean", mean)
        d = ks - mean
        dp = d * p
        object.__setattr__(self, "_ks", ks)
        object.__setattr__(self, "_fwd0", np.cumsum(p))
        object.__setattr__(self, "_rev0", np.cumsum(p[::-1])[::-1])
        object.__setattr__(self, "_fwd1", np.cumsum(dp))
        object.__setattr__(self, "_rev1", np.cumsum(dp[::-1])[::-1])
        d2p = d * dp
        object.__setattr__(self, "_fwd2", np.cumsum(d2p))
        object.__setattr__(self, "_rev2", np.cumsum(d2p[::-1])[::-1])
        object.__setattr__(self, "_right_mass", right_mass)
        object.__setattr__(self, "_left_mass", left_mass)

    # -- analytic tail moments ------------------------------------------------

    def _right_moment(self, p: int, lower: int, upper: float = math.inf) -> float:
        if self.right_tail is None:
            return 0.0
        lower = max(int(lower), self.k_min + self.pmf_table.size - 1)
        if upper != math.inf and upper <= lower:
            return 0.0
        key = ("R", p, lower, upper)
        cache = self._moment_cache
        if key not in cache:
            cache[key] = float(self.right_tail.moment(p, lower, upper))
        return cache[key]

    def _left_moment(self, p: int, lower_mag: Optional[int] = None, upper_mag: float = math.inf) -> float:
        """Sum over k < k_min with lower_mag < |k| <= upper_mag of k**p pmf(k)."""
        if self.left_tail is None:
            return 0.0
        base = -self.k_min
        lower_mag = base if lower_mag is None else max(int(lower_mag), base)
        if upper_mag != math.inf and upper_mag <= lower_mag:
            return 0.0
        key = ("L", p, lower_mag, upper_mag)
        cache = self._moment_cache
        if key not in cache:
            cache[key] = float((-1) ** p * self.left_tail.moment(p, lower_mag, upper_mag))
        return cache[key]

    # -- basic queries --------------------------------------------------------

    @property
    def support_min(self) -> float:
        return -math.inf if self.left_tail is not None else self.k_min

    @property
    def support_max(self) -> float:
        return math.inf if self.right_tail is not None else self.K_cap

    @property
    def beta(self) -> float:
        return self.right_tail.beta if self.right_tail is not None else math.inf

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.k_min).encode())
        h.update(self.pmf_table.tobytes())
        h.update(repr(self.right_tail).encode())
        h.update(repr(self.left_tail).encode())
        return h.hexdigest()[:16]

    def pmf(self, k):
        """P(xi = k) for integer k (scalar or array)."""
        k_arr = np.asarray(k)
        scalar = k_arr.ndim == 0
        k_arr = np.atleast_1d(k_arr).astype(np.int64)
        out = np.zeros(k_arr.shape, dtype=np.float64)
        inside = (k_arr >= self.k_min) & (k_arr <= self.K_cap)
        out[inside] = self.pmf_table[k_arr[inside] - self.k_min]
        if self.right_tail is not None:
            hi = k_arr > self.K_cap
            if np.any(hi):
                out[hi] = self.right_tail.pmf(k_arr[hi].astype(np.float64))
        if self.left_tail is not None:
            lo = k_arr < self.k_min
            if np.any(lo):
                out[lo] = self.left_tail.pmf(-k_arr[lo].astype(np.float64))
        return float(out[0]) if scalar else out

    def range_sums(self, lo: float, hi: float, orders=(0, 1, 2)) -> tuple:
        """Sums of p(j) * (j - mu)**r over integers lo <= j <= hi for r in orders.

        ``lo`` may be ``-inf`` and ``hi`` may be ``inf``.
        """
        lo = -math.inf if lo == -math.inf else math.ceil(lo)
        hi = math.inf if hi == math.inf else math.floor(hi)
        res = {r: 0.0 for r in orders}
        if hi < lo:
            return tuple(res[r] for r in orders)
        mu = self.mean
        # table part
        t0 = max(lo, self.k_min)
        t1 = min(hi, self.K_cap)
        if t0 <= t1:
            i0 = int(t0 - self.k_min)
            i1 = int(t1 - self.k_min)
            arrs = {0: (self._fwd0, self._rev0), 1: (self._fwd1, self._rev1), 2: (self._fwd2, self._rev2)}
            for r in orders:
                f, rv = arrs[r]
                res[r] += _stable_diff(f, rv, i0, i1)
        # right tail part: K_cap < j <= hi, j >= lo
        if self.right_tail is not None and hi > self.K_cap:
            lower = int(max(self.K_cap, lo - 1))
            m = {q: self._right_moment(q, lower, hi) for q in range(max(orders) + 1)}
            for r in orders:
                if r == 0:
                    res[0] += m[0]
                elif r == 1:
                    res[1] += m[1] - mu * m[0]
                else:
                    res[2] += m[2] - 2 * mu * m[1] + mu * mu * m[0]
        # left tail part: lo <= j < k_min
        if self.left_tail is not None and lo < self.k_min:
            # magnitudes |j| in (-(k_min), -lo]  ->  lower_mag = -k_min, upper = -lo
            upper_mag = math.inf if lo == -math.inf else int(-lo)
            lower_mag = int(max(-self.k_min, -hi - 1)) if hi < self.k_min else -self.k_min
            m = {q: self._left_moment(q, lower_mag, upper_mag) for q in range(max(orders) + 1)}
            for r in orders:
                if r == 0:
                    res[0] += m[0]
                elif r == 1:
                    res[1] += m[1] - mu * m[0]
                else:
                    res[2] += m[2] - 2 * mu * m[1] + mu * mu * m[0]
        return tuple(res[r] for r in orders)

    def tail(self, x):
        """P(xi > x); vectorised over x."""
        xs = np.asarray(x, dtype=np.float64)
        scalar = xs.ndim == 0
        xs = np.atleast_1d(xs)
        out = np.empty(xs.shape)
        m = np.floor(xs)
        if self.left_tail is None:
            # below the support every query is the full mass; read it from
            # the table so the value is identical at every such x
            m = np.maximum(m, self.k_min - 1)
        # fast path through the table
        inside = (m >= self.k_min - 1) & (m < self.K_cap)
        idx = (m[inside] - self.k_min + 1).astype(np.int64)
        out[inside] = self._rev0[idx] + self._right_mass
        for i in np.flatnonzero(~inside):
            out[i] = self.range_sums(m[i] + 1, math.inf, (0,))[0]
        return float(out[0]) if scalar else out

    def cdf(self, x):
        """P(xi <= x); vectorised over x."""
        xs = np.asarray(x, dtype=np.float64)
        scalar = xs.ndim == 0
        xs = np.atleast_1d(xs)
        out = np.empty(xs.shape)
        m = np.floor(xs)
        if self.right_tail is None:
            m = np.minimum(m, self.K_cap)
        inside = (m >= self.k_min) & (m <= self.K_cap)
        idx = (m[inside] - self.k_min).astype(np.int64)
        out[inside] = self._fwd0[idx] + self._left_mass
        for i in np.flatnonzero(~inside):
            out[i] = self.range_sums(-math.inf, m[i], (0,))[0]
        return float(out[0]) if scalar else out

    def centered_tail(self, x):
        """P(xi - mu > x)."""
        return self.tail(np.asarray(x, dtype=np.float64) + self.mean)

    def centered_left_tail(self, x):
        """P(xi - mu < -x)."""
        y = self.mean - np.asarray(x, dtype=np.float64)
        return self.cdf(np.ceil(y) - 1.0)

    def abs_tail(self, x) -> float:
        """P(|xi - mu| > x)."""
        return float(self.centered_tail(x)) + float(self.centered_left_tail(x))

    def truncated_variance(self, x: float) -> float:
        """sigma^2(x) = E[(xi - mu)^2 ; |xi - mu| <= x]."""
        if x < 0:
            raise ValueError("x must be >= 0")
        return self.range_sums(self.mean - x, self.mean + x, (2,))[0]

    def sigma_bar_sq(self, x: float) -> float:
        """E[(|xi - mu| ^ x)^2] = sigma^2(x) + x^2 P(|xi - mu| > x)."""
        return self.truncated_variance(x) + x * x * self.abs_tail(x)

    def truncated_mean(self, a: float) -> float:
        """E[xi ; |xi| <= a] (raw, uncentered truncation)."""
        s0, s1 = self.range_sums(-a, a, (0, 1))
        return s1 + self.mean * s0

    def abs_first_moment_beyond(self, x: float) -> float:
        """E[|xi - mu| ; |xi - mu| > x]."""
        right = self.range_sums(math.floor(self.mean + x) + 1, math.inf, (1,))[0]
        left = self.range_sums(-math.inf, math.ceil(self.mean - x) - 1, (1,))[0]
        return right - left

    @property
    def variance(self) -> float:
        """Var(xi); ``inf`` when the second moment diverges."""
        if self.right_tail is not None and self.right_tail.beta <= 2:
            return math.inf
        if self.left_tail is not None and self.left_tail.beta <= 2:
            return math.inf
        return self.range_sums(-math.inf, math.inf, (2,))[0]

    def regvar_L(self, x):
        """Factor ``l(x)`` in ``P(xi > x) ~ l(x) x**-beta`` from the tail model."""
        if self.right_tail is None:
            raise ValueError("law has no analytic right tail")
        return self.right_tail.regvar_L(x)

    def tail_model_pmf(self, k):
        """Mass predicted by the analytic right tail model at k (beyond or inside the table)."""
        if self.right_tail is None:
            raise ValueError("law has no analytic right tail")
        return self.right_tail.pmf(k)

    def support_table(self, lo: int, hi: int) -> np.ndarray:
        """Masses P(xi = k) for k = lo..hi (vectorised; uses analytic tails outside the table)."""
        ks = np.arange(lo, hi + 1, dtype=np.int64)
        return self.pmf(ks)

    def shifted(self, shift: int) -> "LatticeLaw":
        """Law of xi + shift."""
        if self.left_tail is not None or self.right_tail is not None:
            raise ValueError("shifting laws with analytic tails is not supported")
        return LatticeLaw(self.k_min + shift, self.pmf_table, family=self.family,
                          params=dict(self.params, shift=shift), aperiodic=self.aperiodic)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

DEFAULT_K_CAP = 1 << 20


def _normalize(k_min, table, right, left, family, params, aperiodic) -> LatticeLaw:
    law = LatticeLaw(k_min, table, right, left, family, params, aperiodic)
    total = law.total_mass
    if abs(total - 1.0) > 1e-15:
        def scale(t):
            if t is None:
                return None
            if isinstance(t, OscillatingTail):
                return OscillatingTail(t.gamma, t.C / total, t.x_floor)
            return TailModel(t.beta, t.L, t.C / total)
        law = LatticeLaw(k_min, table / total, scale(right), scale(left), family, params, aperiodic)
    return law


def _gcd_aperiodic(ks: np.ndarray) -> bool:
    if ks.size < 2:
        return False
    g = 0
    for d in np.diff(ks):
        g = math.gcd(g, int(d))
        if g == 1:
            return True
    return g == 1


def make_law(family, params: Optional[dict] = None, K_cap: int = DEFAULT_K_CAP) -> LatticeLaw:
    """Build a normalised :class:`LatticeLaw`.

    Families and parameters
    -----------------------
    ``ParetoZeta``: ``beta`` (tail index, > 1), optional ``L`` (a
        :class:`SlowlyVaryingSpec` or dict), ``support_min`` (default 1).
        Masses proportional to ``L(k) k**-(1+beta)``.
    ``ZrpOccupation``: ``b`` (> 2), ``g`` in {"power", "linear"} for rates
        ``(k/(k-1))**b`` (with ``g(1)=1``) or ``1 + b/k``; ``zero_site``
        (default True) keeps the empty site ``w(0)=1`` in the normalisation.
    ``TwoSidedStable``: ``alpha`` in (1, 2), ``p`` in [0, 1]: masses
        ``p k**-(1+alpha)/zeta(1+alpha)`` for ``k>=1`` and
        ``(1-p)|k|**-(1+alpha)/zeta(1+alpha)`` for ``k<=-1``.
    ``Bounded``: ``values`` and ``masses`` (finite support).
    ``Custom``: either ``k_min`` and ``pmf`` (finite table, optionally with
        ``tail_beta``, ``tail_C``, ``tail_L``) or ``tail="oscillating"`` with
        ``gamma`` (and optional ``x_floor``).
    """
    params = dict(params or {})
    family = Family(family)
    if family in (Family.PARETO_ZETA, Family.ZRP_OCCUPATION, Family.TWO_SIDED_STABLE) and K_cap < 1000:
        raise ValueError("K_cap must be at least 1000 to keep analytic tail remainders negligible")

    if family is Family.PARETO_ZETA:
        beta = float(params["beta"])
        if beta <= 1:
            raise ValueError("ParetoZeta requires beta > 1 for a finite mean")
        L = params.get("L", SlowlyVaryingSpec.constant(1.0))
        if isinstance(L, dict):
            L = SlowlyVaryingSpec(**L)
        k0 = int(params.get("support_min", 1))
        if k0 < 1:
            raise ValueError("ParetoZeta support starts at k >= 1")
        ks = np.arange(k0, K_cap + 1, dtype=np.float64)
        table = L(ks) * ks ** (-(1.0 + beta))
        right = TailModel(beta, L, 1.0)
        params = dict(params, L=L.to_dict())
        return _normalize(k0, table, right, None, family, params, _gcd_aperiodic(ks[:3]))

    if family is Family.ZRP_OCCUPATION:
        b = float(params["b"])
        g = params.get("g", "power")
        if params.get("phi", 1.0) != 1.0:
            raise ValueError("only the critical fugacity phi=1 is supported")
        if b <= 2:
            raise ValueError("ZrpOccupation requires b > 2 (finite critical density)")
        zero_site = bool(params.get("zero_site", True))
        ks = np.arange(0, K_cap + 1, dtype=np.float64)
        w = zrp_weights(b, g, K_cap)
        if g == "power":
            right = TailModel(b - 1.0, SlowlyVaryingSpec.constant(1.0), 1.0)
        elif g == "linear":
            right = TailModel(b - 1.0, SlowlyVaryingSpec.gamma_ratio(b), 1.0)
        else:
            raise ValueError(f"unknown rate family g={g!r}")
        k0 = 0 if zero_site else 1
        table = w[k0:]
        return _normalize(k0, table, right, None, family, params, True)

    if family is Family.TWO_SIDED_STABLE:
        alpha = float(params["alpha"])
        p = float(params["p"])
        if not 1.0 < alpha < 2.0:
            raise ValueError("TwoSidedStable requires alpha in (1, 2)")
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        z = special.zeta(1.0 + alpha)
        ks = np.arange(-K_cap, K_cap + 1, dtype=np.float64)
        mag = np.abs(ks)
        table = np.zeros_like(ks)
        pos = ks > 0
        neg = ks < 0
        table[pos] = p * mag[pos] ** (-(1.0 + alpha)) / z
        table[neg] = (1.0 - p) * mag[neg] ** (-(1.0 + alpha)) / z
        one = SlowlyVaryingSpec.constant(1.0)
        right = TailModel(alpha, one, p / z) if p > 0 else None
        left = TailModel(alpha, one, (1.0 - p) / z) if p < 1 else None
        return _normalize(-K_cap, table, right, left, family, params, p not in (0.0, 1.0))

    if family is Family.BOUNDED:
        values = np.asarray(params["values"], dtype=np.int64)
        masses = np.asarray(params["masses"], dtype=np.float64)
        order = np.argsort(values)
        values, masses = values[order], masses[order]
        k0 = int(values[0])
        table = np.zeros(int(values[-1]) - k0 + 1)
        np.add.at(table, values - k0, masses)
        support = values[masses > 0]
        params = {"values": values.tolist(), "masses": masses.tolist()}
        return _normalize(k0, table, None, None, family, params, _gcd_aperiodic(support))

    # Custom
    if params.get("tail") == "oscillating":
        gamma = float(params["gamma"])
        if gamma < math.sqrt(2.0):
            raise ValueError("oscillating tail requires gamma >= sqrt(2) for nonnegative masses")
        x_floor = float(params.get("x_floor", E_E))
        osc = OscillatingTail(gamma, 1.0, x_floor)
        k0 = int(math.ceil(x_floor))
        ks = np.arange(k0, K_cap + 1, dtype=np.float64)
        table = osc.pmf(ks)
        table[0] = 1.0 - float(osc.fbar(k0))
        if np.any(table < 0):
            raise ValueError("differenced masses are negative")
        return LatticeLaw(k0, table, osc, None, family, params, True)
    k0 = int(params["k_min"])
    table = np.asarray(params["pmf"], dtype=np.float64)
    right = None
    if "tail_beta" in params:
        L = params.get("tail_L", SlowlyVaryingSpec.constant(1.0))
        if isinstance(L, dict):
            L = SlowlyVaryingSpec(**L)
        right = TailModel(float(params["tail_beta"]), L, float(params["tail_C"]))
    nz = np.flatnonzero(table > 0) + k0
    return _normalize(k0, table, right, None, family, {k: v for k, v in params.items() if k != "pmf"},
                      _gcd_aperiodic(nz))


def zrp_weights(b: float, g: str, K: int) -> np.ndarray:
    """Stationary weights w(n) = prod_{k<=n} 1/g(k) for n = 0..K."""
    n = np.arange(0, K + 1, dtype=np.float64)
    if g == "power":
        w = np.empty_like(n)
        w[0] = 1.0
        w[1:] = n[1:] ** (-b)
        return w
    if g == "linear":
        # prod_{k=1}^n k/(k+b) = Gamma(n+1) Gamma(b+1) / Gamma(n+b+1)
        return special.gamma(b + 1.0) / special.poch(n + 1.0, b)
    raise ValueError(f"unknown rate family g={g!r}")


def mixture(laws: Sequence[LatticeLaw], weights: Sequence[float]) -> LatticeLaw:
    """Finite mixture of table-only laws (analytic tails must agree in shape)."""
    weights = np.asarray(weights, dtype=np.float64)
    k0 = min(l.k_min for l in laws)
    k1 = max(l.K_cap for l in laws)
    table = np.zeros(k1 - k0 + 1)
    right = None
    for l, w in zip(laws, weights):
        table[l.k_min - k0: l.K_cap - k0 + 1] += w * l.pmf_table
        if l.right_tail is not None:
            if l.K_cap != k1:
                raise ValueError("laws with analytic tails must share K_cap")
            t = l.right_tail
            right = TailModel(t.beta, t.L, w * t.C + (right.C if right is not None else 0.0))
    return _normalize(k0, table, right, None, Family.CUSTOM, {"mixture": True}, True)


# ---------------------------------------------------------------------------
# Functional interface
# ---------------------------------------------------------------------------


def tail(law: LatticeLaw, x):
    return law.tail(x)


def truncated_variance(law: LatticeLaw, x: float) -> float:
    return law.truncated_variance(x)


def sigma_bar(law: LatticeLaw, x: float) -> float:
    """sigma-bar squared, E[(|xi - mu| ^ x)^2]."""
    return law.sigma_bar_sq(x)


def _check_sigma(law, x) -> float:
    s2 = law.truncated_variance(x)
    if s2 <= 0:
        raise ValueError(f"truncated variance vanishes at x={x}; q is undefined")
    return s2


def q_of(law: LatticeLaw, x: float) -> float:
    """q(x) = x^2 P(xi - mu > x) / sigma^2(x)."""
    return x * x * float(law.centered_tail(x)) / _check_sigma(law, x)


def q_bar(law: LatticeLaw, x: float) -> float:
    """q-bar(x) = x^2 P(|xi - mu| > x) / sigma^2(x)."""
    return x * x * law.abs_tail(x) / _check_sigma(law, x)


def q_star(law: LatticeLaw, x: float, ratio: float = 1.05, span: float = 1e4) -> float:
    """sup over y >= x of q-bar(y), on a geometric grid of the given ratio.

    The grid runs over [x, span * x]; beyond it the bound
    ``q-bar(y) <= Y^2 P(|xi-mu| > Y) / sigma^2(Y)`` at the grid end ``Y``
    is used as envelope, valid when ``y^2 P(|xi - mu| > y)`` is
    non-increasing there (tail index at least 2).
    """
    n = int(math.ceil(math.log(span) / math.log(ratio))) + 1
    ys = x * ratio ** np.arange(n)
    best = max(q_bar(law, float(y)) for y in ys)
    return best


def q_tilde(law: LatticeLaw, x: float) -> float:
    """(1/x) * integral over [0, x] of q-bar, integrated exactly piece by piece.

    On each interval between consecutive values of |k - mu| both sigma^2 and
    P(|xi - mu| > t) are constant, so q-bar(t) = t^2 P / S there.  Intervals on
    which sigma^2 vanishes contribute nothing (q-bar is undefined there).
    """
    mu = law.mean
    lo = math.ceil(mu - x)
    hi = math.floor(mu + x)
    ks = np.arange(lo, hi + 1)
    dist = np.abs(ks - mu)
    masses = law.pmf(ks)
    order = np.argsort(dist, kind="stable")
    dist, masses = dist[order], masses[order]
    d2m = dist * dist * masses
    s2 = np.cumsum(d2m)  # sigma^2 just after each breakpoint
    tail_after = law.abs_tail(0.0) - np.cumsum(np.where(dist > 0, masses, 0.0))
    # correct the tail for exact-zero distances (atoms at mu are not in |.|>0)
    a = dist
    b = np.minimum(np.append(dist[1:], x), x)
    P = np.maximum(tail_after, 0.0)
    ok = (b > a) & (s2 > 0)
    total = float(np.sum(P[ok] / s2[ok] * (b[ok] ** 3 - a[ok] ** 3) / 3.0))
    return total / x


def claim_tail_constant(law: LatticeLaw, xs: Sequence[float]) -> float:
    """Smallest c with E|xi-mu|1{|xi-mu|>x} <= c q*(x) sigma^2(x)/x on the grid."""
    c = 0.0
    for x in xs:
        lhs = law.abs_first_moment_beyond(x)
        rhs = q_star(law, x) * law.truncated_variance(x) / x
        c = max(c, lhs / rhs)
    return c


@dataclass
class RegVarReport:
    lambdas: np.ndarray
    sup_ratio: np.ndarray
    inf_ratio: np.ndarray
    upper_index: float
    lower_index: float
    intermediate_plausible: bool


def regvar_diagnostic(law: LatticeLaw, lambdas: Sequence[float], xs: Sequence[float],
                      tol: float = 0.05) -> RegVarReport:
    """Empirical ratios Fbar(lambda x)/Fbar(x) over a grid of x.

    The Matuszewska bracket is estimated as the extreme values of
    log(ratio)/log(lambda) over lambda > 1.  Intermediate regular variation is
    deemed plausible when the spread sup - inf at the smallest lambda > 1 is
    below ``tol``.
    """
    lambdas = np.asarray(lambdas, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    base = law.tail(xs)
    sup_r = np.empty(lambdas.size)
    inf_r = np.empty(lambdas.size)
    for i, lam in enumerate(lambdas):
        if lam == 1.0:
            sup_r[i] = inf_r[i] = 1.0
            continue
        r = law.tail(lam * xs) / base
        sup_r[i] = r.max()
        inf_r[i] = r.min()
    gt = lambdas > 1.0
    if np.any(gt):
        ll = np.log(lambdas[gt])
        upper = float(np.max(np.log(sup_r[gt]) / ll))
        lower = float(np.min(np.log(inf_r[gt]) / ll))
        j = int(np.argmin(np.where(gt, lambdas, np.inf)))
        plausible = bool(sup_r[j] - inf_r[j] < tol)
    else:
        upper = lower = 0.0
        plausible = True
    return RegVarReport(lambdas, sup_r, inf_r, upper, lower, plausible)


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def write_pmf_csv(law: LatticeLaw, path, lo: Optional[int] = None, hi: Optional[int] = None) -> None:
    """Write (k, mass) rows with 17 significant digits."""
    lo = law.k_min if lo is None else lo
    hi = law.K_cap if hi is None else hi
    ks = np.arange(lo, hi + 1)
    ms = law.pmf(ks)
    with open(path, "w") as fh:
        fh.write("k,mass\n")
        for k, m in zip(ks, ms):
            fh.write(f"{int(k)},{m:.17g}\n")


def read_pmf_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    data = np.atleast_2d(data)
    return data[:, 0].astype(np.int64), data[:, 1]


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def law_from_spec_text(text: str) -> LatticeLaw:
    """Build a law from a key-value document.

    Lines look like ``key = value``; values are JSON literals or bare words.
    Required key: ``family``.  ``K_cap`` is optional; every other key is a
    family parameter.  ``#`` starts a comment.
    """
    params = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        params[key.strip()] = _parse_value(value)
    if "family" not in params:
        raise ValueError("law spec needs a 'family' key")
    family = params.pop("family")
    K_cap = int(params.pop("K_cap", DEFAULT_K_CAP))
    return make_law(family, params, K_cap=K_cap)


def law_to_spec_text(family: str, params: dict, K_cap: int) -> str:
    lines = [f"family = {family}", f"K_cap = {K_cap}"]
    for k, v in params.items():
        lines.append(f"{k} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"
