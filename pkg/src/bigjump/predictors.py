"""Closed-form predictors, transition thresholds and explicit upper bounds.

Arguments ``x`` are thresholds for S_n - floor(b_n) on the recentred lattice.
The corresponding continuous deviation from the true centre is
``y = x - frac(b_n)``; Gaussian terms and the one-jump terms are evaluated at
``y`` so that predictor and exact value refer to the same event.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import special

from .laws import LatticeLaw, q_of
from .normalizers import solve_a_n

__all__ = [
    "phi_bar",
    "log_phi_bar",
    "normal_pdf",
    "lattice_offset",
    "jump_tail",
    "jump_pmf",
    "nagaev_predictor",
    "rozovskii_predictor",
    "local_predictor",
    "c_beta_sigma",
    "c_beta",
    "c_tilde_beta_sigma",
    "c_tilde_beta",
    "mixture_weight",
    "VARIANTS",
    "TransitionDiagnostics",
    "gamma_threshold",
    "x_for_gamma",
    "stable_predictor",
    "fuk_nagaev_bound",
    "fuk_nagaev_r0",
    "BoundFit",
    "fit_local_bounds",
    "TransitionScan",
    "transition_scan",
    "ScanRow",
    "write_scan_csv",
]

_SQRT2PI = math.sqrt(2.0 * math.pi)
_ASYMPTOTIC_FROM = 37.0


# ---------------------------------------------------------------------------
# Gaussian helpers
# ---------------------------------------------------------------------------


def _mills_series(z: float) -> float:
    """1 - 1/z^2 + 3/z^4 - 15/z^6 + 105/z^8 - 945/z^10."""
    w = 1.0 / (z * z)
    return 1.0 + w * (-1.0 + w * (3.0 + w * (-15.0 + w * (105.0 - 945.0 * w))))


def log_phi_bar(z: float) -> float:
    """log P(Z > z), finite for every real z."""
    if z < _ASYMPTOTIC_FROM:
        return math.log(0.5 * special.erfc(z / math.sqrt(2.0)))
    return -0.5 * z * z - math.log(z * _SQRT2PI) + math.log(_mills_series(z))


def phi_bar(z):
    """Standard normal upper tail; erfc below 37, six-term asymptotic series above."""
    if np.ndim(z) == 0:
        z = float(z)
        if z < _ASYMPTOTIC_FROM:
            return 0.5 * special.erfc(z / math.sqrt(2.0))
        return math.exp(log_phi_bar(z))
    z = np.asarray(z, dtype=np.float64)
    out = 0.5 * special.erfc(z / math.sqrt(2.0))
    big = z >= _ASYMPTOTIC_FROM
    if np.any(big):
        out[big] = [math.exp(log_phi_bar(v)) for v in z[big]]
    return out


def normal_pdf(z):
    return np.exp(-0.5 * np.square(z)) / _SQRT2PI


# ---------------------------------------------------------------------------
# Lattice bookkeeping
# ---------------------------------------------------------------------------


def lattice_offset(law: LatticeLaw, n: int) -> float:
    """frac(n mu): S_n - floor(n mu) >= x  <=>  S_n - n mu >= x - frac(n mu)."""
    b = n * law.mean
    return b - math.floor(b)


def jump_tail(law: LatticeLaw, n: int, x: float) -> float:
    """n P(xi - mu >= y) with y = x - frac(n mu)."""
    y = x - lattice_offset(law, n)
    k = math.ceil(law.mean + y)
    return n * float(law.tail(k - 1))


def jump_pmf(law: LatticeLaw, n: int, x: float) -> float:
    """n P(xi = round(mu + y)) with y = x - frac(n mu)."""
    y = x - lattice_offset(law, n)
    return n * float(law.pmf(int(round(law.mean + y))))


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------


def nagaev_predictor(law: LatticeLaw, n: int, x: float) -> float:
    """Phi_bar(y / (sigma sqrt(n))) + n P(xi - mu >= y)."""
    var = law.variance
    if not math.isfinite(var):
        raise ValueError("Nagaev's predictor needs a finite variance")
    y = x - lattice_offset(law, n)
    return phi_bar(y / math.sqrt(var * n)) + jump_tail(law, n, x)


def rozovskii_predictor(law: LatticeLaw, n: int, x: float, a_n: Optional[float] = None) -> float:
    """Phi_bar(y / a_n) + n P(xi - mu >= y)."""
    if a_n is None:
        a_n = solve_a_n(law, n)
    y = x - lattice_offset(law, n)
    return phi_bar(y / a_n) + jump_tail(law, n, x)


def local_predictor(law: LatticeLaw, n: int, x: float, a_n: Optional[float] = None) -> float:
    """phi(y / a_n) / a_n + n P(xi = round(mu + y))."""
    if a_n is None:
        a_n = solve_a_n(law, n)
    y = x - lattice_offset(law, n)
    return float(normal_pdf(y / a_n)) / a_n + jump_pmf(law, n, x)


# ---------------------------------------------------------------------------
# Transition constants and thresholds
# ---------------------------------------------------------------------------


def c_beta_sigma(beta: float, sigma: float) -> float:
    return sigma**beta * (beta - 2.0) ** ((beta - 1.0) / 2.0) / _SQRT2PI


def c_beta(beta: float) -> float:
    return 2.0 ** ((beta - 1.0) / 2.0) / _SQRT2PI


def c_tilde_beta_sigma(beta: float, sigma: float) -> float:
    return sigma**beta * (beta - 2.0) ** ((beta + 1.0) / 2.0) / (beta * _SQRT2PI)


def c_tilde_beta(beta: float) -> float:
    return 2.0 ** ((beta + 1.0) / 2.0) / (beta * _SQRT2PI)


def mixture_weight(gamma: float, constant: float) -> float:
    """1 / (1 + constant e^{-gamma}), with the limits at +-inf."""
    if gamma == math.inf:
        return 1.0
    if gamma == -math.inf:
        return 0.0
    z = math.log(constant) - gamma
    if z > 700:
        return 0.0
    return 1.0 / (1.0 + math.exp(z))


VARIANTS = ("integral_finiteVar", "integral_general", "local_finiteVar", "local_general")


@dataclass
class TransitionDiagnostics:
    n: int
    x: float
    gamma: float
    predicted_s: float
    constant_used: float
    variant: str


def _loglog_coef(variant: str, beta: float) -> float:
    return 0.5 * (beta - 1.0) if variant.startswith("integral") else 0.5 * (beta + 1.0)


def _gamma_offset(law: LatticeLaw, n: int, variant: str, beta: float):
    """(scale^2, offset) with gamma = y^2 / (2 scale^2) - offset."""
    coef = _loglog_coef(variant, beta)
    if variant.endswith("finiteVar"):
        var = law.variance
        if not math.isfinite(var):
            raise ValueError(f"variant {variant} needs a finite variance")
        ln = math.log(n)
        off = (beta / 2.0 - 1.0) * ln + coef * math.log(ln) - math.log(float(law.regvar_L(math.sqrt(n * ln))))
        return var * n, off
    a = solve_a_n(law, n)
    lq = abs(math.log(q_of(law, a)))
    ratio = float(law.regvar_L(a)) / float(law.regvar_L(a * math.sqrt(lq)))
    off = lq + coef * math.log(lq) + math.log(ratio)
    return a * a, off


def _constant(law: LatticeLaw, variant: str, beta: float) -> float:
    if variant == "integral_general":
        return c_beta(beta)
    if variant == "local_general":
        return c_tilde_beta(beta)
    sigma = math.sqrt(law.variance)
    if variant == "integral_finiteVar":
        return c_beta_sigma(beta, sigma)
    return c_tilde_beta_sigma(beta, sigma)


def gamma_threshold(law: LatticeLaw, n: int, x: float, variant: str = "integral_general") -> TransitionDiagnostics:
    """Threshold gamma_n (integral) or its local counterpart and the predicted mixture weight.

    General variants use a_n and q(a_n); the finite-variance variants use
    sigma^2 n and L(sqrt(n log n)).  L is the slowly varying factor of the
    right tail, evaluated exactly from the law's tail model.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    beta = law.beta
    if not math.isfinite(beta):
        raise ValueError("law has no regularly varying right tail")
    if variant.endswith("finiteVar") and beta <= 2:
        raise ValueError("finite-variance variants need beta > 2")
    scale2, off = _gamma_offset(law, n, variant, beta)
    y = x - lattice_offset(law, n)
    g = y * y / (2.0 * scale2) - off
    c = _constant(law, variant, beta)
    return TransitionDiagnostics(n, x, g, mixture_weight(g, c), c, variant)


def x_for_gamma(law: LatticeLaw, n: int, gamma: float, variant: str = "integral_general") -> float:
    """Recentred threshold x (real) at which the variant's gamma equals ``gamma``."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    scale2, off = _gamma_offset(law, n, variant, law.beta)
    val = 2.0 * scale2 * (gamma + off)
    if val <= 0:
        raise ValueError("gamma too small: no positive threshold")
    return math.sqrt(val) + lattice_offset(law, n)


# ---------------------------------------------------------------------------
# Stable regime
# ---------------------------------------------------------------------------


def _abs_tail_L(law: LatticeLaw, x: float, alpha: float) -> float:
    """l(x) with P(|xi| > x) ~ l(x) x^-alpha, from the analytic tail models."""
    tot = 0.0
    for t in (law.right_tail, law.left_tail):
        if t is not None:
            if abs(t.beta - alpha) > 1e-12:
                raise ValueError("tail index of the law differs from alpha")
            tot += float(t.regvar_L(x))
    if tot == 0.0:
        raise ValueError("law has no analytic tails")
    return tot


def stable_predictor(law: LatticeLaw, n: int, x: float, alpha: float, p: float,
                     mode: str = "integral") -> Optional[float]:
    """n p l(y) y^-alpha (integral) or n p alpha l(y) y^-(1+alpha) (local).

    With p = 0 the statement is only an o(.) bound and ``None`` is returned.
    """
    if not 0.0 < alpha < 2.0:
        raise ValueError("alpha must lie in (0, 2)")
    if mode not in ("integral", "local"):
        raise ValueError("mode must be integral or local")
    if p == 0.0:
        return None
    y = x - lattice_offset(law, n) if alpha >= 1 else x
    L = _abs_tail_L(law, y, alpha)
    if mode == "integral":
        return n * p * L * y ** (-alpha)
    return n * p * alpha * L * y ** (-(1.0 + alpha))


# ---------------------------------------------------------------------------
# Explicit bounds
# ---------------------------------------------------------------------------


def fuk_nagaev_bound(law: LatticeLaw, n: int, x: float, y: float) -> float:
    """e^{x/y} (1 + x y / (n sigma^2(y)))^{-x/y}."""
    if x <= 0 or y <= 0:
        raise ValueError("x and y must be positive")
    s2 = law.truncated_variance(y)
    if s2 <= 0:
        return 0.0
    k = x / y
    return math.exp(k - k * math.log1p(x * y / (n * s2)))


def fuk_nagaev_r0(law: LatticeLaw, y_max: float, points: int = 400) -> float:
    """Level from which y E[xi - mu; |xi - mu| <= y] <= sigma^2(y) holds up to y_max.

    Under that condition the general Fuk-Nagaev exponent
    -x/y + n mu(y)/y - n sigma^2(y)/y^2 is at most -x/y, which is the form
    used by :func:`fuk_nagaev_bound`.  The check runs on a geometric grid
    of ``points`` levels in [1, y_max].
    """
    ys = np.geomspace(1.0, y_max, points)
    ok = np.array([y * law.range_sums(law.mean - y, law.mean + y, (1,))[0] <= law.truncated_variance(y)
                   for y in ys])
    if not ok[-1]:
        raise ValueError("the condition fails at y_max")
    bad = np.flatnonzero(~ok)
    return float(ys[bad[-1] + 1]) if bad.size else float(ys[0])


@dataclass
class BoundFit:
    """Fitted constants for the two local bounds and their held-out check."""

    C_variance: float
    C_mixed: float
    c_mixed: float
    holdout_ok_variance: bool
    holdout_ok_mixed: bool
    worst_holdout_variance: float
    worst_holdout_mixed: float


def _shape_variance(law, n, a, x):
    return law.truncated_variance(x) * n / (x * x) / a


def _shape_mixed(law, n, a, x, c):
    return (math.exp(-c * x * x / (a * a)) + n * float(law.regvar_L(x)) * x ** (-law.beta)) / a


def fit_local_bounds(train: Sequence[tuple], holdout: Sequence[tuple], law: LatticeLaw,
                     c_grid: Iterable[float] = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)) -> BoundFit:
    """Fit C in P(S_n - b_n = x) <= (C / a_n) n sigma^2(x) / x^2 and (C1, c1) in
    P(S_n - b_n = x) <= (C1 / a_n)(e^{-c1 x^2 / a_n^2} + n l(x) x^{-beta}).

    ``train`` and ``holdout`` are sequences of (n, a_n, x, exact) with x >= a_n.
    Constants are the smallest that dominate every training point; the
    held-out points then test the fitted shape.  For the mixed shape c1 is
    chosen on the grid to minimise the fitted C1.
    """
    Cv = max(ex / _shape_variance(law, n, a, x) for n, a, x, ex in train)
    best = None
    for c in c_grid:
        C1 = max(ex / _shape_mixed(law, n, a, x, c) for n, a, x, ex in train)
        if best is None or C1 < best[0]:
            best = (C1, c)
    C1, c1 = best
    wv = max(ex / (Cv * _shape_variance(law, n, a, x)) for n, a, x, ex in holdout)
    wm = max(ex / (C1 * _shape_mixed(law, n, a, x, c1)) for n, a, x, ex in holdout)
    return BoundFit(Cv, C1, c1, wv <= 1.0, wm <= 1.0, wv, wm)


# ---------------------------------------------------------------------------
# Transition scan
# ---------------------------------------------------------------------------


@dataclass
class TransitionScan:
    x_integral: Optional[float]
    x_local: Optional[float]
    window: Optional[tuple]
    residual_integral: float
    residual_local: float


def _crossing(f, lo: float, hi: float) -> Optional[float]:
    """Bisection for f(lo) > 0 >= f(hi) on a geometric grid; None if no sign change."""
    xs = np.geomspace(lo, hi, 200)
    vals = [f(x) for x in xs]
    for i in range(len(xs) - 1):
        if vals[i] > 0 >= vals[i + 1]:
            a, b = xs[i], xs[i + 1]
            for _ in range(200):
                m = 0.5 * (a + b)
                if m <= a or m >= b:
                    break
                if f(m) > 0:
                    a = m
                else:
                    b = m
            return b
    return None


def transition_scan(law: LatticeLaw, n: int, x_max_factor: float = 1e3) -> TransitionScan:
    """Crossings of the Gaussian and one-jump terms, integral and local.

    Solves Phi_bar(x / a_n) = n Fbar(x) and phi(x / a_n) / a_n = n pmf(x) in
    continuous x using the smooth tail model of the law (the lattice pmf is a
    step function, so the local crossing is taken on the model).  Returns
    ``None`` entries when no crossing exists on [a_n, x_max_factor a_n].
    """
    if law.right_tail is None:
        return TransitionScan(None, None, None, math.nan, math.nan)
    a = solve_a_n(law, n)
    t = law.right_tail

    def log_jump(x):
        return math.log(n) + math.log(float(law.centered_tail(x)))

    def log_jump_local(x):
        v = float(t.pmf(np.array([law.mean + x]))[0]) if hasattr(t, "pmf") else 0.0
        return math.log(n * v) if v > 0 else -math.inf

    f_int = lambda x: log_phi_bar(x / a) - log_jump(x)
    f_loc = lambda x: (-0.5 * (x / a) ** 2 - math.log(a * _SQRT2PI)) - log_jump_local(x)
    xi = _crossing(f_int, a, x_max_factor * a)
    xl = _crossing(f_loc, a, x_max_factor * a)
    ri = abs(math.expm1(f_int(xi))) if xi is not None else math.nan
    rl = abs(math.expm1(f_loc(xl))) if xl is not None else math.nan
    win = (xi, xl) if xi is not None and xl is not None else None
    return TransitionScan(xi, xl, win, ri, rl)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


@dataclass
class ScanRow:
    n: int
    x: float
    exact: float
    predictor: float
    ratio: float
    gamma: float
    s_pred: float
    s_exact: float


def write_scan_csv(rows: Sequence[ScanRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("n,x,exact,predictor,ratio,gamma,s_pred,s_exact\n")
        for r in rows:
            fh.write(",".join(str(r.n) if k == "n" else f"{v:.17g}" for k, v in asdict(r).items()) + "\n")
