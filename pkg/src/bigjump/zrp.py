"""Zero-range process on L sites at the critical fugacity.

The stationary measure conditioned on N particles is the law of L i.i.d.
occupation variables with masses proportional to w(n) = prod_{k<=n} 1/g(k),
conditioned on their sum being N.  Condensation is the big jump of that sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy import special

from .laws import LatticeLaw, SlowlyVaryingSpec, make_law, zrp_weights
from .normalizers import solve_a_n, solve_r_n
from .oracle import backward_sample, p_sum_eq, sequential_sum_distribution

__all__ = [
    "ZrpModel",
    "ZrpState",
    "ZrpTrajectory",
    "stationary_conditioned_sample",
    "exact_marginal",
    "gillespie_simulate",
    "condensate_probability",
    "geometric_split_eps",
    "intermediate_mass",
    "gamma_prime",
    "N_of_gamma_prime",
    "gamma_tilde",
    "N_of_gamma_tilde",
    "predicted_condensate_weight",
    "write_trajectory_csv",
]


@dataclass
class ZrpModel:
    """Zero-range process with rates g(k) = (k/(k-1))**b (``g="power"``, g(1) = 1)
    or g(k) = 1 + b/k (``g="linear"``).

    ``eps_k`` perturbs the linear rates to g(k) = 1 + (b + eps_k[k-1])/k for
    the first len(eps_k) values of k.
    """

    L: int
    N: int
    b: float
    g: str = "power"
    eps_k: Optional[Sequence[float]] = None
    K_cap: int = 1 << 18
    kernel: str = "complete"
    law: LatticeLaw = field(init=False, repr=False)

    def __post_init__(self):
        if self.L < 1 or self.N < 0:
            raise ValueError("need L >= 1 and N >= 0")
        if self.kernel != "complete":
            raise ValueError("only the complete-graph kernel is implemented")
        if self.g not in ("power", "linear"):
            raise ValueError(f"unknown rate family {self.g!r}")
        if self.b <= 2:
            raise ValueError("the critical density is infinite for b <= 2")
        if self.eps_k is None:
            self.law = make_law("ZrpOccupation", {"b": self.b, "g": self.g}, K_cap=self.K_cap)
            return
        if self.g != "linear":
            raise ValueError("eps_k perturbations apply to the linear rate family")
        eps = np.asarray(self.eps_k, dtype=np.float64)
        k = np.arange(1, self.K_cap + 1, dtype=np.float64)
        rates = 1.0 + self.b / k
        rates[: eps.size] += eps[: self.K_cap] / k[: eps.size]
        if np.any(rates <= 0):
            raise ValueError("perturbed rates must stay positive")
        w = np.concatenate(([1.0], np.cumprod(1.0 / rates)))
        # beyond K_cap the rates are unperturbed, so w is a constant multiple of
        # the unperturbed weights there
        scale = w[-1] / zrp_weights(self.b, "linear", self.K_cap)[-1]
        self.law = make_law("Custom", {"k_min": 0, "pmf": w, "tail_beta": self.b - 1.0, "tail_C": scale,
                                       "tail_L": SlowlyVaryingSpec.gamma_ratio(self.b)}, K_cap=self.K_cap)

    # -- derived quantities ---------------------------------------------------

    def rate(self, k):
        """Departure rate g(k), with g(0) = 0."""
        k = np.asarray(k, dtype=np.float64)
        out = np.zeros_like(k)
        pos = k >= 1
        kk = k[pos]
        if self.g == "power":
            with np.errstate(divide="ignore"):
                out[pos] = np.where(kk == 1, 1.0, (kk / np.maximum(kk - 1.0, 1.0)) ** self.b)
        else:
            extra = np.zeros_like(kk)
            if self.eps_k is not None:
                eps = np.asarray(self.eps_k, dtype=np.float64)
                idx = kk.astype(np.int64) - 1
                inside = idx < eps.size
                extra[inside] = eps[idx[inside]]
            out[pos] = 1.0 + (self.b + extra) / kk
        return out

    @property
    def rho_c(self) -> float:
        return self.law.mean

    @property
    def sigma(self) -> float:
        return math.sqrt(self.law.variance) if self.b > 3 else math.inf

    @property
    def excess(self) -> float:
        """x_L = N - rho_c L."""
        return self.N - self.rho_c * self.L

    @property
    def tail_constant(self) -> float:
        """c with nu_1(eta = n) ~ c n^{-b}."""
        t = self.law.right_tail
        if t.L.is_constant:
            return t.C * t.L.c
        return t.C * special.gamma(self.b + 1.0)

    def fitted_tail_constant(self, n: Optional[int] = None) -> float:
        """pmf(n) n^b at a finite n, for comparison with :attr:`tail_constant`."""
        n = self.law.K_cap if n is None else n
        return float(self.law.pmf(n)) * float(n) ** self.b


@dataclass
class ZrpState:
    eta: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=np.int64)
        if np.any(self.eta < 0):
            raise ValueError("occupations must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.eta.sum())

    @property
    def max(self) -> int:
        return int(self.eta.max())


# ---------------------------------------------------------------------------
# Stationary measure
# ---------------------------------------------------------------------------


def stationary_conditioned_sample(model: ZrpModel, rng: np.random.Generator, size: int = 1) -> list[ZrpState]:
    """Exact draws from the stationary measure on L sites with N particles."""
    draws = backward_sample(model.law, model.L, model.N, rng, size)
    # backward sampling fills coordinates from the last one; shuffle each row
    # so the exchangeable law is not tied to the fill order
    for row in draws:
        rng.shuffle(row)
    return [ZrpState(row.copy()) for row in draws]


def exact_marginal(model: ZrpModel) -> np.ndarray:
    """P(eta_1 = k | S_L = N) for k = 0..N."""
    N, L = model.N, model.L
    if L == 1:
        out = np.zeros(N + 1)
        out[N] = 1.0
        return out
    _, rest = sequential_sum_distribution(model.law, L - 1, N)
    ks = np.arange(N + 1)
    w = model.law.pmf(ks) * rest[N - ks]
    return w / w.sum()


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


@njit(cache=True)
def _tree_build(tree, vals):
    n = vals.size
    tree[:] = 0.0
    for i in range(n):
        j = i + 1
        while j <= n:
            tree[j] += vals[i]
            j += j & (-j)


@njit(cache=True)
def _tree_add(tree, i, delta):
    n = tree.size - 1
    j = i + 1
    while j <= n:
        tree[j] += delta
        j += j & (-j)


@njit(cache=True)
def _tree_find(tree, target):
    """Smallest index whose prefix sum exceeds target."""
    n = tree.size - 1
    pos = 0
    step = 1
    while step * 2 <= n:
        step *= 2
    while step > 0:
        nxt = pos + step
        if nxt <= n and tree[nxt] <= target:
            pos = nxt
            target -= tree[nxt]
        step //= 2
    return pos


@njit(cache=True)
def _flush(k, t, t_rec, last, occ, hist):
    start = last[k] if last[k] > t_rec else t_rec
    if t > start:
        hist[k] += (t - start) * occ[k]
    last[k] = t


@njit(cache=True)
def _run_chunk(eta, g_table, site_rate, tree, occ, last, hist, u, t, t_max, t_rec,
               snap_t, snap_m, snap_i, cur_max):
    """Consume uniforms three per event; returns (t, events, cur_max, snap_i, done)."""
    L = eta.size
    events = 0
    n_ev = u.size // 3
    for e in range(n_ev):
        total = 0.0
        j = L
        while j > 0:
            total += tree[j]
            j -= j & (-j)
        dt = -math.log(1.0 - u[3 * e]) / total
        t_next = t + dt
        while snap_i < snap_t.size and snap_t[snap_i] <= min(t_next, t_max):
            snap_m[snap_i] = cur_max
            snap_i += 1
        if t_next >= t_max:
            return t_max, events, cur_max, snap_i, True
        t = t_next
        x = _tree_find(tree, u[3 * e + 1] * total)
        if x >= L:
            x = L - 1
        while eta[x] == 0:
            # round-off landed on an empty site; move to the next occupied one
            x = (x + 1) % L
        y = int(u[3 * e + 2] * (L - 1))
        if y >= L - 1:
            y = L - 2
        if y >= x:
            y += 1
        kx = eta[x]
        ky = eta[y]
        for k in (kx, kx - 1, ky, ky + 1):
            _flush(k, t, t_rec, last, occ, hist)
        occ[kx] -= 1
        occ[kx - 1] += 1
        occ[ky] -= 1
        occ[ky + 1] += 1
        eta[x] = kx - 1
        eta[y] = ky + 1
        _tree_add(tree, x, g_table[kx - 1] - site_rate[x])
        site_rate[x] = g_table[kx - 1]
        _tree_add(tree, y, g_table[ky + 1] - site_rate[y])
        site_rate[y] = g_table[ky + 1]
        if ky + 1 > cur_max:
            cur_max = ky + 1
        while occ[cur_max] == 0:
            cur_max -= 1
        events += 1
    return t, events, cur_max, snap_i, False


@dataclass
class ZrpTrajectory:
    """Time-averaged statistics of one trajectory.

    ``occupancy`` is the fraction of site-time spent at each occupation
    0..N after ``t_burn`` (pooled over sites, sums to one).
    """

    t_max: float
    t_burn: float
    events: int
    occupancy: np.ndarray
    snapshot_times: np.ndarray
    snapshot_max: np.ndarray
    final_state: ZrpState


def gillespie_simulate(model: ZrpModel, state: ZrpState, t_max: float, rng: np.random.Generator, *,
                       t_burn: float = 0.0, n_snapshots: int = 256, max_events: Optional[int] = None,
                       chunk: int = 1 << 16) -> ZrpTrajectory:
    """Continuous-time simulation on the complete graph.

    Site x fires at rate g(eta_x) and sends one particle to a uniformly chosen
    other site.  Site selection uses a Fenwick tree of rates, so each event
    costs O(log L).  With ``max_events`` the run stops early and ``t_max`` in
    the result is the time reached.
    """
    eta = np.array(state.eta, dtype=np.int64)
    L, N = model.L, model.N
    if eta.size != L or int(eta.sum()) != N:
        raise ValueError("state does not match the model")
    snap_t = np.linspace(0.0, t_max, n_snapshots)
    snap_m = np.zeros(n_snapshots, dtype=np.int64)
    occ = np.bincount(eta, minlength=N + 2).astype(np.int64)
    if L == 1 or N == 0:
        # no particle can move to another site
        snap_m[:] = eta.max()
        hist = occ[: N + 1].astype(np.float64)
        return ZrpTrajectory(t_max, t_burn, 0, hist / hist.sum(), snap_t, snap_m, ZrpState(eta))
    g_table = model.rate(np.arange(N + 2))
    site_rate = g_table[eta].copy()
    tree = np.zeros(L + 1)
    last = np.zeros(N + 2)
    hist = np.zeros(N + 2)
    t = 0.0
    events = 0
    cur_max = int(eta.max())
    snap_i = 0
    done = False
    while not done:
        _tree_build(tree, site_rate)  # rebuild to shed accumulated round-off
        n_ev = chunk if max_events is None else min(chunk, max_events - events)
        if n_ev <= 0:
            t_max = t
            break
        u = rng.random(3 * n_ev)
        t, ev, cur_max, snap_i, done = _run_chunk(eta, g_table, site_rate, tree, occ, last, hist, u, t,
                                                  t_max, t_burn, snap_t, snap_m, snap_i, cur_max)
        events += ev
    for k in range(N + 2):
        _flush(k, t, t_burn, last, occ, hist)
    snap_m[snap_i:] = cur_max
    occupancy = hist[: N + 1] / hist.sum() if hist.sum() > 0 else hist[: N + 1]
    return ZrpTrajectory(t_max, t_burn, events, occupancy, snap_t, snap_m, ZrpState(eta))


def write_trajectory_csv(traj: ZrpTrajectory, path, buckets: int = 8) -> None:
    """Rows (t, M_L) followed by the pooled occupancy histogram in ``buckets`` bins."""
    occ = traj.occupancy
    edges = np.unique(np.linspace(0, occ.size, buckets + 1).astype(int))
    with open(path, "w") as fh:
        fh.write("t,M_L\n")
        for t, m in zip(traj.snapshot_times, traj.snapshot_max):
            fh.write(f"{t:.17g},{int(m)}\n")
        fh.write("bucket_lo,bucket_hi,occupancy\n")
        for lo, hi in zip(edges[:-1], edges[1:]):
            fh.write(f"{lo},{hi - 1},{float(occ[lo:hi].sum()):.17g}\n")


# ---------------------------------------------------------------------------
# Condensation
# ---------------------------------------------------------------------------


def _p_eq(model: ZrpModel, m: Optional[int], kernel: str) -> float:
    return p_sum_eq(model.law, model.L, model.N, m, centered=False, kernel=kernel)


def condensate_probability(model: ZrpModel, eps: Optional[float] = None, *, kernel: str = "auto") -> float:
    """Exact P(M_L >= (1 - eps)(N - rho_c L) | S_L = N).

    ``eps=None`` uses :func:`geometric_split_eps`.
    """
    if eps is None:
        eps = geometric_split_eps(model)
    x = model.excess
    if x <= 0:
        raise ValueError("N must exceed rho_c L")
    thr = (1.0 - eps) * x
    m = math.ceil(thr) - 1  # M_L < thr  <=>  M_L <= m
    if m < 0:
        return 1.0
    full = _p_eq(model, None, kernel)
    if full <= 0:
        raise FloatingPointError("P(S_L = N) underflowed")
    return max(0.0, 1.0 - _p_eq(model, m, kernel) / full)


def geometric_split_eps(model: ZrpModel) -> float:
    """eps placing the threshold at sqrt(r_L x_L).

    Without a condensate the largest site is of order r_L; with one it is of
    order x_L.  The geometric mean separates both scales by the same factor.
    """
    x = model.excess
    r = solve_r_n(model.law, model.L, x).r
    return 1.0 - math.sqrt(min(r / x, 1.0))


def intermediate_mass(model: ZrpModel, eps: float, *, kernel: str = "auto") -> float:
    """P(eps < M_L / x_L < 1 - eps | S_L = N)."""
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 1/2)")
    x = model.excess
    full = _p_eq(model, None, kernel)
    below_hi = _p_eq(model, math.ceil((1.0 - eps) * x) - 1, kernel)
    upto_lo = _p_eq(model, math.floor(eps * x), kernel)
    return max(0.0, (below_hi - upto_lo) / full)


def _b3_constant(model: ZrpModel) -> float:
    if model.b != 3:
        raise ValueError("this parameterization needs b = 3")
    return model.tail_constant


def N_of_gamma_prime(model: ZrpModel, L: int, gp: float, variant: str = "b_gt_3") -> float:
    """Particle number (real) at a given gamma'_L."""
    lL = math.log(L)
    rho = model.rho_c
    if variant == "b_gt_3":
        b = model.b
        if b <= 3:
            raise ValueError("b_gt_3 variant needs b > 3")
        scale = model.sigma * math.sqrt((b - 3.0) * L * lL)
        return rho * L + scale * (1.0 + b / (2.0 * (b - 3.0)) * math.log(lL) / lL + gp / lL)
    if variant == "b_eq_3":
        c = _b3_constant(model)
        llL = math.log(lL)
        scale = math.sqrt(c * L * lL * llL)
        return rho * L + scale * (1.0 + 1.5 * math.log(llL) / llL + gp / llL)
    raise ValueError(f"unknown variant {variant!r}")


def gamma_prime(model: ZrpModel, L: Optional[int] = None, N: Optional[float] = None,
                variant: str = "b_gt_3") -> float:
    """Invert :func:`N_of_gamma_prime`; returns -inf when N <= rho_c L."""
    L = model.L if L is None else L
    N = model.N if N is None else N
    x = N - model.rho_c * L
    if x <= 0:
        return -math.inf
    lL = math.log(L)
    if variant == "b_gt_3":
        b = model.b
        if b <= 3:
            raise ValueError("b_gt_3 variant needs b > 3")
        scale = model.sigma * math.sqrt((b - 3.0) * L * lL)
        return lL * (x / scale - 1.0) - b / (2.0 * (b - 3.0)) * math.log(lL)
    if variant == "b_eq_3":
        c = _b3_constant(model)
        llL = math.log(lL)
        scale = math.sqrt(c * L * lL * llL)
        return llL * (x / scale - 1.0) - 1.5 * math.log(llL)
    raise ValueError(f"unknown variant {variant!r}")


def gamma_tilde(model: ZrpModel, L: Optional[int] = None, N: Optional[float] = None) -> float:
    """x^2 / (2 a_L^2) - log log a_L - (3/2) log log log a_L, for b = 3."""
    _b3_constant(model)
    L = model.L if L is None else L
    N = model.N if N is None else N
    x = N - model.rho_c * L
    a = solve_a_n(model.law, L)
    lla = math.log(math.log(a))
    return x * x / (2.0 * a * a) - lla - 1.5 * math.log(lla)


def N_of_gamma_tilde(model: ZrpModel, L: int, gt: float) -> float:
    _b3_constant(model)
    a = solve_a_n(model.law, L)
    lla = math.log(math.log(a))
    inner = gt + lla + 1.5 * math.log(lla)
    if inner <= 0:
        raise ValueError("gamma_tilde too small for a positive excess")
    return model.rho_c * L + a * math.sqrt(2.0 * inner)


def predicted_condensate_weight(model: ZrpModel, value: float, variant: str = "b_gt_3") -> float:
    """Limit condensate weight p at a given threshold parameter.

    ``b_gt_3``: 1 / (1 + sigma^{b-1} (b-3)^{b/2} e^{-(b-3) gamma'} / (c sqrt(2 pi)))
    with c the occupation-law constant nu_1(n) ~ c n^{-b};
    ``b_eq_3``: 1 / (1 + e^{-gamma'} / (2 sqrt(pi)));
    ``gamma_tilde``: 1 / (1 + e^{-gamma_tilde} / sqrt(pi)).
    """
    if variant == "b_gt_3":
        b = model.b
        k = model.sigma ** (b - 1.0) * (b - 3.0) ** (b / 2.0) / (model.tail_constant * math.sqrt(2.0 * math.pi))
        return 1.0 / (1.0 + k * math.exp(-(b - 3.0) * value))
    if variant == "b_eq_3":
        return 1.0 / (1.0 + math.exp(-value) / (2.0 * math.sqrt(math.pi)))
    if variant == "gamma_tilde":
        return 1.0 / (1.0 + math.exp(-value) / math.sqrt(math.pi))
    raise ValueError(f"unknown variant {variant!r}")
