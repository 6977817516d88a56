"""Exact and Monte Carlo computation of large deviations for heavy-tailed lattice sums."""

from .laws import LatticeLaw, SlowlyVaryingSpec, make_law, mixture, q_of
from .normalizers import centering_b_n, solve_a_n, solve_r_n
from .oracle import decompose, p_sum_eq, p_sum_geq, sum_distribution

__all__ = [
    "LatticeLaw",
    "SlowlyVaryingSpec",
    "make_law",
    "mixture",
    "q_of",
    "solve_a_n",
    "solve_r_n",
    "centering_b_n",
    "sum_distribution",
    "p_sum_geq",
    "p_sum_eq",
    "decompose",
]
