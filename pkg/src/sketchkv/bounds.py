"""Closed-form error bounds for sketch reconstruction and attention perturbation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

# asymptotic median variance factor used by the tail-bound derivation
MEDIAN_ASYMPTOTIC_FACTOR = math.pi / 6


@dataclass(frozen=True)
class NoiseModel:
    sigma_k_new: float
    sigma_v_new: float

    def __post_init__(self) -> None:
        if self.sigma_k_new < 0 or self.sigma_v_new < 0:
            raise ValueError("noise standard deviations must be non-negative")


def key_variance_tail(a: int, N: int, sigma_k: float) -> tuple[float, float]:
    """(variance threshold, probability bound) for one reconstructed coordinate.

    With ``a`` tokens in a sketch of ``N`` slots, P(Var > a*pi/N * sigma^2) < exp(-a/N).
    The same formula applies to values with sigma_v.
    """
    if a < 0:
        raise ValueError(f"a must be non-negative, got {a}")
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    return a * math.pi / N * sigma_k**2, math.exp(-a / N)


def chernoff_tail(a: int, N: int, delta: float) -> float:
    """Upper bound on P(X > (1 + delta) * 3a/N) for X ~ Binomial(a, 3/N)."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    return math.exp(-(delta**2 * 3 * a) / ((2 + delta) * N))


def _phi(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def _Phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _median3_integrand(x: float) -> float:
    # x^2 times the density of the 2nd order statistic of 3 draws, 3!*F(1-F)f
    c = _Phi(x)
    return 6.0 * x * x * c * (1.0 - c) * _phi(x)


def adaptive_simpson(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-8,
    max_depth: int = 50,
    panels: int = 16,
) -> float:
    """Adaptive Simpson integration of ``f`` over [lo, hi].

    The range is first cut into ``panels`` equal pieces, each refined on its own
    with a share of ``tol``, so a peaked integrand cannot slip between the first
    few sample points and end the recursion early.
    """
    def simpson(a, fa, b, fb):
        m = 0.5 * (a + b)
        fm = f(m)
        return m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, fa, b, fb, m, fm, whole, eps, depth):
        lm, flm, left = simpson(a, fa, m, fm)
        rm, frm, right = simpson(m, fm, b, fb)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15.0 * eps:
            return left + right + delta / 15.0
        return recurse(a, fa, m, fm, lm, flm, left, eps / 2, depth - 1) + recurse(
            m, fm, b, fb, rm, frm, right, eps / 2, depth - 1
        )

    edges = np.linspace(lo, hi, panels + 1)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        fa, fb = f(a), f(b)
        m, fm, whole = simpson(a, fa, b, fb)
        total += recurse(a, fa, b, fb, m, fm, whole, tol / panels, max_depth)
    return total


@lru_cache(maxsize=None)
def median3_constant(tol: float = 1e-8, limit: float = 8.0) -> float:
    """Var(median of 3 iid N(0,1)), by quadrature over [-limit, limit]."""
    return adaptive_simpson(_median3_integrand, -limit, limit, tol=tol)


def median3_variance(sigma: float) -> float:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    return median3_constant() * sigma**2


def _check_distribution(p: np.ndarray) -> None:
    if p.ndim != 1 or len(p) == 0:
        raise ValueError("p must be a non-empty 1-d probability vector")
    if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError(f"p must be a probability vector, sums to {float(p.sum())!r}")


def attention_perturbation_variances(p, sigma_q: float, sigma_k_new) -> np.ndarray:
    """First-order Var(delta p_i) for every i.

    ``sigma_k_new`` may be a scalar or a per-token array, the latter for caches
    where only some keys carry reconstruction noise (exact tokens get 0).
    Per token the logit noise variance is sigma_q^2 * sigma_k_new_j^2 and

        Var(dp_i) = p_i^2 [(1 - p_i)^2 s_i + sum_{j != i} p_j^2 s_j]
    """
    p = np.asarray(p, dtype=np.float64)
    _check_distribution(p)
    s = sigma_q**2 * np.broadcast_to(np.asarray(sigma_k_new, dtype=np.float64) ** 2, p.shape)
    total = float(np.sum(p**2 * s))
    return p**2 * ((1.0 - p) ** 2 * s + total - p**2 * s)


def attention_perturbation_variance(p, i: int, sigma_q: float, sigma_k_new) -> float:
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= i < len(p):
        raise IndexError(f"token {i} outside distribution of length {len(p)}")
    return float(attention_perturbation_variances(p, sigma_q, sigma_k_new)[i])


def noise_from_occupancy(a: int, N: int, sigma_k: float, sigma_v: float) -> NoiseModel:
    """Bound-derived working noise: sqrt(a*pi/N) * sigma for keys and values."""
    var_k, _ = key_variance_tail(a, N, sigma_k)
    var_v, _ = key_variance_tail(a, N, sigma_v)
    return NoiseModel(math.sqrt(var_k), math.sqrt(var_v))
