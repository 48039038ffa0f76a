"""Monte-Carlo checks of the analytic bounds against sampled and real-sketch behaviour.

Every validator returns a :class:`ValidationResult` whose ``holds`` flag uses a
tolerance proportional to the Monte-Carlo standard error, so under-sampled
runs widen the tolerance rather than fail spuriously.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from . import bounds
from .sketch import VagueSketch

Sampler = Callable[[np.random.Generator, tuple], np.ndarray]

DEFAULT_TRIALS = {
    "median_variance_normal": 1_000_000,
    "median_variance_uniform": 1_000_000,
    "median3_constant": 1_000_000,
    "sign_randomization": 200_000,
    "value_unbiasedness": 10_000,
    "chernoff_tail": 200_000,
    "key_tail_bound": 2_000,
}


@dataclass
class ValidationResult:
    name: str
    empirical: float
    predicted: float
    holds: bool
    standard_error: float
    trials: int
    details: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class MedianVarianceResult:
    var_median: float
    var_single: float
    holds: bool
    standard_error: float


def _median3(x: np.ndarray) -> np.ndarray:
    # median of the last axis of length 3
    return x.sum(axis=-1) - x.max(axis=-1) - x.min(axis=-1)


def _var_and_se(x: np.ndarray) -> tuple[float, float]:
    """Sample variance and its standard error sqrt((m4 - var^2) / n)."""
    n = len(x)
    if n < 2:
        return 0.0, math.inf
    c = x - x.mean()
    var = float(np.mean(c**2))
    m4 = float(np.mean(c**4))
    return var, math.sqrt(max(m4 - var**2, 0.0) / n)


def normal_sampler(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    return rng.standard_normal(shape)


def uniform_sampler(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, shape)


def constant_sampler(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    return np.full(shape, 2.5)


def validate_median_variance(
    sampler: Sampler, trials: int, seed: int = 0, gaussian: bool = False
) -> MedianVarianceResult:
    """Compare Var(median of 3) with Var(single draw) for a symmetric sampler.

    With ``gaussian`` the stricter 3/4 factor is checked as well.
    """
    rng = np.random.default_rng(seed)
    draws = sampler(rng, (trials, 3))
    var_med, se_med = _var_and_se(_median3(draws))
    var_one, se_one = _var_and_se(draws[:, 0])
    se = math.hypot(se_med, se_one)
    holds = var_med <= var_one + 3 * se
    if gaussian:
        holds = holds and var_med <= 0.75 * var_one + 3 * math.hypot(se_med, 0.75 * se_one)
    return MedianVarianceResult(var_med, var_one, bool(holds), se)


def median3_monte_carlo(trials: int, seed: int = 0, chunk: int = 1_000_000) -> tuple[float, float]:
    """Sample variance of the median of 3 standard normals, with its standard error."""
    rng = np.random.default_rng(seed)
    done = 0
    # raw moments in one pass; the mean is ~0 so cancellation is harmless
    sums = np.zeros(4)
    while done < trials:
        m = min(chunk, trials - done)
        med = _median3(rng.standard_normal((m, 3)))
        sums += [med.sum(), (med**2).sum(), (med**3).sum(), (med**4).sum()]
        done += m
    n = float(trials)
    mean = sums[0] / n
    e2, e3, e4 = sums[1] / n, sums[2] / n, sums[3] / n
    var = e2 - mean**2
    m4 = e4 - 4 * mean * e3 + 6 * mean**2 * e2 - 3 * mean**4
    se = math.sqrt(max(m4 - var**2, 0.0) / n) if trials > 1 else math.inf
    return float(var), float(se)


def validate_median3_constant(trials: int, seed: int = 0) -> ValidationResult:
    emp, se = median3_monte_carlo(trials, seed)
    pred = bounds.median3_constant()
    return ValidationResult(
        "median3_constant",
        emp,
        pred,
        bool(abs(emp - pred) <= 3 * se),
        se,
        trials,
        {"asymptotic_pi_over_6": bounds.MEDIAN_ASYMPTOTIC_FACTOR},
    )


def validate_sign_randomization(trials: int, n: int = 8, seed: int = 0) -> ValidationResult:
    """Var(sum eps_i v_i) against sum Var(v_i) for Rademacher eps and mixed-scale v."""
    rng = np.random.default_rng(seed)
    scales = np.linspace(0.5, 2.0, n)
    v = rng.standard_normal((trials, n)) * scales + 1.5  # non-zero means on purpose
    eps = rng.choice([-1.0, 1.0], size=(trials, n))
    total = (eps * v).sum(axis=1)
    emp, se = _var_and_se(total)
    # Var(eps v) = E[v^2] for mean-shifted v, i.e. Var(v) + mean^2
    pred = float(np.sum(scales**2 + 1.5**2))
    mean = float(total.mean())
    mean_se = float(total.std() / math.sqrt(trials)) if trials > 1 else math.inf
    holds = abs(emp - pred) <= 3 * se and abs(mean) <= 3 * mean_se
    return ValidationResult(
        "sign_randomization", emp, pred, bool(holds), se, trials, {"mean": mean}
    )


def validate_value_unbiasedness(
    trials: int, d: int = 8, n_other: int = 4, b: int = 1, r: int = 3, seed: int = 0
) -> ValidationResult:
    """Mean value-estimate error of one token over many hash seeds.

    Payloads are fixed; only the sketch seed changes between trials. With
    ``b = 1`` every token collides with every other in every bucket.
    """
    rng = np.random.default_rng(seed)
    n = n_other + 1
    keys = rng.standard_normal((n, d)).astype(np.float32)
    values = rng.standard_normal((n, d)).astype(np.float32)
    errors = np.empty((trials, d))
    for t in range(trials):
        sk = VagueSketch(r=r, b=b, d=d, seed=seed * 1_000_003 + t)
        sk.insert_arrays(np.arange(n), keys, values, [0.0] * n)
        _, v = sk.query(0)
        errors[t] = v.astype(np.float64) - values[0]
    mean = errors.mean(axis=0)
    se = errors.std(axis=0, ddof=1) / math.sqrt(trials) if trials > 1 else np.full(d, math.inf)
    z = np.abs(mean) / np.where(se > 0, se, np.inf)
    return ValidationResult(
        "value_unbiasedness",
        float(np.max(np.abs(mean))),
        0.0,
        bool(np.all(np.abs(mean) <= 4 * se)),
        float(np.max(se)),
        trials,
        {"max_z": float(np.max(z)), "mean_error": mean.tolist()},
    )


def key_tail_trial_variances(
    trials: int, a: int = 300, N: int = 300, d: int = 128, sigma_k: float = 1.0,
    r: int = 3, seed: int = 0,
) -> np.ndarray:
    """Per-trial coordinate variance of the median key error of one probe token.

    Each trial builds a fresh sketch of ``N = r*b`` slots holding ``a`` random
    tokens and measures the probe's reconstructed-key error across its d coordinates.
    """
    if N % r:
        raise ValueError(f"N={N} is not a multiple of r={r}")
    rng = np.random.default_rng(seed)
    out = np.empty(trials)
    for t in range(trials):
        keys = (rng.standard_normal((a, d)) * sigma_k).astype(np.float32)
        sk = VagueSketch(r=r, b=N // r, d=d, seed=seed * 1_000_003 + t)
        sk.insert_arrays(np.arange(a), keys, keys, [0.0] * a)
        k, _ = sk.query(0)
        out[t] = np.var(k.astype(np.float64) - keys[0], ddof=1)
    return out


def validate_key_tail(
    trials: int, a: int = 300, N: int = 300, d: int = 128, sigma_k: float = 1.0, seed: int = 0
) -> ValidationResult:
    threshold, prob = bounds.key_variance_tail(a, N, sigma_k)
    variances = key_tail_trial_variances(trials, a, N, d, sigma_k, seed=seed)
    frac = float(np.mean(variances > threshold))
    se = math.sqrt(max(prob * (1 - prob), 1e-12) / trials)
    return ValidationResult(
        "key_tail_bound",
        frac,
        prob,
        bool(frac <= prob + 3 * se),
        se,
        trials,
        {"a": a, "N": N, "threshold": threshold, "mean_variance": float(variances.mean())},
    )


def validate_chernoff(
    trials: int, a: int = 300, N: int = 300, delta: float = 1.0, seed: int = 0
) -> ValidationResult:
    rng = np.random.default_rng(seed)
    x = rng.binomial(a, 3.0 / N, size=trials)
    frac = float(np.mean(x > (1 + delta) * 3 * a / N))
    bound = bounds.chernoff_tail(a, N, delta)
    se = math.sqrt(max(bound * (1 - bound), 1e-12) / trials)
    return ValidationResult(
        "chernoff_tail", frac, bound, bool(frac <= bound + 3 * se), se, trials,
        {"a": a, "N": N, "delta": delta},
    )


def _median_variance_result(name: str, res: MedianVarianceResult, trials: int) -> ValidationResult:
    return ValidationResult(
        name, res.var_median, res.var_single, res.holds, res.standard_error, trials
    )


def run_all(trials: Optional[int] = None, seed: int = 0) -> list[ValidationResult]:
    """Every validator at its default trial count, or all at ``trials`` if given."""

    def n(name: str) -> int:
        return trials if trials is not None else DEFAULT_TRIALS[name]

    return [
        _median_variance_result(
            "median_variance_normal",
            validate_median_variance(normal_sampler, n("median_variance_normal"), seed, gaussian=True),
            n("median_variance_normal"),
        ),
        _median_variance_result(
            "median_variance_uniform",
            validate_median_variance(uniform_sampler, n("median_variance_uniform"), seed),
            n("median_variance_uniform"),
        ),
        validate_median3_constant(n("median3_constant"), seed),
        validate_sign_randomization(n("sign_randomization"), seed=seed),
        validate_value_unbiasedness(n("value_unbiasedness"), seed=seed),
        validate_chernoff(n("chernoff_tail"), seed=seed),
        validate_key_tail(n("key_tail_bound"), seed=seed),
    ]
