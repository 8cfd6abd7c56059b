"""Analytic Gaussian-mechanism accountant (no amplification).

Serves two roles: the comparison curve for the "multiple passes, fixed batch
order" baseline, and the upper end of the bisection bracket when calibrating
the Monte Carlo accountant.  The normal CDF goes through erfc so the far tail
(delta down to ~1e-12) stays accurate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.special import log_ndtr, ndtr

from .strategies import ParticipationSchema, StrategyMatrix, unamplified_sensitivity


@dataclass(frozen=True)
class GaussianMechanismSpec:
    """Gaussian mechanism with L2 sensitivity ``sensitivity`` and scale ``sigma``."""

    sensitivity: float
    sigma: float

    def __post_init__(self):
        if self.sensitivity <= 0.0:
            raise ValueError(f"sensitivity must be positive, got {self.sensitivity}")
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def analytic_delta(epsilon: float, spec: GaussianMechanismSpec) -> float:
    """Exact delta of the Gaussian mechanism at a given epsilon.

    delta = Phi(D/(2 s) - eps s/D) - e^eps * Phi(-D/(2 s) - eps s/D)
    with D the sensitivity and s the noise scale.  The second term is
    evaluated as exp(eps + log Phi(.)) so large epsilon cannot overflow.
    """
    if epsilon < 0.0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    half = spec.sensitivity / (2.0 * spec.sigma)
    shift = epsilon * spec.sigma / spec.sensitivity
    value = ndtr(half - shift) - math.exp(epsilon + log_ndtr(-half - shift))
    return float(max(value, 0.0))


def calibrate_sigma_gaussian(epsilon: float, delta: float, sensitivity: float,
                             rel_tol: float = 1e-6) -> float:
    """Smallest sigma making the Gaussian mechanism (epsilon, delta)-DP.

    Bisection on the strictly decreasing map sigma -> analytic_delta.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")

    def delta_at(sigma):
        return analytic_delta(epsilon, GaussianMechanismSpec(sensitivity, sigma))

    lo = hi = sensitivity
    for _ in range(200):
        if delta_at(hi) <= delta:
            break
        hi *= 2.0
    else:
        raise RuntimeError("could not bracket sigma from above")
    for _ in range(200):
        if delta_at(lo) >= delta:
            break
        lo /= 2.0
    else:
        # Even vanishing noise meets the target; return the tiny bracket end.
        return lo
    while (hi - lo) > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if delta_at(mid) > delta:
            lo = mid
        else:
            hi = mid
    return hi


def calibrate_sigma_unamplified(epsilon: float, delta: float,
                                strategy: StrategyMatrix,
                                schema: ParticipationSchema,
                                rel_tol: float = 1e-6) -> float:
    """Noise multiplier for the target guarantee without batching randomness.

    Sensitivity is the worst fixed balls-in-bins assignment, max_i ||m_i||.
    """
    sens = unamplified_sensitivity(strategy, schema)
    return calibrate_sigma_gaussian(epsilon, delta, sens, rel_tol=rel_tol)
