"""System utility functions over per-user rates.

The alpha-fair family sum(R^(1-alpha)/(1-alpha)) interpolates between sum
rate (alpha=0), proportional fairness (alpha=1, log) and max-min fairness
(alpha -> inf); "max-min" is also available directly.  A rate floor keeps
the log/negative-power branches and their gradients finite at zero rate;
it is a solver regularization, not part of the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

__all__ = ["UtilityConfig", "evaluate", "rate_gradient", "qos_violations"]


@dataclass(frozen=True)
class UtilityConfig:
    kind: str = "alpha-fair"  # "alpha-fair" | "max-min"
    alpha: float = 0.0
    rate_floor: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("alpha-fair", "max-min"):
            raise ConfigurationError(f"unknown utility kind: {self.kind!r}")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if self.rate_floor <= 0:
            raise ConfigurationError("rate_floor must be > 0")


def _check_rates(rates) -> np.ndarray:
    rates = np.asarray(rates, dtype=float)
    if np.any(rates < 0):
        raise DomainError("rates must be nonnegative")
    return rates


def evaluate(config: UtilityConfig, rates) -> float:
    """Utility value at the given per-user rates."""
    r = _check_rates(rates)
    if config.kind == "max-min":
        return float(np.min(r))
    a = config.alpha
    if a == 0.0:
        return float(np.sum(r))
    rf = np.maximum(r, config.rate_floor)
    if a == 1.0:
        return float(np.sum(np.log(rf)))
    return float(np.sum(rf ** (1.0 - a) / (1.0 - a)))


def rate_gradient(config: UtilityConfig, rates) -> np.ndarray:
    """Elementwise dU/dR_i.

    Uses the floored rate in the alpha >= 1 branches so solver weights stay
    finite; exact for rates above the floor.  For max-min this returns the
    one-hot subgradient at the minimizing user (lowest index on ties).
    """
    r = _check_rates(rates)
    if config.kind == "max-min":
        g = np.zeros_like(r)
        g[int(np.argmin(r))] = 1.0
        return g
    a = config.alpha
    if a == 0.0:
        return np.ones_like(r)
    rf = np.maximum(r, config.rate_floor)
    if a == 1.0:
        return 1.0 / rf
    return rf ** (-a)


def qos_violations(rates, min_rates) -> np.ndarray:
    """Feasibility check for per-user minimum-rate requirements.

    No solver in this package enforces these; the check only reports
    max(0, min_rate - rate) per user.
    """
    r = _check_rates(rates)
    gamma = np.asarray(min_rates, dtype=float)
    return np.maximum(0.0, gamma - r)
