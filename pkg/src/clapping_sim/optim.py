"""Per-worker optimizer updates.

Momentum SGD keeps a moving average of the gradient estimate:

    u <- (1 - m_t) * u + m_t * g,   w <- w - gamma * u

The Adam variant tracks elementwise first and second moments with NO bias
correction and no weight decay:

    u <- (1 - b1) * u + b1 * g
    s <- (1 - b2) * s + b2 * g**2
    w <- w - gamma * u / sqrt(s + eps)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .sampling import Schedule

MOMENTUM_SGD = "momentum_sgd"
ADAM = "adam"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str
    gamma: Schedule
    momentum: Schedule = Schedule.constant(0.1)  # m_t for SGD, b1 for Adam
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in (MOMENTUM_SGD, ADAM):
            raise ConfigurationError(f"unknown optimizer {self.kind!r}")
        if any(v <= 0 for _, v in self.gamma.table):
            raise ConfigurationError("step sizes must be positive")
        if any(not 0.0 < v <= 1.0 for _, v in self.momentum.table):
            raise ConfigurationError("momentum coefficients must be in (0, 1]")
        if self.kind == ADAM and not 0.0 < self.beta2 < 1.0:
            raise ConfigurationError("beta2 must be in (0, 1)")
        if self.kind == ADAM and self.eps <= 0.0:
            raise ConfigurationError("eps must be positive")


def momentum_update(u: np.ndarray, w: np.ndarray, grad: np.ndarray, m_t: float, gamma: float):
    """One momentum-SGD update; returns (new_u, new_w)."""
    if not 0.0 < m_t <= 1.0 or gamma <= 0.0:
        raise ConfigurationError("need m_t in (0, 1] and gamma > 0")
    u_new = (1.0 - m_t) * u + m_t * grad
    return u_new, w - gamma * u_new


def adam_update(
    u: np.ndarray, s: np.ndarray, w: np.ndarray, grad: np.ndarray,
    beta1: float, beta2: float, eps: float, gamma: float,
):
    """One Adam-style update without bias correction; returns (u, s, w).

    Accepts degenerate beta = 1 or eps = 0 so single-step reductions can
    be exercised directly; run-level configs enforce the open ranges.
    """
    if gamma <= 0.0 or eps < 0.0 or not (0.0 < beta1 <= 1.0 and 0.0 < beta2 <= 1.0):
        raise ConfigurationError("need gamma > 0, eps >= 0, betas in (0, 1]")
    u_new = (1.0 - beta1) * u + beta1 * grad
    s_new = (1.0 - beta2) * s + beta2 * grad**2
    return u_new, s_new, w - gamma * u_new / np.sqrt(s_new + eps)
