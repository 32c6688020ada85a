"""Terms of the continual PAC-Bayes bound, evaluated on run checkpoints.

This is a diagnostic only.  The divergence between consecutive task
posteriors is approximated with isotropic Gaussians centred on the parameter
checkpoints, so reported divergence terms are proxies.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

POSTERIOR_PROXY = "isotropic Gaussian centred on task-end checkpoints"
LAMBDA_GRID = tuple(2.0**k for k in range(-10, 11))


@dataclass
class BoundInputs:
    K: float
    lam: float
    delta: float
    m: list[float]
    empirical_risk: list[float]
    kl: list[float]
    half_factor: bool = True

    def __post_init__(self) -> None:
        if not self.K > 0 or not self.lam > 0:
            raise ValueError("K and lambda must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not (len(self.m) == len(self.empirical_risk) == len(self.kl)) or not self.m:
            raise ValueError("per-task inputs must be nonempty and of equal length")
        if any(mt < 1 for mt in self.m):
            raise ValueError("every task needs m_t >= 1")
        if any(k < 0 for k in self.kl):
            raise ValueError("KL terms must be nonnegative")

    @property
    def T(self) -> int:
        return len(self.m)


@dataclass(frozen=True)
class BoundTerms:
    empirical_risk: float
    throughput: float
    divergence: float
    constant: float
    total: float
    lam: float
    posterior: str = field(default=POSTERIOR_PROXY)

    def to_dict(self) -> dict:
        return asdict(self)


def bound_terms(inputs: BoundInputs) -> BoundTerms:
    """Empirical risk, throughput, divergence and constant terms plus their sum.

    The throughput term is ``sum lam K^2 / (2 m_t)``; with
    ``half_factor=False`` the factor 2 is dropped.
    """
    lam, K = inputs.lam, inputs.K
    scale = 2.0 if inputs.half_factor else 1.0
    r_hat = math.fsum(inputs.empirical_risk)
    m_term = math.fsum(lam * K * K / (scale * mt) for mt in inputs.m)
    d_term = math.fsum(k / lam for k in inputs.kl)
    const = inputs.T * math.log(inputs.T / inputs.delta) / lam
    return BoundTerms(r_hat, m_term, d_term, const, r_hat + m_term + d_term + const, lam)


def best_lambda(inputs: BoundInputs, grid: Sequence[float] = LAMBDA_GRID) -> BoundTerms:
    """Terms at the grid value of lambda giving the smallest total."""
    best = None
    for lam in grid:
        trial = BoundInputs(
            inputs.K, lam, inputs.delta, inputs.m, inputs.empirical_risk, inputs.kl, inputs.half_factor
        )
        terms = bound_terms(trial)
        if best is None or terms.total < best.total:
            best = terms
    return best


def gaussian_kl(mean_t: np.ndarray, mean_prev: np.ndarray, sigma: float = 0.1) -> float:
    """KL between isotropic Gaussians of equal scale: ``||mu_t - mu_prev||^2 / (2 sigma^2)``."""
    a = np.asarray(mean_t, dtype=np.float64).ravel()
    b = np.asarray(mean_prev, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("checkpoint parameter vectors differ in dimension")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    diff = a - b
    return float(diff @ diff) / (2.0 * sigma * sigma)
