"""TV, KL and Renyi divergences on finite distributions, plus isotropic Gaussian bounds.

TV uses the sup-over-events convention, i.e. half the L1 distance, which is the
convention under which TV equals the minimal coupling disagreement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

_DIST_TOL = 1e-12


def _as_dist(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("a finite distribution is a non-empty 1-d vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > _DIST_TOL:
        raise ValueError("not a probability vector")
    return p


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p, q = _as_dist(p), _as_dist(q)
    if p.shape != q.shape:
        raise ValueError("distributions live on different supports")
    return p, q


def tv_finite(p, q) -> float:
    p, q = _pair(p, q)
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))


def kl_finite(p, q) -> float:
    return renyi_finite(p, q, 1.0)


def renyi_finite(p, q, alpha: float) -> float:
    """Renyi divergence D_alpha(p || q) in nats, for alpha >= 1 or alpha = inf.

    Returns ``math.inf`` when p is not absolutely continuous with respect to q.
    """
    p, q = _pair(p, q)
    if np.array_equal(p, q):
        if not alpha >= 1:
            raise ValueError("alpha must be >= 1")
        return 0.0
    with np.errstate(divide="ignore"):
        return renyi_log(np.log(p), np.log(q), alpha)


def renyi_log(log_p, log_q, alpha: float) -> float:
    """D_alpha from log-probabilities, so that underflowing tails still count.

    ``-inf`` entries are zero-probability outcomes.
    """
    lp, lq = np.asarray(log_p, dtype=float), np.asarray(log_q, dtype=float)
    if lp.shape != lq.shape or lp.ndim != 1 or lp.size == 0:
        raise ValueError("log-probability vectors must be matching non-empty 1-d arrays")
    if not alpha >= 1:
        raise ValueError("alpha must be >= 1")
    if np.array_equal(lp, lq):
        return 0.0
    supp = lp > -np.inf
    if np.any(lq[supp] == -np.inf):
        return math.inf
    ls, lqs = lp[supp], lq[supp]
    if alpha == 1:
        return max(0.0, float(np.sum(np.exp(ls) * (ls - lqs))))
    if math.isinf(alpha):
        return max(0.0, float(np.max(ls - lqs)))
    # log sum p^a q^(1-a), evaluated in log space
    terms = alpha * ls + (1.0 - alpha) * lqs
    top = terms.max()
    log_sum = top + math.log(float(np.exp(terms - top).sum()))
    return max(0.0, log_sum / (alpha - 1.0))


@dataclass(frozen=True)
class GaussianVector:
    """N(mean, variance * I_d)."""

    mean: np.ndarray
    variance: float

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if mean.ndim != 1 or mean.size < 1:
            raise ValueError("mean must be a non-empty vector")
        if not self.variance > 0:
            raise ValueError("variance must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", float(self.variance))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def sigma(self) -> float:
        return math.sqrt(self.variance)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        sq = np.sum((x - self.mean) ** 2, axis=1)
        return -0.5 * sq / self.variance - 0.5 * self.dim * math.log(2 * math.pi * self.variance)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_pdf(x))

    @property
    def peak_density(self) -> float:
        return (2 * math.pi * self.variance) ** (-0.5 * self.dim)


def _check_comparable(p: GaussianVector, q: GaussianVector) -> None:
    if p.dim != q.dim:
        raise ValueError("Gaussians of different dimension")
    if p.variance != q.variance:
        raise ValueError("only equal isotropic variances are supported")


def kl_gaussian_isotropic(p: GaussianVector, q: GaussianVector) -> float:
    _check_comparable(p, q)
    return float(np.sum((p.mean - q.mean) ** 2) / (2.0 * p.variance))


def tv_upper_bound_pinsker(kl: float) -> float:
    if kl < 0:
        raise ValueError("KL divergence is non-negative")
    return min(1.0, math.sqrt(kl / 2.0))


def tv_gaussian_1d(p: GaussianVector, q: GaussianVector) -> float:
    """Exact TV between two equal-variance 1-d Gaussians: 2 Phi(|dmu| / 2 sigma) - 1."""
    _check_comparable(p, q)
    if p.dim != 1:
        raise ValueError("tv_gaussian_1d is one-dimensional only")
    gap = abs(float(p.mean[0] - q.mean[0]))
    return float(2.0 * ndtr(gap / (2.0 * p.sigma)) - 1.0)


def tv_gaussian_isotropic(p: GaussianVector, q: GaussianVector) -> float:
    """Exact TV for equal isotropic covariances; reduces to the 1-d case along the mean gap."""
    _check_comparable(p, q)
    gap = float(np.linalg.norm(p.mean - q.mean))
    return float(2.0 * ndtr(gap / (2.0 * p.sigma)) - 1.0)
