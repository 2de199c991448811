"""Gaussian mechanism for many queries and its Poisson-point-process coupling.

The mechanism releases ``N(mu_hat, sigma^2 I)`` with
``sigma^2 = eps^2 / (8 log(4d / delta))``; when the two executions' ``mu_hat`` are
close, the two output laws are close in KL, hence in TV.

The coupling turns that TV closeness into exact agreement. Both executions walk
the same atom sequence ``(x_i, y_i, t_i)`` (x uniform in a shared box, y uniform
under a shared height, t increasing) and return the first ``x_i`` lying under
their own density. The box and the height depend only on public quantities
(query range, sigma), never on data, so the atom sequence is identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .divergences import GaussianVector
from .replicable_sq import EstimateVector
from .sampling import SeedStream

MAX_COUPLING_DIM = 8
DEFAULT_BOX_SIGMAS = 8.0
HEIGHT_FACTOR = 1.01
COUPLING_FAILURE_PROB = 1e-6
DEFAULT_MAX_ATOMS = 200_000_000


class CouplingError(RuntimeError):
    """The coupling could not be run (dimension, box or atom budget)."""


class CouplingFailure(CouplingError):
    """No atom fell under the density within the atom budget."""


@dataclass(frozen=True)
class GaussianMechanismParams:
    epsilon: float
    rho: float
    delta: float
    d: int
    #: the coupled (exactly replicable) variant tolerates delta < rho / 4
    coupled: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        ratio = 4 if self.coupled else 5
        if not 0 < self.delta < self.rho / ratio:
            raise ValueError(f"delta must lie in (0, rho / {ratio})")
        if self.d < 1:
            raise ValueError("d must be positive")

    @property
    def _log_term(self) -> float:
        return math.log(4 * self.d / self.delta)

    @property
    def noise_variance(self) -> float:
        return self.epsilon ** 2 / (8 * self._log_term)

    @property
    def mean_accuracy(self) -> float:
        """Per-query accuracy the means must meet for rho-TV indistinguishability."""
        return self.epsilon * self.rho / (2 * math.sqrt(8 * self.d * self._log_term))

    @property
    def coupled_mean_accuracy(self) -> float:
        """Per-query accuracy used when the output is coupled afterwards."""
        return self.epsilon * self.rho / (4 * math.sqrt(8 * self.d * self._log_term))

    @property
    def query_delta(self) -> float:
        return self.delta / 2


def hoeffding_budget(accuracy: float, delta: float, d: int = 1) -> int:
    """Per-query sample count so all ``d`` means of [0, 1] queries are ``accuracy``-close
    simultaneously with probability ``1 - delta``."""
    return math.ceil(math.log(2 * d / delta) / (2 * accuracy ** 2))


def gaussian_mechanism(query_means: EstimateVector, params: GaussianMechanismParams,
                       internal: SeedStream, variance: float | None = None) -> EstimateVector:
    """Add N(0, sigma^2 I) noise to certified means.

    ``variance`` overrides sigma^2; it exists for degenerate-noise diagnostics only.
    """
    if query_means.d != params.d:
        raise ValueError(f"expected {params.d} means, got {query_means.d}")
    var = params.noise_variance if variance is None else variance
    z = internal.generator().standard_normal(params.d)
    return EstimateVector(query_means.values + math.sqrt(var) * z, params)


def output_density(means: EstimateVector, params: GaussianMechanismParams) -> GaussianVector:
    return GaussianVector(means.values, params.noise_variance)


@dataclass(frozen=True)
class TruncationBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1 or np.any(hi <= lo):
            raise ValueError("box needs matching lower < upper vectors")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def around_range(cls, low: float, high: float, d: int, sigma: float,
                     box_sigmas: float = DEFAULT_BOX_SIGMAS) -> "TruncationBox":
        """[low - k sigma, high + k sigma]^d: encloses any mean in [low, high]^d."""
        return cls(np.full(d, low - box_sigmas * sigma), np.full(d, high + box_sigmas * sigma))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def log_volume(self) -> float:
        return float(np.sum(np.log(self.upper - self.lower)))

    def mass(self, density: GaussianVector) -> float:
        s = density.sigma
        per = ndtr((self.upper - density.mean) / s) - ndtr((self.lower - density.mean) / s)
        return float(np.prod(per))


def acceptance_probability(box: TruncationBox, height: float) -> float:
    """Lower bound on the chance one atom lands under an enclosed density."""
    return (1 - COUPLING_FAILURE_PROB) * math.exp(-box.log_volume) / height


def required_atoms(box: TruncationBox, height: float,
                   failure_prob: float = COUPLING_FAILURE_PROB) -> int:
    """Atoms needed so that none is accepted with probability at most ``failure_prob``."""
    a = acceptance_probability(box, height)
    return math.ceil(math.log(1 / failure_prob) / a)


def _chunk_size(box: TruncationBox, height: float) -> int:
    a = acceptance_probability(box, height)
    return int(min(max(math.ceil(4 / a), 64), 1 << 16))


def ppp_coupled_sample(density: GaussianVector, box: TruncationBox, internal: SeedStream,
                       height: float | None = None, max_atoms: int = DEFAULT_MAX_ATOMS,
                       return_index: bool = False):
    """Draw from ``density`` truncated to ``box`` using only the atoms of ``internal``.

    Every execution that shares ``internal``, ``box`` and ``height`` enumerates the
    same atoms, so two nearby densities usually pick the same atom.
    """
    d = density.dim
    if d != box.dim:
        raise CouplingError("density and box dimensions differ")
    if d > MAX_COUPLING_DIM:
        raise CouplingError(f"coupling supports d <= {MAX_COUPLING_DIM}, got {d}")
    if box.mass(density) < 1 - COUPLING_FAILURE_PROB:
        raise CouplingError("box does not enclose the density")
    if height is None:
        height = density.peak_density * HEIGHT_FACTOR
    elif height < density.peak_density:
        raise CouplingError("height is below the density peak")
    budget = required_atoms(box, height)
    if budget > max_atoms:
        raise CouplingError(f"coupling needs {budget} atoms, above the limit {max_atoms}")

    rng = internal.generator()
    chunk = _chunk_size(box, height)
    rate = math.exp(box.log_volume) * height
    width = box.upper - box.lower
    log_h = math.log(height)
    seen = 0
    t = 0.0
    while seen < budget:
        n = min(chunk, budget - seen)
        # draw order is fixed (x, then y, then gaps) so every execution sees the same atoms
        x = box.lower + width * rng.random((n, d))
        y = rng.random(n)
        gaps = rng.exponential(1.0 / rate, n)
        t_chunk = t + np.cumsum(gaps)
        accepted = np.flatnonzero(density.log_pdf(x) > np.log(y) + log_h)
        if accepted.size:
            i = int(accepted[0])
            return (x[i], seen + i) if return_index else x[i]
        seen += n
        t = float(t_chunk[-1])
    raise CouplingFailure(f"no accepted atom among {budget}")


def coordinatewise_coupled_sample(density: GaussianVector, box: TruncationBox,
                                  internal: SeedStream) -> np.ndarray:
    """Couple each coordinate on its own 1-d atom stream (the weaker alternative)."""
    out = np.empty(density.dim)
    for j in range(density.dim):
        dj = GaussianVector(density.mean[j:j + 1], density.variance)
        bj = TruncationBox(box.lower[j:j + 1], box.upper[j:j + 1])
        out[j] = ppp_coupled_sample(dj, bj, internal.split(f"coord-{j}"))[0]
    return out


def coupling_disagreement_bound(tv: float) -> float:
    """2 TV / (1 + TV): the pairwise-optimal disagreement probability."""
    return 2 * tv / (1 + tv)


RawSampler = Callable[[float, float], EstimateVector]


def replicable_multi_query(raw_sampler: RawSampler, params: GaussianMechanismParams,
                           internal: SeedStream, bounds: tuple[float, float] = (0.0, 1.0),
                           max_atoms: int = DEFAULT_MAX_ATOMS) -> EstimateVector:
    """Replicable estimates of ``d`` queries via the coupled Gaussian mechanism.

    ``raw_sampler(accuracy, delta)`` must return means that are ``accuracy``-close to
    the truth in every coordinate with probability ``1 - delta``. The mechanism runs
    at replicability ``rho / 2``, which is where the tighter accuracy comes from.
    """
    means = raw_sampler(params.coupled_mean_accuracy, params.query_delta)
    if means.d != params.d:
        raise ValueError(f"sampler returned {means.d} means, expected {params.d}")
    density = output_density(means, params)
    box = TruncationBox.around_range(bounds[0], bounds[1], params.d, density.sigma)
    x = ppp_coupled_sample(density, box, internal.split("ppp"), max_atoms=max_atoms)
    return EstimateVector(np.clip(x, bounds[0], bounds[1]), params)
