"""Replicable statistical queries by rounding to a randomly shifted grid.

An estimate accurate to ``eps_prime = eps (rho - 2 delta) / (rho + 1 - 2 delta)`` is
snapped to the grid ``{u + k w}`` with ``w = 2 eps_prime / (rho - 2 delta)`` and a
shared offset ``u ~ U[0, w)``. Rounding moves the value by at most ``w / 2``, so the
output is within ``eps_prime + w / 2 = eps`` of the truth, and two estimates at
distance ``g`` round differently with probability ``g / w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sampling import SeedStream

#: multiplier in the per-query budget ``c * log(1 / delta) / eps_prime**2``
BUDGET_CONSTANT = 2.0


@dataclass(frozen=True)
class SqParams:
    epsilon: float
    rho: float
    delta: float

    def __post_init__(self) -> None:
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if not 0 < self.delta < self.rho / 3:
            raise ValueError("delta must lie in (0, rho / 3)")

    @property
    def eps_prime(self) -> float:
        r = self.rho - 2 * self.delta
        return self.epsilon * r / (r + 1.0)

    @property
    def grid_width(self) -> float:
        return 2 * self.epsilon / (self.rho + 1 - 2 * self.delta)


@dataclass(frozen=True)
class EstimateVector:
    values: np.ndarray
    params: object = None

    def __post_init__(self) -> None:
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("estimates must be a finite vector")
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.size


def mean_budget(params: SqParams, constant: float = BUDGET_CONSTANT) -> int:
    """Samples needed by :func:`replicable_mean`."""
    return math.ceil(constant * math.log(1 / params.delta) / params.eps_prime ** 2)


def grid_offset(stream: SeedStream, width: float) -> float:
    return float(stream.generator().random()) * width


def round_to_grid(x, width: float, offset):
    """Nearest point of ``offset + width * Z``; halves round up."""
    x = np.asarray(x, dtype=float)
    return offset + width * np.floor((x - offset) / width + 0.5)


def replicable_mean(samples, params: SqParams, internal: SeedStream,
                    bounds: tuple[float, float] = (0.0, 1.0)) -> float:
    """Replicable estimate of the mean of ``samples`` (values in ``bounds``).

    ``internal`` must be dedicated to this call; two runs sharing it and drawing
    fresh data agree with probability at least ``1 - rho``.
    """
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ValueError("no samples")
    need = mean_budget(params)
    if x.size < need:
        raise ValueError(f"insufficient samples: got {x.size}, need {need}")
    return round_mean(float(x.mean()), params, internal, bounds)


def round_mean(estimate: float, params: SqParams, internal: SeedStream,
               bounds: tuple[float, float] = (0.0, 1.0)) -> float:
    """The rounding step of :func:`replicable_mean`, for an already computed mean."""
    w = params.grid_width
    out = float(round_to_grid(estimate, w, grid_offset(internal, w)))
    return min(max(out, bounds[0]), bounds[1])


def coordinate_stream(internal: SeedStream, j: int) -> SeedStream:
    return internal.split(f"coord-{j}")


def replicable_round_vector(raw: EstimateVector, l1_accuracy: float, params: SqParams,
                            internal: SeedStream,
                            bounds: tuple[float, float] = (0.0, 1.0)) -> EstimateVector:
    """Round each coordinate on its own shifted grid.

    The caller certifies ``sum_j |raw_j - truth_j| <= l1_accuracy`` with probability
    ``1 - delta``; ``l1_accuracy`` may not exceed ``params.eps_prime``.
    Coordinate ``j`` draws its offset from ``internal.split("coord-j")`` only.
    """
    if l1_accuracy > params.eps_prime * (1 + 1e-12):
        raise ValueError(
            f"L1 accuracy {l1_accuracy:.3g} exceeds eps' = {params.eps_prime:.3g}")
    w = params.grid_width
    offsets = np.array([grid_offset(coordinate_stream(internal, j), w) for j in range(raw.d)])
    out = np.clip(round_to_grid(raw.values, w, offsets), bounds[0], bounds[1])
    return EstimateVector(out, params)
