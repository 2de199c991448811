"""The multiple-coin problem: a naive and a replicable classifier, plus acceptance curves.

Each coin has bias ``q - eps`` ("-") or ``q`` ("+"); a classifier returns one sign per
coin, encoded as a boolean array with True for "+".
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import binom

from .replicable_sq import SqParams, mean_budget, round_mean
from .sampling import SeedStream, coin_heads
from .stats import wilson_interval


@dataclass(frozen=True)
class CoinProblemSpec:
    n_coins: int
    q: float
    epsilon: float
    delta: float
    true_biases: np.ndarray
    m: int | None = None
    rho: float = 0.3

    def __post_init__(self) -> None:
        if self.n_coins < 1:
            raise ValueError("need at least one coin")
        if not (0.5 < self.q - self.epsilon and self.q < 1 and self.epsilon > 0):
            raise ValueError("need 1/2 < q - epsilon < q < 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        biases = np.asarray(self.true_biases, dtype=float)
        if biases.shape != (self.n_coins,):
            raise ValueError("one bias per coin")
        if np.any(biases < 0) or np.any(biases > 1):
            raise ValueError("biases must lie in [0, 1]")
        object.__setattr__(self, "true_biases", biases)

    @property
    def threshold(self) -> float:
        return self.q - self.epsilon / 2

    def with_biases(self, biases) -> "CoinProblemSpec":
        return CoinProblemSpec(self.n_coins, self.q, self.epsilon, self.delta, biases, self.m,
                               self.rho)


def coin_stream(data: SeedStream, i: int) -> SeedStream:
    return data.split(f"coin-{i}")


def naive_coin_classifier(spec: CoinProblemSpec, data: SeedStream) -> np.ndarray:
    """'+' iff the empirical mean of ``m`` flips exceeds q - eps/2."""
    if spec.m is None or spec.m < 1:
        raise ValueError("naive classifier needs a per-coin budget m")
    heads = np.array([coin_heads(coin_stream(data, i).generator(), p, spec.m)
                      for i, p in enumerate(spec.true_biases)])
    return heads / spec.m > spec.threshold


def replicable_coin_params(spec: CoinProblemSpec) -> SqParams:
    """Per-coin parameters (eps/2, rho/N, delta/N)."""
    return SqParams(spec.epsilon / 2, spec.rho / spec.n_coins, spec.delta / spec.n_coins)


def replicable_coin_budget(spec: CoinProblemSpec) -> int:
    """Per-coin flips required by the replicable classifier."""
    return mean_budget(replicable_coin_params(spec))


def replicable_coin_classifier(spec: CoinProblemSpec, data: SeedStream,
                               internal: SeedStream) -> np.ndarray:
    """Threshold each coin's replicably rounded mean; coin i rounds with its own stream."""
    params = replicable_coin_params(spec)
    need = mean_budget(params)
    m = need if spec.m is None else spec.m
    if m < need:
        raise ValueError(f"insufficient budget: m = {m}, need {need} flips per coin")
    out = np.empty(spec.n_coins, dtype=bool)
    for i, p in enumerate(spec.true_biases):
        mean = coin_heads(coin_stream(data, i).generator(), p, m) / m
        out[i] = round_mean(mean, params, internal.split(f"coin-{i}")) > spec.threshold
    return out


SingleCoinRule = Callable[[float, int, SeedStream], bool]


def threshold_rule(threshold: float) -> SingleCoinRule:
    def rule(p: float, m: int, data: SeedStream) -> bool:
        return coin_heads(data.generator(), p, m) / m > threshold
    return rule


@dataclass(frozen=True)
class CurvePoint:
    p: float
    acc_estimate: float
    ci_low: float
    ci_high: float
    m: int
    trials: int
    seed: int


def acceptance_curve(rule: SingleCoinRule, p_grid: Sequence[float], m: int, trials: int,
                     stream: SeedStream) -> list[CurvePoint]:
    """Monte Carlo Acc(p) = P(rule outputs '+') on each grid point, with Wilson CIs."""
    points = []
    for j, p in enumerate(p_grid):
        base = stream.split(f"p-{j}")
        hits = sum(bool(rule(float(p), m, base.split(f"t-{t}"))) for t in range(trials))
        lo, hi = wilson_interval(hits, trials)
        points.append(CurvePoint(float(p), hits / trials, lo, hi, m, trials, stream.root_seed))
    return points


def max_slope(points: Sequence[CurvePoint]) -> float:
    """Largest forward-difference slope of the estimated curve."""
    best = 0.0
    for a, b in zip(points, points[1:]):
        if b.p > a.p:
            best = max(best, (b.acc_estimate - a.acc_estimate) / (b.p - a.p))
    return best


def slope_bound(m: int, p: float) -> float:
    """sqrt(m / (p (1 - p))): the cap on Acc'(p) for any rule using m flips."""
    return math.sqrt(m / (p * (1 - p)))


def exact_threshold_acceptance(p: float, m: int, threshold: float) -> float:
    """P(Bin(m, p) / m > threshold), computed exactly."""
    return float(binom.sf(math.floor(threshold * m), m, p))


def naive_inconsistency(q: float, epsilon: float, m: int, trials: int,
                        stream: SeedStream) -> float:
    """P(two runs of the naive rule disagree) for p ~ U[q - eps, q], by Monte Carlo.

    All trials are drawn, vectorised, from the single generator of ``stream``.
    """
    rng = stream.generator()
    p = rng.uniform(q - epsilon, q, size=trials)
    h1 = rng.binomial(m, p)
    h2 = rng.binomial(m, p)
    thr = q - epsilon / 2
    return float(np.mean((h1 / m > thr) != (h2 / m > thr)))
