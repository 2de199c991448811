import math

import numpy as np
import pytest

from replicable_rl.coin_lab import (
    CoinProblemSpec, acceptance_curve, exact_threshold_acceptance, max_slope,
    naive_coin_classifier, naive_inconsistency, replicable_coin_budget,
    replicable_coin_classifier, replicable_coin_params, slope_bound, threshold_rule,
)
from replicable_rl.sampling import SeedStream
from replicable_rl.stats import binomial_sigma

Q, EPS = 0.75, 0.2


def spec(n, biases, m=None, rho=0.3, delta=0.05):
    return CoinProblemSpec(n, Q, EPS, delta, np.asarray(biases, dtype=float), m, rho)


def test_spec_validation():
    with pytest.raises(ValueError):
        CoinProblemSpec(1, 0.6, 0.2, 0.05, np.array([0.5]))  # q - eps not above 1/2
    with pytest.raises(ValueError):
        CoinProblemSpec(2, Q, EPS, 0.05, np.array([0.5]))
    with pytest.raises(ValueError):
        CoinProblemSpec(1, Q, EPS, 0.05, np.array([1.5]))


def test_naive_says_plus_at_q_with_many_flips():
    s = spec(3, [Q] * 3, m=100_000)
    assert naive_coin_classifier(s, SeedStream(0, ("naive",))).all()


def test_naive_at_threshold_is_a_coin_flip():
    s = spec(1, [Q - EPS / 2], m=1000)
    trials = 2000
    agree = sum(bool(naive_coin_classifier(s, SeedStream(1, (f"t-{t}", "a")))[0]
                     == naive_coin_classifier(s, SeedStream(1, (f"t-{t}", "b")))[0])
                for t in range(trials))
    assert abs(agree / trials - 0.5) <= 3 * binomial_sigma(0.5, trials) + 0.02


def test_naive_full_vector_agreement_decays_with_n():
    g = SeedStream(2, ("decay",)).generator()
    rates = []
    for n in (1, 3, 10):
        agree = 0
        for t in range(400):
            s = spec(n, g.uniform(Q - EPS, Q, n), m=1000)
            a = naive_coin_classifier(s, SeedStream(2, (str(n), f"t-{t}", "a")))
            b = naive_coin_classifier(s, SeedStream(2, (str(n), f"t-{t}", "b")))
            agree += bool(np.array_equal(a, b))
        rates.append(agree / 400)
    assert rates[0] > rates[1] > rates[2]


def test_naive_needs_budget():
    with pytest.raises(ValueError):
        naive_coin_classifier(spec(1, [Q]), SeedStream(0))


def test_replicable_params_split():
    p = replicable_coin_params(spec(5, [Q] * 5))
    assert (p.epsilon, p.rho, p.delta) == pytest.approx((0.1, 0.06, 0.01))


def test_replicable_correct_on_boundary_biases():
    s = spec(2, [Q - EPS, Q])
    right = np.zeros(2)
    runs = 200
    for t in range(runs):
        out = replicable_coin_classifier(s, SeedStream(3, (f"t-{t}", "d")),
                                         SeedStream(3, (f"t-{t}", "r")))
        right += out == np.array([False, True])
    assert np.all(right / runs >= 1 - s.delta)


def test_replicable_identical_inputs():
    s = spec(4, [0.6, 0.65, 0.7, 0.75])
    a = replicable_coin_classifier(s, SeedStream(4, ("d",)), SeedStream(4, ("r",)))
    b = replicable_coin_classifier(s, SeedStream(4, ("d",)), SeedStream(4, ("r",)))
    assert np.array_equal(a, b)


def test_replicable_paired_agreement_inside_interval():
    g = SeedStream(5, ("biases",)).generator()
    agree, trials = 0, 300
    for t in range(trials):
        s = spec(5, g.uniform(Q - EPS, Q, 5))
        base = SeedStream(5, (f"t-{t}",))
        a = replicable_coin_classifier(s, base.child("ext", 1), base.split("int"))
        b = replicable_coin_classifier(s, base.child("ext", 2), base.split("int"))
        agree += bool(np.array_equal(a, b))
    assert agree / trials >= 0.7


def test_replicable_rejects_small_budget():
    with pytest.raises(ValueError):
        replicable_coin_classifier(spec(1, [Q], m=10), SeedStream(0), SeedStream(1))


def test_replicable_budget_grows_superlinearly_in_n():
    ns = np.array([1, 2, 4, 8, 16])
    totals = [n * replicable_coin_budget(spec(n, [Q] * n)) for n in ns]
    slope = np.polyfit(np.log(ns), np.log(totals), 1)[0]
    assert slope > 1.5


# acceptance curves

def test_curve_endpoints_for_naive_rule():
    pts = acceptance_curve(threshold_rule(Q - EPS / 2), [0.0, 1.0], 100, 200,
                           SeedStream(6, ("ends",)))
    assert pts[0].acc_estimate == 0.0 and pts[1].acc_estimate == 1.0


def test_curve_is_monotone_within_noise_and_below_slope_cap():
    m, trials = 200, 2000
    grid = np.linspace(0.5, 0.8, 16)
    pts = acceptance_curve(threshold_rule(Q - EPS / 2), grid, m, trials, SeedStream(7, ("c",)))
    for a, b in zip(pts, pts[1:]):
        assert b.ci_high >= a.ci_low  # no significant decrease
        assert a.ci_low <= a.acc_estimate <= a.ci_high
    # each secant slope is bounded by the largest cap on its segment, up to noise
    for a, b in zip(pts, pts[1:]):
        cap = max(slope_bound(m, a.p), slope_bound(m, b.p))
        noise = 3 * math.sqrt(2 * 0.25 / trials) / (b.p - a.p)
        assert (b.acc_estimate - a.acc_estimate) / (b.p - a.p) <= cap + noise
    assert max_slope(pts) <= max(slope_bound(m, p) for p in grid) * 1.1


def test_curve_matches_exact_binomial():
    m, trials = 300, 4000
    grid = [0.6, 0.65, 0.7]
    pts = acceptance_curve(threshold_rule(0.65), grid, m, trials, SeedStream(8, ("x",)))
    for pt in pts:
        exact = exact_threshold_acceptance(pt.p, m, 0.65)
        assert abs(pt.acc_estimate - exact) <= 4 * binomial_sigma(exact, trials) + 1e-9


def test_curve_points_echo_configuration():
    pts = acceptance_curve(threshold_rule(0.5), [0.4], 50, 30, SeedStream(42, ("e",)))
    assert (pts[0].m, pts[0].trials, pts[0].seed) == (50, 30, 42)


def test_naive_inconsistency_decreases_with_m():
    rates = [naive_inconsistency(Q, EPS, m, 20_000, SeedStream(9, (str(m),)))
             for m in (100, 1000, 10_000)]
    assert rates[0] > rates[1] > rates[2]
