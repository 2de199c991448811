import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from replicable_rl import estimators as est
from replicable_rl.divergences import GaussianVector, kl_gaussian_isotropic, renyi_finite
from replicable_rl.gaussian_sq import CouplingError
from replicable_rl.mdp import (
    LowerBoundFamilySpec, Policy, QTable, TabularMdp, build_lower_bound_mdp,
    exact_policy_evaluation, exact_value_iteration, greedy_policy, q_from_v, random_mdp,
)
from replicable_rl.sampling import GenerativeModel, SeedStream
from replicable_rl.stats import wilson_interval

from conftest import deterministic_mdp, rng, two_state_mdp

ERD = dict(epsilon=0.3, rho=0.3, delta=0.05)


def pair_streams(seed, label, t):
    base = SeedStream(seed, (label, f"trial-{t}"))
    return base.split("internal"), base.child("external", 1), base.child("external", 2)


def family_mdp(K=2, L=2, gamma=0.9, seed=0):
    p = np.random.default_rng(seed).uniform(size=(K, L))
    return build_lower_bound_mdp(LowerBoundFamilySpec(K, L, gamma, p))


# plug-in oracle

def test_plugin_exact_on_deterministic_mdp():
    mdp = deterministic_mdp(0.9)
    q_star = exact_value_iteration(mdp, 1e-10)
    for eps0 in (0.5, 0.05):
        g = GenerativeModel(mdp, SeedStream(0, ("det",)))
        q = est.plugin_q_oracle(g, est.QOracleConfig(eps0, 0.1))
        assert np.max(np.abs(q.values - q_star.values)) <= 1e-9


def test_plugin_failure_rate_on_family():
    mdp = family_mdp()
    q_star = exact_value_iteration(mdp, 1e-10)
    cfg = est.QOracleConfig(0.1, 0.1)
    fails = 0
    for t in range(200):
        g = GenerativeModel(mdp, SeedStream(1, ("fam", f"t-{t}")))
        fails += np.max(np.abs(est.plugin_q_oracle(g, cfg).values - q_star.values)) > 0.1
    assert fails / 200 <= 0.1


def test_plugin_budget_scaling_and_ledger():
    mdp = two_state_mdp(0.8)
    totals = []
    for eps0 in (0.2, 0.1, 0.05):
        cfg = est.QOracleConfig(eps0, 0.1)
        g = GenerativeModel(mdp, SeedStream(2))
        est.plugin_q_oracle(g, cfg)
        assert g.ledger.total == est.plugin_q_budget(mdp, cfg)
        assert np.all(g.ledger.counts == cfg.per_pair(mdp.gamma, mdp.num_pairs))
        totals.append(g.ledger.total)
    for a, b in zip(totals, totals[1:]):
        assert 3 <= b / a <= 5


def test_plugin_per_pair_rule():
    cfg = est.QOracleConfig(0.1, 0.05)
    m = math.ceil(0.5 * 0.81 * math.log(2 * 6 / 0.05) / (0.1 ** 4 * 0.01))
    assert cfg.per_pair(0.9, 6) == m


def test_plugin_budget_cap():
    cfg = est.QOracleConfig(0.01, 0.05, max_samples=1000)
    with pytest.raises(est.BudgetError):
        est.plugin_q_oracle(GenerativeModel(two_state_mdp(), SeedStream(0)), cfg)


# exact replicability by rounding

def test_replicable_q_paired_agreement():
    mdp = two_state_mdp()
    agree = 0
    for t in range(200):
        internal, e1, e2 = pair_streams(3, "rq", t)
        a = est.replicable_q(GenerativeModel(mdp, e1), **ERD, internal=internal)
        b = est.replicable_q(GenerativeModel(mdp, e2), **ERD, internal=internal)
        agree += a.same_as(b)
    assert wilson_interval(agree, 200)[1] >= 0.7


def test_replicable_q_deterministic_mdp_always_agrees():
    mdp = deterministic_mdp()
    for t in range(50):
        internal, e1, e2 = pair_streams(4, "rq-det", t)
        a = est.replicable_q(GenerativeModel(mdp, e1), **ERD, internal=internal)
        b = est.replicable_q(GenerativeModel(mdp, e2), **ERD, internal=internal)
        assert a.same_as(b)


def test_replicable_q_accuracy_on_family():
    mdp = family_mdp(1, 2, 0.8)
    q_star = exact_value_iteration(mdp, 1e-10)
    hits = 0
    for t in range(100):
        internal, e1, _ = pair_streams(5, "rq-acc", t)
        q = est.replicable_q(GenerativeModel(mdp, e1), 0.3, 0.3, 0.05, internal)
        hits += np.max(np.abs(q.values - q_star.values)) <= 0.3
    assert hits / 100 >= 0.95


def test_replicable_q_uses_l1_split():
    mdp = two_state_mdp()
    cfg = est._replicable_q_config(mdp, est.SqParams(0.3, 0.3, 0.05))
    assert cfg.epsilon0 == pytest.approx(0.3 * 0.2 / 1.2 / mdp.num_pairs)


def test_replicable_policy_from_identical_q_is_identical():
    mdp = two_state_mdp()
    internal, e1, _ = pair_streams(6, "rp", 0)
    a = est.replicable_policy(GenerativeModel(mdp, e1), **ERD, internal=internal)
    b = est.replicable_policy(GenerativeModel(mdp, e1), **ERD, internal=internal)
    assert a.same_as(b)


def test_replicable_policy_value_on_random_mdp():
    mdp = random_mdp(rng("rp-val"), 4, 2, 0.5)
    v_star = exact_value_iteration(mdp, 1e-10).state_values()
    hits = 0
    for t in range(50):
        internal, e1, _ = pair_streams(7, "rp-val", t)
        pol = est.replicable_policy(GenerativeModel(mdp, e1), 0.3, 0.5, 0.1, internal)
        hits += est.value_loss(mdp, pol, v_star) <= 0.3
    assert hits / 50 >= 0.9


def test_replicable_policy_picks_optimal_action_with_large_gap():
    # action 1 is better by far more than 2 eps everywhere
    mdp = TabularMdp.from_nested([[0, 1], [0, 1]],
                                 [[[0.5, 0.5], [0.5, 0.5]], [[0.4, 0.6], [0.4, 0.6]]],
                                 [[0.0, 1.0], [0.0, 1.0]], 0.5)
    for t in range(20):
        internal, e1, _ = pair_streams(8, "gap", t)
        pol = est.replicable_policy(GenerativeModel(mdp, e1), 0.2, 0.3, 0.05, internal)
        assert pol.actions.tolist() == [1, 1]


# TV indistinguishability

def test_tv_kl_certificate_per_trial():
    mdp = two_state_mdp()
    p = est.GaussianMechanismParams(0.3, 0.3, 0.05, mdp.num_pairs)
    q_star = exact_value_iteration(mdp, 1e-10)
    for t in range(100):
        internal, e1, e2 = pair_streams(9, "tv", t)
        tr1, tr2 = {}, {}
        est.tv_ind_q(GenerativeModel(mdp, e1), **ERD, internal=internal, trace=tr1)
        est.tv_ind_q(GenerativeModel(mdp, e2), **ERD, internal=internal, trace=tr2)
        assert tr1["variance"] == p.noise_variance
        accurate = all(np.max(np.abs(tr["means"] - q_star.values)) <= p.mean_accuracy
                       for tr in (tr1, tr2))
        if accurate:
            kl = kl_gaussian_isotropic(GaussianVector(tr1["means"], tr1["variance"]),
                                       GaussianVector(tr2["means"], tr2["variance"]))
            assert kl <= 0.3 ** 2


def test_tv_policy_tiny_noise_is_optimal_on_deterministic_mdp():
    mdp = deterministic_mdp(0.5)
    opt = greedy_policy(exact_value_iteration(mdp, 1e-12), mdp.actions)
    pol = est.tv_ind_policy(GenerativeModel(mdp, SeedStream(0)), **ERD,
                            internal=SeedStream(1), variance=1e-18)
    assert pol.same_as(opt)


def test_tv_q_coverage_on_family():
    mdp = family_mdp(2, 2, 0.9)
    q_star = exact_value_iteration(mdp, 1e-10)
    hits = 0
    for t in range(300):
        internal, e1, _ = pair_streams(10, "tv-cov", t)
        q = est.tv_ind_q(GenerativeModel(mdp, e1), 0.5, 0.3, 0.05, internal)
        hits += np.max(np.abs(q.values - q_star.values)) <= 0.5
    assert hits / 300 >= 0.95


def test_tv_rejects_large_delta():
    with pytest.raises(ValueError):
        est.tv_ind_q(GenerativeModel(two_state_mdp(), SeedStream(0)), 0.3, 0.3, 0.07,
                     SeedStream(1))


# coupling

def test_coupled_q_paired_agreement_one_state():
    mdp = TabularMdp.from_nested([[0, 1]], [[[1.0], [1.0]]], [[0.3, 0.7]], 0.5)
    agree = 0
    for t in range(200):
        internal, e1, e2 = pair_streams(11, "cq", t)
        a = est.replicable_q_via_coupling(GenerativeModel(mdp, e1), **ERD, internal=internal)
        b = est.replicable_q_via_coupling(GenerativeModel(mdp, e2), **ERD, internal=internal)
        agree += a.same_as(b)
    assert wilson_interval(agree, 200)[1] >= 0.7


def test_coupled_q_deterministic_given_streams():
    mdp = TabularMdp.from_nested([[0], [0]], [[[0.6, 0.4]], [[0.3, 0.7]]], [[0.2], [0.9]], 0.5)
    internal, e1, _ = pair_streams(12, "cq-det", 0)
    a = est.replicable_q_via_coupling(GenerativeModel(mdp, e1), **ERD, internal=internal)
    b = est.replicable_q_via_coupling(GenerativeModel(mdp, e1), **ERD, internal=internal)
    assert a.same_as(b)


def test_coupled_rejects_large_n():
    mdp = random_mdp(rng("big"), 3, 3, 0.5)
    with pytest.raises(CouplingError):
        est.replicable_q_via_coupling(GenerativeModel(mdp, SeedStream(0)), **ERD,
                                      internal=SeedStream(1))


# soft-max

def test_softmax_spot_values():
    offsets = np.array([0, 2])
    q = QTable(np.array([1.0, 0.0]), offsets)
    np.testing.assert_allclose(est.softmax_policy(q, math.log(9)).probs[0], [0.9, 0.1])
    np.testing.assert_allclose(est.softmax_policy(q, 1e-12).probs[0], [0.5, 0.5], atol=1e-9)
    np.testing.assert_array_equal(
        est.softmax_policy(QTable(np.array([0.4, 0.4]), offsets), 50.0).probs[0], [0.5, 0.5])


def test_softmax_is_overflow_safe():
    q = QTable(np.array([1000.0, 999.0, 0.0]), np.array([0, 3]))
    row = est.softmax_policy(q, 1e4).probs[0]
    assert np.all(np.isfinite(row)) and row.sum() == pytest.approx(1.0)


def test_softmax_lambda_rule():
    sm = est.SoftMaxParams.for_policy(0.2, 0.9, 4)
    assert sm.lam == pytest.approx(math.log(4) / (0.1 * 0.1))


@given(st.integers(2, 5), st.floats(0.1, 50), st.floats(0.0, 0.5), st.integers(0, 2**32 - 1),
       st.sampled_from([1.0, 2.0, math.inf]))
def test_renyi_lipschitz(n, lam, scale, seed, alpha):
    g = np.random.default_rng(seed)
    offsets = np.array([0, n])
    q1 = g.uniform(0, 5, n)
    q2 = q1 + g.uniform(-scale, scale, n)
    p1 = est.softmax_policy(QTable(q1, offsets), lam).probs[0]
    p2 = est.softmax_policy(QTable(q2, offsets), lam).probs[0]
    assert renyi_finite(p1, p2, alpha) <= 2 * lam * np.max(np.abs(q1 - q2)) + 1e-9


@given(st.integers(1, 5), st.integers(2, 3), st.sampled_from([0.5, 0.8, 0.9]),
       st.floats(0.0, 0.3), st.floats(0.01, 1.0), st.integers(0, 2**32 - 1))
def test_softmax_value_bound(S, A, gamma, eps1, eps2, seed):
    g = np.random.default_rng(seed)
    mdp = random_mdp(g, S, A, gamma)
    q = exact_value_iteration(mdp, 1e-11)
    q_hat = QTable(q.values + g.uniform(-eps1, eps1, mdp.num_pairs), mdp.offsets)
    pol = est.softmax_policy(q_hat, math.log(A) / eps2)
    loss = est.value_loss(mdp, pol, q.state_values())
    assert loss <= (2 * eps1 + eps2) / (1 - gamma) + 1e-6


# approximate replicability

def test_approx_identical_q_gives_zero_divergence():
    mdp = two_state_mdp()
    a = est.approx_replicable_policy(GenerativeModel(mdp, SeedStream(0)), 0.3, 0.5, 0.1, 0.05)
    b = est.approx_replicable_policy(GenerativeModel(mdp, SeedStream(0)), 0.3, 0.5, 0.1, 0.05)
    assert all(renyi_finite(x, y, 2) == 0.0 for x, y in zip(a.probs, b.probs))


def test_approx_lipschitz_identity_is_tight():
    mdp = random_mdp(rng("tight"), 3, 4, 0.8)
    cfg, sm = est.approx_replicable_params(mdp, 0.5, 0.5, 0.1, 0.05)
    assert 2 * sm.lam * 2 * cfg.epsilon0 == pytest.approx(0.5)
    assert cfg.delta0 == 0.05  # min(delta, rho2 / 2)
    cfg2, _ = est.approx_replicable_params(mdp, 0.5, 0.5, 0.05, 0.2)
    assert cfg2.delta0 == 0.025


def test_approx_rejects_bad_inputs():
    mdp = two_state_mdp(0.9)
    g = GenerativeModel(mdp, SeedStream(0))
    with pytest.raises(ValueError):
        est.approx_replicable_policy(g, 4.0, 0.5, 0.1, 0.05)
    one_action = TabularMdp.from_nested([[0]], [[[1.0]]], [[1.0]], 0.5)
    with pytest.raises(ValueError):
        est.approx_replicable_policy(GenerativeModel(one_action, SeedStream(0)), 0.3, 0.5,
                                     0.1, 0.05)


def test_approx_value_guarantee_on_random_mdps():
    g = rng("approx-val")
    hits = 0
    for t in range(50):
        mdp = random_mdp(g, 5, 2, 0.5)
        v_star = exact_value_iteration(mdp, 1e-11).state_values()
        pol = est.approx_replicable_policy(GenerativeModel(mdp, SeedStream(13, (f"t-{t}",))),
                                           0.5, 0.5, 0.1, 0.1)
        hits += est.value_loss(mdp, pol, v_star) <= 0.5
    assert hits / 50 >= 0.9


# policy evaluation

def test_policy_mdp_reward_is_convex_combination():
    mdp = TabularMdp.from_nested([[0, 1]], [[[1.0], [1.0]]], [[0.0, 1.0]], 0.5)
    m2 = est.policy_mdp(mdp, Policy.stochastic([[0.5, 0.5]]))
    assert m2.reward[0] == 0.5 and m2.num_pairs == 1


def test_policy_evaluation_on_deterministic_instance():
    mdp = deterministic_mdp(0.5)
    pol = Policy.deterministic([1, 0])
    q_pi = q_from_v(mdp, exact_policy_evaluation(mdp, pol))
    w = est.SqParams(0.3, 0.3, 0.05).grid_width
    q = est.replicable_policy_evaluation(GenerativeModel(mdp, SeedStream(0)), pol, **ERD,
                                         internal=SeedStream(1))
    assert np.max(np.abs(q.values - q_pi.values)) <= w / 2 + 1e-9


def test_policy_evaluation_accuracy_uniform_policy():
    mdp = random_mdp(rng("pe"), 3, 2, 0.5)
    pol = Policy.stochastic([[0.5, 0.5]] * 3)
    q_pi = q_from_v(mdp, exact_policy_evaluation(mdp, pol))
    hits = 0
    for t in range(200):
        internal, e1, _ = pair_streams(14, "pe", t)
        q = est.replicable_policy_evaluation(GenerativeModel(mdp, e1), pol, 0.3, 0.3, 0.05,
                                             internal)
        hits += np.max(np.abs(q.values - q_pi.values)) <= 0.3
    assert hits / 200 >= 0.95


# budgets

BUDGETED = [
    ("replicable_q", lambda g, i: est.replicable_q(g, **ERD, internal=i),
     lambda m: est.replicable_q_budget(m, **ERD)),
    ("replicable_policy", lambda g, i: est.replicable_policy(g, **ERD, internal=i),
     lambda m: est.replicable_policy_budget(m, **ERD)),
    ("tv_ind_q", lambda g, i: est.tv_ind_q(g, **ERD, internal=i),
     lambda m: est.tv_ind_q_budget(m, **ERD)),
    ("tv_ind_policy", lambda g, i: est.tv_ind_policy(g, **ERD, internal=i),
     lambda m: est.tv_ind_policy_budget(m, **ERD)),
    ("coupled_q", lambda g, i: est.replicable_q_via_coupling(g, **ERD, internal=i),
     lambda m: est.replicable_q_via_coupling_budget(m, **ERD)),
    ("approx", lambda g, i: est.approx_replicable_policy(g, 0.3, 0.5, 0.1, 0.05),
     lambda m: est.approx_replicable_budget(m, 0.3, 0.5, 0.1, 0.05)),
    ("evaluation", lambda g, i: est.replicable_policy_evaluation(
        g, Policy.deterministic([0, 1]), **ERD, internal=i),
     lambda m: est.replicable_policy_evaluation_budget(m, **ERD)),
]


@pytest.mark.parametrize("name, run, budget", BUDGETED, ids=[b[0] for b in BUDGETED])
def test_ledger_matches_declared_budget(name, run, budget):
    mdp = two_state_mdp()
    g = GenerativeModel(mdp, SeedStream(15, (name,)))
    run(g, SeedStream(16, (name,)))
    assert g.ledger.total == budget(mdp)


def test_approx_policy_budget_is_smallest_at_n4():
    mdp = two_state_mdp()
    approx = est.approx_replicable_budget(mdp, 0.3, 0.3, 0.1, 0.05)
    coupled = est.replicable_q_via_coupling_budget(mdp, (1 - mdp.gamma) * 0.3, 0.3, 0.05)
    assert approx < coupled
    assert approx < est.replicable_policy_budget(mdp, **ERD)
