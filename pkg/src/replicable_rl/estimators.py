"""Q-function and policy estimators under exact, TV and approximate replicability.

Every estimator draws data through a :class:`GenerativeModel` (whose ledger records
the draws) and takes its own randomness from an ``internal`` seed stream. Each one
has a ``*_budget`` companion that returns the exact ledger total it will spend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from .divergences import renyi_log
from .gaussian_sq import (
    DEFAULT_MAX_ATOMS, MAX_COUPLING_DIM, CouplingError, GaussianMechanismParams,
    gaussian_mechanism, replicable_multi_query,
)
from .mdp import (
    Policy, QTable, TabularMdp, exact_policy_evaluation, exact_value_iteration, greedy_policy,
    policy_matrices,
)
from .replicable_sq import EstimateVector, SqParams, replicable_round_vector
from .sampling import GenerativeModel, SeedStream

SOLVER_TOL = 1e-10
#: multiplier in the plug-in per-pair budget
ORACLE_CONSTANT = 0.5


class BudgetError(RuntimeError):
    """The requested accuracy needs more samples than the configured maximum."""


@dataclass(frozen=True)
class QOracleConfig:
    """Plug-in Q-oracle: ``m`` draws per pair, then exact planning on the empirical model.

    With ``m = c gamma^2 log(2N / delta0) / ((1 - gamma)^4 epsilon0^2)`` and c = 1/2,
    Hoeffding on ``(P_hat - P) V*`` for every pair plus the simulation bound
    ``|Q_hat - Q*| <= gamma / (1 - gamma) |(P_hat - P) V*|`` give
    ``|Q_hat - Q*|_inf <= epsilon0`` with probability ``1 - delta0``.
    """

    epsilon0: float
    delta0: float
    constant: float = ORACLE_CONSTANT
    max_samples: int | None = None

    def __post_init__(self) -> None:
        if not self.epsilon0 > 0:
            raise ValueError("epsilon0 must be positive")
        if not 0 < self.delta0 < 1:
            raise ValueError("delta0 must lie in (0, 1)")

    def per_pair(self, gamma: float, num_pairs: int) -> int:
        m = self.constant * gamma ** 2 * math.log(2 * num_pairs / self.delta0) \
            / ((1 - gamma) ** 4 * self.epsilon0 ** 2)
        return max(1, math.ceil(m))

    def total(self, gamma: float, num_pairs: int) -> int:
        return self.per_pair(gamma, num_pairs) * num_pairs


def _check_budget(cfg: QOracleConfig, total: int) -> None:
    if total >= 2 ** 62:
        raise BudgetError(f"budget {total} overflows the sample counter")
    if cfg.max_samples is not None and total > cfg.max_samples:
        raise BudgetError(f"needs {total} samples, above the limit {cfg.max_samples}")


def _solve_empirical(mdp: TabularMdp, p_hat: np.ndarray) -> QTable:
    model = TabularMdp(mdp.num_states, mdp.actions, _renormalise(p_hat), mdp.reward, mdp.gamma,
                       mdp.initial_state)
    return exact_value_iteration(model, SOLVER_TOL).clipped(mdp.gamma)


def _renormalise(p: np.ndarray) -> np.ndarray:
    return p / p.sum(axis=1, keepdims=True)


def plugin_q_oracle(g: GenerativeModel, cfg: QOracleConfig) -> QTable:
    mdp = g.mdp
    m = cfg.per_pair(mdp.gamma, mdp.num_pairs)
    _check_budget(cfg, m * mdp.num_pairs)
    return _solve_empirical(mdp, g.empirical_model(m))


def plugin_q_budget(mdp: TabularMdp, cfg: QOracleConfig) -> int:
    return cfg.total(mdp.gamma, mdp.num_pairs)


# exact replicability by rounding

def _replicable_q_config(mdp: TabularMdp, params: SqParams,
                         max_samples: int | None = None) -> QOracleConfig:
    # sup-norm accuracy eps'/N makes the L1 error over all N pairs at most eps'
    return QOracleConfig(params.eps_prime / mdp.num_pairs, params.delta, max_samples=max_samples)


def replicable_q(g: GenerativeModel, epsilon: float, rho: float, delta: float,
                 internal: SeedStream, max_samples: int | None = None) -> QTable:
    mdp = g.mdp
    params = SqParams(epsilon, rho, delta)
    q_hat = plugin_q_oracle(g, _replicable_q_config(mdp, params, max_samples))
    rounded = replicable_round_vector(EstimateVector(q_hat.values, params), params.eps_prime,
                                      params, internal, bounds=(0.0, mdp.v_max))
    return QTable(rounded.values, mdp.offsets)


def replicable_q_budget(mdp: TabularMdp, epsilon: float, rho: float, delta: float) -> int:
    return plugin_q_budget(mdp, _replicable_q_config(mdp, SqParams(epsilon, rho, delta)))


def replicable_policy(g: GenerativeModel, epsilon: float, rho: float, delta: float,
                      internal: SeedStream, max_samples: int | None = None) -> Policy:
    mdp = g.mdp
    q = replicable_q(g, (1 - mdp.gamma) * epsilon, rho, delta, internal, max_samples)
    return greedy_policy(q, mdp.actions)


def replicable_policy_budget(mdp: TabularMdp, epsilon: float, rho: float, delta: float) -> int:
    return replicable_q_budget(mdp, (1 - mdp.gamma) * epsilon, rho, delta)


# TV indistinguishability by the Gaussian mechanism

def _tv_config(mdp: TabularMdp, params: GaussianMechanismParams, coupled: bool,
               max_samples: int | None = None) -> QOracleConfig:
    acc = params.coupled_mean_accuracy if coupled else params.mean_accuracy
    return QOracleConfig(acc, params.query_delta, max_samples=max_samples)


def tv_ind_q(g: GenerativeModel, epsilon: float, rho: float, delta: float,
             internal: SeedStream, max_samples: int | None = None,
             variance: float | None = None, trace: dict | None = None) -> QTable:
    """Plug-in Q plus isotropic Gaussian noise over all N pairs.

    ``variance`` overrides the noise level (diagnostics only). If ``trace`` is given
    it receives the pre-noise ``means`` and the noise ``variance``, which is all a
    KL certificate between two runs needs.
    """
    mdp = g.mdp
    params = GaussianMechanismParams(epsilon, rho, delta, mdp.num_pairs)
    q_hat = plugin_q_oracle(g, _tv_config(mdp, params, False, max_samples))
    if trace is not None:
        trace.update(means=q_hat.values.copy(),
                     variance=params.noise_variance if variance is None else variance)
    noisy = gaussian_mechanism(EstimateVector(q_hat.values, params), params, internal, variance)
    return QTable(np.clip(noisy.values, 0.0, mdp.v_max), mdp.offsets)


def tv_ind_q_budget(mdp: TabularMdp, epsilon: float, rho: float, delta: float) -> int:
    params = GaussianMechanismParams(epsilon, rho, delta, mdp.num_pairs)
    return plugin_q_budget(mdp, _tv_config(mdp, params, False))


def tv_ind_policy(g: GenerativeModel, epsilon: float, rho: float, delta: float,
                  internal: SeedStream, max_samples: int | None = None,
                  variance: float | None = None, trace: dict | None = None) -> Policy:
    mdp = g.mdp
    q = tv_ind_q(g, (1 - mdp.gamma) * epsilon, rho, delta, internal, max_samples, variance,
                 trace)
    return greedy_policy(q, mdp.actions)


def tv_ind_policy_budget(mdp: TabularMdp, epsilon: float, rho: float, delta: float) -> int:
    return tv_ind_q_budget(mdp, (1 - mdp.gamma) * epsilon, rho, delta)


# exact replicability by coupling the Gaussian mechanism

def _coupled_params(mdp: TabularMdp, epsilon: float, rho: float,
                    delta: float) -> GaussianMechanismParams:
    if mdp.num_pairs > MAX_COUPLING_DIM:
        raise CouplingError(
            f"coupling supports at most {MAX_COUPLING_DIM} state-action pairs, got {mdp.num_pairs}")
    return GaussianMechanismParams(epsilon, rho, delta, mdp.num_pairs, coupled=True)


def replicable_q_via_coupling(g: GenerativeModel, epsilon: float, rho: float, delta: float,
                              internal: SeedStream, max_samples: int | None = None,
                              max_atoms: int = DEFAULT_MAX_ATOMS) -> QTable:
    mdp = g.mdp
    params = _coupled_params(mdp, epsilon, rho, delta)

    def raw(accuracy: float, conf: float) -> EstimateVector:
        cfg = QOracleConfig(accuracy, conf, max_samples=max_samples)
        return EstimateVector(plugin_q_oracle(g, cfg).values, params)

    out = replicable_multi_query(raw, params, internal, bounds=(0.0, mdp.v_max),
                                 max_atoms=max_atoms)
    return QTable(out.values, mdp.offsets)


def replicable_q_via_coupling_budget(mdp: TabularMdp, epsilon: float, rho: float,
                                     delta: float) -> int:
    params = _coupled_params(mdp, epsilon, rho, delta)
    return plugin_q_budget(mdp, _tv_config(mdp, params, True))


def replicable_policy_via_coupling(g: GenerativeModel, epsilon: float, rho: float, delta: float,
                                   internal: SeedStream, max_samples: int | None = None,
                                   max_atoms: int = DEFAULT_MAX_ATOMS) -> Policy:
    mdp = g.mdp
    q = replicable_q_via_coupling(g, (1 - mdp.gamma) * epsilon, rho, delta, internal,
                                  max_samples, max_atoms)
    return greedy_policy(q, mdp.actions)


# approximate replicability by soft-max

@dataclass(frozen=True)
class SoftMaxParams:
    lam: float
    alpha: float = 2.0
    rho1: float = 0.5
    rho2: float = 0.1
    epsilon: float | None = None

    def __post_init__(self) -> None:
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if not self.alpha >= 1:
            raise ValueError("Renyi order must be >= 1")
        for name in ("rho1", "rho2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")

    @classmethod
    def for_policy(cls, epsilon: float, gamma: float, num_actions: int, alpha: float = 2.0,
                   rho1: float = 0.5, rho2: float = 0.1) -> "SoftMaxParams":
        """lambda = log|A| / (epsilon / 2 * (1 - gamma))."""
        return cls(math.log(num_actions) / (epsilon / 2 * (1 - gamma)), alpha, rho1, rho2, epsilon)


def softmax_rows(q: QTable, lam: float) -> list[np.ndarray]:
    rows = []
    for s in range(len(q.offsets) - 1):
        z = lam * q.row(s)
        w = np.exp(z - z.max())
        rows.append(w / w.sum())
    return rows


def softmax_log_rows(q: QTable, lam: float) -> list[np.ndarray]:
    """Per-state log-probabilities of the soft-max, exact even where they underflow."""
    return [log_softmax(lam * q.row(s)) for s in range(len(q.offsets) - 1)]


def softmax_renyi(q1: QTable, q2: QTable, lam: float, alpha: float) -> float:
    """max_s D_alpha between the soft-max policies of two Q tables."""
    return max(renyi_log(a, b, alpha)
               for a, b in zip(softmax_log_rows(q1, lam), softmax_log_rows(q2, lam)))


def softmax_policy(q: QTable, params: SoftMaxParams | float) -> Policy:
    lam = params.lam if isinstance(params, SoftMaxParams) else float(params)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return Policy.stochastic(softmax_rows(q, lam))


def _approx_setup(mdp: TabularMdp, epsilon: float, rho1: float, rho2: float, delta: float,
                  alpha: float, max_samples: int | None = None
                  ) -> tuple[QOracleConfig, SoftMaxParams]:
    if not 0 < epsilon < (1 - mdp.gamma) ** -0.5:
        raise ValueError("epsilon must lie in (0, (1 - gamma)^(-1/2))")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    n_act = mdp.max_actions
    if n_act < 2:
        raise ValueError("soft-max estimation needs a state with at least two actions")
    delta = min(delta, rho2 / 2)
    err = rho1 * epsilon * (1 - mdp.gamma) / (8 * math.log(n_act))
    sm = SoftMaxParams.for_policy(epsilon, mdp.gamma, n_act, alpha, rho1, rho2)
    return QOracleConfig(err, delta, max_samples=max_samples), sm


def approx_replicable_policy(g: GenerativeModel, epsilon: float, rho1: float, rho2: float,
                             delta: float, alpha: float = 2.0,
                             max_samples: int | None = None, trace: dict | None = None) -> Policy:
    """Soft-max of a plug-in Q accurate to rho1 eps (1 - gamma) / (8 log|A|).

    Needs no shared randomness: two runs have Q estimates within twice that error,
    and the soft-max is 2 lambda-Lipschitz into every Renyi divergence.
    """
    cfg, sm = _approx_setup(g.mdp, epsilon, rho1, rho2, delta, alpha, max_samples)
    q = plugin_q_oracle(g, cfg)
    if trace is not None:
        trace["q"], trace["lam"] = q, sm.lam
    return softmax_policy(q, sm)


def approx_replicable_budget(mdp: TabularMdp, epsilon: float, rho1: float, rho2: float,
                             delta: float, alpha: float = 2.0) -> int:
    cfg, _ = _approx_setup(mdp, epsilon, rho1, rho2, delta, alpha)
    return plugin_q_budget(mdp, cfg)


def approx_replicable_params(mdp: TabularMdp, epsilon: float, rho1: float, rho2: float,
                             delta: float, alpha: float = 2.0) -> tuple[QOracleConfig, SoftMaxParams]:
    return _approx_setup(mdp, epsilon, rho1, rho2, delta, alpha)


# replicable evaluation of a given policy

@dataclass(frozen=True)
class _EvalPlan:
    params: SqParams
    v_cfg: QOracleConfig
    m_v: int  # per state, single-action model
    m_q: int  # per pair, Hoeffding mean queries


def _evaluation_plan(mdp: TabularMdp, epsilon: float, rho: float, delta: float) -> _EvalPlan:
    params = SqParams(epsilon, rho, delta)
    n = mdp.num_pairs
    t = params.eps_prime / (2 * n)
    v_cfg = QOracleConfig(t, delta)
    m_v = v_cfg.per_pair(mdp.gamma, mdp.num_states)
    m_q = math.ceil(math.log(2 * n / delta) * mdp.v_max ** 2 / (2 * t ** 2))
    return _EvalPlan(params, v_cfg, m_v, m_q)


def policy_mdp(mdp: TabularMdp, policy: Policy) -> TabularMdp:
    """The single-action MDP whose only Q-function is V^pi."""
    p_pi, r_pi = policy_matrices(mdp, policy)
    return TabularMdp(mdp.num_states, ((0,),) * mdp.num_states, _renormalise(p_pi),
                      np.clip(r_pi, 0.0, 1.0), mdp.gamma, mdp.initial_state)


def replicable_policy_evaluation(g: GenerativeModel, policy: Policy, epsilon: float, rho: float,
                                 delta: float, internal: SeedStream) -> QTable:
    """Replicable estimate of Q^pi for an explicitly given policy.

    V^pi is estimated as the optimal Q of the single-action MDP induced by ``policy``,
    simulated with one generator draw per transition (the action is drawn from
    ``policy`` on the external stream). Then each Q^pi(s, a) = r + gamma E[V_hat(s')]
    is a bounded mean query, and the vector is rounded replicably.
    """
    mdp = g.mdp
    policy.validate(mdp)
    plan = _evaluation_plan(mdp, epsilon, rho, delta)
    w = policy.pair_probs(mdp)

    p_hat = np.stack([g.sample_under_policy(s, w[mdp.offsets[s]:mdp.offsets[s + 1]], plan.m_v)
                      for s in range(mdp.num_states)]) / plan.m_v
    r_pi = np.add.reduceat(mdp.reward * w, mdp.offsets[:-1])
    v_hat = np.linalg.solve(np.eye(mdp.num_states) - mdp.gamma * p_hat, r_pi)
    v_hat = np.clip(v_hat, 0.0, mdp.v_max)

    q_bar = np.empty(mdp.num_pairs)
    for i in range(mdp.num_pairs):
        counts = g.sample_pair_counts(i, plan.m_q)
        q_bar[i] = mdp.reward[i] + mdp.gamma * float(counts @ v_hat) / plan.m_q
    q_bar = np.clip(q_bar, 0.0, mdp.v_max)
    rounded = replicable_round_vector(EstimateVector(q_bar, plan.params), plan.params.eps_prime,
                                      plan.params, internal, bounds=(0.0, mdp.v_max))
    return QTable(rounded.values, mdp.offsets)


def replicable_policy_evaluation_budget(mdp: TabularMdp, epsilon: float, rho: float,
                                        delta: float) -> int:
    plan = _evaluation_plan(mdp, epsilon, rho, delta)
    return plan.m_v * mdp.num_states + plan.m_q * mdp.num_pairs


def naive_q(g: GenerativeModel, epsilon0: float, delta0: float) -> QTable:
    """Un-rounded plug-in estimate; a non-replicable baseline."""
    return plugin_q_oracle(g, QOracleConfig(epsilon0, delta0))


def value_loss(mdp: TabularMdp, policy: Policy, v_star: np.ndarray) -> float:
    """sup_s |V^pi(s) - V*(s)| by exact evaluation."""
    return float(np.max(np.abs(exact_policy_evaluation(mdp, policy).values - v_star)))
