"""Replicable Q-function and policy estimation for tabular MDPs with a generative model."""

from .mdp import (
    LowerBoundFamilySpec, MdpError, Policy, QTable, TabularMdp, VTable, build_lower_bound_mdp,
    closed_form_q_star, exact_policy_evaluation, exact_value_iteration, greedy_policy,
    load_mdp, random_mdp, save_mdp,
)
from .sampling import GenerativeModel, SampleLedger, SeedStream

__version__ = "0.1.0"
