"""Discounted tabular MDPs: representation, exact solvers and the X/Y/Z hard family.

State-action pairs are stored flat. Pair ``i`` belongs to state ``state_of_pair[i]``
and pairs of state ``s`` occupy ``offsets[s]:offsets[s + 1]`` in the order of
``actions[s]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ROW_SUM_TOL = 1e-12


class MdpError(ValueError):
    """Raised for malformed MDPs, tables or policies."""


@dataclass(frozen=True, eq=False)
class TabularMdp:
    num_states: int
    actions: tuple[tuple[int, ...], ...]
    transition: np.ndarray  # (N, S)
    reward: np.ndarray  # (N,)
    gamma: float
    initial_state: int = 0
    offsets: np.ndarray = field(init=False, repr=False)
    state_of_pair: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.num_states < 1:
            raise MdpError("num_states must be positive")
        if len(self.actions) != self.num_states:
            raise MdpError("need one action list per state")
        actions = tuple(tuple(int(a) for a in acts) for acts in self.actions)
        for s, acts in enumerate(actions):
            if not acts:
                raise MdpError(f"state {s} has no actions")
            if len(set(acts)) != len(acts):
                raise MdpError(f"state {s} has duplicate action ids")
        object.__setattr__(self, "actions", actions)
        counts = np.array([len(a) for a in actions])
        offsets = np.concatenate([[0], np.cumsum(counts)])
        n = int(offsets[-1])
        P = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        if P.shape != (n, self.num_states):
            raise MdpError(f"transition must have shape {(n, self.num_states)}, got {P.shape}")
        if r.shape != (n,):
            raise MdpError(f"reward must have shape {(n,)}, got {r.shape}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise MdpError("transition rows must be non-negative and sum to 1")
        if np.any(r < 0) or np.any(r > 1):
            raise MdpError("rewards must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise MdpError("gamma must lie strictly inside (0, 1)")
        if not 0 <= self.initial_state < self.num_states:
            raise MdpError("initial_state out of range")
        P.setflags(write=False)
        r.setflags(write=False)
        offsets.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "offsets", offsets)
        sop = np.repeat(np.arange(self.num_states), counts)
        sop.setflags(write=False)
        object.__setattr__(self, "state_of_pair", sop)

    @property
    def num_pairs(self) -> int:
        """N, the total number of state-action pairs."""
        return int(self.offsets[-1])

    @property
    def v_max(self) -> float:
        return 1.0 / (1.0 - self.gamma)

    @property
    def max_actions(self) -> int:
        return max(len(a) for a in self.actions)

    def pair_index(self, s: int, a: int) -> int:
        if not 0 <= s < self.num_states:
            raise MdpError(f"state {s} out of range")
        try:
            return int(self.offsets[s]) + self.actions[s].index(a)
        except ValueError:
            raise MdpError(f"action {a} is not available in state {s}") from None

    def pairs(self) -> list[tuple[int, int]]:
        return [(s, a) for s, acts in enumerate(self.actions) for a in acts]

    @classmethod
    def from_nested(
        cls,
        actions: Sequence[Sequence[int]],
        transition: Sequence[Sequence[Sequence[float]]],
        reward: Sequence[Sequence[float]],
        gamma: float,
        initial_state: int = 0,
    ) -> "TabularMdp":
        """Build from per-state nested lists, the layout used by the JSON format."""
        flat_p = [row for rows in transition for row in rows]
        flat_r = [x for xs in reward for x in xs]
        for s, (acts, rows, rs) in enumerate(zip(actions, transition, reward)):
            if len(rows) != len(acts) or len(rs) != len(acts):
                raise MdpError(f"state {s}: transition/reward length differs from action list")
        return cls(len(actions), tuple(map(tuple, actions)), np.array(flat_p, dtype=float),
                   np.array(flat_r, dtype=float), gamma, initial_state)

    def to_dict(self) -> dict:
        rows = [self.transition[self.offsets[s]:self.offsets[s + 1]].tolist()
                for s in range(self.num_states)]
        rews = [self.reward[self.offsets[s]:self.offsets[s + 1]].tolist()
                for s in range(self.num_states)]
        return {
            "num_states": self.num_states,
            "actions": [list(a) for a in self.actions],
            "transition": rows,
            "reward": rews,
            "gamma": self.gamma,
            "initial_state": self.initial_state,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        try:
            mdp = cls.from_nested(doc["actions"], doc["transition"], doc["reward"],
                                  doc["gamma"], doc.get("initial_state", 0))
        except KeyError as exc:
            raise MdpError(f"missing field {exc.args[0]!r}") from None
        if "num_states" in doc and doc["num_states"] != mdp.num_states:
            raise MdpError("num_states disagrees with the action lists")
        return mdp


def load_mdp(path: str | Path) -> TabularMdp:
    with open(path) as fh:
        return TabularMdp.from_dict(json.load(fh))


def save_mdp(mdp: TabularMdp, path: str | Path) -> None:
    # json writes floats with repr(), i.e. shortest round-trip form
    with open(path, "w") as fh:
        json.dump(mdp.to_dict(), fh, indent=1)


@dataclass(frozen=True, eq=False)
class QTable:
    values: np.ndarray  # (N,)
    offsets: np.ndarray  # (S + 1,)

    def row(self, s: int) -> np.ndarray:
        return self.values[self.offsets[s]:self.offsets[s + 1]]

    def state_values(self) -> np.ndarray:
        return np.maximum.reduceat(self.values, self.offsets[:-1])

    def clipped(self, gamma: float) -> "QTable":
        return QTable(np.clip(self.values, 0.0, 1.0 / (1.0 - gamma)), self.offsets)

    def same_as(self, other: "QTable") -> bool:
        """Bit-wise equality."""
        return (self.values.shape == other.values.shape
                and self.values.tobytes() == other.values.tobytes())


@dataclass(frozen=True, eq=False)
class VTable:
    values: np.ndarray  # (S,)


@dataclass(frozen=True, eq=False)
class Policy:
    """A deterministic (one action id per state) or stochastic (one row per state) policy."""

    kind: str
    actions: np.ndarray | None = None
    probs: tuple[np.ndarray, ...] | None = None

    @classmethod
    def deterministic(cls, actions: Sequence[int]) -> "Policy":
        return cls("deterministic", actions=np.asarray(actions, dtype=np.int64))

    @classmethod
    def stochastic(cls, rows: Sequence[Sequence[float]]) -> "Policy":
        return cls("stochastic", probs=tuple(np.asarray(r, dtype=float) for r in rows))

    def validate(self, mdp: TabularMdp) -> None:
        if self.kind == "deterministic":
            if self.actions is None or len(self.actions) != mdp.num_states:
                raise MdpError("deterministic policy needs one action per state")
            for s, a in enumerate(self.actions):
                if int(a) not in mdp.actions[s]:
                    raise MdpError(f"action {a} invalid in state {s}")
        elif self.kind == "stochastic":
            if self.probs is None or len(self.probs) != mdp.num_states:
                raise MdpError("stochastic policy needs one row per state")
            for s, row in enumerate(self.probs):
                if row.shape != (len(mdp.actions[s]),):
                    raise MdpError(f"row {s} has the wrong length")
                if np.any(row < 0) or abs(row.sum() - 1.0) > ROW_SUM_TOL:
                    raise MdpError(f"row {s} is not a probability vector")
        else:
            raise MdpError(f"unknown policy kind {self.kind!r}")

    def pair_probs(self, mdp: TabularMdp) -> np.ndarray:
        """pi(s, a) laid out over the flat pair index."""
        self.validate(mdp)
        out = np.zeros(mdp.num_pairs)
        if self.kind == "deterministic":
            for s, a in enumerate(self.actions):
                out[mdp.pair_index(s, int(a))] = 1.0
        else:
            for s, row in enumerate(self.probs):
                out[mdp.offsets[s]:mdp.offsets[s + 1]] = row
        return out

    def same_as(self, other: "Policy") -> bool:
        if self.kind != other.kind:
            return False
        if self.kind == "deterministic":
            return np.array_equal(self.actions, other.actions)
        return all(a.tobytes() == b.tobytes() for a, b in zip(self.probs, other.probs))

    def to_json(self) -> dict:
        if self.kind == "deterministic":
            return {"kind": self.kind, "actions": self.actions.tolist()}
        return {"kind": self.kind, "probs": [r.tolist() for r in self.probs]}

    @classmethod
    def from_json(cls, doc: dict) -> "Policy":
        if doc.get("kind") == "deterministic":
            return cls.deterministic(doc["actions"])
        if doc.get("kind") == "stochastic":
            return cls.stochastic(doc["probs"])
        raise MdpError("policy document needs kind deterministic|stochastic")


def bellman_backup(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """r + gamma * P v over all pairs."""
    return mdp.reward + mdp.gamma * (mdp.transition @ v)


def exact_value_iteration(mdp: TabularMdp, tol: float = 1e-9) -> QTable:
    """Optimal Q within ``tol`` in sup-norm.

    Iterates the optimality backup until successive iterates differ by less than
    tol * (1 - gamma) / (2 * gamma), which bounds the final error by tol / 2.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    threshold = tol * (1.0 - mdp.gamma) / (2.0 * mdp.gamma)
    starts = mdp.offsets[:-1]
    q = mdp.reward.copy()
    while True:
        q_next = bellman_backup(mdp, np.maximum.reduceat(q, starts))
        if np.max(np.abs(q_next - q)) < threshold:
            return QTable(q_next, mdp.offsets)
        q = q_next


def bellman_residual(mdp: TabularMdp, q: QTable) -> float:
    return float(np.max(np.abs(bellman_backup(mdp, q.state_values()) - q.values)))


def policy_matrices(mdp: TabularMdp, policy: Policy) -> tuple[np.ndarray, np.ndarray]:
    """(P_pi, r_pi): the state-to-state kernel and expected reward under ``policy``."""
    w = policy.pair_probs(mdp)
    weighted = mdp.transition * w[:, None]
    p_pi = np.add.reduceat(weighted, mdp.offsets[:-1], axis=0)
    r_pi = np.add.reduceat(mdp.reward * w, mdp.offsets[:-1])
    return p_pi, r_pi


def exact_policy_evaluation(mdp: TabularMdp, policy: Policy, tol: float = 1e-10) -> VTable:
    """V^pi by a direct linear solve of (I - gamma P_pi) V = r_pi.

    ``tol`` is accepted for interface symmetry with value iteration; the solve is
    accurate to machine precision for the sizes used here.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    p_pi, r_pi = policy_matrices(mdp, policy)
    v = np.linalg.solve(np.eye(mdp.num_states) - mdp.gamma * p_pi, r_pi)
    return VTable(np.clip(v, 0.0, mdp.v_max))


def q_from_v(mdp: TabularMdp, v: VTable) -> QTable:
    return QTable(bellman_backup(mdp, v.values), mdp.offsets)


def greedy_policy(q: QTable, actions: Sequence[Sequence[int]]) -> Policy:
    """arg max over each state's actions; ties go to the lowest action id."""
    chosen = []
    for s, acts in enumerate(actions):
        row = q.row(s)
        best = row.max()
        chosen.append(min(a for a, x in zip(acts, row) if x == best))
    return Policy.deterministic(chosen)


def random_mdp(rng: np.random.Generator, num_states: int, num_actions: int | Sequence[int],
               gamma: float = 0.9, concentration: float = 1.0) -> TabularMdp:
    """Dirichlet transitions and uniform rewards; for tests and experiments."""
    if isinstance(num_actions, int):
        num_actions = [num_actions] * num_states
    actions = tuple(tuple(range(k)) for k in num_actions)
    n = sum(num_actions)
    P = rng.dirichlet(np.full(num_states, concentration), size=n)
    # renormalise so row sums are exactly representable within ROW_SUM_TOL
    P = P / P.sum(axis=1, keepdims=True)
    r = rng.uniform(0.0, 1.0, size=n)
    return TabularMdp(num_states, actions, P, r, gamma)


@dataclass(frozen=True, eq=False)
class LowerBoundFamilySpec:
    """The three-layer hard instance: K decision states with L actions each.

    Action l at x_k moves to y(k, l); y(k, l) stays put with probability
    p[k, l] and otherwise falls into the absorbing zero-reward state z(k, l).
    """

    K: int
    L: int
    gamma: float
    p: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.p, dtype=float)
        if p.size == self.K * self.L:
            p = p.reshape(self.K, self.L)
        if self.K < 1 or self.L < 1:
            raise MdpError("K and L must be positive")
        if p.shape != (self.K, self.L):
            raise MdpError(f"p must have shape {(self.K, self.L)}")
        if np.any(p < 0) or np.any(p > 1):
            raise MdpError("p entries must lie in [0, 1]")
        if not 0.5 < self.gamma < 1.0:
            raise MdpError("gamma must lie in (1/2, 1)")
        object.__setattr__(self, "p", p)

    def x_state(self, k: int) -> int:
        return k

    def y_state(self, k: int, l: int) -> int:
        return self.K + k * self.L + l

    def z_state(self, k: int, l: int) -> int:
        return self.K + self.K * self.L + k * self.L + l


def build_lower_bound_mdp(spec: LowerBoundFamilySpec) -> TabularMdp:
    K, L = spec.K, spec.L
    S = K + 2 * K * L
    actions = [tuple(range(L))] * K + [(0,)] * (2 * K * L)
    rows: list[np.ndarray] = []
    rewards: list[float] = []
    for k in range(K):
        for l in range(L):
            row = np.zeros(S)
            row[spec.y_state(k, l)] = 1.0
            rows.append(row)
            rewards.append(1.0)
    for k in range(K):
        for l in range(L):
            row = np.zeros(S)
            p = spec.p[k, l]
            row[spec.y_state(k, l)] = p
            row[spec.z_state(k, l)] += 1.0 - p
            rows.append(row)
            rewards.append(1.0)
    for k in range(K):
        for l in range(L):
            row = np.zeros(S)
            row[spec.z_state(k, l)] = 1.0
            rows.append(row)
            rewards.append(0.0)
    return TabularMdp(S, tuple(actions), np.array(rows), np.array(rewards), spec.gamma)


def closed_form_q_star(spec: LowerBoundFamilySpec, k: int, l: int) -> float:
    """1 / (1 - gamma * p[k, l]): the optimal value of the self-looping state y(k, l).

    The decision pair (x_k, a_l) itself is worth 1 + gamma times this, since it pays
    one unit of reward before moving to y(k, l).
    """
    return 1.0 / (1.0 - spec.gamma * spec.p[k, l])


def lower_bound_pair(spec: LowerBoundFamilySpec, mdp: TabularMdp, k: int, l: int) -> int:
    """Flat pair index of the single action at y(k, l)."""
    return mdp.pair_index(spec.y_state(k, l), 0)
