"""Seed streams, sample accounting and generative-model access.

Randomness comes from Philox4x64-10 (numpy's ``Philox`` bit generator). A stream is
addressed by a 64-bit root seed plus a path of labels; the SHA-256 digest of that
address becomes the Philox key, and the counter always starts at zero. The same
(root, path) therefore reproduces the same bits on every platform, and distinct
paths give unrelated keys.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .mdp import TabularMdp

_DOMAIN = b"replicable-rl/seedstream/v1"
U64_MAX = (1 << 64) - 1


@dataclass(frozen=True)
class SeedStream:
    root_seed: int
    path: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= int(self.root_seed) <= U64_MAX:
            raise ValueError("root_seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "root_seed", int(self.root_seed))
        object.__setattr__(self, "path", tuple(str(x) for x in self.path))

    def split(self, label: str | int) -> "SeedStream":
        label = str(label)
        if not label:
            raise ValueError("label must be non-empty")
        return SeedStream(self.root_seed, self.path + (label,))

    def child(self, *labels: str | int) -> "SeedStream":
        s = self
        for lab in labels:
            s = s.split(lab)
        return s

    @property
    def key(self) -> tuple[int, int]:
        h = hashlib.sha256(_DOMAIN)
        h.update(self.root_seed.to_bytes(8, "little"))
        for label in self.path:
            raw = label.encode("utf-8")
            h.update(len(raw).to_bytes(4, "little"))
            h.update(raw)
        d = h.digest()
        return int.from_bytes(d[:8], "little"), int.from_bytes(d[8:16], "little")

    def bit_generator(self) -> np.random.Philox:
        return np.random.Philox(counter=0, key=np.array(self.key, dtype=np.uint64))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        return np.random.Generator(self.bit_generator())

    def random_raw(self, n: int) -> np.ndarray:
        return self.bit_generator().random_raw(n)

    def bytes(self, n: int) -> bytes:
        words = self.random_raw((n + 7) // 8).astype("<u8")
        return words.tobytes()[:n]

    def describe(self) -> str:
        return "/".join(self.path) or "."


def paths_disjoint(a: SeedStream, b: SeedStream) -> bool:
    """True when neither stream can be derived from the other."""
    if a.root_seed != b.root_seed:
        return True
    n = min(len(a.path), len(b.path))
    return a.path[:n] != b.path[:n]


@dataclass
class SampleLedger:
    counts: np.ndarray

    @classmethod
    def zeros(cls, num_pairs: int) -> "SampleLedger":
        return cls(np.zeros(num_pairs, dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, pair: int, m: int) -> None:
        if m < 0:
            raise ValueError("sample counts are non-negative")
        self.counts[pair] += m

    def merge(self, other: "SampleLedger") -> "SampleLedger":
        return SampleLedger(self.counts + other.counts)


@dataclass
class GenerativeModel:
    """Sampler G_M for ``mdp`` drawing from the external stream ``external``."""

    mdp: TabularMdp
    external: SeedStream
    ledger: SampleLedger = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.ledger is None:
            self.ledger = SampleLedger.zeros(self.mdp.num_pairs)
        self._rng = self.external.generator()
        self._cdf = np.cumsum(self.mdp.transition, axis=1)

    def _pair(self, s: int, a: int) -> int:
        return self.mdp.pair_index(s, a)

    def _inverse_cdf(self, pair: int, u: np.ndarray) -> np.ndarray:
        cdf = self._cdf[pair]
        idx = np.searchsorted(cdf, u, side="right")
        # guard against u landing past a cdf that rounds to just under 1
        last = int(np.flatnonzero(self.mdp.transition[pair])[-1])
        return np.minimum(idx, last)

    def sample_transition(self, s: int, a: int) -> int:
        pair = self._pair(s, a)
        nxt = int(self._inverse_cdf(pair, np.array([self._rng.random()]))[0])
        self.ledger.add(pair, 1)
        return nxt

    def sample_transitions(self, s: int, a: int, m: int) -> np.ndarray:
        """``m`` next states by vectorised inverse-CDF."""
        pair = self._pair(s, a)
        out = self._inverse_cdf(pair, self._rng.random(m))
        self.ledger.add(pair, m)
        return out

    def sample_pair_counts(self, pair: int, m: int) -> np.ndarray:
        """Next-state counts of ``m`` draws from flat pair ``pair``.

        Equal in law to histogramming ``m`` inverse-CDF draws, at O(S) cost.
        """
        if m < 0:
            raise ValueError("m must be non-negative")
        counts = self._rng.multinomial(m, self.mdp.transition[pair])
        self.ledger.add(pair, m)
        return counts

    def sample_counts(self, s: int, a: int, m: int) -> np.ndarray:
        return self.sample_pair_counts(self._pair(s, a), m)

    def sample_under_policy(self, s: int, probs: np.ndarray, m: int) -> np.ndarray:
        """Next-state counts of ``m`` steps from ``s`` with actions drawn from ``probs``.

        The action draw is free; each step costs one generator sample.
        """
        lo = int(self.mdp.offsets[s])
        probs = np.asarray(probs, dtype=float)
        per_action = self._rng.multinomial(m, probs / probs.sum())
        counts = np.zeros(self.mdp.num_states, dtype=np.int64)
        for k, c in enumerate(per_action):
            if c:
                counts += self.sample_pair_counts(lo + k, int(c))
        return counts

    def empirical_model(self, m: int) -> np.ndarray:
        """(N, S) empirical transition matrix from ``m`` draws per pair."""
        if m < 1:
            raise ValueError("need at least one sample per pair")
        counts = np.stack([self.sample_pair_counts(i, m) for i in range(self.mdp.num_pairs)])
        return counts / m


def draw_coin(rng: np.random.Generator, p: float) -> int:
    """One Bernoulli(p) flip."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("coin bias must lie in [0, 1]")
    return int(rng.random() < p)


def coin_heads(rng: np.random.Generator, p: float, m: int) -> int:
    """Number of heads in ``m`` Bernoulli(p) flips."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("coin bias must lie in [0, 1]")
    return int(rng.binomial(m, p))

