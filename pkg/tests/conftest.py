import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from replicable_rl.mdp import TabularMdp, random_mdp
from replicable_rl.sampling import SeedStream

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


def rng(label: str, seed: int = 0) -> np.random.Generator:
    return SeedStream(seed, ("tests", label)).generator()


def two_state_mdp(gamma: float = 0.5) -> TabularMdp:
    """Two states, two actions each, all rows stochastic."""
    return TabularMdp.from_nested(
        [[0, 1], [0, 1]],
        [[[0.7, 0.3], [0.2, 0.8]], [[0.5, 0.5], [0.9, 0.1]]],
        [[0.2, 0.6], [0.9, 0.1]],
        gamma,
    )


def deterministic_mdp(gamma: float = 0.5) -> TabularMdp:
    return TabularMdp.from_nested(
        [[0, 1], [0, 1]],
        [[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]],
        [[0.1, 0.8], [0.5, 0.3]],
        gamma,
    )


@pytest.fixture
def small_mdp() -> TabularMdp:
    return two_state_mdp()


@pytest.fixture
def random_instances():
    def make(count: int, max_states: int = 6, label: str = "instances"):
        g = rng(label)
        out = []
        for _ in range(count):
            s = int(g.integers(1, max_states + 1))
            a = int(g.integers(1, 4))
            gamma = float(g.choice([0.5, 0.8, 0.9]))
            out.append(random_mdp(g, s, a, gamma))
        return out
    return make


# one PASS/FAIL line per acceptance criterion at the end of the run

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        _ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status, _ = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{status}  {name}")
