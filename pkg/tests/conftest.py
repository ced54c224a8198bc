import numpy as np
import pytest

from rlab.dataset import EmpiricalModel, floor_and_normalize
from rlab.mdp import TabularPolicy

ACCEPTANCE_LINES = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def random_model(rng: np.random.Generator, n_states: int = 5, n_actions: int = 3,
                 drop: float = 0.0, eps_b: float = 1e-4) -> EmpiricalModel:
    """Count-based model with random counts; ``drop`` removes pairs from support.

    Every state keeps at least one supported action.
    """
    counts = rng.integers(1, 30, size=(n_states, n_actions))
    if drop > 0:
        mask = rng.random((n_states, n_actions)) < drop
        keep = rng.integers(n_actions, size=n_states)
        mask[np.arange(n_states), keep] = False
        counts = np.where(mask, 0, counts)
    next_counts = np.zeros((n_states, n_actions, n_states), dtype=np.int64)
    for s in range(n_states):
        for a in range(n_actions):
            if counts[s, a]:
                next_counts[s, a] = rng.multinomial(counts[s, a], rng.dirichlet(np.ones(n_states)))
    reward_sum = counts * rng.random((n_states, n_actions))
    n_s = counts.sum(1)
    beta = floor_and_normalize(counts / n_s[:, None], eps_b)
    mu = n_s / n_s.sum()
    return EmpiricalModel(TabularPolicy(beta), mu, counts, next_counts, reward_sum,
                          counts > 0, eps_b)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(n_actions), size=n_states))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
