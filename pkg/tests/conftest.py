import numpy as np
import pytest

from tdprobe.envs import GridWorldEnv


def value_iteration(env: GridWorldEnv, gamma: float, sweeps: int = 2000) -> dict:
    """Plain dict-based Bellman optimality iteration, independent of the package's learners."""
    Q = {(s, a): 0.0 for s in env.states for a in env.actions}
    for _ in range(sweeps):
        new = {}
        for s in env.states:
            for a in env.actions:
                if env.is_terminal(s):
                    new[(s, a)] = 0.0
                    continue
                sn, r, done = env.step(s, a)
                new[(s, a)] = r + (0.0 if done else gamma * max(Q[(sn, b)] for b in env.actions))
        Q = new
    return Q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
