import math

import numpy as np
import pytest

from tdprobe import behavior
from tdprobe.agents import Exploration, QTable, WindowedQLearner, run_q_agent, run_repeater
from tdprobe.behavior import FitError, fit
from tdprobe.envs import TwoStepEnv
from tdprobe.store import Step, TrajectoryLog


def _manual_nll(traj, gamma, alpha, tau):
    """Step-by-step softmax likelihood with an ordinary learner."""
    q = QTable(["Start", "Apple", "Orange", "Terminal"], ["Left", "Right"], gamma, alpha)
    learner = WindowedQLearner(q)
    nll = 0.0
    for i, s in enumerate(traj.steps):
        z = tau * q.row(s.state)
        z = z - z.max()
        p = np.exp(z) / np.exp(z).sum()
        nll -= math.log(p[q.a_index[s.action]])
        learner.observe(s.state, s.action, s.reward, s.next_state, s.next_state == "Terminal")
    return nll


def test_value_grid_matches_manual_likelihood():
    log, _, _ = run_q_agent(TwoStepEnv(), 15, 0.3, 0.99, Exploration("softmax", temperature=0.5), seed=4)
    grid = behavior.value_model_nll_grid(log, 0.99, alphas=[0.1, 0.5], taus=[0.3, 2.0])
    for i, a in enumerate([0.1, 0.5]):
        for j, t in enumerate([0.3, 2.0]):
            assert grid[i, j] == pytest.approx(_manual_nll(log, 0.99, a, t), rel=1e-12)


def test_repetition_grid_matches_counts():
    steps = [Step(e, 0, "Start", a, 0.0, "Apple") for e, a in enumerate(["Left", "Left", "Right"])]
    traj = TrajectoryLog("r", "two_step", steps)
    c = 1.0
    expected = -(math.log(0.5) + math.log(2 / 3) + math.log(1 / 4))
    assert behavior.repetition_nll_grid(traj, [c])[0] == pytest.approx(expected)


def test_chance_and_information_criteria():
    log = run_repeater(TwoStepEnv(), 10, seed=0)
    r = fit("chance", log)
    assert r.nll == pytest.approx(20 * math.log(2)) and r.aic == pytest.approx(2 * r.nll)
    q = fit("q_learning", log)
    assert q.bic == pytest.approx(2 * math.log(20) + 2 * q.nll)


def test_fit_never_worse_than_grid_members():
    log, _, _ = run_q_agent(TwoStepEnv(), 20, 0.1, 0.99, Exploration("softmax", temperature=0.3), seed=0)
    res = fit("q_learning", log)
    assert res.nll <= behavior.value_model_nll_grid(log, 0.99).min() + 1e-12
    assert res.params["alpha"] in behavior.ALPHA_GRID
    assert behavior.evaluate(res, log) == pytest.approx(res.nll)


def test_compare_sorted_and_test_split():
    train_log, _, _ = run_q_agent(TwoStepEnv(), 20, 0.1, 0.99, Exploration("softmax", temperature=0.3), seed=0)
    test_log, _, _ = run_q_agent(TwoStepEnv(), 20, 0.1, 0.99, Exploration("softmax", temperature=0.3), seed=1)
    t = behavior.compare(train_log, test=test_log, information_criteria=True)
    nll = t.column("nll")
    assert nll == sorted(nll) and "test_nll" in t.column_names and "bic" in t.column_names


def test_fit_errors():
    with pytest.raises(FitError):
        fit("oracle", TrajectoryLog("r", "two_step", [Step(0, 0, "Start", "Left", 0.0, "Apple")]))
    with pytest.raises(FitError):
        fit("q_learning", TrajectoryLog("r", "two_step", []))
    with pytest.raises(FitError):
        fit("q_learning", TrajectoryLog("r", "two_step", [Step(0, 0, "Start", "Left", None, "Apple")]))
    with pytest.raises(FitError):
        behavior.compare(TrajectoryLog("r", "two_step", [Step(0, 0, "Start", "Left", 0.0, "Apple")]), ["myopic"])


def test_q_model_wins_on_q_agent_data():
    wins = 0
    for seed in range(10):
        log, _, _ = run_q_agent(TwoStepEnv(), 30, 0.1, 0.99,
                                Exploration("softmax", temperature=0.2, random_episodes=7), seed=seed)
        t = behavior.compare(log)
        wins += t.rows[0][0] == "q_learning"
    assert wins >= 9
