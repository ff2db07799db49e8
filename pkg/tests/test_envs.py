import numpy as np
import pytest

from tdprobe import envs
from tdprobe.envs import CommunityGraph, EnvError, GridWorldEnv, TwoStepEnv, Variant


def test_two_step_dynamics():
    env = TwoStepEnv()
    assert env.step("Start", "Left") == ("Apple", 0.0, False)
    assert env.step("Start", "Right") == ("Orange", 0.0, False)
    assert env.step("Apple", "Right") == ("Terminal", 9.0, True)
    assert env.step("Orange", "Left") == ("Terminal", 6.0, True)
    assert env.optimal_return(0) == 9.0
    with pytest.raises(EnvError):
        env.step("Terminal", "Left")
    with pytest.raises(EnvError):
        env.step("Start", "Up")


def test_two_step_variants():
    env = TwoStepEnv(variant=Variant("reward_change", 10))
    assert env.step("Apple", "Right", 9)[1] == 9.0
    assert env.step("Apple", "Right", 10)[1] == 1.0
    assert env.optimal_return(10) == 6.0
    env = TwoStepEnv(variant=Variant("transition_change", 5))
    assert env.step("Start", "Left", 4)[0] == "Apple"
    assert env.step("Start", "Left", 5)[0] == "Orange"
    with pytest.raises(ValueError):
        Variant("reward_change")


def test_two_step_config_roundtrip():
    env = TwoStepEnv(variant=Variant("reward_change", 3))
    assert TwoStepEnv.from_config(env.to_config()) == env
    with pytest.raises(ValueError):
        TwoStepEnv(transition_table={"Left": "Apple", "Right": "Apple"})


def test_grid_walls_goal_and_rewards():
    env = GridWorldEnv()
    assert env.step((0, 0), "DOWN") == ((0, 0), -1.0, False)
    assert env.step((0, 0), "LEFT") == ((0, 0), -1.0, False)
    assert env.step((0, 0), "UP") == ((0, 1), -1.0, False)
    assert env.step((3, 4), "RIGHT") == ((4, 4), 1.0, True)
    with pytest.raises(EnvError):
        env.step((4, 4), "UP")
    with pytest.raises(ValueError):
        GridWorldEnv(goal=(5, 5))
    assert GridWorldEnv.from_config(env.to_config()) == env


def test_grid_random_start_never_goal():
    env = GridWorldEnv(randomize_start=True)
    rng = np.random.default_rng(0)
    starts = {env.start(rng) for _ in range(500)}
    assert (4, 4) not in starts and len(starts) == 24


def test_community_graph_structure():
    g = envs.build_community_graph(seed=0)
    assert isinstance(g, CommunityGraph) and g.n_nodes == 15
    A = g.adjacency
    assert np.array_equal(A, A.T) and not A.diagonal().any()
    assert (A.sum(axis=1) == 4).all()
    assert g.bottleneck.sum() == 6
    cross = g.cross_edges()
    assert len(cross) == 3
    for i, j in cross:
        assert g.bottleneck[i] and g.bottleneck[j]
    assert np.allclose(g.transition_matrix().sum(axis=1), 1.0)
    assert g.node_names != envs.build_community_graph(seed=1).node_names


def test_random_walk_follows_edges():
    g = envs.build_community_graph(0)
    log = envs.random_walk(g, 401, seed=3)
    states = log.states()
    assert len(states) == 401 and len(log) == 400
    assert all(g.adjacency[s, t] for s, t in zip(states[:-1], states[1:]))
    assert np.array_equal(envs.walk_states(g, 401, seed=3), states)
    assert envs.random_walk(g, 1, seed=3).states() == [states[0]]


def test_randomize_rewards_modes():
    from tdprobe.agents import Exploration, run_q_agent
    log, _, _ = run_q_agent(GridWorldEnv(), 3, seed=0, exploration=Exploration("random"))
    swapped = envs.randomize_rewards(log, "swap_sign")
    assert swapped.rewards() == [-r for r in log.rewards()]
    shuffled = envs.randomize_rewards(log, "shuffle_sign", seed=1)
    assert set(shuffled.rewards()) <= {-1.0, 1.0}
    assert envs.randomize_rewards(log, "strip").rewards() == [None] * len(log)
    assert [s.action for s in swapped.steps] == [s.action for s in log.steps]
    with pytest.raises(ValueError):
        envs.randomize_rewards(log, "bogus")


def test_env_from_config():
    assert isinstance(envs.env_from_config({"task": "two_step"}), TwoStepEnv)
    assert envs.env_from_config({"task": "grid_world", "goal": [2, 2]}).goal == (2, 2)
    with pytest.raises(ValueError):
        envs.env_from_config({"task": "maze"})
