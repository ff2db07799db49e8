"""Deterministic task environments: Two-Step, 5x5 Grid World and the community graph."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .store import Step, TrajectoryLog

LEFT, RIGHT = "Left", "Right"
START, APPLE, ORANGE, TERMINAL = "Start", "Apple", "Orange", "Terminal"

DEFAULT_REWARDS = {(APPLE, LEFT): 2.0, (APPLE, RIGHT): 9.0, (ORANGE, LEFT): 6.0, (ORANGE, RIGHT): 4.0}
# After a reward change the best option moves from Apple/Right to Orange/Left.
DEFAULT_CHANGED_REWARDS = {(APPLE, LEFT): 2.0, (APPLE, RIGHT): 1.0, (ORANGE, LEFT): 6.0, (ORANGE, RIGHT): 4.0}
DEFAULT_TRANSITIONS = {LEFT: APPLE, RIGHT: ORANGE}


class EnvError(Exception):
    pass


@dataclass(frozen=True)
class Variant:
    kind: str = "stationary"  # stationary | reward_change | transition_change
    at_episode: int | None = None

    def __post_init__(self):
        if self.kind not in ("stationary", "reward_change", "transition_change"):
            raise ValueError(f"unknown variant {self.kind!r}")
        if self.kind != "stationary" and (self.at_episode is None or self.at_episode < 0):
            raise ValueError(f"variant {self.kind} needs at_episode >= 0")

    def active(self, episode: int) -> bool:
        return self.kind != "stationary" and episode >= self.at_episode


def _table_from_json(obj: dict) -> dict:
    return {tuple(k.split("/")): float(v) for k, v in obj.items()}


def _table_to_json(table: dict) -> dict:
    return {f"{s}/{a}": v for (s, a), v in sorted(table.items())}


@dataclass(frozen=True)
class TwoStepEnv:
    reward_table: dict = field(default_factory=lambda: dict(DEFAULT_REWARDS))
    transition_table: dict = field(default_factory=lambda: dict(DEFAULT_TRANSITIONS))
    variant: Variant = Variant()
    changed_reward_table: dict = field(default_factory=lambda: dict(DEFAULT_CHANGED_REWARDS))

    task = "two_step"
    actions = (LEFT, RIGHT)
    states = (START, APPLE, ORANGE, TERMINAL)

    def __post_init__(self):
        if sorted(self.transition_table.values()) != [APPLE, ORANGE] or set(self.transition_table) != {LEFT, RIGHT}:
            raise ValueError("transition table must map Left/Right bijectively onto Apple/Orange")
        for table in (self.reward_table, self.changed_reward_table):
            missing = {(s, a) for s in (APPLE, ORANGE) for a in (LEFT, RIGHT)} - set(table)
            if missing:
                raise ValueError(f"reward table misses {sorted(missing)}")

    def transitions_at(self, episode: int) -> dict:
        if self.variant.kind == "transition_change" and self.variant.active(episode):
            return {LEFT: self.transition_table[RIGHT], RIGHT: self.transition_table[LEFT]}
        return self.transition_table

    def rewards_at(self, episode: int) -> dict:
        if self.variant.kind == "reward_change" and self.variant.active(episode):
            return self.changed_reward_table
        return self.reward_table

    def start(self, rng: np.random.Generator | None = None):
        return START

    def step(self, state, action, episode: int = 0):
        if action not in self.actions:
            raise EnvError(f"unknown action {action!r}")
        if state == START:
            return self.transitions_at(episode)[action], 0.0, False
        if state in (APPLE, ORANGE):
            return TERMINAL, float(self.rewards_at(episode)[(state, action)]), True
        raise EnvError(f"no action allowed in state {state!r}")

    def is_terminal(self, state) -> bool:
        return state == TERMINAL

    def optimal_return(self, episode: int) -> float:
        rewards = self.rewards_at(episode)
        return max(rewards[(self.transitions_at(episode)[a], b)] for a in self.actions for b in self.actions)

    def to_config(self) -> dict:
        return {
            "task": self.task,
            "reward_table": _table_to_json(self.reward_table),
            "changed_reward_table": _table_to_json(self.changed_reward_table),
            "transition_table": dict(self.transition_table),
            "variant": {"kind": self.variant.kind, "at_episode": self.variant.at_episode},
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "TwoStepEnv":
        kw: dict[str, Any] = {}
        if "reward_table" in cfg:
            kw["reward_table"] = _table_from_json(cfg["reward_table"])
        if "changed_reward_table" in cfg:
            kw["changed_reward_table"] = _table_from_json(cfg["changed_reward_table"])
        if "transition_table" in cfg:
            kw["transition_table"] = dict(cfg["transition_table"])
        if "variant" in cfg:
            kw["variant"] = Variant(**cfg["variant"])
        return cls(**kw)


def two_step_transition(env: TwoStepEnv, state, action, episode: int = 0):
    return env.step(state, action, episode)


# -- grid world ------------------------------------------------------------

MOVES = {"UP": (0, 1), "DOWN": (0, -1), "LEFT": (-1, 0), "RIGHT": (1, 0)}


@dataclass(frozen=True)
class GridWorldEnv:
    width: int = 5
    height: int = 5
    start_cell: tuple = (0, 0)
    goal: tuple = (4, 4)
    step_reward: float = -1.0
    goal_reward: float = 1.0
    max_steps_per_episode: int = 1000
    randomize_start: bool = False

    task = "grid_world"
    actions = ("UP", "DOWN", "LEFT", "RIGHT")

    def __post_init__(self):
        for cell in (self.start_cell, self.goal):
            if not self.inside(cell):
                raise ValueError(f"cell {cell} outside the {self.width}x{self.height} grid")
        if tuple(self.start_cell) == tuple(self.goal):
            raise ValueError("start and goal coincide")

    @property
    def states(self) -> tuple:
        return tuple((x, y) for x in range(self.width) for y in range(self.height))

    def inside(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def start(self, rng: np.random.Generator | None = None):
        if self.randomize_start and rng is not None:
            cells = [c for c in self.states if c != tuple(self.goal)]
            return cells[int(rng.integers(len(cells)))]
        return tuple(self.start_cell)

    def step(self, cell, action, episode: int = 0):
        cell = tuple(cell)
        if not self.inside(cell):
            raise EnvError(f"cell {cell} outside the grid")
        if cell == tuple(self.goal):
            raise EnvError("episode already ended at the goal")
        if action not in MOVES:
            raise EnvError(f"unknown action {action!r}")
        dx, dy = MOVES[action]
        nxt = (cell[0] + dx, cell[1] + dy)
        if not self.inside(nxt):
            nxt = cell
        if nxt == tuple(self.goal):
            return nxt, self.goal_reward, True
        return nxt, self.step_reward, False

    def is_terminal(self, state) -> bool:
        return tuple(state) == tuple(self.goal)

    def to_config(self) -> dict:
        return {"task": self.task, "width": self.width, "height": self.height,
                "start": list(self.start_cell), "goal": list(self.goal),
                "max_steps_per_episode": self.max_steps_per_episode,
                "randomize_start": self.randomize_start}

    @classmethod
    def from_config(cls, cfg: dict) -> "GridWorldEnv":
        kw: dict[str, Any] = {}
        for key in ("width", "height", "max_steps_per_episode", "randomize_start"):
            if key in cfg:
                kw[key] = cfg[key]
        if "start" in cfg:
            kw["start_cell"] = tuple(cfg["start"])
        if "goal" in cfg:
            kw["goal"] = tuple(cfg["goal"])
        return cls(**kw)


def grid_step(env: GridWorldEnv, cell, action):
    return env.step(cell, action)


# -- community graph -------------------------------------------------------

_LABELS = (
    "apple", "anchor", "badge", "basket", "bell", "boot", "bottle", "bucket", "cake", "candle",
    "chair", "clock", "cloud", "coin", "comb", "crown", "cup", "desk", "drum", "egg",
    "fan", "feather", "fence", "flag", "fork", "gift", "glove", "hammer", "hat", "horse",
    "key", "kite", "ladder", "lamp", "leaf", "lemon", "mask", "mirror", "nail", "nest",
    "pear", "pen", "pillow", "pipe", "plate", "rope", "ring", "sock", "spoon", "star",
    "stone", "table", "tent", "tiger", "towel", "tree", "violin", "wall", "wheel", "woman",
)


@dataclass(frozen=True)
class CommunityGraph:
    adjacency: np.ndarray
    bottleneck: np.ndarray
    community: np.ndarray
    node_names: tuple
    n_communities: int = 3
    nodes_per_community: int = 5

    task = "graph"

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, node: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[node])

    def transition_matrix(self) -> np.ndarray:
        """Uniform random-walk transition matrix."""
        a = self.adjacency.astype(float)
        return a / a.sum(axis=1, keepdims=True)

    def cross_edges(self) -> list[tuple[int, int]]:
        out = []
        for i, j in zip(*np.nonzero(np.triu(self.adjacency))):
            if self.community[i] != self.community[j]:
                out.append((int(i), int(j)))
        return out


def build_community_graph(seed: int = 0, n_communities: int = 3, nodes_per_community: int = 5) -> CommunityGraph:
    """Ring of fully-connected communities joined through bottleneck nodes.

    In each community the first and last node are bottlenecks. They are not
    linked to each other; each instead links to one bottleneck of a
    neighbouring community, so every node has degree ``nodes_per_community - 1``.
    The seed only chooses the node labels.
    """
    if n_communities < 3 or nodes_per_community < 3:
        raise ValueError("need at least 3 communities of at least 3 nodes")
    k = nodes_per_community
    n = n_communities * k
    adj = np.zeros((n, n), dtype=bool)
    community = np.repeat(np.arange(n_communities), k)
    bottleneck = np.zeros(n, dtype=bool)
    for c in range(n_communities):
        nodes = range(c * k, (c + 1) * k)
        first, last = c * k, (c + 1) * k - 1
        bottleneck[[first, last]] = True
        for i in nodes:
            for j in nodes:
                if i != j and {i, j} != {first, last}:
                    adj[i, j] = True
        nxt_first = ((c + 1) % n_communities) * k
        adj[last, nxt_first] = adj[nxt_first, last] = True
    rng = np.random.default_rng(seed)
    names = tuple(_LABELS[i] for i in rng.choice(len(_LABELS), size=n, replace=False))
    return CommunityGraph(adj, bottleneck, community, names, n_communities, k)


def random_walk(graph: CommunityGraph, n_steps: int, seed: int = 0, run_id: str = "") -> TrajectoryLog:
    """Uniform random walk with ``n_steps`` observations (``n_steps - 1`` transitions)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng(seed)
    s = int(rng.integers(graph.n_nodes))
    nbrs = [graph.neighbors(i) for i in range(graph.n_nodes)]
    steps = []
    for t in range(n_steps - 1):
        nxt = int(nbrs[s][rng.integers(len(nbrs[s]))])
        steps.append(Step(0, t, s, None, None, nxt))
        s = nxt
    start = steps[0].state if steps else s
    meta = {"seed": str(seed), "start_state": json.dumps(start), "node_names": ",".join(graph.node_names)}
    return TrajectoryLog(run_id=run_id, task="graph", steps=steps, meta=meta)


def walk_states(graph: CommunityGraph, n_steps: int, seed: int = 0) -> np.ndarray:
    """Same walk as :func:`random_walk` as a plain integer array."""
    return np.array(random_walk(graph, n_steps, seed).states(), dtype=int)


def randomize_rewards(traj: TrajectoryLog, mode: str, seed: int = 0) -> TrajectoryLog:
    """Reward controls for grid-world logs: ``shuffle_sign``, ``swap_sign`` or ``strip``."""
    if traj.task != "grid_world":
        raise ValueError(f"reward randomization applies to grid_world logs, got {traj.task!r}")
    rng = np.random.default_rng(seed)
    if mode == "shuffle_sign":
        signs = rng.choice(np.array([-1.0, 1.0]), size=len(traj.steps))
        steps = [replace(s, reward=float(v)) for s, v in zip(traj.steps, signs)]
    elif mode == "swap_sign":
        steps = [replace(s, reward=None if s.reward is None else -s.reward) for s in traj.steps]
    elif mode == "strip":
        steps = [replace(s, reward=None) for s in traj.steps]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    meta = dict(traj.meta, reward_mode=mode, reward_seed=str(seed))
    return TrajectoryLog(traj.run_id, traj.task, steps, meta)


def env_from_config(cfg: dict):
    task = cfg.get("task")
    if task == "two_step":
        return TwoStepEnv.from_config(cfg)
    if task == "grid_world":
        return GridWorldEnv.from_config(cfg)
    if task == "graph":
        return build_community_graph(int(cfg.get("seed", 0)))
    raise ValueError(f"unknown task {task!r}")
