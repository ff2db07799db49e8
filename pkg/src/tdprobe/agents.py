"""Reference learners that produce behaviour and ground-truth signal traces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Hashable, Sequence

import numpy as np

from .store import Step, TrajectoryLog

PROB_FLOOR = 1e-6


@dataclass
class SignalTrace:
    """Per-step scalar (shape ``(n,)``) or vector (shape ``(n, w)``) signal."""

    name: str
    values: np.ndarray
    run_id: str = ""
    episode: np.ndarray | None = None
    t: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim not in (1, 2):
            raise ValueError(f"{self.name}: values must be 1-d or 2-d")
        n = len(self.values)
        for arr in (self.episode, self.t):
            if arr is not None and len(arr) != n:
                raise ValueError(f"{self.name}: alignment length differs from values")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def width(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    def as_matrix(self) -> np.ndarray:
        return self.values.reshape(len(self.values), -1)


# -- Q-learning ------------------------------------------------------------


class QTable:
    """Tabular action values; unseen pairs read as 0.

    ``values`` may carry a leading batch axis ``(B, S, A)`` so that many
    learning rates can be simulated on the same experience at once.
    """

    def __init__(self, states: Sequence[Hashable], actions: Sequence[Hashable], gamma: float = 0.99,
                 alpha: float | np.ndarray = 0.1, window: int | str = 1, batch: int | None = None,
                 alpha_decay: float | None = None):
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if window != "all" and (not isinstance(window, (int, np.integer)) or window < 1):
            raise ValueError("window must be a positive integer or 'all'")
        self.states = list(states)
        self.actions = list(actions)
        self.s_index = {s: i for i, s in enumerate(self.states)}
        self.a_index = {a: i for i, a in enumerate(self.actions)}
        self.gamma = float(gamma)
        self.window = window
        self.alpha_decay = alpha_decay
        shape = (len(self.states), len(self.actions))
        self.batched = batch is not None
        self.values = np.zeros(((batch,) + shape) if self.batched else shape)
        self.alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (batch,) if self.batched else ()).copy()
        if np.any(self.alpha <= 0):
            raise ValueError("alpha must be > 0")
        self.visits = np.zeros(shape, dtype=np.int64)

    def copy(self) -> "QTable":
        new = QTable.__new__(QTable)
        new.__dict__.update(self.__dict__)
        new.values = self.values.copy()
        new.alpha = self.alpha.copy()
        new.visits = self.visits.copy()
        return new

    def __getitem__(self, key):
        s, a = key
        return self.values[..., self.s_index[s], self.a_index[a]]

    def __setitem__(self, key, value):
        s, a = key
        self.values[..., self.s_index[s], self.a_index[a]] = value

    def row(self, s) -> np.ndarray:
        return self.values[..., self.s_index[s], :]

    def max_value(self, s):
        return self.row(s).max(axis=-1)

    def greedy(self, s, rng: np.random.Generator | None = None):
        row = self.row(s)
        best = np.flatnonzero(row == row.max())
        if rng is None or len(best) == 1:
            return self.actions[best[0]]
        return self.actions[best[rng.integers(len(best))]]


def td_error_q(q: QTable, s, a, r: float, s_next, terminal: bool):
    """``r + gamma * max_a' Q(s', a') - Q(s, a)``; the bootstrap is dropped at terminal steps."""
    if not np.isfinite(r):
        raise ValueError("reward must be finite")
    boot = 0.0 if terminal else q.gamma * q.max_value(s_next)
    return r + boot - q[s, a]


@dataclass
class Transition:
    s: Any
    a: Any
    r: float
    s_next: Any
    terminal: bool


def _window_deltas(values, gamma, s_idx, a_idx, r, sn_idx, term):
    boot = np.where(term, 0.0, gamma * values[..., sn_idx, :].max(axis=-1))
    return r + boot - values[..., s_idx, a_idx]


def _apply_window(q: QTable, s_idx, a_idx, r, sn_idx, term) -> np.ndarray:
    """One windowed update. Returns the per-transition deltas (pre-update Q)."""
    deltas = _window_deltas(q.values, q.gamma, s_idx, a_idx, r, sn_idx, term)
    if len(s_idx) == 1:
        us, ua, means = s_idx, a_idx, deltas
    else:
        n_a = len(q.actions)
        pairs = s_idx * n_a + a_idx
        uniq, inv, counts = np.unique(pairs, return_inverse=True, return_counts=True)
        sums = np.zeros(deltas.shape[:-1] + (len(uniq),))
        np.add.at(sums, (..., inv), deltas)
        means = sums / counts
        us, ua = np.divmod(uniq, n_a)
    q.visits[us, ua] += 1
    if q.alpha_decay is None:
        step = q.alpha[..., None] * means
    else:
        c = q.alpha_decay
        step = q.alpha[..., None] * (c / (c + q.visits[us, ua] - 1.0)) * means
    q.values[..., us, ua] += step
    return deltas


def q_update_windowed(q: QTable, history: Sequence[Transition]) -> QTable:
    """Return a new table after one windowed TD update over ``history``.

    Each pair in the window moves by ``alpha`` times the mean TD error of its
    occurrences; every error uses the pre-update table.
    """
    if not history:
        raise ValueError("history must be non-empty")
    if q.window != "all":
        history = history[-q.window:]
    new = q.copy()
    s_idx = np.array([q.s_index[h.s] for h in history])
    a_idx = np.array([q.a_index[h.a] for h in history])
    r = np.array([h.r for h in history], dtype=float)
    sn_idx = np.array([q.s_index[h.s_next] for h in history])
    term = np.array([h.terminal for h in history], dtype=bool)
    _apply_window(new, s_idx, a_idx, r, sn_idx, term)
    return new


class WindowedQLearner:
    """Q-learner that keeps its experience and updates over the last ``window`` transitions."""

    def __init__(self, q: QTable, capacity: int = 1024):
        self.q = q
        self.n = 0
        self._buf = np.zeros((4, capacity), dtype=np.int64)  # s, a, s_next, terminal
        self._r = np.zeros(capacity)

    def observe(self, s, a, r: float, s_next, terminal: bool):
        """Learn from one transition.

        Returns ``(value, td)``: the pre-update ``Q(s, a)`` and the TD error
        averaged over the window (pooled over all transitions in it).
        """
        q = self.q
        si, ai = q.s_index[s], q.a_index[a]
        value = q.values[..., si, ai].copy() if q.batched else float(q.values[si, ai])
        if self.n == self._r.size:
            self._buf = np.concatenate([self._buf, np.zeros_like(self._buf)], axis=1)
            self._r = np.concatenate([self._r, np.zeros_like(self._r)])
        self._buf[:, self.n] = (si, ai, q.s_index[s_next], bool(terminal))
        self._r[self.n] = r
        self.n += 1
        lo = 0 if q.window == "all" else max(0, self.n - q.window)
        b = self._buf[:, lo:self.n]
        deltas = _apply_window(q, b[0], b[1], self._r[lo:self.n], b[2], b[3].astype(bool))
        td = deltas.mean(axis=-1)
        return value, (td if q.batched else float(td))


@dataclass
class Exploration:
    """Action-selection rule.

    ``epsilon``: epsilon-greedy with epsilon decaying linearly from
    ``epsilon0`` at episode 0 to 0 at ``decay_episodes``.
    ``softmax``: sample from softmax(Q / temperature).
    ``random``: uniform. The first ``random_episodes`` are always uniform.
    """

    kind: str = "epsilon"
    epsilon0: float = 1.0
    decay_episodes: int = 15
    temperature: float = 1.0
    random_episodes: int = 0

    def epsilon(self, episode: int) -> float:
        if self.decay_episodes <= 0:
            return 0.0
        return self.epsilon0 * max(0.0, 1.0 - episode / self.decay_episodes)

    def choose(self, q: QTable, s, episode: int, rng: np.random.Generator):
        actions = q.actions
        if episode < self.random_episodes or self.kind == "random":
            return actions[rng.integers(len(actions))]
        if self.kind == "epsilon":
            if rng.random() < self.epsilon(episode):
                return actions[rng.integers(len(actions))]
            return q.greedy(s, rng)
        if self.kind == "softmax":
            p = softmax(q.row(s) / self.temperature)
            return actions[rng.choice(len(actions), p=p)]
        raise ValueError(f"unknown exploration kind {self.kind!r}")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _env_states(env) -> list:
    return list(env.states)


def run_q_agent(env, episodes: int, alpha: float = 0.1, gamma: float = 0.99,
                exploration: Exploration | None = None, window: int | str = 1, seed: int = 0,
                run_id: str = "", alpha_decay: float | None = None):
    """Train a Q-learner on ``env`` and record its experience.

    A parallel myopic learner (gamma = 0) sees the same transitions. Returns
    ``(log, traces, q)`` with traces ``q_values``, ``td_errors``,
    ``myopic_values`` and ``myopic_errors`` aligned to the log steps.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    exploration = exploration or Exploration()
    rng = np.random.default_rng(seed)
    states = _env_states(env)
    q = QTable(states, env.actions, gamma, alpha, window, alpha_decay=alpha_decay)
    myopic = QTable(states, env.actions, 0.0, alpha, window, alpha_decay=alpha_decay)
    learner, myopic_learner = WindowedQLearner(q), WindowedQLearner(myopic)
    steps: list[Step] = []
    rec: dict[str, list] = {k: [] for k in ("q_values", "td_errors", "myopic_values", "myopic_errors")}
    limit = getattr(env, "max_steps_per_episode", 10**9)
    for ep in range(episodes):
        s = env.start(rng)
        t = 0
        done = False
        while not done and t < limit:
            a = exploration.choose(q, s, ep, rng)
            s_next, r, done = env.step(s, a, ep)
            v, td = learner.observe(s, a, r, s_next, done)
            mv, mtd = myopic_learner.observe(s, a, r, s_next, done)
            steps.append(Step(ep, t, s, a, float(r), s_next))
            for key, val in zip(rec, (v, td, mv, mtd)):
                rec[key].append(val)
            s = s_next
            t += 1
    meta = {"seed": str(seed), "alpha": repr(alpha), "gamma": repr(gamma), "window": str(window)}
    if hasattr(env, "goal"):
        meta["goal"] = ",".join(str(x) for x in env.goal)
    log = TrajectoryLog(run_id, env.task, steps, meta)
    ep_arr = np.array([st.episode for st in steps], dtype=int)
    t_arr = np.array([st.t for st in steps], dtype=int)
    traces = {k: SignalTrace(k, np.array(v, dtype=float), run_id, ep_arr, t_arr) for k, v in rec.items()}
    return log, traces, q


def replay_q_traces(log: TrajectoryLog, states, actions, alpha: float = 0.1, gamma: float = 0.99,
                    window: int | str = 1) -> dict[str, SignalTrace]:
    """Recompute Q / myopic traces for a fixed trajectory (e.g. after reward randomisation)."""
    q = WindowedQLearner(QTable(states, actions, gamma, alpha, window))
    m = WindowedQLearner(QTable(states, actions, 0.0, alpha, window))
    rec: dict[str, list] = {k: [] for k in ("q_values", "td_errors", "myopic_values", "myopic_errors")}
    episodes = log.episodes()
    for ep_steps in episodes.values():
        for i, st in enumerate(ep_steps):
            if st.reward is None:
                raise ValueError("trajectory has no rewards; reward-dependent traces are undefined")
            terminal = i == len(ep_steps) - 1 and _reached_terminal(log, st)
            for key, learner in (("q", q), ("myopic", m)):
                v, td = learner.observe(st.state, st.action, st.reward, st.next_state, terminal)
                rec["q_values" if key == "q" else "myopic_values"].append(v)
                rec["td_errors" if key == "q" else "myopic_errors"].append(td)
    ep_arr = np.array([s.episode for s in log.steps])
    t_arr = np.array([s.t for s in log.steps])
    return {k: SignalTrace(k, np.array(v), log.run_id, ep_arr, t_arr) for k, v in rec.items()}


def _reached_terminal(log: TrajectoryLog, step: Step) -> bool:
    if log.task == "two_step":
        return step.next_state == "Terminal"
    goal = log.meta.get("goal")
    if goal is not None:
        return list(step.next_state) == [int(x) for x in goal.split(",")]
    return True


# -- successor representation ------------------------------------------------


class SRMatrix:
    def __init__(self, n_states: int, gamma: float = 0.9, alpha: float = 0.05, alpha_decay: float | None = None):
        self.M = np.eye(n_states)
        self.gamma = float(gamma)
        self.alpha = float(alpha)
        self.alpha_decay = alpha_decay
        self.visits = np.zeros(n_states, dtype=np.int64)

    @property
    def n_states(self) -> int:
        return self.M.shape[0]


def sr_td_error(m: SRMatrix, s: int, s_next: int) -> np.ndarray:
    delta = m.gamma * m.M[s_next] - m.M[s]
    delta[s] += 1.0
    return delta


def sr_td_step(m: SRMatrix, s: int, s_next: int) -> tuple[np.ndarray, SRMatrix]:
    """Vector TD error ``1_s + gamma M[s'] - M[s]``; only row ``s`` is updated."""
    delta = sr_td_error(m, s, s_next)
    m.visits[s] += 1
    rate = m.alpha
    if m.alpha_decay is not None:
        rate = m.alpha * m.alpha_decay / (m.alpha_decay + m.visits[s] - 1.0)
    m.M[s] += rate * delta
    return delta, m


def sr_fixed_point(T: np.ndarray, gamma: float) -> np.ndarray:
    return np.linalg.inv(np.eye(len(T)) - gamma * T)


# -- transition counting -----------------------------------------------------


class TransitionModel:
    def __init__(self, n_states: int):
        self.counts = np.zeros((n_states, n_states), dtype=np.int64)

    @property
    def n_states(self) -> int:
        return self.counts.shape[0]

    def row(self, s: int) -> np.ndarray:
        total = self.counts[s].sum()
        if total == 0:
            return np.full(self.n_states, 1.0 / self.n_states)
        return self.counts[s] / total

    @property
    def T(self) -> np.ndarray:
        return np.stack([self.row(s) for s in range(self.n_states)])

    def predict(self, s: int) -> int:
        """Most probable successor (lowest index on ties)."""
        return int(np.argmax(self.counts[s])) if self.counts[s].any() else 0


def transition_update(tm: TransitionModel, s: int, s_next: int) -> TransitionModel:
    tm.counts[s, s_next] += 1
    return tm


def surprise(tm: TransitionModel, s: int, s_next_observed: int, floor: float = PROB_FLOOR) -> np.ndarray:
    """``-log T(s, s')`` for the observed successor, ``-log(1 - T(s, s'))`` elsewhere."""
    p = np.clip(tm.row(s), floor, 1.0 - floor)
    out = -np.log1p(-p)
    out[s_next_observed] = -np.log(p[s_next_observed])
    return out


def run_graph_learners(states: Sequence[int], n_states: int, gamma: float = 0.9, alpha: float = 0.05,
                       run_id: str = "") -> dict[str, SignalTrace]:
    """SR and transition-count learners over an observation sequence.

    One row per transition ``s_t -> s_{t+1}``: ``sr_rows`` (M[s_t] after the
    update), ``sr_td`` (vector TD error), ``transition_rows`` (T[s_t] after
    counting) and ``surprise`` (under T before counting).
    """
    sr = SRMatrix(n_states, gamma, alpha)
    tm = TransitionModel(n_states)
    rec: dict[str, list] = {k: [] for k in ("sr_rows", "sr_td", "transition_rows", "surprise")}
    for s, s_next in zip(states[:-1], states[1:]):
        s, s_next = int(s), int(s_next)
        rec["surprise"].append(surprise(tm, s, s_next))
        delta, _ = sr_td_step(sr, s, s_next)
        transition_update(tm, s, s_next)
        rec["sr_td"].append(delta)
        rec["sr_rows"].append(sr.M[s].copy())
        rec["transition_rows"].append(tm.row(s))
    n = len(states) - 1
    t = np.arange(n)
    return {k: SignalTrace(k, np.array(v).reshape(n, n_states), run_id, np.zeros(n, dtype=int), t)
            for k, v in rec.items()}


# -- repetition model --------------------------------------------------------


def repetition_probs(history: Sequence[tuple], s, actions: Sequence = ("Left", "Right"),
                     smoothing: float = 1.0) -> np.ndarray:
    """``(count(s, a) + c) / (sum_a' count(s, a') + c |A|)`` with add-``c`` smoothing."""
    counts = np.zeros(len(actions))
    index = {a: i for i, a in enumerate(actions)}
    for hs, ha in history:
        if hs == s:
            counts[index[ha]] += 1
    total = counts.sum() + smoothing * len(actions)
    if total == 0:
        return np.full(len(actions), 1.0 / len(actions))
    return (counts + smoothing) / total


@dataclass
class RepeaterAgent:
    """Chooses by past choice frequency in each state, ignoring reward."""

    actions: Sequence = ("Left", "Right")
    smoothing: float = 0.1
    history: list = field(default_factory=list)

    def choose(self, s, rng: np.random.Generator):
        p = repetition_probs(self.history, s, self.actions, self.smoothing)
        return self.actions[rng.choice(len(self.actions), p=p)]

    def observe(self, s, a) -> None:
        self.history.append((s, a))


def run_repeater(env, episodes: int, seed: int = 0, smoothing: float = 0.1, random_episodes: int = 0,
                 run_id: str = "") -> TrajectoryLog:
    rng = np.random.default_rng(seed)
    agent = RepeaterAgent(env.actions, smoothing)
    steps = []
    for ep in range(episodes):
        s, t, done = env.start(rng), 0, False
        while not done:
            if ep < random_episodes:
                a = env.actions[rng.integers(len(env.actions))]
            else:
                a = agent.choose(s, rng)
            s_next, r, done = env.step(s, a, ep)
            agent.observe(s, a)
            steps.append(Step(ep, t, s, a, float(r), s_next))
            s, t = s_next, t + 1
    return TrajectoryLog(run_id, env.task, steps, {"seed": str(seed), "agent": "repeater"})


def greedy_rollout(q: QTable, env, max_steps: int = 100):
    """Follow argmax-Q from the start state; returns ``(cells, total_reward, reached)``."""
    s = env.start(None)
    path, total = [s], 0.0
    for _ in range(max_steps):
        a = q.greedy(s)
        s, r, done = env.step(s, a)
        path.append(s)
        total += r
        if done:
            return path, total, True
    return path, total, False
