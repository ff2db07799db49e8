"""Maximum-likelihood fits of behavioural models to observed choice sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .agents import QTable, WindowedQLearner
from .envs import MOVES, TwoStepEnv
from .store import ReportTable, TrajectoryLog

MODELS = ("q_learning", "myopic", "repetition", "chance")
ALPHA_GRID = np.logspace(-2, 0, 25)
TAU_GRID = np.logspace(-1, np.log10(20), 25)
SMOOTHING_GRID = np.logspace(-2, 2, 25)
N_PARAMS = {"q_learning": 2, "myopic": 2, "repetition": 1, "chance": 0}


class FitError(ValueError):
    pass


@dataclass
class FitResult:
    model: str
    params: dict[str, float] = field(default_factory=dict)
    nll: float = 0.0
    n_choices: int = 0

    @property
    def aic(self) -> float:
        return 2 * N_PARAMS[self.model] + 2 * self.nll

    @property
    def bic(self) -> float:
        return N_PARAMS[self.model] * math.log(max(self.n_choices, 1)) + 2 * self.nll


def _actions_for(traj: TrajectoryLog, actions=None) -> list:
    if actions is not None:
        return list(actions)
    if traj.task == "two_step":
        return list(TwoStepEnv.actions)
    if traj.task == "grid_world":
        return list(MOVES)
    return sorted({s.action for s in traj.steps})


def _states_for(traj: TrajectoryLog) -> list:
    seen = []
    for s in traj.steps:
        for x in (s.state, s.next_state):
            if x not in seen:
                seen.append(x)
    return seen


def _terminal_flags(traj: TrajectoryLog) -> list[bool]:
    """Last step of each episode ends it (two-step), or the goal is entered (grid)."""
    goal = traj.meta.get("goal")
    if goal is not None:
        g = tuple(int(x) for x in goal.split(","))
        return [tuple(s.next_state) == g for s in traj.steps]
    flags = []
    for i, s in enumerate(traj.steps):
        nxt = traj.steps[i + 1] if i + 1 < len(traj.steps) else None
        flags.append(nxt is None or nxt.episode != s.episode)
    return flags


def value_model_nll_grid(traj: TrajectoryLog, gamma: float, alphas=ALPHA_GRID, taus=TAU_GRID,
                         window: int | str = 1, actions=None) -> np.ndarray:
    """NLL for every ``(alpha, tau)`` cell; shape ``(len(alphas), len(taus))``.

    Beliefs are updated with the observed actions and rewards; the choice rule
    is ``softmax(tau * Q(s, .))``.
    """
    actions = _actions_for(traj, actions)
    alphas = np.asarray(alphas, dtype=float)
    taus = np.asarray(taus, dtype=float)
    q = QTable(_states_for(traj), actions, gamma, alphas, window, batch=len(alphas))
    learner = WindowedQLearner(q)
    nll = np.zeros((len(alphas), len(taus)))
    for step, term in zip(traj.steps, _terminal_flags(traj)):
        if step.reward is None:
            raise FitError("value models need rewards")
        row = q.row(step.state)  # (n_alpha, n_actions)
        logits = taus[None, :, None] * row[:, None, :]
        m = logits.max(axis=-1, keepdims=True)
        lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]
        nll -= logits[..., q.a_index[step.action]] - lse
        learner.observe(step.state, step.action, step.reward, step.next_state, term)
    return nll


def choice_probabilities(q_row: np.ndarray, tau: float) -> np.ndarray:
    z = tau * (q_row - np.max(q_row))
    e = np.exp(z)
    return e / e.sum()


def repetition_nll_grid(traj: TrajectoryLog, smoothings=SMOOTHING_GRID, actions=None) -> np.ndarray:
    actions = _actions_for(traj, actions)
    index = {a: i for i, a in enumerate(actions)}
    smoothings = np.asarray(smoothings, dtype=float)
    counts: dict = {}
    nll = np.zeros(len(smoothings))
    for step in traj.steps:
        c = counts.setdefault(step.state, np.zeros(len(actions)))
        a = index[step.action]
        p = (c[a] + smoothings) / (c.sum() + smoothings * len(actions))
        nll -= np.log(p)
        c[a] += 1
    return nll


def fit(model: str, trajectory: TrajectoryLog, actions=None, window: int | str = 1) -> FitResult:
    """Grid-search maximum-likelihood fit; ties break toward the smaller (alpha, tau)."""
    if model not in MODELS:
        raise FitError(f"unknown model {model!r}")
    n = len(trajectory.steps)
    if n == 0:
        raise FitError("trajectory has no decisions")
    if model == "chance":
        n_actions = len(_actions_for(trajectory, actions))
        return FitResult(model, {}, n * math.log(n_actions), n)
    if model == "repetition":
        grid = repetition_nll_grid(trajectory, actions=actions)
        i = int(np.argmin(grid))
        return FitResult(model, {"smoothing": float(SMOOTHING_GRID[i])}, float(grid[i]), n)
    gamma = 0.99 if model == "q_learning" else 0.0
    grid = value_model_nll_grid(trajectory, gamma, window=window, actions=actions)
    i, j = np.unravel_index(int(np.argmin(grid)), grid.shape)
    params = {"alpha": float(ALPHA_GRID[i]), "tau": float(TAU_GRID[j]), "gamma": gamma}
    return FitResult(model, params, float(grid[i, j]), n)


def evaluate(result: FitResult, trajectory: TrajectoryLog, actions=None, window: int | str = 1) -> float:
    """NLL of ``trajectory`` under already-fitted parameters."""
    if result.model == "chance":
        return len(trajectory.steps) * math.log(len(_actions_for(trajectory, actions)))
    if result.model == "repetition":
        return float(repetition_nll_grid(trajectory, [result.params["smoothing"]], actions)[0])
    grid = value_model_nll_grid(trajectory, result.params["gamma"], [result.params["alpha"]],
                                [result.params["tau"]], window, actions)
    return float(grid[0, 0])


def compare(traj: TrajectoryLog, models=("q_learning", "myopic", "repetition"),
            test: TrajectoryLog | None = None, information_criteria: bool = False,
            actions=None, window: int | str = 1) -> ReportTable:
    """Fit each model and tabulate NLLs in ascending order.

    With ``test`` the fitted parameters are also scored on held-out data.
    """
    if len(models) < 2:
        raise FitError("compare needs at least two models")
    cols = [("model", "string"), ("nll", "real"), ("n_choices", "int"),
            ("alpha", "real"), ("tau", "real"), ("smoothing", "real")]
    if test is not None:
        cols += [("train_nll", "real"), ("test_nll", "real")]
    if information_criteria:
        cols += [("aic", "real"), ("bic", "real")]
    table = ReportTable("behavior_fit", cols)
    results = [fit(m, traj, actions, window) for m in models]
    results.sort(key=lambda r: (r.nll, MODELS.index(r.model)))
    for r in results:
        row = [r.model, r.nll, r.n_choices, r.params.get("alpha"), r.params.get("tau"), r.params.get("smoothing")]
        if test is not None:
            row += [r.nll, evaluate(r, test, actions, window)]
        if information_criteria:
            row += [r.aic, r.bic]
        table.append(row)
    return table
