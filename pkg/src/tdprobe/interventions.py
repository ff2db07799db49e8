"""Lesion / clamp / reconstruction substitution of SAE latents and their measured effects."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .analysis import corr_matrix, max_corr_protocol
from .sae import SAEModel
from .store import ReportTable

ACTIONS = ("lesion", "clamp", "none")


class CapabilityError(RuntimeError):
    """The representation source cannot honour the requested intervention."""


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Edit:
    block: int
    latent: int
    action: str = "lesion"
    value: float | None = None

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise PlanError(f"unknown action {self.action!r}")
        if self.action == "clamp" and (self.value is None or not np.isfinite(self.value)):
            raise PlanError("clamp needs a finite value")
        if self.block < 0 or self.latent < 0:
            raise PlanError("block and latent must be >= 0")


@dataclass
class InterventionPlan:
    edits: list[Edit] = field(default_factory=list)
    substitute_reconstruction: bool = False
    reconstruct_blocks: list[int] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.edits:
            key = (e.block, e.latent)
            if key in seen:
                raise PlanError(f"more than one edit for block {e.block}, latent {e.latent}")
            seen.add(key)

    @property
    def blocks(self) -> list[int]:
        """Blocks whose representation is replaced."""
        out = {e.block for e in self.edits}
        if self.substitute_reconstruction:
            out |= set(self.reconstruct_blocks)
        return sorted(out)

    def edits_for(self, block: int) -> list[Edit]:
        return [e for e in self.edits if e.block == block]

    def to_json(self) -> dict:
        return {
            "edits": [{"block": e.block, "latent": e.latent, "action": e.action, "value": e.value} for e in self.edits],
            "substitute_reconstruction": self.substitute_reconstruction,
            "reconstruct_blocks": list(self.reconstruct_blocks),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InterventionPlan":
        edits = [Edit(int(e["block"]), int(e["latent"]), e.get("action", "lesion"), e.get("value")) for e in obj.get("edits", [])]
        return cls(edits, bool(obj.get("substitute_reconstruction", False)), [int(b) for b in obj.get("reconstruct_blocks", [])])

    @classmethod
    def load(cls, path) -> "InterventionPlan":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def edit_latents(a: np.ndarray, edits: Sequence[Edit], m: int) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    for e in edits:
        if e.latent >= m:
            raise PlanError(f"latent {e.latent} out of range for a {m}-latent SAE")
        if e.action == "lesion":
            a[..., e.latent] = 0.0
        elif e.action == "clamp":
            a[..., e.latent] = e.value
    return a


def apply_edit(model: SAEModel, h: np.ndarray, edits: Edit | Sequence[Edit] = (),
               substitute_reconstruction: bool = False) -> np.ndarray:
    """Encode the scaled representation, edit latents, decode and unscale.

    With no active edit and ``substitute_reconstruction=False`` the input is
    returned unchanged.
    """
    h = np.asarray(h, dtype=float)
    if not np.isfinite(h).all():
        raise ValueError("representation contains non-finite values")
    edits = [edits] if isinstance(edits, Edit) else list(edits)
    for e in edits:
        if e.latent >= model.m:
            raise PlanError(f"latent {e.latent} out of range for a {model.m}-latent SAE")
    active = [e for e in edits if e.action != "none"]
    if not active and not substitute_reconstruction:
        return h.copy()
    a = model.encode_raw(h)
    return model.decode_raw(edit_latents(a, active, model.m))


class RepresentationSource(Protocol):
    blocks: int
    propagates: bool

    def forward(self, x: np.ndarray, t: np.ndarray | None = None, substitute: dict | None = None): ...


class ReplaySource:
    """Pre-recorded per-block activations. Downstream blocks cannot be recomputed."""

    propagates = False

    def __init__(self, activations: Sequence[np.ndarray], logits: np.ndarray | None = None):
        self.activations = [np.asarray(a, dtype=float) for a in activations]
        self.logits = logits

    @property
    def blocks(self) -> int:
        return len(self.activations)

    def forward(self, x=None, t=None, substitute=None):
        t = np.arange(len(self.activations[0])) if t is None else np.asarray(t)
        acts = [a[t] for a in self.activations]
        for b, fn in (substitute or {}).items():
            acts[b] = fn(acts[b])
        return acts, None if self.logits is None else self.logits[t]


@dataclass
class RunLog:
    """Per-step outputs of a (possibly intervened) run."""

    activations: list[np.ndarray]
    logits: np.ndarray | None
    targets: np.ndarray | None = None

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)

    def probabilities(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def run_with_plan(source, plan: InterventionPlan, saes: dict[int, SAEModel], x: np.ndarray | None = None,
                  t: np.ndarray | None = None, targets: np.ndarray | None = None) -> RunLog:
    """Run ``source`` with the plan's substitutions applied at every step."""
    if any(b >= source.blocks for b in plan.blocks):
        raise PlanError(f"plan touches block {max(plan.blocks)}, source has {source.blocks}")
    if not source.propagates and any(b < source.blocks - 1 for b in plan.blocks):
        raise CapabilityError("replayed activations cannot propagate edits made before the final block")
    missing = [b for b in plan.blocks if b not in saes]
    if missing:
        raise PlanError(f"no SAE for blocks {missing}")
    substitute = {}
    for b in plan.blocks:
        model, edits = saes[b], plan.edits_for(b)
        substitute[b] = (lambda h, model=model, edits=edits:
                         apply_edit(model, h, edits, substitute_reconstruction=True))
    acts, logits = source.forward(x, t, substitute)
    return RunLog(acts, logits, targets)


# -- latent selection ------------------------------------------------------


def select_latents(latents: np.ndarray, signal: np.ndarray, n: int = 1, threshold: float | None = None):
    """``(top, control)``: highest-|r| latents (optionally with |r| >= threshold) and lowest-|r| ones."""
    r = corr_matrix(latents, np.asarray(signal).reshape(-1, 1))[:, 0]
    valid = np.flatnonzero(~np.isnan(r))
    if len(valid) == 0:
        raise ValueError("no latent with non-zero variance")
    order = valid[np.argsort(-np.abs(r[valid]), kind="stable")]
    top = order[:n]
    if threshold is not None:
        top = top[np.abs(r[top]) >= threshold]
    control = order[::-1][:n]
    return [int(i) for i in top], [int(i) for i in control], r


# -- effects ----------------------------------------------------------------

METRICS = ("nll_vs_model", "action_accuracy", "next_state_accuracy", "downstream_max_corr")


def _per_step(log: RunLog, metric: str) -> np.ndarray:
    if log.targets is None:
        raise ValueError(f"{metric} needs targets")
    if metric == "nll_vs_model":
        p = log.probabilities()
        return -np.log(np.maximum(p[np.arange(len(p)), log.targets], 1e-300))
    return (log.predictions == log.targets).astype(float)


def measure_effect(baseline: RunLog, intervened: RunLog, metric: str, n_perm: int = 1000, seed: int = 0,
                   sae: SAEModel | None = None, block: int | None = None, signal: np.ndarray | None = None,
                   level: float = 0.95) -> ReportTable:
    """Baseline vs intervened value of ``metric``, with a paired permutation band for the delta.

    The null swaps the two conditions step by step. ``downstream_max_corr``
    needs the ``sae`` of ``block`` and the reference ``signal``.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    n = len(baseline.activations[0])
    if len(intervened.activations[0]) != n:
        raise ValueError("logs are not aligned")
    rng = np.random.default_rng(seed)
    if metric == "downstream_max_corr":
        if sae is None or block is None or signal is None:
            raise ValueError("downstream_max_corr needs sae, block and signal")
        A0 = sae.encode_raw(baseline.activations[block])
        A1 = sae.encode_raw(intervened.activations[block])
        stat = lambda A: max_corr_protocol(A, signal).value  # noqa: E731
        v0, v1 = stat(A0), stat(A1)
        null = np.empty(n_perm)
        for i in range(n_perm):
            swap = rng.random(n) < 0.5
            null[i] = stat(np.where(swap[:, None], A0, A1)) - stat(np.where(swap[:, None], A1, A0))
    else:
        if not np.array_equal(baseline.targets, intervened.targets):
            raise ValueError("logs have different targets")
        s0, s1 = _per_step(baseline, metric), _per_step(intervened, metric)
        v0, v1 = float(s0.mean()), float(s1.mean())
        diff = s1 - s0
        signs = np.where(rng.random((n_perm, n)) < 0.5, -1.0, 1.0)
        null = signs @ diff / n
    lo, hi = np.quantile(null, [(1 - level) / 2, 1 - (1 - level) / 2])
    table = ReportTable("effects", [("metric", "string"), ("baseline", "real"), ("intervened", "real"),
                                    ("delta", "real"), ("null_lo", "real"), ("null_hi", "real"),
                                    ("significant", "int")])
    delta = v1 - v0
    tol = 1e-12 * max(1.0, abs(v0))
    table.append([metric, v0, v1, delta, float(lo), float(hi), int(delta < lo - tol or delta > hi + tol)])
    return table


def reconstruction_budget(stack, clean: RunLog, block: int, reconstructed: np.ndarray) -> float:
    """Upper bound on the fraction of predictions a reconstruction at ``block`` can flip.

    Every nonlinearity of the stack is 1-Lipschitz, so the perturbation of the
    readout block is at most ``prod ||A_k||_2 * ||h - h~||``. A step can only
    change its argmax if its logit margin is within that bound times the
    largest pairwise distance between readout rows.
    """
    if stack.readout is None or clean.logits is None:
        raise ValueError("the source has no readout")
    if block > stack.readout_block:
        return 0.0
    lip = 1.0
    for A, _ in stack.affines[block:stack.readout_block]:
        lip *= float(np.linalg.norm(A, 2))
    R = stack.readout
    spread = max(float(np.linalg.norm(R[i] - R[j])) for i in range(len(R)) for j in range(len(R)))
    err = np.linalg.norm(np.asarray(reconstructed) - clean.activations[block], axis=1)
    top2 = np.sort(clean.logits, axis=1)[:, -2:]
    margin = top2[:, 1] - top2[:, 0]
    return float(np.mean(margin <= lip * spread * err))
