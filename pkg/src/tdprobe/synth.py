"""Planted-feature activation generator and the multi-block synthetic stack.

Each generated row is a sparse combination of dictionary atoms::

    row_t = sum_k z_k(t) atom_k + sum_j c_j(t) atom_j + noise

where ``z_k`` are standardised planted signals and ``c_j`` non-negative
distractor coefficients. The exact coefficient matrix is returned so the
generation can be checked against its own oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass
class PlantSpec:
    d: int = 256
    n_atoms: int = 512
    n_distractors: int = 50
    distractor_sparsity: float = 5.0
    noise_std: float = 0.1
    max_cos: float = 0.3
    seed: int = 0
    dictionary: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.n_distractors > self.n_atoms:
            raise ValueError("more distractors than atoms")
        if self.dictionary is None:
            self.dictionary = make_dictionary(self.n_atoms, self.d, self.seed)
        if self.dictionary.shape != (self.n_atoms, self.d):
            raise ValueError(f"dictionary shape {self.dictionary.shape} != ({self.n_atoms}, {self.d})")


def make_dictionary(n_atoms: int, d: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((n_atoms, d))
    return D / np.linalg.norm(D, axis=1, keepdims=True)


def _orthogonalise_planted(D: np.ndarray, k: int, max_cos: float, rng: np.random.Generator) -> np.ndarray:
    """Resample planted atoms until every pair among the first ``k`` has |cos| <= max_cos."""
    D = D.copy()
    for i in range(k):
        for _ in range(1000):
            cos = np.abs(D[:i] @ D[i]) if i else np.zeros(0)
            if (cos <= max_cos).all():
                break
            v = rng.standard_normal(D.shape[1])
            D[i] = v / np.linalg.norm(v)
        else:
            raise ValueError(f"could not place {k} atoms with |cos| <= {max_cos} in {D.shape[1]} dims")
    return D


def standardize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    sd = x.std()
    if sd < 1e-12:
        raise ValueError("cannot standardize a constant signal")
    return (x - x.mean()) / sd


def generate(spec: PlantSpec, signals: Sequence[np.ndarray], n_steps: int | None = None):
    """Return ``(H, coeffs, info)``.

    ``coeffs`` is ``n_steps x n_atoms``: planted signal ``k`` sits on atom ``k``,
    distractors on atoms ``len(signals) .. len(signals) + n_distractors - 1``.
    ``H = coeffs @ dictionary + noise`` exactly.
    """
    signals = [np.asarray(s, dtype=float).ravel() for s in signals]
    lengths = {len(s) for s in signals}
    if len(lengths) > 1:
        raise ValueError(f"signals have different lengths {sorted(lengths)}")
    if signals:
        n = lengths.pop()
        if n_steps is not None and n_steps != n:
            raise ValueError("n_steps disagrees with signal length")
    elif n_steps is None:
        raise ValueError("n_steps is required when no signals are planted")
    else:
        n = n_steps
    k = len(signals)
    if k + spec.n_distractors > spec.n_atoms:
        raise ValueError(f"{k} planted + {spec.n_distractors} distractors exceed {spec.n_atoms} atoms")
    rng = np.random.default_rng(spec.seed + 7919)
    D = _orthogonalise_planted(spec.dictionary, k, spec.max_cos, rng)
    coeffs = np.zeros((n, spec.n_atoms))
    for i, s in enumerate(signals):
        coeffs[:, i] = standardize(s)
    if spec.n_distractors:
        p = min(1.0, spec.distractor_sparsity / spec.n_distractors)
        active = rng.random((n, spec.n_distractors)) < p
        mags = np.abs(rng.standard_normal((n, spec.n_distractors)))
        coeffs[:, k:k + spec.n_distractors] = active * mags
    H = coeffs @ D
    if spec.noise_std > 0:
        H = H + spec.noise_std * rng.standard_normal(H.shape)
    info = {"planted_atoms": list(range(k)),
            "distractor_atoms": list(range(k, k + spec.n_distractors)),
            "dictionary": D}
    return H, coeffs, info


# -- synthetic stack -------------------------------------------------------

NONLINEARITIES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda x: x,
    "tanh": lambda x: 3.0 * np.tanh(x / 3.0),
    "relu": lambda x: np.maximum(x, 0.0),
}


@dataclass
class Injection:
    """Adds ``signal[t] @ atoms`` to the output of ``block``."""

    block: int
    atoms: np.ndarray  # (w, d)
    signal: np.ndarray  # (n_steps, w)
    name: str = ""

    def __post_init__(self):
        self.atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        self.signal = np.asarray(self.signal, dtype=float).reshape(len(self.signal), -1)
        if self.signal.shape[1] != self.atoms.shape[0]:
            raise ValueError("signal width does not match number of atoms")


class SyntheticStack:
    """Deterministic block stack: ``h_b = f(A_b h_{b-1} + c_b) + injections_b``.

    Block 0 is the (injected) input. A readout maps the last block (or
    ``readout_block``) to logits. Any block's vector can be substituted before
    later blocks are computed.
    """

    propagates = True

    def __init__(self, affines: Sequence[tuple[np.ndarray, np.ndarray]], injections: Sequence[Injection] = (),
                 nonlinearity: str = "tanh", readout: np.ndarray | None = None,
                 readout_bias: np.ndarray | None = None, readout_block: int | None = None):
        self.affines = [(np.asarray(A, dtype=float), np.asarray(c, dtype=float)) for A, c in affines]
        dims = {A.shape for A, _ in self.affines}
        if len(dims) > 1 or any(A.shape[0] != A.shape[1] for A, _ in self.affines):
            raise ValueError("all affine maps must be square with one shared dimension")
        self.d = self.affines[0][0].shape[0] if self.affines else None
        self.injections = list(injections)
        for inj in self.injections:
            if not 0 <= inj.block < self.blocks:
                raise ValueError(f"injection into block {inj.block} outside 0..{self.blocks - 1}")
        self.nonlinearity = nonlinearity
        self._f = NONLINEARITIES[nonlinearity]
        self.readout = None if readout is None else np.atleast_2d(np.asarray(readout, dtype=float))
        self.readout_bias = readout_bias
        self.readout_block = self.blocks - 1 if readout_block is None else readout_block

    @property
    def blocks(self) -> int:
        return len(self.affines) + 1

    def _inject(self, b: int, h: np.ndarray, t: np.ndarray) -> np.ndarray:
        for inj in self.injections:
            if inj.block == b:
                h = h + inj.signal[t] @ inj.atoms
        return h

    def forward(self, x: np.ndarray, t: np.ndarray | None = None, substitute: dict | None = None):
        """Run all blocks for a batch of inputs ``x`` (n x d) at step indices ``t``.

        ``substitute`` maps block index to a callable ``h -> h'`` applied to
        that block's output before the next block sees it. Returns
        ``(per_block_activations, logits)``.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.arange(len(x)) if t is None else np.asarray(t)
        substitute = substitute or {}
        h = self._inject(0, x, t)
        if 0 in substitute:
            h = substitute[0](h)
        acts = [h]
        for b, (A, c) in enumerate(self.affines, start=1):
            h = self._f(h @ A.T + c)
            h = self._inject(b, h, t)
            if b in substitute:
                h = substitute[b](h)
            acts.append(h)
        logits = None
        if self.readout is not None:
            logits = acts[self.readout_block] @ self.readout.T
            if self.readout_bias is not None:
                logits = logits + self.readout_bias
        return acts, logits


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def build_synthetic_stack(n_blocks: int, d: int, injections: Sequence[Injection] = (), nonlinearity: str = "tanh",
                          seed: int = 0, identity: bool = False, readout: np.ndarray | None = None,
                          readout_bias: np.ndarray | None = None) -> SyntheticStack:
    """Stack of ``n_blocks`` blocks whose maps are random rotations (or identities)."""
    if n_blocks < 1:
        raise ValueError("need at least one block")
    rng = np.random.default_rng(seed)
    affines = []
    for _ in range(n_blocks - 1):
        A = np.eye(d) if identity else random_rotation(d, rng)
        affines.append((A, np.zeros(d)))
    if not affines:
        raise ValueError("a stack needs at least two blocks")
    return SyntheticStack(affines, injections, nonlinearity, readout, readout_bias)


def propagate_direction(stack: SyntheticStack, u: np.ndarray, from_block: int, to_block: int) -> np.ndarray:
    """Push a direction through the linear parts of blocks ``from_block+1 .. to_block``."""
    v = np.asarray(u, dtype=float)
    for b in range(from_block + 1, to_block + 1):
        v = stack.affines[b - 1][0] @ v
    return v


def generate_blocks(spec: PlantSpec, signals: Sequence[np.ndarray], n_blocks: int = 1, inject_block: int = 0,
                    nonlinearity: str = "tanh", n_steps: int | None = None):
    """Per-block activations with the planted signals entering at ``inject_block``.

    With one block this is :func:`generate`. Otherwise block 0 carries
    distractors and noise only, the planted atoms are injected at
    ``inject_block`` and every later block is a rotation of the previous one.
    Returns ``(blocks, coeffs, info)``; ``coeffs`` describes the injected
    block's planted and distractor content before rotation.
    """
    if n_blocks == 1:
        H, coeffs, info = generate(spec, signals, n_steps)
        return [H], coeffs, info
    if not 0 <= inject_block < n_blocks:
        raise ValueError(f"inject_block {inject_block} outside 0..{n_blocks - 1}")
    signals = [np.asarray(s, dtype=float).ravel() for s in signals]
    n = len(signals[0]) if signals else n_steps
    X, coeffs, info = generate(spec, [], n_steps=n)
    k = len(signals)
    if k:
        if k + spec.n_distractors > spec.n_atoms:
            raise ValueError(f"{k} planted + {spec.n_distractors} distractors exceed {spec.n_atoms} atoms")
        # planted atoms live after the distractors so the distractor draw is unchanged
        D = info["dictionary"]
        rng = np.random.default_rng(spec.seed + 104729)
        atoms = _orthogonalise_planted(D[spec.n_distractors:spec.n_distractors + k], k, spec.max_cos, rng)
        Z = np.stack([standardize(s) for s in signals], axis=1)
        injections = [Injection(inject_block, atoms, Z, "planted")]
        planted = list(range(spec.n_distractors, spec.n_distractors + k))
        coeffs = coeffs.copy()
        coeffs[:, planted] = Z
    else:
        injections, planted = [], []
    stack = build_synthetic_stack(n_blocks, spec.d, injections, nonlinearity, seed=spec.seed)
    blocks, _ = stack.forward(X)
    info = dict(info, planted_atoms=planted, distractor_atoms=list(range(spec.n_distractors)))
    return blocks, coeffs, info


@dataclass
class ProbeScenario:
    """A stack with one signal injected along ``direction`` and a readout that thresholds it downstream."""

    stack: SyntheticStack
    inputs: np.ndarray
    signal: np.ndarray
    targets: np.ndarray
    direction: np.ndarray
    inject_block: int


def build_probe_scenario(signal: np.ndarray, d: int = 32, n_blocks: int = 4, inject_block: int = 1,
                         n_distractors: int = 20, distractor_sparsity: float = 3.0, noise_std: float = 0.05,
                         nonlinearity: str = "tanh", seed: int = 0, quantile: float = 0.75) -> ProbeScenario:
    """Inject a non-negative signal at ``inject_block`` of a rotation stack over sparse distractor inputs.

    The injection direction is orthogonal to every distractor atom, so the
    signal is the only thing living along it. The readout compares the
    downstream projection on the propagated direction against a threshold that
    separates steps above and below the ``quantile`` of the signal; targets
    are that split.
    """
    s = np.asarray(signal, dtype=float).ravel()
    if (s < 0).any():
        raise ValueError("the injected signal must be non-negative; shift it first")
    if not 0 <= inject_block < n_blocks - 1:
        raise ValueError("inject_block must leave at least one downstream block")
    n = len(s)
    spec = PlantSpec(d=d, n_atoms=max(2 * d, n_distractors), n_distractors=n_distractors,
                     distractor_sparsity=distractor_sparsity, noise_std=noise_std, seed=seed)
    X, _, info = generate(spec, [], n_steps=n)
    rng = np.random.default_rng(seed + 100)
    u = rng.standard_normal(d)
    if n_distractors:
        Q, _ = np.linalg.qr(info["dictionary"][info["distractor_atoms"]].T)
        u -= Q @ (Q.T @ u)
    u /= np.linalg.norm(u)
    amp = s / s.std()
    stack = build_synthetic_stack(n_blocks, d, [Injection(inject_block, u[None], amp[:, None], "signal")],
                                  nonlinearity, seed=seed)
    w = propagate_direction(stack, u, inject_block, n_blocks - 1)
    acts, _ = stack.forward(X)
    proj = acts[-1] @ w
    cut = np.quantile(amp, quantile)
    targets = (amp > cut).astype(int)
    thr = 0.5 * (np.median(proj[targets == 0]) + np.median(proj[targets == 1]))
    stack.readout = np.stack([np.zeros(d), w])
    stack.readout_bias = np.array([0.0, -thr])
    return ProbeScenario(stack, X, s, targets, u, inject_block)
