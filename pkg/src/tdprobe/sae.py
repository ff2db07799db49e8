"""Sparse autoencoder: input scaling, squared-L1 objective, Adam training, persistence.

    a  = relu(W_enc h + b_enc)
    h~ = W_dec a + b_dec
    L  = mean_batch( ||h - h~||^2 + beta * (sum_j a_j)^2 )

Inputs are first rescaled so that the mean row norm equals sqrt(d); the
inverse transform maps reconstructions back to the original space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import store

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: "SAEModel | None" = None, epoch: int = -1):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


@dataclass
class ScalingTransform:
    mean_row_norm: float
    d: int

    def __post_init__(self):
        if not self.mean_row_norm > 0:
            raise ValueError("mean_row_norm must be > 0")

    @property
    def factor(self) -> float:
        return math.sqrt(self.d) / self.mean_row_norm

    def apply(self, h: np.ndarray) -> np.ndarray:
        return np.asarray(h, dtype=float) * self.factor

    def inverse(self, h: np.ndarray) -> np.ndarray:
        return np.asarray(h, dtype=float) / self.factor


def fit_scaling(H: np.ndarray) -> ScalingTransform:
    H = np.atleast_2d(np.asarray(H, dtype=float))
    norms = np.linalg.norm(H, axis=1)
    if len(H) == 0 or not norms.any():
        raise ValueError("cannot scale an all-zero (or empty) matrix")
    return ScalingTransform(float(norms.mean()), H.shape[1])


@dataclass
class SAETrainConfig:
    beta: float = 1e-5
    lr: float = 1e-4
    batch: int = 256
    epochs: int = 30
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle: bool = True
    latent_dim: int | None = None
    l1_unsquared: bool = False
    scale_inputs: bool = True

    def __post_init__(self):
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


def latent_width(task: str, d: int) -> int:
    """2d for the Two-Step and Grid World tasks, d for the graph task."""
    return d if task == "graph" else 2 * d


@dataclass
class SAEModel:
    W_enc: np.ndarray
    b_enc: np.ndarray
    W_dec: np.ndarray
    b_dec: np.ndarray
    scale: ScalingTransform | None = None
    config: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.W_dec.shape[0]

    @property
    def m(self) -> int:
        return self.W_enc.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"W_enc": self.W_enc, "b_enc": self.b_enc, "W_dec": self.W_dec, "b_dec": self.b_dec}

    def copy(self) -> "SAEModel":
        return SAEModel(self.W_enc.copy(), self.b_enc.copy(), self.W_dec.copy(), self.b_dec.copy(),
                        self.scale, dict(self.config), list(self.loss_history))

    # Operate in the scaled space; see encode_raw / reconstruct_raw for the original space.
    def encode(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        if h.shape[-1] != self.d:
            raise ValueError(f"input has dim {h.shape[-1]}, model expects {self.d}")
        return np.maximum(h @ self.W_enc.T + self.b_enc, 0.0)

    def decode(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if a.shape[-1] != self.m:
            raise ValueError(f"latent has dim {a.shape[-1]}, model expects {self.m}")
        return a @ self.W_dec.T + self.b_dec

    def reconstruct(self, h: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(h))

    def _scale(self) -> ScalingTransform:
        return self.scale if self.scale is not None else ScalingTransform(math.sqrt(self.d), self.d)

    def encode_raw(self, h: np.ndarray) -> np.ndarray:
        return self.encode(self._scale().apply(h))

    def decode_raw(self, a: np.ndarray) -> np.ndarray:
        return self._scale().inverse(self.decode(a))

    def reconstruct_raw(self, h: np.ndarray) -> np.ndarray:
        return self.decode_raw(self.encode_raw(h))


def init_model(d: int, m: int, seed: int = 0) -> SAEModel:
    """Unit-norm random decoder columns, tied encoder init, zero biases."""
    rng = np.random.default_rng(seed)
    W_dec = rng.standard_normal((d, m))
    W_dec /= np.linalg.norm(W_dec, axis=0, keepdims=True)
    return SAEModel(W_dec.T.copy(), np.zeros(m), W_dec, np.zeros(d))


def sae_loss(model: SAEModel, h_batch: np.ndarray, beta: float, l1_unsquared: bool = False):
    """Returns ``(total, recon_mse, sparsity)``, each averaged over the batch."""
    h = np.atleast_2d(np.asarray(h_batch, dtype=float))
    if len(h) == 0:
        raise ValueError("empty batch")
    a = model.encode(h)
    resid = model.decode(a) - h
    recon = float(np.mean(np.sum(resid**2, axis=1)))
    l1 = a.sum(axis=1)
    sparsity = float(np.mean(l1 if l1_unsquared else l1**2))
    return recon + beta * sparsity, recon, sparsity


def sae_grad(model: SAEModel, h_batch: np.ndarray, beta: float, l1_unsquared: bool = False):
    """Loss and analytic gradients with respect to every parameter."""
    h = np.atleast_2d(np.asarray(h_batch, dtype=float))
    n = len(h)
    pre = h @ model.W_enc.T + model.b_enc
    a = np.maximum(pre, 0.0)
    resid = a @ model.W_dec.T + model.b_dec - h
    l1 = a.sum(axis=1)
    recon = np.sum(resid**2) / n
    sparsity = (l1.sum() if l1_unsquared else np.sum(l1**2)) / n
    g_out = (2.0 / n) * resid
    g_a = g_out @ model.W_dec
    g_a += (beta / n) if l1_unsquared else ((2.0 * beta / n) * l1)[:, None]
    g_pre = g_a * (pre > 0)
    grads = {
        "W_enc": g_pre.T @ h,
        "b_enc": g_pre.sum(axis=0),
        "W_dec": g_out.T @ a,
        "b_dec": g_out.sum(axis=0),
    }
    return recon + beta * sparsity, grads


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(H: np.ndarray, cfg: SAETrainConfig | None = None, task: str = "two_step") -> SAEModel:
    """Fit an SAE on the rows of ``H``. Deterministic for a given ``cfg.seed``.

    ``model.loss_history`` holds the mean minibatch loss of every epoch. A
    non-finite loss raises :class:`TrainingDiverged` carrying the model from
    the end of the last finite epoch.
    """
    cfg = cfg or SAETrainConfig()
    H = np.asarray(H, dtype=float)
    if H.ndim != 2:
        raise ValueError("H must be a matrix")
    if not np.isfinite(H).all():
        raise ValueError("H contains non-finite values")
    n, d = H.shape
    m = cfg.latent_dim or latent_width(task, d)
    scale = fit_scaling(H) if cfg.scale_inputs else None
    X = scale.apply(H) if scale else H
    model = init_model(d, m, cfg.seed)
    model.scale = scale
    model.config = asdict(cfg) | {"latent_dim": m}
    params = model.params()
    opt = Adam(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed + 1)
    last_good = model.copy()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total, batches = 0.0, 0
        for lo in range(0, n, cfg.batch):
            batch = X[order[lo:lo + cfg.batch]]
            loss, grads = sae_grad(model, batch, cfg.beta, cfg.l1_unsquared)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", last_good, epoch)
            opt.step(params, grads)
            total += loss
            batches += 1
        model.loss_history.append(total / batches)
        log.debug("epoch %d loss %.6g", epoch, total / batches)
        last_good = model.copy()
    return model


def l0_profile(model: SAEModel, H: np.ndarray, raw: bool = True, tol: float = 1e-12) -> int:
    """Number of latents whose activation variance over ``H`` exceeds ``tol``."""
    a = model.encode_raw(H) if raw else model.encode(H)
    return int(np.sum(a.var(axis=0) > tol))


def save_model(path, model: SAEModel) -> None:
    meta = {
        "kind": "sae",
        "d": model.d,
        "m": model.m,
        "scale": None if model.scale is None else {"mean_row_norm": model.scale.mean_row_norm, "d": model.scale.d},
        "config": model.config,
        "loss_history": [float(x) for x in model.loss_history],
    }
    store.write_arrays(path, model.params(), meta)


def load_model(path) -> SAEModel:
    arrays, meta = store.read_arrays(path)
    if meta.get("kind") != "sae":
        raise store.HeaderError(f"{path}: not an SAE model file")
    scale = ScalingTransform(**meta["scale"]) if meta.get("scale") else None
    return SAEModel(arrays["W_enc"], arrays["b_enc"], arrays["W_dec"], arrays["b_dec"], scale,
                    meta.get("config", {}), meta.get("loss_history", []))
