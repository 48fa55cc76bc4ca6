"""Key-routed classifier bank and voting layer.

An ensemble holds N single-layer classifiers, each paired with a unit-norm
key vector. For an input embedding, cosine distances to the keys are turned
into selection scores (soft scores from the transport relaxation, or an
exact top-k indicator in hard mode), every classifier produces a
tanh-activated prediction, and the voting layer blends the predictions
weighted by both the selection score and the key distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import as_matrix, as_vector, make_rng
from .soft_knn import (
    SoftKnnBatch,
    SoftKnnConfig,
    SoftKnnResult,
    cosine_distances_batch,
    hard_topk_batch,
    sinkhorn_forward_batch,
)

__all__ = [
    "EnsembleConfig",
    "EnsembleState",
    "ForwardTrace",
    "BatchForward",
    "EPS_DIV",
    "init_ensemble",
    "classifier_forward",
    "vote",
    "forward",
    "forward_batch",
    "predict_label",
]

# Guards the all-zero-weight denominator in the vote.
EPS_DIV = 1e-12

MODES = ("soft", "hard")
WEIGHTINGS = ("distance", "similarity")


@dataclass(frozen=True)
class EnsembleConfig:
    n_classifiers: int
    embed_dim: int
    n_classes: int
    soft_knn: SoftKnnConfig
    mode: str = "soft"
    vote_weighting: str = "distance"
    tanh_scale: float = 250.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classifiers < 1:
            raise ConfigError(
                f"n_classifiers must be >= 1, got {self.n_classifiers}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.n_classes < 1:
            raise ConfigError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.soft_knn.kappa > self.n_classifiers:
            raise ConfigError(
                f"kappa ({self.soft_knn.kappa}) exceeds n_classifiers "
                f"({self.n_classifiers})")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.vote_weighting not in WEIGHTINGS:
            raise ConfigError(
                f"vote_weighting must be one of {WEIGHTINGS}, "
                f"got {self.vote_weighting!r}")
        if self.tanh_scale <= 0.0:
            raise ConfigError(
                f"tanh_scale must be > 0, got {self.tanh_scale}")


@dataclass
class EnsembleState:
    """Mutable parameters: keys (N, M), weights (N, K, M), biases (N, K)."""

    keys: np.ndarray
    weights: np.ndarray
    biases: np.ndarray

    def copy(self) -> "EnsembleState":
        return EnsembleState(self.keys.copy(), self.weights.copy(),
                             self.biases.copy())

    @property
    def n_classifiers(self) -> int:
        return self.keys.shape[0]


@dataclass(frozen=True)
class ForwardTrace:
    """Everything the backward pass needs about one forward evaluation."""

    z: np.ndarray
    knn: SoftKnnResult
    logits: np.ndarray        # (N, K)
    activations: np.ndarray   # (N, K)
    prediction: np.ndarray    # (K,)
    vote_weights: np.ndarray  # (N,)
    vote_denominator: float


@dataclass(frozen=True)
class BatchForward:
    """Batched forward results; leading axis is the batch."""

    z: np.ndarray             # (B, M) raw inputs
    z_unit: np.ndarray        # (B, M) normalized for the key lookup
    knn: SoftKnnBatch
    logits: np.ndarray        # (B, N, K)
    activations: np.ndarray   # (B, N, K)
    predictions: np.ndarray   # (B, K)
    vote_weights: np.ndarray  # (B, N)
    vote_denominators: np.ndarray  # (B,)


def init_ensemble(cfg: EnsembleConfig) -> EnsembleState:
    """Fresh parameters, deterministic in cfg.seed.

    Keys are standard normal rows scaled to unit norm; classifier weights
    use fan-in scaling (variance 1/M); biases start at zero. Keys are drawn
    before weights, so the stream layout is part of the reproducibility
    contract.
    """
    rng = make_rng(cfg.seed)
    n, m, k = cfg.n_classifiers, cfg.embed_dim, cfg.n_classes
    keys = rng.standard_normal((n, m))
    keys /= np.linalg.norm(keys, axis=1)[:, None]
    weights = rng.standard_normal((n, k, m)) / np.sqrt(m)
    biases = np.zeros((n, k))
    return EnsembleState(keys=keys, weights=weights, biases=biases)


def classifier_forward(state: EnsembleState, n: int, z,
                       tanh_scale: float = 250.0) -> tuple[np.ndarray, np.ndarray]:
    """Logit W_n z + b_n and its tanh activation for classifier *n*.

    The logit is divided by ``tanh_scale`` before activation, acting as a
    temperature that keeps outputs in the responsive region.
    """
    if not 0 <= n < state.n_classifiers:
        raise IndexError(f"classifier index {n} out of range "
                         f"[0, {state.n_classifiers})")
    zv = as_vector(z, "z")
    if zv.shape[0] != state.weights.shape[2]:
        raise ValueError(
            f"dimension mismatch: z has length {zv.shape[0]}, "
            f"classifier expects {state.weights.shape[2]}")
    logit = state.weights[n] @ zv + state.biases[n]
    return logit, np.tanh(logit / tanh_scale)


def vote(knn: SoftKnnResult, activations, weighting: str = "distance") -> np.ndarray:
    """Blend classifier activations into one prediction.

    Each classifier contributes gamma_n * w_n * activation_n, where w_n is
    the raw cosine distance c_n (``distance``) or 1 - c_n clamped at zero
    (``similarity``); the total is divided by the sum of w_n over all
    classifiers plus a small epsilon.
    """
    acts = as_matrix(activations, rows=knn.c.shape[0], name="activations")
    w = _vote_weights(knn.c, weighting)
    return _blend(knn.gamma[None, :], w[None, :], acts[None, :, :])[0]


def _vote_weights(c: np.ndarray, weighting: str) -> np.ndarray:
    if weighting == "distance":
        return c.copy()
    if weighting == "similarity":
        return np.clip(1.0 - c, 0.0, None)
    raise ConfigError(f"vote_weighting must be one of {WEIGHTINGS}, "
                      f"got {weighting!r}")


def _blend(gamma: np.ndarray, w: np.ndarray, acts: np.ndarray) -> np.ndarray:
    denom = w.sum(axis=1) + EPS_DIV
    return np.einsum("bn,bnk->bk", gamma * w, acts) / denom[:, None]


def forward_batch(state: EnsembleState, cfg: EnsembleConfig, Z: np.ndarray,
                  keep_tape: bool = False) -> BatchForward:
    """Evaluate the full ensemble on a (B, M) batch of embeddings.

    Inputs are L2-normalized for the key lookup only; classifiers consume
    the raw embeddings. In hard mode the selection scores are the exact 0/1
    top-k indicator and both the weights and the vote denominator are
    restricted to the selected classifiers.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != cfg.embed_dim:
        raise ValueError(f"batch must have shape (B, {cfg.embed_dim}), "
                         f"got {Z.shape}")
    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("degenerate vector: zero norm")
    z_unit = Z / norms[:, None]

    C = cosine_distances_batch(Z, state.keys)
    if cfg.mode == "soft":
        knn = sinkhorn_forward_batch(C, cfg.soft_knn, keep_tape=keep_tape)
        w = _vote_weights_batch(C, cfg.vote_weighting)
    else:
        indicator = hard_topk_batch(C, cfg.soft_knn.kappa)
        knn = SoftKnnBatch(c=C, gamma=indicator, gamma_raw=indicator.copy(),
                           tape=None)
        w = np.clip(1.0 - C, 0.0, None) * indicator

    logits = np.einsum("bm,nkm->bnk", Z, state.weights) + state.biases[None]
    acts = np.tanh(logits / cfg.tanh_scale)
    denoms = w.sum(axis=1) + EPS_DIV
    preds = np.einsum("bn,bnk->bk", knn.gamma * w, acts) / denoms[:, None]

    return BatchForward(z=Z, z_unit=z_unit, knn=knn, logits=logits,
                        activations=acts, predictions=preds,
                        vote_weights=w, vote_denominators=denoms)


def _vote_weights_batch(C: np.ndarray, weighting: str) -> np.ndarray:
    if weighting == "distance":
        return C.copy()
    return np.clip(1.0 - C, 0.0, None)


def forward(state: EnsembleState, cfg: EnsembleConfig, z) -> ForwardTrace:
    """Single-example forward pass; see ``forward_batch``."""
    zv = as_vector(z, "z")
    bf = forward_batch(state, cfg, zv[None, :], keep_tape=True)
    knn = SoftKnnResult(c=bf.knn.c[0], gamma=bf.knn.gamma[0],
                        gamma_raw=bf.knn.gamma_raw[0], tape=bf.knn.tape)
    return ForwardTrace(z=zv, knn=knn, logits=bf.logits[0],
                        activations=bf.activations[0],
                        prediction=bf.predictions[0],
                        vote_weights=bf.vote_weights[0],
                        vote_denominator=float(bf.vote_denominators[0]))


def predict_label(prediction) -> int:
    """Class with the highest voting score; ties go to the lowest index."""
    return int(np.argmax(as_vector(prediction, "prediction")))
