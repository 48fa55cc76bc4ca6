"""Loss, hand-written backward pass, and the optimizers.

The loss is the negated inner product of the one-hot label with the vote
output, so its gradient only ever touches the label's row of each selected
classifier. Classifier parameters are updated with a sign step: the
gradient's magnitude is discarded and every touched parameter moves by a
fixed amount. Selection scores act as an update mask: classifiers whose
score is zero for every example in the batch are left strictly untouched,
weight decay included.

Key training is optional. Gradients then continue through the selection
scores (reverse mode through the transport iterations) and through the
distance weights of the vote into the keys, which are updated with Adam and
re-projected to the unit sphere. The projection is maintenance, not part of
the differentiated graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ensemble import (
    BatchForward,
    EnsembleConfig,
    EnsembleState,
    ForwardTrace,
    forward_batch,
)
from .errors import ConfigError
from .soft_knn import SoftKnnBatch, sinkhorn_backward_batch

__all__ = [
    "TrainConfig",
    "GradientSet",
    "AdamState",
    "loss",
    "one_hot",
    "backward",
    "backward_batch",
    "sign_step",
    "adam_key_step",
    "train_batch",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 10
    train_keys: bool = False
    key_lr: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate <= 0.0:
            raise ConfigError(
                f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.weight_decay < 1.0:
            raise ConfigError(
                f"weight_decay must lie in [0, 1), got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.key_lr <= 0.0:
            raise ConfigError(f"key_lr must be > 0, got {self.key_lr}")


@dataclass
class GradientSet:
    """Gradients for the classifiers selected by the batch, plus keys.

    ``weight_grads`` / ``bias_grads`` only hold entries for classifiers with
    a nonzero selection score somewhere in the batch; ``key_grads`` covers
    all keys (distances enter the vote denominator for every classifier) and
    is None unless key training is on.
    """

    weight_grads: dict[int, np.ndarray] = field(default_factory=dict)
    bias_grads: dict[int, np.ndarray] = field(default_factory=dict)
    key_grads: np.ndarray | None = None


@dataclass
class AdamState:
    """First/second moment accumulators for the keys and a step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n_classifiers: int, embed_dim: int) -> "AdamState":
        return cls(m=np.zeros((n_classifiers, embed_dim)),
                   v=np.zeros((n_classifiers, embed_dim)))


def one_hot(label: int, n_classes: int) -> np.ndarray:
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} out of range [0, {n_classes})")
    y = np.zeros(n_classes)
    y[label] = 1.0
    return y


def _check_one_hot(y: np.ndarray) -> None:
    if y.ndim != 1 or not np.all((y == 0.0) | (y == 1.0)) or y.sum() != 1.0:
        raise ValueError("label must be one-hot")


def loss(y, y_hat) -> float:
    """Negated inner product of the one-hot label with the prediction."""
    ya = np.asarray(y, dtype=np.float64)
    _check_one_hot(ya)
    yh = np.asarray(y_hat, dtype=np.float64)
    if yh.shape != ya.shape:
        raise ValueError(f"shape mismatch: {ya.shape} vs {yh.shape}")
    return float(-(ya @ yh))


def backward_batch(bf: BatchForward, state: EnsembleState,
                   cfg: EnsembleConfig, Y: np.ndarray,
                   train_keys: bool = False) -> GradientSet:
    """Mean-over-batch gradients of the loss for a batched forward.

    Selection scores are constants with respect to classifier parameters,
    so classifier gradients never touch the transport tape; only the key
    path does. Thresholded-away scores contribute exactly zero.
    """
    B = bf.z.shape[0]
    gamma = bf.knn.gamma
    w = bf.vote_weights
    denom = bf.vote_denominators
    acts = bf.activations

    U = -Y  # dLoss/dPrediction, summed over the batch later
    coef = gamma * w / denom[:, None]                      # (B, N)
    dact = coef[:, :, None] * U[:, None, :]                # (B, N, K)
    dlogit = dact * (1.0 - acts ** 2) / cfg.tanh_scale     # (B, N, K)

    mask = np.flatnonzero((gamma > 0.0).any(axis=0))
    dW = np.einsum("bnk,bm->nkm", dlogit, bf.z) / B
    db = dlogit.sum(axis=0) / B
    grads = GradientSet(
        weight_grads={int(n): dW[n] for n in mask},
        bias_grads={int(n): db[n] for n in mask},
    )
    if not train_keys:
        return grads

    if cfg.mode != "soft":
        raise ConfigError("train_keys requires soft mode")

    C = bf.knn.c
    au = np.einsum("bnk,bk->bn", acts, U)                  # activation . U
    yu = np.einsum("bk,bk->b", bf.predictions, U)
    d_gamma = w * au / denom[:, None]
    d_w = (gamma * au - yu[:, None]) / denom[:, None]
    if cfg.vote_weighting == "distance":
        dC = d_w
    else:
        dC = -d_w * (C < 1.0)
    dC = dC + sinkhorn_backward_batch(bf.knn, d_gamma)

    # c = 1 - cos(z, k); differentiate the cosine w.r.t. the raw key so the
    # gradient stays exact even for keys that have drifted off unit norm.
    d_cos = -dC
    key_norms = np.linalg.norm(state.keys, axis=1)
    cos = 1.0 - C
    term1 = np.einsum("bn,bm->nm", d_cos, bf.z_unit) / key_norms[:, None]
    term2 = (np.einsum("bn,bn->n", d_cos, cos) / key_norms ** 2)[:, None] \
        * state.keys
    grads.key_grads = (term1 - term2) / B
    return grads


def backward(trace: ForwardTrace, state: EnsembleState, cfg: EnsembleConfig,
             y, train_keys: bool = False) -> GradientSet:
    """Single-example gradients; wraps the batched path with B = 1."""
    ya = np.asarray(y, dtype=np.float64)
    _check_one_hot(ya)
    if trace.logits.shape[0] != state.n_classifiers:
        raise ValueError("trace does not match state: classifier count differs")
    knn = SoftKnnBatch(c=trace.knn.c[None, :], gamma=trace.knn.gamma[None, :],
                       gamma_raw=trace.knn.gamma_raw[None, :],
                       tape=trace.knn.tape)
    norm = np.linalg.norm(trace.z)
    bf = BatchForward(z=trace.z[None, :], z_unit=trace.z[None, :] / norm,
                      knn=knn, logits=trace.logits[None],
                      activations=trace.activations[None],
                      predictions=trace.prediction[None, :],
                      vote_weights=trace.vote_weights[None, :],
                      vote_denominators=np.array([trace.vote_denominator]))
    return backward_batch(bf, state, cfg, ya[None, :], train_keys=train_keys)


def sign_step(state: EnsembleState, grads: GradientSet,
              cfg: TrainConfig) -> EnsembleState:
    """Fixed-size update of the selected classifiers, in place.

    theta <- theta - lr * sign(g) - wd * theta, with sign(0) = 0. Unselected
    classifiers and the keys are untouched. Returns the mutated state.
    """
    lr, wd = cfg.learning_rate, cfg.weight_decay
    for n, g in grads.weight_grads.items():
        state.weights[n] = state.weights[n] * (1.0 - wd) - lr * np.sign(g)
    for n, g in grads.bias_grads.items():
        state.biases[n] = state.biases[n] * (1.0 - wd) - lr * np.sign(g)
    return state


def adam_key_step(state: EnsembleState, grads: GradientSet, adam: AdamState,
                  cfg: TrainConfig) -> tuple[EnsembleState, AdamState]:
    """Adam update on the keys followed by re-projection to the unit sphere.

    The projection keeps the routing geometry on the sphere the keys were
    initialized on; it is applied after the step and never differentiated.
    Mutates and returns both the state and the Adam accumulators.
    """
    if grads.key_grads is None:
        raise ValueError("no key gradients present; was train_keys enabled?")
    g = grads.key_grads
    adam.step += 1
    adam.m = cfg.adam_beta1 * adam.m + (1.0 - cfg.adam_beta1) * g
    adam.v = cfg.adam_beta2 * adam.v + (1.0 - cfg.adam_beta2) * g ** 2
    m_hat = adam.m / (1.0 - cfg.adam_beta1 ** adam.step)
    v_hat = adam.v / (1.0 - cfg.adam_beta2 ** adam.step)
    state.keys -= cfg.key_lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    state.keys /= np.linalg.norm(state.keys, axis=1)[:, None]
    return state, adam


def _stack_batch(batch, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2:
        Z = np.asarray(batch[0], dtype=np.float64)
        labels = np.asarray(batch[1])
    else:
        if len(batch) == 0:
            raise ValueError("batch must be non-empty")
        Z = np.stack([np.asarray(z, dtype=np.float64) for z, _ in batch])
        labels = np.array([label for _, label in batch])
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if labels.shape != (Z.shape[0],):
        raise ValueError("batch features and labels disagree in length")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    return Z, labels.astype(np.int64)


def train_batch(state: EnsembleState, adam: AdamState | None, batch,
                cfg: EnsembleConfig, train_cfg: TrainConfig,
                ) -> tuple[EnsembleState, AdamState | None, float]:
    """One optimization step on a batch.

    ``batch`` is either a list of (embedding, label) pairs or a
    (features, labels) array pair. Per-example gradients are averaged, one
    sign step is applied, and one Adam key step when key training is on.
    Returns the state, the Adam state, and the mean loss.
    """
    if train_cfg.train_keys and cfg.mode != "soft":
        raise ConfigError("train_keys requires soft mode")
    Z, labels = _stack_batch(batch, cfg.n_classes)
    Y = np.zeros((Z.shape[0], cfg.n_classes))
    Y[np.arange(Z.shape[0]), labels] = 1.0

    bf = forward_batch(state, cfg, Z, keep_tape=train_cfg.train_keys)
    mean_loss = float(-np.einsum("bk,bk->b", Y, bf.predictions).mean())
    grads = backward_batch(bf, state, cfg, Y, train_keys=train_cfg.train_keys)
    state = sign_step(state, grads, train_cfg)
    if train_cfg.train_keys:
        if adam is None:
            adam = AdamState.zeros(cfg.n_classifiers, cfg.embed_dim)
        state, adam = adam_key_step(state, grads, adam, train_cfg)
    return state, adam, mean_loss
