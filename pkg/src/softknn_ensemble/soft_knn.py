"""Differentiable soft top-k neighbor selection.

Picking the k nearest keys is relaxed into an entropic optimal transport
problem: the N cosine distances are transported onto the two anchor points
{0, 1}, with mass k/N assigned to 0 and (N-k)/N to 1. The transport plan is
approximated with a fixed number of alternating Bregman projections
(Sinkhorn iterations) of a Gaussian kernel of the squared distances to the
anchors. Rescaling the plan column that carries mass k/N by N yields a soft
0/1 indicator of the k nearest keys: near 1 for selected keys, near 0
otherwise, and differentiable with respect to the input distances.

With the default kernel width (sigma = 5e-4) the kernel entries underflow
float64 catastrophically in the linear domain (exponents around -2000), so
all projections run in log space via log-sum-exp. The per-iteration scaling
iterates are retained on a tape, and ``sinkhorn_backward`` replays them in
reverse mode to produce exact gradients of the truncated iteration that the
forward pass actually ran, converged or not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import as_matrix, as_vector

try:
    from . import _accel
except ImportError:  # numba not installed; the numpy path is the reference
    _accel = None

__all__ = [
    "SoftKnnConfig",
    "SoftKnnResult",
    "SoftKnnBatch",
    "SinkhornTape",
    "cosine_distances",
    "cosine_distances_batch",
    "build_cost_matrix",
    "sinkhorn_forward",
    "sinkhorn_forward_batch",
    "sinkhorn_backward",
    "sinkhorn_backward_batch",
    "hard_topk",
    "hard_topk_batch",
]


@dataclass(frozen=True)
class SoftKnnConfig:
    """Hyperparameters of the soft selection operator.

    kappa: number of neighbors to select.
    sigma: Gaussian kernel width; smaller values sharpen the selection.
    iterations: fixed number of Bregman projection rounds.
    gamma_threshold: scores below this are zeroed before voting.
    """

    kappa: int
    sigma: float = 5e-4
    iterations: int = 400
    gamma_threshold: float = 0.3

    def __post_init__(self) -> None:
        if self.kappa < 1:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 <= self.gamma_threshold < 1.0:
            raise ValueError(
                f"gamma_threshold must lie in [0, 1), got {self.gamma_threshold}")


@dataclass(frozen=True)
class SinkhornTape:
    """Log-domain iterates retained by the forward pass for reverse mode.

    Shapes are batched: ``log_kernel`` is (B, N, 2), ``log_p`` is (L, B, N)
    holding iterations 1..L, ``log_q`` is (L+1, B, 2) holding iterations
    0..L (iteration 0 is the uniform initializer). ``kappa`` and ``sigma``
    are recorded so the backward pass needs no external configuration.
    """

    log_kernel: np.ndarray
    log_p: np.ndarray
    log_q: np.ndarray
    kappa: int
    sigma: float


@dataclass(frozen=True)
class SoftKnnResult:
    """Per-example output of the soft selection operator.

    c: cosine distances, length N.
    gamma: selection scores after thresholding, in {0} or [threshold, ~1].
    gamma_raw: pre-threshold scores; their sum equals kappa.
    tape: retained iterates for backprop; None for the kappa == N
        short-circuit, which has nothing to differentiate.
    """

    c: np.ndarray
    gamma: np.ndarray
    gamma_raw: np.ndarray
    tape: SinkhornTape | None


@dataclass(frozen=True)
class SoftKnnBatch:
    """Batched counterpart of ``SoftKnnResult`` with leading axis B."""

    c: np.ndarray
    gamma: np.ndarray
    gamma_raw: np.ndarray
    tape: SinkhornTape | None


def cosine_distances(z, keys) -> np.ndarray:
    """Cosine distances 1 - cos(z, key_n) for every key row; range [0, 2]."""
    zv = as_vector(z, "z")
    km = as_matrix(keys, name="keys")
    if km.shape[1] != zv.shape[0]:
        raise ValueError(
            f"dimension mismatch: z has length {zv.shape[0]}, "
            f"keys have {km.shape[1]} columns")
    return cosine_distances_batch(zv[None, :], km)[0]

def cosine_distances_batch(Z: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Distances for a batch of embeddings; Z is (B, M), result (B, N)."""
    z_norms = np.linalg.norm(Z, axis=1)
    key_norms = np.linalg.norm(keys, axis=1)
    if np.any(z_norms == 0.0) or np.any(key_norms == 0.0):
        raise ValueError("degenerate vector: zero norm")
    sims = (Z / z_norms[:, None]) @ (keys / key_norms[:, None]).T
    return 1.0 - np.clip(sims, -1.0, 1.0)


def build_cost_matrix(c) -> np.ndarray:
    """N x 2 squared distances of each c_n to the anchors 0 and 1."""
    cv = as_vector(c, "c")
    return np.stack([cv ** 2, (cv - 1.0) ** 2], axis=1)


def _logsumexp_rows(t: np.ndarray) -> np.ndarray:
    """log-sum-exp over axis 1 of a (B, N, 2) array, returning (B, 2)."""
    m = t.max(axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(t - m), axis=1, keepdims=True)))[:, 0, :]


def _iterate_numpy(log_kernel: np.ndarray, kappa: int, iterations: int,
                   keep_tape: bool):
    """Reference numpy implementation of the projection loop."""
    B, N, _ = log_kernel.shape
    log_mu = -np.log(N)
    log_nu = np.log(np.array([kappa / N, (N - kappa) / N]))
    log_q = np.full((B, 2), -np.log(2.0))

    if keep_tape:
        log_p_hist = np.empty((iterations, B, N))
        log_q_hist = np.empty((iterations + 1, B, 2))
        log_q_hist[0] = log_q

    log_p = np.empty((B, N))
    for it in range(iterations):
        log_p = log_mu - np.logaddexp(
            log_kernel[:, :, 0] + log_q[:, None, 0],
            log_kernel[:, :, 1] + log_q[:, None, 1])
        log_q = log_nu - _logsumexp_rows(log_kernel + log_p[:, :, None])
        if keep_tape:
            log_p_hist[it] = log_p
            log_q_hist[it + 1] = log_q
    if keep_tape:
        return log_p_hist, log_q_hist
    return log_p, log_q


def _sinkhorn_core(C: np.ndarray, kappa: int, sigma: float, iterations: int,
                   keep_tape: bool) -> tuple[np.ndarray, SinkhornTape | None]:
    """Run the log-domain projections on a (B, N) distance batch.

    Requires 1 <= kappa < N. Ends on the column update, so the column
    marginals (and hence sum(gamma_raw) == kappa) hold exactly up to float
    rounding regardless of convergence. Dispatches to the jit kernels when
    numba is importable; the numpy loop is the reference either way.
    """
    B, N = C.shape
    log_kernel = np.empty((B, N, 2))
    log_kernel[:, :, 0] = -(C ** 2) / sigma
    log_kernel[:, :, 1] = -((C - 1.0) ** 2) / sigma

    tape = None
    if keep_tape:
        if _accel is not None:
            log_p_hist, log_q_hist = _accel.iterate_tape(log_kernel, kappa,
                                                         iterations)
        else:
            log_p_hist, log_q_hist = _iterate_numpy(log_kernel, kappa,
                                                    iterations, True)
        log_p, log_q = log_p_hist[-1], log_q_hist[-1]
        tape = SinkhornTape(log_kernel, log_p_hist, log_q_hist, kappa, sigma)
    elif _accel is not None:
        log_p, log_q = _accel.iterate(log_kernel, kappa, iterations)
    else:
        log_p, log_q = _iterate_numpy(log_kernel, kappa, iterations, False)

    gamma_raw = np.exp(np.log(N) + log_p + log_kernel[:, :, 0]
                       + log_q[:, 0][:, None])
    return gamma_raw, tape


def _sinkhorn_core_backward(tape: SinkhornTape, gamma_raw: np.ndarray,
                            upstream: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Reverse-mode sweep through the taped iterations.

    ``upstream`` is the (B, N) adjoint of gamma_raw; the return value is the
    (B, N) adjoint of the input distances. The softmax matrices of each
    projection are reconstructed from the tape instead of being stored:
    the log-normalizer of the row update is log_mu - log_p and that of the
    column update is log_nu - log_q.
    """
    if _accel is not None:
        return _accel.backprop(tape.log_kernel, tape.log_p, tape.log_q,
                               gamma_raw, upstream, tape.kappa, tape.sigma, C)
    return _backward_numpy(tape, gamma_raw, upstream, C)


def _backward_numpy(tape: SinkhornTape, gamma_raw: np.ndarray,
                    upstream: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Reference numpy implementation of the reverse sweep."""
    log_kernel, log_p_hist, log_q_hist = tape.log_kernel, tape.log_p, tape.log_q
    B, N = upstream.shape
    L = log_p_hist.shape[0]
    log_mu = -np.log(N)
    log_nu = np.log(np.array([tape.kappa / N, (N - tape.kappa) / N]))

    # gamma_raw = N * exp(log_p^L + log_kernel[:, :, 0] + log_q^L[:, 0])
    g_out = upstream * gamma_raw
    adj_q = np.zeros((B, 2))
    adj_q[:, 0] = g_out.sum(axis=1)
    adj_kernel = np.zeros((B, N, 2))
    adj_kernel[:, :, 0] = g_out

    for it in range(L, 0, -1):
        log_p = log_p_hist[it - 1]
        log_q = log_q_hist[it]
        log_q_prev = log_q_hist[it - 1]
        # Column update consumed log_p; S columns sum to 1 over n.
        S = np.exp(log_kernel + log_p[:, :, None]
                   - log_nu[None, None, :] + log_q[:, None, :])
        adj_p = (g_out if it == L else 0.0) - np.einsum("bj,bnj->bn", adj_q, S)
        adj_kernel -= adj_q[:, None, :] * S
        # Row update consumed log_q_prev; R rows sum to 1 over j.
        R = np.exp(log_kernel + log_q_prev[:, None, :]
                   - log_mu + log_p[:, :, None])
        adj_q = -np.einsum("bn,bnj->bj", adj_p, R)
        adj_kernel -= adj_p[:, :, None] * R
    # adj_q now belongs to the constant initializer log_q^0 and is dropped.

    adj_cost = -adj_kernel / tape.sigma
    return 2.0 * C * adj_cost[:, :, 0] + 2.0 * (C - 1.0) * adj_cost[:, :, 1]


def sinkhorn_forward_batch(C: np.ndarray, cfg: SoftKnnConfig,
                           keep_tape: bool = False) -> SoftKnnBatch:
    """Soft selection scores for a (B, N) batch of distance vectors."""
    B, N = C.shape
    if cfg.kappa > N:
        raise ValueError(f"kappa ({cfg.kappa}) exceeds ensemble size ({N})")
    if cfg.kappa == N:
        ones = np.ones((B, N))
        return SoftKnnBatch(c=C, gamma=ones, gamma_raw=ones.copy(), tape=None)
    gamma_raw, tape = _sinkhorn_core(C, cfg.kappa, cfg.sigma, cfg.iterations,
                                     keep_tape)
    gamma = np.where(gamma_raw < cfg.gamma_threshold, 0.0, gamma_raw)
    return SoftKnnBatch(c=C, gamma=gamma, gamma_raw=gamma_raw, tape=tape)


def sinkhorn_forward(c, cfg: SoftKnnConfig) -> SoftKnnResult:
    """Soft selection scores for a single distance vector of length N."""
    cv = as_vector(c, "c")
    batch = sinkhorn_forward_batch(cv[None, :], cfg, keep_tape=True)
    return SoftKnnResult(c=cv, gamma=batch.gamma[0],
                         gamma_raw=batch.gamma_raw[0], tape=batch.tape)


def sinkhorn_backward_batch(batch: SoftKnnBatch,
                            upstream: np.ndarray) -> np.ndarray:
    """Adjoint of the distances for a batched result.

    Thresholding acts as a 0/1 mask: gradient flows only through scores that
    survived it. The kappa == N short-circuit has no tape and no gradient.
    """
    if batch.tape is None:
        raise ValueError("no tape retained (kappa == N short-circuit)")
    masked = upstream * (batch.gamma > 0.0)
    return _sinkhorn_core_backward(batch.tape, batch.gamma_raw, masked, batch.c)


def sinkhorn_backward(result: SoftKnnResult, upstream) -> np.ndarray:
    """Per-example adjoint of the distances; see the batched variant."""
    if result.tape is None:
        raise ValueError("no tape retained (kappa == N short-circuit)")
    uv = as_vector(upstream, "upstream")
    if uv.shape != result.gamma_raw.shape:
        raise ValueError(
            f"upstream length {uv.shape[0]} does not match "
            f"{result.gamma_raw.shape[0]} scores")
    batch = SoftKnnBatch(c=result.c[None, :], gamma=result.gamma[None, :],
                         gamma_raw=result.gamma_raw[None, :], tape=result.tape)
    return sinkhorn_backward_batch(batch, uv[None, :])[0]


def hard_topk(c, kappa: int) -> np.ndarray:
    """Indices of the kappa smallest distances, ascending; ties go to the
    lowest index."""
    cv = as_vector(c, "c")
    if kappa > cv.shape[0]:
        raise ValueError(f"kappa ({kappa}) exceeds number of distances "
                         f"({cv.shape[0]})")
    if kappa < 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    order = np.argsort(cv, kind="stable")
    return np.sort(order[:kappa])


def hard_topk_batch(C: np.ndarray, kappa: int) -> np.ndarray:
    """0/1 indicator matrix of the per-row kappa smallest distances."""
    B, N = C.shape
    if kappa > N:
        raise ValueError(f"kappa ({kappa}) exceeds ensemble size ({N})")
    order = np.argsort(C, axis=1, kind="stable")
    indicator = np.zeros((B, N))
    np.put_along_axis(indicator, order[:, :kappa], 1.0, axis=1)
    return indicator
