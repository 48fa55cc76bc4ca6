"""Numba kernels for the transport iteration hot loop.

Importing this module requires numba; callers treat an ImportError as "run
the numpy reference path instead". The kernels mirror the numpy
implementations in ``soft_knn`` element for element, so both paths agree to
rounding and either can serve as the installed implementation.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _logaddexp(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    if a == -np.inf:
        return a
    return a + math.log1p(math.exp(b - a))


@njit(cache=True)
def iterate(log_kernel: np.ndarray, kappa: int, iterations: int,
            ) -> tuple[np.ndarray, np.ndarray]:
    """Alternating log-domain projections without a tape."""
    B, N, _ = log_kernel.shape
    log_mu = -math.log(N)
    log_nu0 = math.log(kappa / N)
    log_nu1 = math.log((N - kappa) / N)
    log_p = np.empty((B, N))
    log_q = np.full((B, 2), -math.log(2.0))
    for _ in range(iterations):
        for b in range(B):
            q0 = log_q[b, 0]
            q1 = log_q[b, 1]
            for n in range(N):
                log_p[b, n] = log_mu - _logaddexp(log_kernel[b, n, 0] + q0,
                                                  log_kernel[b, n, 1] + q1)
            for j in range(2):
                m = -np.inf
                for n in range(N):
                    v = log_kernel[b, n, j] + log_p[b, n]
                    if v > m:
                        m = v
                s = 0.0
                for n in range(N):
                    s += math.exp(log_kernel[b, n, j] + log_p[b, n] - m)
                target = log_nu0 if j == 0 else log_nu1
                log_q[b, j] = target - (m + math.log(s))
    return log_p, log_q


@njit(cache=True)
def iterate_tape(log_kernel: np.ndarray, kappa: int, iterations: int,
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Alternating projections retaining every iterate for reverse mode."""
    B, N, _ = log_kernel.shape
    log_mu = -math.log(N)
    log_nu0 = math.log(kappa / N)
    log_nu1 = math.log((N - kappa) / N)
    log_p_hist = np.empty((iterations, B, N))
    log_q_hist = np.empty((iterations + 1, B, 2))
    log_q_hist[0] = -math.log(2.0)
    for it in range(iterations):
        for b in range(B):
            q0 = log_q_hist[it, b, 0]
            q1 = log_q_hist[it, b, 1]
            for n in range(N):
                log_p_hist[it, b, n] = log_mu - _logaddexp(
                    log_kernel[b, n, 0] + q0, log_kernel[b, n, 1] + q1)
            for j in range(2):
                m = -np.inf
                for n in range(N):
                    v = log_kernel[b, n, j] + log_p_hist[it, b, n]
                    if v > m:
                        m = v
                s = 0.0
                for n in range(N):
                    s += math.exp(log_kernel[b, n, j] + log_p_hist[it, b, n] - m)
                target = log_nu0 if j == 0 else log_nu1
                log_q_hist[it + 1, b, j] = target - (m + math.log(s))
    return log_p_hist, log_q_hist


@njit(cache=True)
def backprop(log_kernel: np.ndarray, log_p_hist: np.ndarray,
             log_q_hist: np.ndarray, gamma_raw: np.ndarray,
             upstream: np.ndarray, kappa: int, sigma: float,
             C: np.ndarray) -> np.ndarray:
    """Reverse sweep over the taped iterations; returns the adjoint of C."""
    L, B, N = log_p_hist.shape
    log_mu = -math.log(N)
    log_nu0 = math.log(kappa / N)
    log_nu1 = math.log((N - kappa) / N)
    dC = np.empty((B, N))
    adj_k0 = np.empty(N)
    adj_k1 = np.empty(N)
    g_out = np.empty(N)
    for b in range(B):
        adj_q0 = 0.0
        adj_q1 = 0.0
        for n in range(N):
            g_out[n] = upstream[b, n] * gamma_raw[b, n]
            adj_q0 += g_out[n]
            adj_k0[n] = g_out[n]
            adj_k1[n] = 0.0
        for it in range(L, 0, -1):
            lq0 = log_q_hist[it, b, 0]
            lq1 = log_q_hist[it, b, 1]
            lqp0 = log_q_hist[it - 1, b, 0]
            lqp1 = log_q_hist[it - 1, b, 1]
            new_q0 = 0.0
            new_q1 = 0.0
            for n in range(N):
                lp = log_p_hist[it - 1, b, n]
                s0 = math.exp(log_kernel[b, n, 0] + lp - log_nu0 + lq0)
                s1 = math.exp(log_kernel[b, n, 1] + lp - log_nu1 + lq1)
                ap = (g_out[n] if it == L else 0.0) - adj_q0 * s0 - adj_q1 * s1
                adj_k0[n] -= adj_q0 * s0
                adj_k1[n] -= adj_q1 * s1
                r0 = math.exp(log_kernel[b, n, 0] + lqp0 - log_mu + lp)
                r1 = math.exp(log_kernel[b, n, 1] + lqp1 - log_mu + lp)
                new_q0 -= ap * r0
                new_q1 -= ap * r1
                adj_k0[n] -= ap * r0
                adj_k1[n] -= ap * r1
            adj_q0 = new_q0
            adj_q1 = new_q1
        for n in range(N):
            dC[b, n] = (2.0 * C[b, n] * (-adj_k0[n] / sigma)
                        + 2.0 * (C[b, n] - 1.0) * (-adj_k1[n] / sigma))
    return dC
