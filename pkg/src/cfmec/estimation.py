"""Uplink pilot training and per-link MMSE channel estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .propagation import complex_normal


@dataclass(frozen=True)
class EstimatorStats:
    """Realization-independent part of the estimator for one snapshot."""

    psi: np.ndarray          # (L, tau_p, M, M) pilot-observation covariance per pilot
    filt: np.ndarray         # (L, K, M, M) sqrt(tau_p p_p,k) R_lk Psi_lk^{-1}
    error_cov: np.ndarray    # (L, K, M, M) C_lk
    pilot_of: np.ndarray     # (K,)
    pilot_power: np.ndarray  # (K,)
    tau_p: int
    noise_power: float


@dataclass(frozen=True)
class ChannelEstimate:
    h_hat: np.ndarray        # (L, K, M) or (N, L, K, M)
    error_cov: np.ndarray    # (L, K, M, M)
    stats: EstimatorStats

    @property
    def psi(self) -> np.ndarray:
        """Psi_lk per link, shape (L, K, M, M)."""
        return self.stats.psi[:, self.stats.pilot_of]


def estimator_stats(corr: np.ndarray, pilot_of: np.ndarray, tau_p: int, noise_power: float,
                    pilot_power) -> EstimatorStats:
    n_l, n_k, m, _ = corr.shape
    pp = np.broadcast_to(np.asarray(pilot_power, dtype=float), (n_k,)).copy()
    eye = np.eye(m)
    psi = np.empty((n_l, tau_p, m, m), dtype=complex)
    for t in range(tau_p):
        users = np.flatnonzero(pilot_of == t)
        psi[:, t] = tau_p * np.einsum("k,lkij->lij", pp[users], corr[:, users]) + noise_power * eye
    filt = np.empty((n_l, n_k, m, m), dtype=complex)
    err = np.empty_like(filt)
    for l in range(n_l):
        for k in range(n_k):
            r = corr[l, k]
            ps = psi[l, pilot_of[k]]
            # R Psi^{-1} = (Psi^{-1} R)^H since both are Hermitian
            r_psi_inv = scipy.linalg.solve(ps, r, assume_a="her").conj().T
            filt[l, k] = math.sqrt(tau_p * pp[k]) * r_psi_inv
            c = r - tau_p * pp[k] * r_psi_inv @ r
            err[l, k] = 0.5 * (c + c.conj().T)
    return EstimatorStats(psi, filt, err, np.asarray(pilot_of), pp, tau_p, noise_power)


def pilot_observations(h: np.ndarray, stats: EstimatorStats, rng: np.random.Generator) -> np.ndarray:
    """Projected pilot signals y_lt for every AP and pilot, shape (..., L, tau_p, M)."""
    *lead, n_l, n_k, m = h.shape
    scaled = h * np.sqrt(stats.tau_p * stats.pilot_power)[:, None]
    y = np.zeros(tuple(lead) + (n_l, stats.tau_p, m), dtype=complex)
    for t in range(stats.tau_p):
        users = np.flatnonzero(stats.pilot_of == t)
        if users.size:
            y[..., t, :] = scaled[..., users, :].sum(axis=-2)
    y += math.sqrt(stats.noise_power) * complex_normal(rng, y.shape)
    return y


def estimate_mmse(h: np.ndarray, stats: EstimatorStats, rng: np.random.Generator) -> ChannelEstimate:
    """MMSE estimates h_hat_lk = sqrt(tau_p p_p,k) R_lk Psi_lk^{-1} y_lk.

    ``h`` may carry leading batch axes; pilot noise is drawn from ``rng``.
    """
    y = pilot_observations(h, stats, rng)
    y_user = y[..., stats.pilot_of, :]  # (..., L, K, M)
    h_hat = np.einsum("lkij,...lkj->...lki", stats.filt, y_user)
    return ChannelEstimate(h_hat, stats.error_cov, stats)
