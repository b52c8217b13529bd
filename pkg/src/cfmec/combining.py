"""Receive combining (P-MMSE, L-MMSE) and instantaneous SINR / SE evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .association import ServingTopology


@dataclass(frozen=True)
class CombinerSet:
    """Collective combiners, one L*M vector per user, zero outside serving blocks.

    ``direction`` omits the scalar p_k in front of the MMSE solution; the SINR
    does not depend on it and keeping it out avoids zero vectors at p_k = 0.
    """

    direction: np.ndarray    # (K, L*M)
    built_at: np.ndarray     # (K,) powers used to build them
    n_antennas: int

    @property
    def v(self) -> np.ndarray:
        return self.built_at[:, None] * self.direction


@dataclass(frozen=True)
class LinkCoefficients:
    """Power-independent scalars of the SINR for fixed combiners.

    num_k(p) = p_k g_kk,
    den_k(p) = sum_{i != k} p_i g_ki + sum_i p_i c_ki + noise * u_k.
    Both are affine in p.
    """

    g: np.ndarray   # (K, K) |v_k^H D_k h_hat_i|^2
    c: np.ndarray   # (K, K) v_k^H D_k C_i D_k v_k
    u: np.ndarray   # (K,) ||D_k v_k||^2
    noise_power: float
    direction: np.ndarray | None = None   # (K, L*M) combiner directions these rows come from

    @property
    def n_users(self) -> int:
        return self.u.size

    @property
    def interference(self) -> np.ndarray:
        """(K, K) matrix A with den(p) = A p + noise * u."""
        a = self.g + self.c
        a[np.diag_indices_from(a)] = np.diag(self.c)
        return a

    @property
    def signal(self) -> np.ndarray:
        return np.diag(self.g).copy()

    def num(self, p: np.ndarray) -> np.ndarray:
        return self.signal * np.asarray(p, dtype=float)

    def den(self, p: np.ndarray) -> np.ndarray:
        return self.interference @ np.asarray(p, dtype=float) + self.noise_power * self.u

    def sinr(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if np.any(p < 0):
            raise ValueError("powers must be non-negative")
        num, den = self.num(p), self.den(p)
        out = np.zeros_like(num)
        ok = num > 0
        out[ok] = num[ok] / den[ok]
        return out

    def se(self, p: np.ndarray, prelog: float) -> np.ndarray:
        return prelog * np.log2(1.0 + self.sinr(p))

    def select_rows(self, take_other: np.ndarray, other: "LinkCoefficients") -> "LinkCoefficients":
        """Per-user mix: rows where ``take_other`` is True come from ``other``."""
        m = np.asarray(take_other, dtype=bool)
        direction = None
        if self.direction is not None and other.direction is not None:
            direction = np.where(m[:, None], other.direction, self.direction)
        return LinkCoefficients(np.where(m[:, None], other.g, self.g),
                                np.where(m[:, None], other.c, self.c),
                                np.where(m, other.u, self.u), self.noise_power, direction)


@dataclass(frozen=True)
class SeReport:
    sinr: np.ndarray
    se_inst: np.ndarray
    num: np.ndarray
    den: np.ndarray


def _stack(h_hat: np.ndarray) -> np.ndarray:
    """(L, K, M) -> (K, L*M) collective estimates."""
    n_l, n_k, m = h_hat.shape
    return h_hat.transpose(1, 0, 2).reshape(n_k, n_l * m)


def _block_idx(aps: np.ndarray, m: int) -> np.ndarray:
    return (np.asarray(aps)[:, None] * m + np.arange(m)[None, :]).ravel()


def _block_diag(err: np.ndarray, aps: np.ndarray, users) -> np.ndarray:
    """Sum over ``users`` (with weights) of blockdiag(C_li, l in aps)."""
    m = err.shape[-1]
    n = len(aps) * m
    out = np.zeros((n, n), dtype=complex)
    for j, l in enumerate(aps):
        out[j * m:(j + 1) * m, j * m:(j + 1) * m] = users(err[l])
    return out


def pmmse(h_hat: np.ndarray, err: np.ndarray, topology: ServingTopology, p: np.ndarray,
          noise_power: float) -> CombinerSet:
    """Partial MMSE: only users sharing a serving AP enter the interference term.

    The inverse is taken on the |M_k| M dimensional serving subspace, which is
    exact because D_k zeroes every other block.
    """
    p = np.asarray(p, dtype=float)
    n_l, n_k, m = h_hat.shape
    hs = _stack(h_hat)
    w = np.zeros((n_k, n_l * m), dtype=complex)
    for k in range(n_k):
        aps = topology.serving_aps[k]
        idx = _block_idx(aps, m)
        s_k = topology.partial_sets[k]
        hk = hs[np.ix_(s_k, idx)]                       # (|S_k|, n)
        mat = (hk.T * p[s_k]) @ hk.conj()
        mat += _block_diag(err, aps, lambda e: np.einsum("i,imn->mn", p[s_k], e[s_k]))
        mat += noise_power * np.eye(idx.size)
        w[k, idx] = scipy.linalg.solve(mat, hs[k, idx], assume_a="her")
    return CombinerSet(w, p.copy(), m)


def lmmse(h_hat: np.ndarray, err: np.ndarray, topology: ServingTopology, p: np.ndarray,
          noise_power: float) -> CombinerSet:
    """Local MMSE at each user's serving site, using all users' local estimates."""
    p = np.asarray(p, dtype=float)
    n_l, n_k, m = h_hat.shape
    w = np.zeros((n_k, n_l * m), dtype=complex)
    for k in range(n_k):
        for l in topology.serving_aps[k]:
            hl = h_hat[l]                                 # (K, M)
            mat = (hl.T * p) @ hl.conj() + np.einsum("i,imn->mn", p, err[l]) + noise_power * np.eye(m)
            w[k, l * m:(l + 1) * m] = scipy.linalg.solve(mat, hl[k], assume_a="her")
    return CombinerSet(w, p.copy(), m)


def full_mmse(h_hat: np.ndarray, err: np.ndarray, topology: ServingTopology, p: np.ndarray,
              noise_power: float) -> CombinerSet:
    """Centralised MMSE over the serving subspace with every user as interferer."""
    p = np.asarray(p, dtype=float)
    n_l, n_k, m = h_hat.shape
    hs = _stack(h_hat)
    w = np.zeros((n_k, n_l * m), dtype=complex)
    for k in range(n_k):
        aps = topology.serving_aps[k]
        idx = _block_idx(aps, m)
        hk = hs[:, idx]
        mat = (hk.T * p) @ hk.conj()
        mat += _block_diag(err, aps, lambda e: np.einsum("i,imn->mn", p, e))
        mat += noise_power * np.eye(idx.size)
        w[k, idx] = scipy.linalg.solve(mat, hs[k, idx], assume_a="her")
    return CombinerSet(w, p.copy(), m)


def link_coefficients(combiners: CombinerSet, h_hat: np.ndarray, err: np.ndarray,
                      topology: ServingTopology, noise_power: float) -> LinkCoefficients:
    n_l, n_k, m = h_hat.shape
    hs = _stack(h_hat)
    g = np.zeros((n_k, n_k))
    c = np.zeros((n_k, n_k))
    u = np.zeros(n_k)
    for k in range(n_k):
        aps = topology.serving_aps[k]
        idx = _block_idx(aps, m)
        vk = combiners.direction[k, idx]
        g[k] = np.abs(hs[:, idx] @ vk.conj()) ** 2
        vb = vk.reshape(len(aps), m)
        c[k] = np.real(np.einsum("lm,limn,ln->i", vb.conj(), err[aps], vb))
        u[k] = np.real(np.vdot(vk, vk))
    # rescale each row so that the noise term is 1; SINR is invariant to it
    scale = np.where(u > 0, 1.0 / np.where(u > 0, u, 1.0), 1.0)
    return LinkCoefficients(g * scale[:, None], c * scale[:, None], u * scale, noise_power,
                            combiners.direction)


def evaluate_se(coeffs: LinkCoefficients, p: np.ndarray, prelog: float) -> SeReport:
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("powers must be non-negative")
    sinr = coeffs.sinr(p)
    return SeReport(sinr, prelog * np.log2(1.0 + sinr), coeffs.num(p), coeffs.den(p))


def build_combiners(kind: str, h_hat, err, topology, p, noise_power) -> CombinerSet:
    if kind == "pmmse":
        return pmmse(h_hat, err, topology, p, noise_power)
    if kind == "lmmse":
        return lmmse(h_hat, err, topology, p, noise_power)
    if kind == "mmse":
        return full_mmse(h_hat, err, topology, p, noise_power)
    raise ValueError(f"unknown combiner {kind!r}")
