"""Large-scale gains, local-scattering correlation and small-scale channel draws."""

from __future__ import annotations

import csv
import math
import warnings
from pathlib import Path

import numpy as np

ASD_VALIDITY = math.radians(15)


def pathloss_db(d_3d, carrier_freq: float):
    """3GPP UMi NLOS-style log-distance pathloss in dB (distance in metres)."""
    d = np.asarray(d_3d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be strictly positive")
    return 22.7 + 36.7 * np.log10(d) + 26.0 * np.log10(carrier_freq / 1e9)


def pathloss_gain(d_3d, carrier_freq: float, shadow_db=0.0):
    """Linear large-scale gain including log-normal shadowing (given in dB)."""
    return 10.0 ** ((-pathloss_db(d_3d, carrier_freq) + shadow_db) / 10.0)


def local_scattering_corr(azimuth: float, elevation: float, asd_az: float, asd_el: float,
                          beta: float, n_antennas: int, spacing: float = 0.5) -> np.ndarray:
    """Closed-form small-ASD approximation of the ULA spatial correlation matrix.

    Gaussian perturbations around the nominal azimuth and elevation are
    linearised in the array phase, which leaves a Gaussian integral with a
    closed-form value. The diagonal equals ``beta`` exactly.
    """
    if asd_az > ASD_VALIDITY + 1e-12 or asd_el > ASD_VALIDITY + 1e-12:
        warnings.warn("angular spread above 15 degrees: the closed-form correlation "
                      "is outside its validity range", RuntimeWarning, stacklevel=2)
    idx = np.arange(n_antennas)
    d = (idx[:, None] - idx[None, :]) * spacing
    two_pi_d = 2 * np.pi * d
    sphi, cphi = math.sin(azimuth), math.cos(azimuth)
    sth, cth = math.sin(elevation), math.cos(elevation)
    a = beta * np.exp(1j * two_pi_d * sphi * cth)
    b = two_pi_d * cphi * cth
    c = -two_pi_d * cphi * sth
    dd = -two_pi_d * sphi * sth
    var_az, var_el = asd_az**2, asd_el**2
    q = 1.0 + c**2 * var_az * var_el
    s2 = var_az / q  # squared effective azimuth spread
    return (a / np.sqrt(q)
            * np.exp(-dd**2 * var_el / (2 * q))
            * np.exp(-1j * b * c * dd * var_el * s2)
            * np.exp(-b**2 * s2 / 2))


def project_psd(r: np.ndarray, beta: float) -> np.ndarray:
    """Clip negative eigenvalues and rescale so that tr(R)/M equals beta."""
    r = 0.5 * (r + r.conj().T)
    w, u = np.linalg.eigh(r)
    if w.min() < 0:
        w = np.clip(w, 0.0, None)
        r = (u * w) @ u.conj().T
        r = 0.5 * (r + r.conj().T)
    m = r.shape[0]
    tr = np.real(np.trace(r))
    if tr > 0:
        r = r * (beta * m / tr)
    return r


def sqrtm_psd(r: np.ndarray) -> np.ndarray:
    w, u = np.linalg.eigh(0.5 * (r + r.conj().T))
    if w.min() < -1e-9 * max(w.max(), 1e-300):
        raise np.linalg.LinAlgError("correlation matrix is not positive semidefinite")
    return u * np.sqrt(np.clip(w, 0.0, None))


def correlation_roots(corr: np.ndarray) -> np.ndarray:
    """Square-root factors R^{1/2} for every link, same shape as ``corr``."""
    out = np.empty_like(corr)
    for l in range(corr.shape[0]):
        for k in range(corr.shape[1]):
            try:
                out[l, k] = sqrtm_psd(corr[l, k])
            except np.linalg.LinAlgError:
                beta = np.real(np.trace(corr[l, k])) / corr.shape[-1]
                out[l, k] = sqrtm_psd(project_psd(corr[l, k], beta))
    return out


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def draw_channels(roots: np.ndarray, rng: np.random.Generator, n_draws: int | None = None) -> np.ndarray:
    """h_lk = R_lk^{1/2} z with z ~ CN(0, I), independent across links.

    Returns shape (L, K, M), or (n_draws, L, K, M) when ``n_draws`` is given.
    """
    shape = roots.shape[:-1] if n_draws is None else (n_draws,) + roots.shape[:-1]
    z = complex_normal(rng, shape)
    return np.einsum("...lkmn,...lkn->...lkm", roots, z)


def dump_snapshot_csv(snapshot, path: str | Path) -> None:
    """Write every R_lk entry as one row: ap, user, row, col, real, imag, beta.

    Rows are ordered by (ap, user, row, col), all indices zero-based.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ap", "user", "row", "col", "real", "imag", "beta"])
        n_l, n_k, m, _ = snapshot.corr.shape
        for l in range(n_l):
            for k in range(n_k):
                r = snapshot.corr[l, k]
                for i in range(m):
                    for j in range(m):
                        w.writerow([l, k, i, j, repr(float(r[i, j].real)),
                                    repr(float(r[i, j].imag)), repr(float(snapshot.beta[l, k]))])
