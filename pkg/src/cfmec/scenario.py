"""AP deployment, user drops, seeded random streams and network snapshots."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, SystemConfig

# Purpose tags for the stream split. Changing a value changes every result.
STREAM_USERS = 0
STREAM_SHADOWING = 1
STREAM_DEMANDS = 2
STREAM_COMPUTE = 3
STREAM_CHANNEL = 4
STREAM_PILOT_NOISE = 5


def stream(seed: int, snapshot: int, purpose: int, realization: int = 0) -> np.random.Generator:
    """Independent generator for one (snapshot, purpose, realization) triple.

    The master seed is the entropy of a ``SeedSequence`` whose spawn key is the
    triple, so streams never overlap and do not depend on evaluation order or
    on how snapshots are distributed over workers.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=(int(snapshot), int(purpose), int(realization)))
    return np.random.Generator(np.random.PCG64(ss))


def deploy_grid(n_sites: int, area_side: float) -> np.ndarray:
    """Regular sqrt(n) x sqrt(n) grid centred in the square area, shape (n, 2)."""
    side = math.isqrt(n_sites)
    if side * side != n_sites or n_sites < 1:
        raise ConfigError(f"number of sites {n_sites} is not a perfect square")
    if area_side <= 0:
        raise ConfigError("area_side must be positive")
    spacing = area_side / side
    coords = (np.arange(side) + 0.5) * spacing
    xx, yy = np.meshgrid(coords, coords, indexing="xy")
    return np.column_stack([xx.ravel(), yy.ravel()])


def intersite_distance(n_sites: int, area_side: float) -> float:
    return area_side / math.isqrt(n_sites)


def wrap_displacement(a: np.ndarray, b: np.ndarray, area_side: float) -> np.ndarray:
    """Shortest displacement b - a on the torus of side ``area_side``."""
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    return d - area_side * np.round(d / area_side)


def wrap_distance(a, b, area_side: float):
    """Euclidean distance under the wrap-around metric (broadcasts over rows)."""
    return np.linalg.norm(wrap_displacement(a, b, area_side), axis=-1)


def drop_users(cfg: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    """K positions i.i.d. uniform over [0, area_side)^2."""
    return rng.uniform(0.0, cfg.area_side, size=(cfg.n_users, 2))


@dataclass(frozen=True)
class NetworkSnapshot:
    ap_positions: np.ndarray      # (L, 2)
    user_positions: np.ndarray    # (K, 2)
    beta: np.ndarray              # (L, K) linear large-scale gains
    corr: np.ndarray              # (L, K, M, M) spatial correlation
    f_ap: np.ndarray              # (L,) compute capacity of each site, cycles/s
    distance_3d: np.ndarray       # (L, K)
    azimuth: np.ndarray           # (L, K)
    elevation: np.ndarray         # (L, K)

    @property
    def n_aps(self) -> int:
        return self.beta.shape[0]

    @property
    def n_users(self) -> int:
        return self.beta.shape[1]

    @property
    def n_antennas(self) -> int:
        return self.corr.shape[-1]


def site_compute(cfg: SystemConfig, snapshot_index: int) -> np.ndarray:
    """Per-site compute capacities for the configured mode.

    Cell-free and C-RAN APs draw integer multiples of 1e9 cycles/s from
    ``f_ap_range``. Cellular BSs split the same total (APs plus CPU) evenly, so
    both architectures own identical compute over the area.
    """
    rng = stream(cfg.rng_seed, snapshot_index, STREAM_COMPUTE)
    lo, hi = (int(round(x / 1e9)) for x in cfg.f_ap_range)
    f_ap = rng.integers(lo, hi + 1, size=cfg.n_aps).astype(float) * 1e9
    if cfg.mode != "cellular":
        return f_ap
    per_bs = math.ceil((f_ap.sum() + cfg.f_cpu) / cfg.n_bs)
    return np.full(cfg.n_bs, float(per_bs))


def build_snapshot(cfg: SystemConfig, snapshot_index: int) -> NetworkSnapshot:
    """Pure function of (config, snapshot index): geometry, gains, correlations."""
    from . import propagation

    n_sites, n_ant = cfg.radio_dims
    aps = deploy_grid(n_sites, cfg.area_side)
    users = drop_users(cfg, stream(cfg.rng_seed, snapshot_index, STREAM_USERS))
    disp = wrap_displacement(aps[:, None, :], users[None, :, :], cfg.area_side)  # (L, K, 2)
    d2 = np.maximum(np.linalg.norm(disp, axis=-1), cfg.min_distance)
    dh = cfg.user_height - cfg.ap_height
    d3 = np.sqrt(d2**2 + dh**2)
    # Angles seen from the AP; the array lies along x, so the azimuth is
    # measured from the broadside (y) direction.
    azimuth = np.arctan2(disp[..., 0], disp[..., 1])
    elevation = np.arctan2(dh, d2)

    shadow_rng = stream(cfg.rng_seed, snapshot_index, STREAM_SHADOWING)
    shadow_db = shadow_rng.normal(0.0, cfg.shadowing_std_db, size=d3.shape)
    beta = propagation.pathloss_gain(d3, cfg.carrier_freq, shadow_db)

    corr = np.empty((n_sites, cfg.n_users, n_ant, n_ant), dtype=complex)
    for l in range(n_sites):
        for k in range(cfg.n_users):
            r = propagation.local_scattering_corr(
                azimuth[l, k], elevation[l, k], cfg.asd_azimuth, cfg.asd_elevation,
                beta[l, k], n_ant, cfg.antenna_spacing)
            corr[l, k] = propagation.project_psd(r, beta[l, k])
    return NetworkSnapshot(aps, users, beta, corr, site_compute(cfg, snapshot_index),
                           d3, azimuth, elevation)
