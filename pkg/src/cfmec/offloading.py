"""Task demands, latency accounting, objective weights and energy metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, SystemConfig


@dataclass(frozen=True)
class OffloadingDemand:
    bits: np.ndarray              # b_k
    cycles: np.ndarray            # w_k
    budget: np.ndarray            # L_k (cell-free) or L_k^cell
    effective_budget: np.ndarray  # budget minus the fronthaul delay (if any)
    fronthaul: np.ndarray         # fronthaul delay per user, zero in cellular mode

    @property
    def n_users(self) -> int:
        return self.bits.size


@dataclass(frozen=True)
class LatencyBreakdown:
    transmission: np.ndarray
    computational: np.ndarray
    fronthaul: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.transmission + self.computational + self.fronthaul


def fronthaul_delay(bits, cfg: SystemConfig):
    """2 b M xi / C_FH with M the antennas per cell-free AP."""
    return 2.0 * np.asarray(bits, dtype=float) * cfg.antennas_per_ap * cfg.quant_bits / cfg.fronthaul_capacity


def make_demand(bits, cfg: SystemConfig) -> OffloadingDemand:
    bits = np.asarray(bits, dtype=float)
    cycles = cfg.cycles_per_bit * bits
    if cfg.mode == "cellular":
        budget = np.full(bits.size, cfg.latency_budget_cell)
        fh = np.zeros(bits.size)
    else:
        budget = np.full(bits.size, cfg.latency_budget)
        fh = fronthaul_delay(bits, cfg)
    return OffloadingDemand(bits, cycles, budget, budget - fh, fh)


def generate_demands(cfg: SystemConfig, rng: np.random.Generator) -> OffloadingDemand:
    """Task sizes are uniform integer numbers of Mbit over ``task_bits_range``."""
    lo, hi = (int(round(x / 1e6)) for x in cfg.task_bits_range)
    bits = rng.integers(lo, hi + 1, size=cfg.n_users).astype(float) * 1e6
    return make_demand(bits, cfg)


def latency_breakdown(demand: OffloadingDemand, se, f, bandwidth: float) -> LatencyBreakdown:
    """Transmission, computing and fronthaul delay per user; inf where se or f is 0."""
    se = np.asarray(se, dtype=float)
    f = np.asarray(f, dtype=float)
    with np.errstate(divide="ignore"):
        tx = np.where(se > 0, demand.bits / (bandwidth * np.where(se > 0, se, 1.0)), np.inf)
        comp = np.where(f > 0, demand.cycles / np.where(f > 0, f, 1.0), np.inf)
    return LatencyBreakdown(tx, comp, demand.fronthaul.copy())


def objective_weights(cfg: SystemConfig, se0) -> tuple[float, float]:
    """Normalising weights so both objective terms live in [0, 1]."""
    se0 = np.asarray(se0, dtype=float)
    if not np.max(se0) > 0:
        raise ConfigError("reference spectral efficiencies are all zero")
    k = cfg.n_users
    return cfg.omega_p / (k * cfg.p_max), cfg.omega_se / (k * float(np.max(se0)))


def energy_per_mbit(p, se, bandwidth: float):
    """Transmit energy per Mbit, p / (B SE) scaled to J/Mbit; inf where SE is 0."""
    p = np.asarray(p, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.where(se > 0, p / (bandwidth * np.where(se > 0, se, 1.0)), np.inf) * 1e6
    return np.where(p == 0, 0.0, e)
