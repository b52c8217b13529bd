"""Scenario configuration, presets and JSON loading."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

MODES = ("cellfree", "cellular", "cran")
FEASIBILITY_MODES = ("rough", "accurate", "rough-then-accurate")


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass(frozen=True)
class SystemConfig:
    # geometry
    area_side: float = 1000.0
    n_aps: int = 25
    antennas_per_ap: int = 4
    n_bs: int = 4
    antennas_per_bs: int = 25
    n_users: int = 8
    ap_height: float = 10.0
    user_height: float = 1.5
    min_distance: float = 10.0
    # radio
    bandwidth: float = 20e6
    carrier_freq: float = 2e9
    noise_power: float = 10 ** (-94 / 10) / 1000
    p_max: float = 0.1
    tau_c: int = 200
    tau_p: int = 5
    shadowing_std_db: float = 4.0
    asd_azimuth: float = math.radians(15)
    asd_elevation: float = math.radians(15)
    antenna_spacing: float = 0.5
    # compute and latency
    fronthaul_capacity: float = 10e9
    quant_bits: int = 16
    f_cpu: float = 1e10
    f_ap_range: tuple[float, float] = (2e9, 4e9)
    latency_budget: float = 0.2
    latency_budget_cell: float = 0.3
    task_bits_range: tuple[float, float] = (1e6, 4e6)
    cycles_per_bit: float = 50.0
    # objective
    omega_p: float = 1.0
    omega_se: float = 1.0
    # scenario selection
    mode: str = "cellfree"
    ap_selection: str = "dcc"
    feasibility_mode: str = "rough-then-accurate"
    preset: str = "desk"
    # Monte-Carlo
    rng_seed: int = 0
    n_snapshots: int = 50
    n_realizations: int = 20
    # solver tolerances
    sca_tol: float = 0.005
    sca_max_iter: int = 50
    kkt_tol: float = 1e-7
    bisection_eps: float = 0.005
    bisection_gap: float = 1e-5
    power_control_tol: float = 0.005
    power_control_max_iter: int = 200
    f_min: float = 1.0

    def __post_init__(self) -> None:
        # JSON round-trips tuples as lists
        object.__setattr__(self, "f_ap_range", tuple(float(x) for x in self.f_ap_range))
        object.__setattr__(self, "task_bits_range", tuple(float(x) for x in self.task_bits_range))
        validate(self)

    @property
    def tau_u(self) -> int:
        return self.tau_c - self.tau_p

    @property
    def prelog(self) -> float:
        return self.tau_u / self.tau_c

    @property
    def radio_dims(self) -> tuple[int, int]:
        """(number of radio sites, antennas per site) for the configured mode."""
        if self.mode == "cellular":
            return self.n_bs, self.antennas_per_bs
        return self.n_aps, self.antennas_per_ap

    @property
    def selection(self) -> tuple[str, float | None]:
        return parse_ap_selection(self.ap_selection)

    def replace(self, **changes: Any) -> "SystemConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["f_ap_range"] = list(self.f_ap_range)
        d["task_bits_range"] = list(self.task_bits_range)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def parse_ap_selection(text: str) -> tuple[str, float | None]:
    """Parse ``dcc``, ``fcc:G`` or ``lsfbs:T`` into (kind, parameter)."""
    kind, _, arg = text.lower().partition(":")
    if kind == "dcc" and not arg:
        return "dcc", None
    if kind == "fcc":
        try:
            g = int(arg) if arg else 5
        except ValueError as exc:
            raise ConfigError(f"bad FCC cluster size in {text!r}") from exc
        if g < 1:
            raise ConfigError("FCC cluster size must be >= 1")
        return "fcc", float(g)
    if kind == "lsfbs":
        try:
            t = float(arg) if arg else 0.95
        except ValueError as exc:
            raise ConfigError(f"bad LSFBS threshold in {text!r}") from exc
        if not 0.0 < t <= 1.0:
            raise ConfigError("LSFBS threshold must lie in (0, 1]")
        return "lsfbs", t
    raise ConfigError(f"unknown AP selection {text!r}")


def validate(cfg: SystemConfig) -> None:
    positive = [
        "area_side", "bandwidth", "carrier_freq", "noise_power", "p_max",
        "fronthaul_capacity", "f_cpu", "latency_budget", "latency_budget_cell",
        "cycles_per_bit", "antenna_spacing", "min_distance", "ap_height",
    ]
    for name in positive:
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be strictly positive")
    for name in ("n_aps", "antennas_per_ap", "n_bs", "antennas_per_bs", "n_users",
                 "tau_p", "quant_bits", "n_snapshots", "n_realizations", "sca_max_iter"):
        if int(getattr(cfg, name)) < 1:
            raise ConfigError(f"{name} must be >= 1")
    if cfg.tau_c <= cfg.tau_p:
        raise ConfigError("tau_c must exceed tau_p (tau_u = tau_c - tau_p > 0)")
    for name in ("n_aps", "n_bs"):
        n = getattr(cfg, name)
        if math.isqrt(n) ** 2 != n:
            raise ConfigError(f"{name}={n} is not a perfect square")
    lo, hi = cfg.f_ap_range
    if not 0 < lo <= hi:
        raise ConfigError("f_ap_range must satisfy 0 < low <= high")
    lo, hi = cfg.task_bits_range
    if not 0 < lo <= hi:
        raise ConfigError("task_bits_range must satisfy 0 < low <= high")
    for name in ("omega_p", "omega_se"):
        if not 0.0 <= getattr(cfg, name) <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1]")
    if cfg.omega_p == 0 and cfg.omega_se == 0:
        raise ConfigError("omega_p and omega_se cannot both be zero")
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if cfg.feasibility_mode not in FEASIBILITY_MODES:
        raise ConfigError(f"feasibility_mode must be one of {FEASIBILITY_MODES}")
    parse_ap_selection(cfg.ap_selection)
    if cfg.asd_azimuth < 0 or cfg.asd_elevation < 0:
        raise ConfigError("angular standard deviations must be non-negative")


# Presets only override fields; "desk" and "full" set the scale, "loose" and
# "strict" set the task sizes. They compose left to right.
PRESETS: dict[str, dict[str, Any]] = {
    "desk": dict(n_aps=25, antennas_per_ap=4, n_bs=4, antennas_per_bs=25, n_users=8,
                 n_snapshots=50, n_realizations=20),
    "full": dict(n_aps=100, antennas_per_ap=4, n_bs=4, antennas_per_bs=100, n_users=20,
                  n_snapshots=200, n_realizations=200),
    "loose": dict(task_bits_range=(1e6, 4e6)),
    "strict": dict(task_bits_range=(5e6, 10e6)),
}


def from_presets(*names: str, **overrides: Any) -> SystemConfig:
    values: dict[str, Any] = {}
    for name in names:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[name])
    values.update(overrides)
    values.setdefault("preset", "+".join(names) if names else "desk")
    return build(values)


def build(values: dict[str, Any]) -> SystemConfig:
    known = {f.name for f in dataclasses.fields(SystemConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    try:
        return SystemConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load(path: str | Path, **overrides: Any) -> SystemConfig:
    """Load a flat JSON config; unknown keys are rejected."""
    try:
        values = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError("config file must hold a JSON object")
    values.update(overrides)
    return build(values)


def dump(cfg: SystemConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


__all__ = [
    "ConfigError", "SystemConfig", "PRESETS", "MODES", "FEASIBILITY_MODES",
    "from_presets", "build", "load", "dump", "parse_ap_selection", "validate",
]
