"""Feasibility checks for the JPCA problem.

``rough_check`` tests necessary conditions at one power allocation. The
accurate pipeline finds a certified starting point: a minimal-compute LP, a
bisection on the largest required rate, then a standard power-control fixed
point that meets the resulting SINR targets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.optimize

from .association import ComputeSupport
from .combining import LinkCoefficients
from .config import SystemConfig
from .errors import InfeasibleError
from .offloading import OffloadingDemand

F_SCALE = 1e9

LIKELY_FEASIBLE = "likely-feasible"
INCONCLUSIVE_FAIL = "inconclusive-fail"
FEASIBLE = "feasible"
LP_INFEASIBLE = "lp-infeasible"
BISECTION_INFEASIBLE = "bisection-infeasible"
TARGETS_INFEASIBLE = "targets-infeasible"
TARGETS_INFEASIBLE_BOX = "targets-infeasible-under-box"
NO_CONVERGENCE = "no-convergence"


# ---------------------------------------------------------------------------
# Rough check


@dataclass(frozen=True)
class RoughVerdict:
    verdict: str
    rate_ok: np.ndarray          # (K,) R_k > b_k / L~_k
    compute_need: np.ndarray     # per budget group: sum of w_k / (L~_k - b_k / R_k)
    compute_have: np.ndarray

    @property
    def passed(self) -> bool:
        return self.verdict == LIKELY_FEASIBLE


def rough_check(rates: np.ndarray, demand: OffloadingDemand, support: ComputeSupport,
                budget: np.ndarray | None = None) -> RoughVerdict:
    """Necessary conditions at the rates R_k = B SE_k of one power allocation.

    With a CPU (cell-free, C-RAN) the compute condition is aggregated over the
    CPU and the APs serving at least one user; without one (cellular) it is
    checked per BS over the users it serves. Passing does not prove
    feasibility and failing does not prove infeasibility.
    """
    rates = np.asarray(rates, dtype=float)
    budget = demand.effective_budget if budget is None else np.asarray(budget, dtype=float)
    # a non-positive effective budget (fronthaul alone overshoots) can never be met
    rate_ok = (budget > 0) & (rates * budget > demand.bits)
    with np.errstate(divide="ignore", invalid="ignore"):
        slack = budget - demand.bits / rates
        need_k = np.where(rate_ok, demand.cycles / np.where(rate_ok, slack, 1.0), np.inf)
    if support.has_cpu:
        used = support.allowed.any(axis=0)
        need = np.array([need_k.sum()])
        have = np.array([support.capacity[used].sum()])
    else:
        server = np.argmax(support.allowed, axis=1)
        used = np.unique(server)
        need = np.array([need_k[server == s].sum() for s in used])
        have = support.capacity[used]
    ok = bool(rate_ok.all() and np.all(need < have))
    return RoughVerdict(LIKELY_FEASIBLE if ok else INCONCLUSIVE_FAIL, rate_ok, need, have)


# ---------------------------------------------------------------------------
# Compute LPs


@dataclass(frozen=True)
class LpResult:
    f_pairs: np.ndarray    # cycles/s per allowed (user, server) pair
    objective: float       # total allocated cycles/s


def _lp_minimal(demand_rate: np.ndarray, support: ComputeSupport) -> LpResult | None:
    """min sum f  s.t. f_k >= demand_rate_k, server loads <= capacity, f >= 0.

    Ties are broken by a second LP that keeps the optimal total and prefers
    the CPU, then sites by index.
    """
    um, sm = support.user_matrix(), support.server_matrix()
    cap = support.capacity / F_SCALE
    need = np.asarray(demand_rate, dtype=float) / F_SCALE
    n = support.n_vars
    a_ub = np.vstack([-um, sm])
    b_ub = np.concatenate([-need, cap])
    res = scipy.optimize.linprog(np.ones(n), A_ub=a_ub, b_ub=b_ub, bounds=(0, None), method="highs")
    if res.status == 2:
        return None
    if res.status != 0:
        raise InfeasibleError("lp", f"LP solver failed: {res.message}")
    total = float(res.fun)
    rank = support.server_rank()
    a2 = np.vstack([a_ub, np.ones((1, n))])
    b2 = np.concatenate([b_ub, [total * (1 + 1e-12) + 1e-15]])
    res2 = scipy.optimize.linprog(rank, A_ub=a2, b_ub=b2, bounds=(0, None), method="highs")
    x = res2.x if res2.status == 0 else res.x
    x = np.maximum(x, 0.0)
    return LpResult(x * F_SCALE, float(x.sum() * F_SCALE))


def min_compute_lp(demand: OffloadingDemand, support: ComputeSupport,
                   budget: np.ndarray | None = None) -> LpResult:
    """Minimal total compute meeting w_k / L~_k for every user (zero transmit time)."""
    budget = demand.effective_budget if budget is None else np.asarray(budget, dtype=float)
    if np.any(budget <= 0):
        raise InfeasibleError("lp", "effective latency budget is not positive")
    res = _lp_minimal(demand.cycles / budget, support)
    if res is None:
        raise InfeasibleError("lp", "compute demand w_k / L~_k exceeds the server budgets")
    return res


@dataclass(frozen=True)
class BisectionResult:
    t_star: float
    f_pairs: np.ndarray
    t_low: float
    t_up: float
    probes: int

    @property
    def width(self) -> float:
        return self.t_up - self.t_low


def rate_probe(t: float, demand: OffloadingDemand, support: ComputeSupport, bandwidth: float,
               budget: np.ndarray) -> LpResult | None:
    """Compute split that leaves L~_k - b_k / (t B) for processing, or None."""
    slack = budget - demand.bits / (t * bandwidth)
    if np.any(slack <= 0):
        return None
    return _lp_minimal(demand.cycles / slack, support)


def min_max_rate_bisection(demand: OffloadingDemand, support: ComputeSupport, bandwidth: float,
                           eps: float = 0.005, gap: float = 1e-5,
                           budget: np.ndarray | None = None) -> BisectionResult:
    """Smallest common rate surrogate t (bit/s/Hz) for which the compute fits.

    t_low is infeasible (no time left for processing), t_up = t_low / eps
    must be feasible. The returned ``f_pairs`` is the last feasible probe.
    """
    budget = demand.effective_budget if budget is None else np.asarray(budget, dtype=float)
    if np.any(budget <= 0):
        raise InfeasibleError("bisection", "effective latency budget is not positive")
    t_low = float(np.max(demand.bits / (bandwidth * budget)))
    t_up = float(np.max(demand.bits / (eps * bandwidth * budget)))
    best = rate_probe(t_up, demand, support, bandwidth, budget)
    probes = 1
    if best is None:
        raise InfeasibleError("bisection", "no feasible compute split even at the upper rate bound")
    while t_up - t_low > gap:
        mid = 0.5 * (t_low + t_up)
        res = rate_probe(mid, demand, support, bandwidth, budget)
        probes += 1
        if res is None:
            t_low = mid
        else:
            t_up, best = mid, res
    return BisectionResult(t_up, best.f_pairs, t_low, t_up, probes)


# ---------------------------------------------------------------------------
# Standard power control


def spectral_radius(mat: np.ndarray, max_iter: int = 200, tol: float = 1e-10,
                    dense_limit: int = 32) -> float:
    """Perron root of a nonnegative matrix.

    Power iteration on mat + I (the shift removes periodicity) with
    Collatz-Wielandt bounds as the stopping rule; a dense eigensolver takes
    over if that has not converged and the matrix is small.
    """
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[0]
    if n == 0:
        return 0.0
    shifted = mat + np.eye(n)
    x = np.ones(n) / n
    lo, hi = 0.0, math.inf
    for _ in range(max_iter):
        y = shifted @ x
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = y / x
        lo, hi = float(np.min(ratio)), float(np.max(ratio))
        x = y / y.sum()
        if hi - lo <= tol * hi:
            return 0.5 * (lo + hi) - 1.0
        if np.any(x <= 0):
            break
    if n <= dense_limit:
        return float(np.max(np.abs(np.linalg.eigvals(mat))))
    return hi - 1.0  # upper bound, conservative for the gate


@dataclass(frozen=True)
class SinrTargets:
    """SINR targets from a compute split and the matrices of the fixed-point map."""

    z: np.ndarray           # required log2(1 + SINR)
    gamma: np.ndarray       # 2^z - 1

    @classmethod
    def from_compute(cls, f_user: np.ndarray, demand: OffloadingDemand, cfg: SystemConfig,
                     budget: np.ndarray | None = None) -> "SinrTargets":
        budget = demand.effective_budget if budget is None else np.asarray(budget, dtype=float)
        slack = budget - demand.cycles / np.asarray(f_user, dtype=float)
        if np.any(slack <= 0):
            raise InfeasibleError("power-control", "compute split leaves no time for transmission")
        z = demand.bits * cfg.tau_c / (cfg.bandwidth * cfg.tau_u) / slack
        return cls(z, np.exp2(z) - 1.0)


@dataclass(frozen=True)
class InterferenceMap:
    """I(p) = Y G^{-1} (Z p + noise u) for fixed combiners."""

    gdiag: np.ndarray
    zmat: np.ndarray
    noise: np.ndarray       # noise * u
    gamma: np.ndarray

    @classmethod
    def build(cls, coeffs: LinkCoefficients, gamma: np.ndarray) -> "InterferenceMap":
        g, c = coeffs.g, coeffs.c
        gdiag = np.diag(g) - np.diag(c) * gamma
        zmat = g + c
        zmat[np.diag_indices_from(zmat)] = 0.0
        return cls(gdiag, zmat, coeffs.noise_power * coeffs.u, np.asarray(gamma, dtype=float))

    @property
    def gate_open(self) -> bool:
        return bool(np.all(self.gdiag > 0))

    @property
    def gain(self) -> np.ndarray:
        """Y G^{-1} Z."""
        return (self.gamma / self.gdiag)[:, None] * self.zmat

    def rho(self) -> float:
        return spectral_radius(self.gain)

    def __call__(self, p: np.ndarray) -> np.ndarray:
        return self.gamma / self.gdiag * (self.zmat @ np.asarray(p, dtype=float) + self.noise)


@dataclass
class PowerControlResult:
    verdict: str
    p: np.ndarray
    iterations: int
    rho: float
    sinr_ratio: np.ndarray = field(default_factory=lambda: np.zeros(0))  # SINR / target

    @property
    def feasible(self) -> bool:
        return self.verdict == FEASIBLE


def standard_power_control(targets: SinrTargets, model, p_init: np.ndarray, cfg: SystemConfig,
                           max_iter: int | None = None, tol: float | None = None) -> PowerControlResult:
    """Fixed-point iteration p <- I(p) with combiners rebuilt at every iterate.

    Each step is gated on positive G diagonal and rho < 1. Stops when the
    largest relative power change is at most ``tol``; a converged point above
    p_max is reported as infeasible under the power box.
    """
    max_iter = cfg.power_control_max_iter if max_iter is None else max_iter
    tol = cfg.power_control_tol if tol is None else tol
    p = np.asarray(p_init, dtype=float).copy()
    rho = float("nan")
    for it in range(1, max_iter + 1):
        coeffs = model.coefficients(p)
        imap = InterferenceMap.build(coeffs, targets.gamma)
        if not imap.gate_open:
            return PowerControlResult(TARGETS_INFEASIBLE, p, it, rho)
        rho = imap.rho()
        if not rho < 1.0:
            return PowerControlResult(TARGETS_INFEASIBLE, p, it, rho)
        p_new = imap(p)
        chi = float(np.max(np.abs(p_new - p) / np.maximum(p, 1e-300)))
        # equality check uses the combiners that produced this update
        ratio = coeffs.sinr(p_new) / targets.gamma
        p = p_new
        if chi <= tol:
            verdict = TARGETS_INFEASIBLE_BOX if np.any(p > cfg.p_max) else FEASIBLE
            return PowerControlResult(verdict, p, it, rho, ratio)
    return PowerControlResult(NO_CONVERGENCE, p, max_iter, rho)


# ---------------------------------------------------------------------------
# Accurate pipeline


@dataclass
class FeasibilityReport:
    stage: str                    # last stage reached: lp, bisection, power-control
    verdict: str
    p_star: np.ndarray | None = None
    f_star: np.ndarray | None = None
    t_star: float = float("nan")
    rho: float = float("nan")
    iterations: int = 0
    interval: float = float("nan")
    reason: str = ""

    @property
    def feasible(self) -> bool:
        return self.verdict == FEASIBLE

    def raise_if_infeasible(self) -> None:
        if not self.feasible:
            raise InfeasibleError(self.stage, f"{self.verdict}: {self.reason}")


def accurate_pipeline(model, demand: OffloadingDemand, support: ComputeSupport, cfg: SystemConfig,
                      p_init: np.ndarray, budget: np.ndarray | None = None) -> FeasibilityReport:
    """LP, then bisection, then power control; the first failing stage is reported."""
    try:
        min_compute_lp(demand, support, budget)
    except InfeasibleError as exc:
        return FeasibilityReport("lp", LP_INFEASIBLE, reason=exc.reason)
    try:
        bis = min_max_rate_bisection(demand, support, cfg.bandwidth, cfg.bisection_eps,
                                     cfg.bisection_gap, budget)
    except InfeasibleError as exc:
        return FeasibilityReport("bisection", BISECTION_INFEASIBLE, reason=exc.reason)
    f_user = support.per_user(bis.f_pairs)
    try:
        targets = SinrTargets.from_compute(f_user, demand, cfg, budget)
    except InfeasibleError as exc:
        return FeasibilityReport("power-control", TARGETS_INFEASIBLE, f_star=bis.f_pairs,
                                 t_star=bis.t_star, interval=bis.width, reason=exc.reason)
    pc = standard_power_control(targets, model, p_init, cfg)
    return FeasibilityReport("power-control", pc.verdict, p_star=pc.p, f_star=bis.f_pairs,
                             t_star=bis.t_star, rho=pc.rho, iterations=pc.iterations,
                             interval=bis.width,
                             reason="" if pc.feasible else "SINR targets not feasible")


def write_report_csv(rows: list[tuple[int, FeasibilityReport]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["snapshot", "stage", "verdict", "rho", "iterations"])
        for snap, rep in rows:
            w.writerow([snap, rep.stage, rep.verdict, repr(float(rep.rho)), rep.iterations])
