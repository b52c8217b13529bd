"""Joint power and compute allocation by sequential convex approximation.

Each iteration freezes the receive combiners at the previous powers, which
makes num_k and den_k affine in p. The SE is then lower-bounded by a concave
function (the log of den is linearised at the previous point) and the convex
subproblem is solved with an exponential-cone interior-point method.

Internally powers are scaled by p_max, compute variables by ``F_SCALE`` and
the SINR coefficients by the noise term, so all quantities are O(1).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cvxpy as cp
import numpy as np
import scipy.optimize

from .association import ComputeSupport, ServingTopology
from .combining import LinkCoefficients, build_combiners, link_coefficients
from .config import SystemConfig
from .errors import InfeasibleError, InvariantError, SolverError
from .estimation import ChannelEstimate
from .offloading import LatencyBreakdown, OffloadingDemand, latency_breakdown, objective_weights

F_SCALE = 1e9
LN2 = math.log(2.0)
MONOTONE_SLACK = 1e-8
LATENCY_RTOL = 1e-6

# Interior-point settings tried in order; the first whose KKT residual meets
# the target wins. Clarabel may label very tight runs "inaccurate", so the
# status is only advisory and the residual is checked independently. The
# first field selects the compiled problem instance: equilibration can only
# be chosen when an instance is first solved.
_TIGHT = dict(tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12, tol_ktratio=1e-10, max_iter=400)
SOLVER_LADDER = (
    ("default", _TIGHT),
    ("default", dict(_TIGHT, tol_gap_abs=1e-13, tol_gap_rel=1e-13, tol_feas=1e-13,
                     tol_ktratio=1e-12, static_regularization_constant=1e-12)),
    ("no-equilibration", dict(_TIGHT, equilibrate_enable=False)),
    ("default", dict(tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10, tol_ktratio=1e-8,
                     max_iter=400)),
)


# ---------------------------------------------------------------------------
# Radio side: combiners and the affine SINR coefficients


@dataclass
class RadioModel:
    """Estimates plus the combining rule; yields SINR coefficients at any powers."""

    estimate: ChannelEstimate
    topology: ServingTopology
    combiner: str          # "pmmse" (cell-free, C-RAN) or "lmmse" (cellular)
    noise_power: float
    prelog: float

    def coefficients(self, p: np.ndarray) -> LinkCoefficients:
        comb = build_combiners(self.combiner, self.estimate.h_hat, self.estimate.error_cov,
                               self.topology, p, self.noise_power)
        return link_coefficients(comb, self.estimate.h_hat, self.estimate.error_cov,
                                 self.topology, self.noise_power)

    def se(self, p: np.ndarray) -> np.ndarray:
        return self.coefficients(p).se(p, self.prelog)


def refresh_coefficients(model: RadioModel, p: np.ndarray,
                         current: LinkCoefficients | None) -> LinkCoefficients:
    """Combiners rebuilt at ``p``; a user keeps its previous combiner if that one
    gives a higher SINR at ``p`` (P-MMSE ignores interferers outside S_k, so
    the rebuilt combiner is not always better)."""
    fresh = model.coefficients(p)
    if current is None:
        return fresh
    keep_old = current.sinr(p) > fresh.sinr(p)
    return fresh.select_rows(keep_old, current)


# ---------------------------------------------------------------------------
# Concave lower bound of the SE


@dataclass(frozen=True)
class BoundCoefficients:
    """num+den = abar p + c and den = a p + c (c = noise * u), from fixed combiners."""

    abar: np.ndarray   # (K, K)
    a: np.ndarray      # (K, K)
    c: np.ndarray      # (K,)
    prelog: float

    @classmethod
    def from_links(cls, coeffs: LinkCoefficients, prelog: float) -> "BoundCoefficients":
        a = coeffs.interference
        abar = a + np.diag(coeffs.signal)
        return cls(abar, a, coeffs.noise_power * coeffs.u, prelog)

    def se(self, p: np.ndarray) -> np.ndarray:
        return self.prelog * (np.log2(self.abar @ p + self.c) - np.log2(self.a @ p + self.c))

    def se_grad(self, p: np.ndarray) -> np.ndarray:
        """(K, K) Jacobian of the exact SE."""
        return self.prelog / LN2 * (self.abar / (self.abar @ p + self.c)[:, None]
                                    - self.a / (self.a @ p + self.c)[:, None])


def se_lower_bound(p: np.ndarray, p0: np.ndarray, bc: BoundCoefficients):
    """SE~_k(p, p0) and its (K, K) Jacobian in p.

    log2(num+den) is kept, log2(den) is replaced by its tangent at p0, so the
    result is concave in p, tight at p0 and below SE everywhere.
    """
    p = np.asarray(p, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    top = bc.abar @ p + bc.c
    den0 = bc.a @ p0 + bc.c
    if np.any(top <= 0) or np.any(den0 <= 0):
        raise ValueError("non-positive argument in the SE bound")
    tangent = np.log2(den0) + (bc.a @ (p - p0)) / (den0 * LN2)
    value = bc.prelog * (np.log2(top) - tangent)
    grad = bc.prelog / LN2 * (bc.abar / top[:, None] - bc.a / den0[:, None])
    return value, grad


# ---------------------------------------------------------------------------
# Convex subproblem


@dataclass
class SubproblemSolution:
    p: np.ndarray
    nu: np.ndarray
    f_pairs: np.ndarray      # cycles/s per allowed (user, server) pair
    objective: float
    kkt_residual: float
    status: str


class Subproblem:
    """Parametrised convex subproblem for one compute-support pattern.

    Variables (scaled): x = p / p_max in [0, 1], s = nu (SE lower-bound
    epigraph), y = compute pairs / F_SCALE. Constraints:
      s_k <= SE~_k(x)                                (exp cone)
      (b_k/B) / s_k + (w_k/F_SCALE) / (U y)_k <= L~_k  (inverse = SOC)
      server loads <= capacities,  y >= f_min / F_SCALE.
    Parameters allow reuse of the compiled problem across SCA iterations
    and channel realizations.
    """

    def __init__(self, n_users: int, support: ComputeSupport, prelog: float, f_min: float = 1.0,
                 kkt_tol: float = 1e-7):
        k = n_users
        self.kkt_tol = kkt_tol
        self.kappa = prelog / LN2
        self.support = support
        self.k = k
        um = support.user_matrix()
        sm = support.server_matrix()
        self._um = um
        self._sm = sm
        x = cp.Variable(k, name="x")
        s = cp.Variable(k, name="s")
        y = cp.Variable(support.n_vars, name="y")
        self.x, self.s, self.y = x, s, y

        self.A1 = cp.Parameter((k, k), name="A1", nonneg=True)
        self.c1 = cp.Parameter(k, name="c1", nonneg=True)
        self.G = cp.Parameter((k, k), name="G", nonneg=True)
        self.const = cp.Parameter(k, name="const")
        self.tb = cp.Parameter(k, nonneg=True, name="tb")
        self.tw = cp.Parameter(k, nonneg=True, name="tw")
        self.budget = cp.Parameter(k, name="budget")
        self.cap = cp.Parameter(support.capacity.size, nonneg=True, name="cap")
        self.wp = cp.Parameter(nonneg=True, name="wp")
        self.wse = cp.Parameter(nonneg=True, name="wse")
        self.ymin = f_min / F_SCALE

        bound = self.kappa * (cp.log(self.A1 @ x + self.c1) + self.const - self.G @ x)
        f_user = um @ y
        self.cons_bound = s <= bound
        self.cons_latency = (cp.multiply(self.tb, cp.inv_pos(s))
                             + cp.multiply(self.tw, cp.inv_pos(f_user)) <= self.budget)
        self.cons_cap = sm @ y <= self.cap
        self.cons_ymin = y >= self.ymin
        # implied by the budgets and y >= ymin; bounding every pair variable
        # keeps the interior-point iterates well conditioned when the
        # compute split is degenerate (no budget active)
        self.cap_pairs = cp.Parameter(support.n_vars, nonneg=True, name="cap_pairs")
        self.cons_yub = y <= self.cap_pairs
        self.cons_xlo = x >= 0
        self.cons_xhi = x <= 1
        obj = cp.Minimize(self.wp * cp.sum(x) - self.wse * cp.sum(s))
        self.problem = cp.Problem(obj, [self.cons_bound, self.cons_latency, self.cons_cap,
                                        self.cons_ymin, self.cons_yub, self.cons_xlo,
                                        self.cons_xhi])
        self._instances = {"default": self.problem}
        self._last_status = None

    def solve(self, bc: BoundCoefficients, p0: np.ndarray, demand_bits: np.ndarray,
              demand_cycles: np.ndarray, budget: np.ndarray, weights: tuple[float, float],
              p_max: float, bandwidth: float) -> SubproblemSolution:
        x0 = np.asarray(p0, dtype=float) / p_max
        # normalise by the noise term and the value at the expansion point
        abar = bc.abar * p_max / bc.c[:, None]
        a = bc.a * p_max / bc.c[:, None]
        n0 = abar @ x0 + 1.0
        d0 = a @ x0 + 1.0
        self.A1.value = abar / n0[:, None]
        self.c1.value = 1.0 / n0
        g = a / d0[:, None]
        self.G.value = g
        self.const.value = np.log(n0 / d0) + g @ x0
        self.tb.value = demand_bits / bandwidth
        self.tw.value = demand_cycles / F_SCALE
        self.budget.value = np.asarray(budget, dtype=float)
        self.cap.value = self.support.capacity / F_SCALE
        self.cap_pairs.value = self.cap.value[self.support.pairs[1]]
        self.wp.value = weights[0] * p_max
        self.wse.value = weights[1]
        best = None
        statuses = []
        for key, opts in SOLVER_LADDER:
            sol = self._solve_once(self._instance(key), opts, weights, p_max)
            statuses.append(self._last_status)
            if sol is None:
                continue
            if best is None or sol.kkt_residual < best.kkt_residual:
                best = sol
            if best.kkt_residual <= self.kkt_tol:
                break
        if best is None:
            if cp.INFEASIBLE in statuses:
                raise InfeasibleError("sca-subproblem", "convex subproblem infeasible")
            raise SolverError(f"subproblem solver failed (statuses {statuses})")
        return best

    def _instance(self, key: str) -> cp.Problem:
        if key not in self._instances:
            self._instances[key] = cp.Problem(self.problem.objective, self.problem.constraints)
        return self._instances[key]

    def _solve_once(self, problem: cp.Problem, opts: dict, weights: tuple[float, float],
                    p_max: float) -> SubproblemSolution | None:
        self._last_status = None
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                # a warm-started (updated in place) solver object can fail on a
                # re-parametrised instance that a fresh solve handles
                problem.solve(solver=cp.CLARABEL, warm_start=False, **opts)
        except cp.error.SolverError:
            return None
        status = self._last_status = problem.status
        if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or self.x.value is None:
            return None
        x = np.clip(self.x.value, 0.0, 1.0)
        s = np.asarray(self.s.value, dtype=float)
        y = np.maximum(np.asarray(self.y.value, dtype=float), self.ymin)
        if np.any(s <= 0):
            return None
        m = self._solver_multipliers()
        kkt = self.kkt_residual(x, s, y, m)
        if kkt > self.kkt_tol:
            z, m = self.polish(np.concatenate([x, s, y]), m)
            xp, sp, yp = z[:self.k], z[self.k:2 * self.k], z[2 * self.k:]
            kkt_p = self.kkt_residual(xp, sp, yp, m)
            if kkt_p < kkt:
                x, s, y, kkt = xp, sp, yp, kkt_p
        obj = weights[0] * p_max * x.sum() - weights[1] * s.sum()
        return SubproblemSolution(x * p_max, s, y * F_SCALE, float(obj), kkt, status)

    def _constraints_at(self, x: np.ndarray, s: np.ndarray, y: np.ndarray):
        """Constraint values g (<= 0 when feasible) and their Jacobian in (x, s, y).

        Latency rows are divided by the budget and capacity rows by the
        capacity so every row is dimensionless.
        """
        k, n = self.k, y.size
        A1, c1, G = self.A1.value, self.c1.value, self.G.value
        tb, tw, budget, cap = self.tb.value, self.tw.value, self.budget.value, self.cap.value
        capp = self.cap_pairs.value
        um, sm = self._um, self._sm
        arg = A1 @ x + c1
        jac = self.kappa * (A1 / arg[:, None] - G)
        fu = um @ y
        capn = np.maximum(cap, 1e-12)
        eye_k, eye_n = np.eye(k), np.eye(n)
        zk, zkn = np.zeros((k, k)), np.zeros((k, n))
        blocks = [
            (s - self.kappa * (np.log(arg) + self.const.value - G @ x), [-jac, eye_k, zkn]),
            ((tb / s + tw / fu) / budget - 1.0,
             [zk, np.diag(-tb / s**2 / budget), -(tw / fu**2 / budget)[:, None] * um]),
            ((sm @ y - cap) / capn, [np.zeros((cap.size, k)), np.zeros((cap.size, k)), sm / capn[:, None]]),
            (self.ymin - y, [np.zeros((n, k)), np.zeros((n, k)), -eye_n]),
            (y - capp, [np.zeros((n, k)), np.zeros((n, k)), eye_n]),
            (-x, [-eye_k, zk, zkn]),
            (x - 1.0, [eye_k, zk, zkn]),
        ]
        g = np.concatenate([b[0] for b in blocks])
        jmat = np.vstack([np.hstack(b[1]) for b in blocks])
        return g, jmat

    def _solver_multipliers(self) -> np.ndarray:
        cap = np.maximum(self.cap.value, 1e-12)
        parts = [self.cons_bound.dual_value,
                 np.asarray(self.cons_latency.dual_value) * self.budget.value,
                 np.asarray(self.cons_cap.dual_value) * cap,
                 self.cons_ymin.dual_value, self.cons_yub.dual_value,
                 self.cons_xlo.dual_value, self.cons_xhi.dual_value]
        return np.maximum(np.concatenate([np.atleast_1d(np.asarray(v, dtype=float)) for v in parts]), 0.0)

    def _hessians(self, x: np.ndarray, s: np.ndarray, y: np.ndarray, m: np.ndarray) -> np.ndarray:
        """Hessian of sum_j m_j g_j in (x, s, y) for the row scaling of ``_constraints_at``."""
        k, n = self.k, y.size
        A1, c1 = self.A1.value, self.c1.value
        tb, tw, budget = self.tb.value, self.tw.value, self.budget.value
        lam, mu = m[:k], m[k:2 * k]
        arg = A1 @ x + c1
        h = np.zeros((2 * k + n, 2 * k + n))
        h[:k, :k] = self.kappa * (A1.T * (lam / arg**2)) @ A1
        h[k:2 * k, k:2 * k] = np.diag(mu * 2 * tb / s**3 / budget)
        fu = self._um @ y
        wy = mu * 2 * tw / fu**3 / budget
        h[2 * k:, 2 * k:] = (self._um.T * wy) @ self._um
        return h

    def _residual(self, z: np.ndarray, m: np.ndarray):
        k = self.k
        x, s, y = z[:k], z[k:2 * k], z[2 * k:]
        g, jmat = self._constraints_at(x, s, y)
        grad = np.concatenate([np.full(k, self.wp.value), np.full(k, -self.wse.value),
                               np.zeros(y.size)])
        terms = np.abs(jmat.T * m)
        scale = max(1.0, float(np.max(np.abs(grad))), float(np.max(terms)))
        stat = float(np.max(np.abs(grad + jmat.T @ m))) / scale
        comp = float(np.max(np.abs(m * g))) / scale
        feas = max(0.0, float(np.max(g)))
        return stat, comp, feas, g, jmat, grad

    def polish(self, z: np.ndarray, m: np.ndarray, active_tol: float = 1e-7,
               rounds: int = 4, steps: int = 8):
        """Active-set Newton refinement of the KKT system from an interior-point point.

        Newton steps (least squares, so degenerate compute splits are fine)
        solve stationarity plus equality on the working set; constraints whose
        multiplier turns negative leave the set and violated ones join it.
        Returns the (z, m) with the smallest residual seen.
        """
        k = self.k
        best = (max(self._residual(z, m)[:3]), z, m)
        g = self._residual(z, m)[3]
        mmax = max(1.0, float(np.max(m)))
        work = (g > -active_tol * np.maximum(1.0, np.abs(g))) & (m > 1e-12 * mmax) | (m > 1e-6 * mmax)
        n_z = z.size
        z0 = z
        for _ in range(rounds):
            zc, mc = z0.copy(), np.where(work, m, 0.0)
            valid = True
            for _ in range(steps):
                _, _, _, g, jmat, grad = self._residual(zc, mc)
                h = self._hessians(zc[:k], zc[k:2 * k], zc[2 * k:], mc)
                act = np.flatnonzero(work)
                ja = jmat[act]
                kkt = np.block([[h, ja.T], [ja, np.zeros((act.size, act.size))]])
                rhs = -np.concatenate([grad + jmat.T @ mc, g[act]])
                step = np.linalg.lstsq(kkt, rhs, rcond=1e-13)[0]
                zc = zc + step[:n_z]
                mc = mc.copy()
                mc[act] += step[n_z:]
                if (np.any(zc[k:2 * k] <= 0) or np.any(self._um @ zc[2 * k:] <= 0)
                        or np.any(self.A1.value @ zc[:k] + self.c1.value <= 0)):
                    valid = False
                    break
                if np.max(np.abs(step)) < 1e-15:
                    break
            if not valid:
                break
            g = self._residual(zc, np.maximum(mc, 0.0))[3]
            if np.all(mc >= 0) and np.all(g <= 1e-14):
                r = max(self._residual(zc, mc)[:3])
                if r < best[0]:
                    best = (r, zc, mc)
                break
            dropped = work & (mc < 0)
            added = ~work & (g > 0)
            if not dropped.any() and not added.any():
                break
            work = (work & ~dropped) | added
        return best[1], best[2]

    def kkt_residual(self, x: np.ndarray, s: np.ndarray, y: np.ndarray,
                     m: np.ndarray | None = None) -> float:
        """Scaled KKT residual of the smooth form at (x, s, y).

        Max over stationarity and complementary slackness (both relative to
        the largest gradient term) and primal infeasibility. Multipliers
        default to the solver's duals; if those miss the target, nonnegative
        least-squares multipliers fitted to the point are tried as well (the
        residual of a point is the best over valid multipliers).
        """
        z = np.concatenate([x, s, y])
        m = self._solver_multipliers() if m is None else m
        stat, comp, feas, g, jmat, grad = self._residual(z, m)
        if max(stat, comp) > self.kkt_tol:
            lhs = np.vstack([jmat.T, np.diag(np.abs(g))])
            rhs = np.concatenate([-grad, np.zeros(g.size)])
            m_ls, _ = scipy.optimize.nnls(lhs, rhs, maxiter=50 * g.size)
            stat2, comp2, *_ = self._residual(z, m_ls)
            if max(stat2, comp2) < max(stat, comp):
                stat, comp = stat2, comp2
        self.last_kkt = {"stationarity": stat, "complementarity": comp, "feasibility": feas}
        return float(max(stat, comp, feas))


# ---------------------------------------------------------------------------
# Outer loop


@dataclass
class TraceRow:
    iteration: int
    objective: float
    max_power_change: float
    kkt_residual: float
    kept_previous: bool


@dataclass
class AllocationResult:
    p: np.ndarray
    f: np.ndarray                 # stacked compute vector (CPU block then AP blocks), integer cycles/s
    f_pairs: np.ndarray           # per allowed (user, server) pair, rounded
    f_user: np.ndarray            # b_k^T f
    server_load: np.ndarray       # per server, rounded
    nu: np.ndarray
    se: np.ndarray                # true instantaneous SE at p with the combiners in force
    latency: LatencyBreakdown
    weights: tuple[float, float]
    iterations: int
    converged: bool
    trace: list[TraceRow]
    violations: dict[str, float] = field(default_factory=dict)
    rounding_ok: bool = True
    support: ComputeSupport | None = None
    combiners: np.ndarray | None = None   # (K, L*M) combiner directions behind ``se``

    @property
    def objective_trace(self) -> list[float]:
        return [r.objective for r in self.trace]

    @property
    def kkt_residuals(self) -> list[float]:
        return [r.kkt_residual for r in self.trace]

    @property
    def feasible(self) -> bool:
        return self.rounding_ok and all(v <= 0 for v in self.violations.values())


def round_compute(f_pairs: np.ndarray, support: ComputeSupport) -> np.ndarray:
    """Ceil every entry, then take back whole cycles/s where a budget is exceeded.

    Entries that were rounded up the most are decremented first; any excess
    left after one pass comes out of the largest entries.
    """
    raw = np.asarray(f_pairs, dtype=float)
    out = np.ceil(raw)
    frac = out - raw
    _, servers = support.pairs
    for srv in range(support.capacity.size):
        idx = np.flatnonzero(servers == srv)
        if idx.size == 0:
            continue
        excess = out[idx].sum() - math.floor(support.capacity[srv])
        if excess <= 0:
            continue
        order = idx[np.argsort(-frac[idx], kind="stable")]
        n = int(min(excess, order.size))
        out[order[:n]] -= 1.0
        excess -= n
        while excess > 0:
            j = idx[np.argmax(out[idx])]
            take = min(excess, out[j] - 1.0)
            if take <= 0:
                break
            out[j] -= take
            excess -= take
    return out


def validate_allocation(p: np.ndarray, se: np.ndarray, f_user: np.ndarray, load: np.ndarray,
                        demand: OffloadingDemand, support: ComputeSupport, p_max: float,
                        bandwidth: float) -> dict[str, float]:
    """Positive entries are violations of the original (non-convexified) constraints."""
    lat = latency_breakdown(demand, se, f_user, bandwidth)
    return {
        "latency": float(np.max(lat.total / demand.budget - 1.0 - LATENCY_RTOL)),
        "budget": float(np.max(load - support.capacity)),
        "power_low": float(np.max(-p)),
        "power_high": float(np.max(p - p_max)),
    }


def run_sca(model: RadioModel, p_init: np.ndarray, demand: OffloadingDemand,
            support: ComputeSupport, cfg: SystemConfig, *, weights: tuple[float, float] | None = None,
            subproblem: Subproblem | None = None, budget: np.ndarray | None = None,
            check_monotone: bool = True) -> AllocationResult:
    """Iterate the convex subproblem from a feasible start until powers settle.

    Stops when the largest relative power change is at most ``cfg.sca_tol``
    or after ``cfg.sca_max_iter`` subproblems. A subproblem point that is worse
    than the previous iterate (possible only through solver inaccuracy, since
    the previous point stays feasible) is replaced by the previous iterate.
    """
    p_init = np.asarray(p_init, dtype=float)
    k = p_init.size
    budget = demand.effective_budget if budget is None else budget
    sub = subproblem or Subproblem(k, support, model.prelog, cfg.f_min, cfg.kkt_tol)
    coeffs = refresh_coefficients(model, p_init, None)
    if weights is None:
        weights = objective_weights(cfg, coeffs.se(p_init, model.prelog))

    p_prev = p_init
    best: SubproblemSolution | None = None
    trace: list[TraceRow] = []
    converged = False
    for it in range(1, cfg.sca_max_iter + 1):
        bc = BoundCoefficients.from_links(coeffs, model.prelog)
        try:
            sol = sub.solve(bc, p_prev, demand.bits, demand.cycles, budget, weights,
                            cfg.p_max, cfg.bandwidth)
        except InfeasibleError:
            if best is None:
                raise
            # previous iterate is feasible by construction; treat as solver trouble
            sol = None
        kept = False
        if best is not None and (sol is None or sol.objective > best.objective):
            if check_monotone and sol is not None and sol.objective > best.objective + MONOTONE_SLACK:
                # confirm the previous point really is feasible before overruling
                se_b, _ = se_lower_bound(best.p, p_prev, bc)
                if np.any(best.nu > se_b * (1 + 1e-9) + 1e-12):
                    raise InvariantError("SCA objective increased and the previous "
                                         "iterate is not feasible for the new subproblem")
            kkt = sol.kkt_residual if sol is not None else float("nan")
            sol = SubproblemSolution(best.p, best.nu, best.f_pairs, best.objective, kkt, "kept-previous")
            kept = True
        change = float(np.max(np.abs(sol.p - p_prev) / np.maximum(p_prev, 1e-12 * cfg.p_max)))
        trace.append(TraceRow(it, sol.objective, change, sol.kkt_residual, kept))
        best = sol
        p_new = sol.p
        coeffs = refresh_coefficients(model, p_new, coeffs)
        p_prev = p_new
        if change <= cfg.sca_tol:
            converged = True
            break

    assert best is not None
    return finalize(best, coeffs, model, demand, support, cfg, weights, trace, converged, budget)


def finalize(sol: SubproblemSolution, coeffs: LinkCoefficients, model: RadioModel,
             demand: OffloadingDemand, support: ComputeSupport, cfg: SystemConfig,
             weights: tuple[float, float], trace: list[TraceRow], converged: bool,
             budget: np.ndarray) -> AllocationResult:
    p = np.clip(sol.p, 0.0, cfg.p_max)
    se = coeffs.se(p, model.prelog)
    f_pairs = round_compute(sol.f_pairs, support)
    f_user = support.per_user(f_pairs)
    load = support.per_server(f_pairs)
    lat = latency_breakdown(demand, se, f_user, cfg.bandwidth)
    violations = validate_allocation(p, se, f_user, load, demand, support, cfg.p_max, cfg.bandwidth)
    # the bound-based latency is what the subproblem enforced; check rounding alone
    lat_raw = latency_breakdown(demand, se, support.per_user(sol.f_pairs), cfg.bandwidth)
    rounding_ok = bool(np.all(lat.total <= np.maximum(lat_raw.total, demand.budget * (1 + LATENCY_RTOL))))
    return AllocationResult(p=p, f=support.to_layout(f_pairs), f_pairs=f_pairs, f_user=f_user,
                            server_load=load, nu=sol.nu, se=se, latency=lat, weights=weights,
                            iterations=len(trace), converged=converged, trace=trace,
                            violations=violations, rounding_ok=rounding_ok, support=support,
                            combiners=coeffs.direction)


def run_sca_cellular(model: RadioModel, p_init: np.ndarray, demand: OffloadingDemand,
                     support: ComputeSupport, cfg: SystemConfig, **kw) -> AllocationResult:
    """Cellular variant: one compute variable per user at its BS, budget L^cell.

    The SE weight normalisation uses the largest per-(BS, user) SE at the
    start, which with single-BS service equals the largest per-user SE.
    """
    if model.combiner != "lmmse":
        raise ValueError("cellular JPCA expects L-MMSE combining")
    if np.any(support.allowed.sum(axis=1) != 1):
        raise ValueError("cellular support must give each user exactly one BS")
    return run_sca(model, p_init, demand, support, cfg, budget=demand.budget, **kw)


def run_sca_cran(model: RadioModel, p_init: np.ndarray, demand: OffloadingDemand,
                 association, f_ap: np.ndarray, cfg: SystemConfig, **kw) -> AllocationResult:
    """C-RAN variant: same radio as cell-free, each task bound to a single server."""
    support = association.support(cfg.f_cpu, f_ap)
    return run_sca(model, p_init, demand, support, cfg, **kw)


def write_trace_csv(rows: list[TraceRow], path: str | Path, run_id: str = "") -> None:
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["run", "iteration", "objective", "max_power_change", "kkt_residual",
                        "kept_previous"])
        for r in rows:
            w.writerow([run_id, r.iteration, repr(r.objective), repr(r.max_power_change),
                        repr(r.kkt_residual), int(r.kept_previous)])
