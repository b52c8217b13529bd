"""Monte-Carlo campaigns, mode comparisons, CDFs and CSV output."""

from __future__ import annotations

import concurrent.futures
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.stats
from threadpoolctl import threadpool_limits

from . import __version__
from . import association as asc
from . import feasibility as fz
from . import jpca, propagation, scenario
from .config import SystemConfig
from .errors import InfeasibleError, TopologyError
from .estimation import estimate_mmse, estimator_stats
from .offloading import energy_per_mbit, generate_demands, objective_weights

RECORD_SCHEMA = "1"
RECORD_FIELDS = [
    "snapshot", "realization", "user", "mode", "ap_selection", "status", "stage", "start",
    "iterations", "converged", "p", "f_user", "se", "nu", "energy_per_mbit", "latency_tx",
    "latency_comp", "latency_fh", "latency_total", "budget", "bits", "pilot", "n_serving",
    "server", "switched_off",
]
CDF_METRICS = ("total_power", "power", "f_user", "server_load", "ergodic_se", "energy_per_mbit",
               "latency")


def init_fractional_powers(beta: np.ndarray, topology: asc.ServingTopology, p_max: float) -> np.ndarray:
    """p0_k = p_max (sum_{M_k} beta)^-1 / max_{i in S_k} (sum_{M_i} beta)^-1."""
    agg = np.array([beta[aps, k].sum() for k, aps in enumerate(topology.serving_aps)])
    if np.any(agg <= 0):
        bad = np.flatnonzero(agg <= 0).tolist()
        raise TopologyError(f"users {bad} have no serving AP")
    inv = 1.0 / agg
    worst = np.array([inv[s].max() for s in topology.partial_sets])
    return p_max * inv / worst


# ---------------------------------------------------------------------------
# Per-snapshot preparation and per-realization solve


@dataclass
class SnapshotContext:
    index: int
    snapshot: scenario.NetworkSnapshot
    topology: asc.ServingTopology
    demand: object
    roots: np.ndarray
    stats: object
    combiner: str
    support: asc.ComputeSupport | None   # None for C-RAN (built per realization)
    p0: np.ndarray


def prepare_snapshot(cfg: SystemConfig, index: int) -> SnapshotContext:
    snap = scenario.build_snapshot(cfg, index)
    if cfg.mode == "cellular":
        topo = asc.associate_cellular(snap.beta, cfg.tau_p)
        combiner = "lmmse"
        support = asc.cellular_support(topo, snap.f_ap)
    else:
        topo = asc.assign_pilots_dcc(snap.beta, cfg.tau_p)
        kind, param = cfg.selection
        topo = asc.apply_selection(topo, snap.beta, kind, param)
        combiner = "pmmse"
        support = asc.cellfree_support(topo, cfg.f_cpu, snap.f_ap) if cfg.mode == "cellfree" else None
    demand = generate_demands(cfg, scenario.stream(cfg.rng_seed, index, scenario.STREAM_DEMANDS))
    stats = estimator_stats(snap.corr, topo.pilot_of, cfg.tau_p, cfg.noise_power, cfg.p_max)
    roots = propagation.correlation_roots(snap.corr)
    p0 = init_fractional_powers(snap.beta, topo, cfg.p_max)
    return SnapshotContext(index, snap, topo, demand, roots, stats, combiner, support, p0)


@dataclass
class RealizationOutcome:
    snapshot: int
    realization: int
    status: str                     # "ok" or "infeasible"
    stage: str
    reason: str = ""
    start: str = ""
    result: jpca.AllocationResult | None = None
    server_of: np.ndarray | None = None
    rough: str = ""
    accurate: fz.FeasibilityReport | None = None


def solve_realization(ctx: SnapshotContext, cfg: SystemConfig, realization: int,
                      subproblems: dict | None = None) -> RealizationOutcome:
    """Estimate, initialise, check feasibility and run JPCA for one channel draw."""
    si = ctx.index
    h = propagation.draw_channels(ctx.roots, scenario.stream(cfg.rng_seed, si, scenario.STREAM_CHANNEL,
                                                             realization))
    est = estimate_mmse(h, ctx.stats, scenario.stream(cfg.rng_seed, si, scenario.STREAM_PILOT_NOISE,
                                                      realization))
    model = jpca.RadioModel(est, ctx.topology, ctx.combiner, cfg.noise_power, cfg.prelog)
    demand, p0 = ctx.demand, ctx.p0
    se0 = model.se(p0)
    weights = objective_weights(cfg, se0)
    out = RealizationOutcome(si, realization, "infeasible", "")

    support, server_of = ctx.support, None
    if cfg.mode == "cran":
        try:
            mu = asc.cran_demands(demand.cycles, demand.bits, demand.effective_budget, se0,
                                  cfg.bandwidth)
            cran = asc.associate_cran(mu, cfg.f_cpu, ctx.snapshot.f_ap)
        except InfeasibleError as exc:
            out.stage, out.reason = exc.stage, exc.reason
            return out
        support, server_of = cran.support(cfg.f_cpu, ctx.snapshot.f_ap), cran.server_of
        out.server_of = server_of

    key = support.allowed.tobytes()
    sub = None
    if subproblems is not None:
        sub = subproblems.get(key)
        if sub is None:
            sub = subproblems[key] = jpca.Subproblem(demand.n_users, support, cfg.prelog,
                                                     cfg.f_min, cfg.kkt_tol)

    def solve_from(p_start):
        if cfg.mode == "cellular":
            return jpca.run_sca_cellular(model, p_start, demand, support, cfg, weights=weights,
                                         subproblem=sub)
        return jpca.run_sca(model, p_start, demand, support, cfg, weights=weights, subproblem=sub)

    def accurate():
        rep = fz.accurate_pipeline(model, demand, support, cfg, p0)
        out.accurate = rep
        return rep

    mode = cfg.feasibility_mode
    start_p = None
    if mode in ("rough", "rough-then-accurate"):
        rv = fz.rough_check(cfg.bandwidth * se0, demand, support)
        out.rough = rv.verdict
        if rv.passed:
            start_p, out.start = p0, "rough"
        elif mode == "rough":
            out.stage, out.reason = "rough", "necessary conditions not met at the initial powers"
            return out
    if start_p is None:
        rep = accurate()
        if not rep.feasible:
            out.stage, out.reason = rep.stage, rep.verdict
            return out
        start_p, out.start = rep.p_star, "accurate"

    try:
        res = solve_from(start_p)
    except InfeasibleError as exc:
        if out.start == "rough" and mode == "rough-then-accurate":
            rep = accurate()
            if not rep.feasible:
                out.stage, out.reason = rep.stage, rep.verdict
                return out
            out.start = "accurate"
            try:
                res = solve_from(rep.p_star)
            except InfeasibleError as exc2:
                out.stage, out.reason = exc2.stage, exc2.reason
                return out
        else:
            out.stage, out.reason = exc.stage, exc.reason
            return out
    out.result = res
    if res.feasible:
        out.status, out.stage = "ok", "sca"
    else:
        out.stage = "validation"
        out.reason = "rounded allocation violates an original constraint"
    return out


@dataclass
class SnapshotOutcome:
    index: int
    switched_off: float
    pilot_of: np.ndarray
    n_serving: np.ndarray
    bits: np.ndarray
    outcomes: list[RealizationOutcome]


def run_snapshot(cfg: SystemConfig, index: int) -> SnapshotOutcome:
    with threadpool_limits(limits=1):
        ctx = prepare_snapshot(cfg, index)
        subs: dict = {}
        outs = [solve_realization(ctx, cfg, r, subs) for r in range(cfg.n_realizations)]
    n_serving = np.array([len(a) for a in ctx.topology.serving_aps])
    return SnapshotOutcome(index, asc.switched_off_fraction(ctx.topology), ctx.topology.pilot_of.copy(),
                           n_serving, ctx.demand.bits.copy(), outs)


# ---------------------------------------------------------------------------
# Campaign


@dataclass
class CampaignResult:
    config: SystemConfig
    snapshots: list[SnapshotOutcome]
    cdfs: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def outcomes(self) -> list[RealizationOutcome]:
        return [o for s in self.snapshots for o in s.outcomes]

    @property
    def feasible(self) -> list[RealizationOutcome]:
        return [o for o in self.outcomes if o.status == "ok"]

    @property
    def n_records(self) -> int:
        return len(self.outcomes) * self.config.n_users

    def per_snapshot_median(self, metric: str) -> np.ndarray:
        """Median over feasible realizations of a per-realization metric, NaN if none."""
        vals = []
        for s in self.snapshots:
            xs = [realization_metric(o, metric) for o in s.outcomes if o.status == "ok"]
            vals.append(float(np.median(xs)) if xs else math.nan)
        return np.array(vals)

    def metadata(self) -> dict:
        cfg = self.config
        stages: dict[str, int] = {}
        for o in self.outcomes:
            if o.status != "ok":
                stages[o.stage] = stages.get(o.stage, 0) + 1
        return {
            "schema": RECORD_SCHEMA,
            "version": f"cfmec {__version__}",
            "config_hash": cfg.digest(),
            "seed": cfg.rng_seed,
            "preset": cfg.preset,
            "mode": cfg.mode,
            "ap_selection": cfg.ap_selection,
            "feasibility_mode": cfg.feasibility_mode,
            "snapshots": cfg.n_snapshots,
            "realizations": cfg.n_realizations,
            "records": self.n_records,
            "feasible_realizations": len(self.feasible),
            "infeasible_by_stage": dict(sorted(stages.items())),
            "config": cfg.to_dict(),
        }


def realization_metric(o: RealizationOutcome, metric: str) -> float:
    r = o.result
    if metric == "total_power":
        return float(r.p.sum())
    if metric == "mean_latency":
        return float(np.mean(r.latency.total))
    if metric == "mean_f_user":
        return float(np.mean(r.f_user))
    if metric == "mean_se":
        return float(np.mean(r.se))
    raise KeyError(metric)


def run_campaign(cfg: SystemConfig, workers: int = 1) -> CampaignResult:
    """Every snapshot is an independent job; results are collected in index order."""
    indices = list(range(cfg.n_snapshots))
    if workers <= 1:
        snaps = [run_snapshot(cfg, i) for i in indices]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            snaps = list(pool.map(run_snapshot, [cfg] * len(indices), indices))
    res = CampaignResult(cfg, snaps)
    res.cdfs = campaign_cdfs(res)
    return res


def empirical_cdf(values) -> np.ndarray:
    """(n + 1, 2) array of (value, F); starts at F = 0 and ends at F = 1."""
    v = np.sort(np.asarray([x for x in values if np.isfinite(x)], dtype=float))
    if v.size == 0:
        return np.zeros((0, 2))
    f = np.arange(0, v.size + 1) / v.size
    return np.column_stack([np.concatenate([[v[0]], v]), f])


def campaign_cdfs(res: CampaignResult) -> dict[str, np.ndarray]:
    data: dict[str, list[float]] = {m: [] for m in CDF_METRICS}
    for snap in res.snapshots:
        ok = [o for o in snap.outcomes if o.status == "ok"]
        for o in ok:
            r = o.result
            data["total_power"].append(float(r.p.sum()))
            data["power"].extend(r.p.tolist())
            data["f_user"].extend(r.f_user.tolist())
            data["server_load"].extend(r.server_load.tolist())
            data["energy_per_mbit"].extend(energy_per_mbit(r.p, r.se, res.config.bandwidth).tolist())
            data["latency"].extend(r.latency.total.tolist())
        if ok:
            data["ergodic_se"].extend(np.mean([o.result.se for o in ok], axis=0).tolist())
    return {m: empirical_cdf(v) for m, v in data.items()}


# ---------------------------------------------------------------------------
# Output


def _fmt(x) -> str:
    if x is None or x == "":
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def record_rows(res: CampaignResult):
    cfg = res.config
    nan = math.nan
    for snap in res.snapshots:
        for o in snap.outcomes:
            r = o.result if o.status == "ok" else None
            for k in range(cfg.n_users):
                server = ""
                if o.server_of is not None:
                    server = int(o.server_of[k])
                row = {
                    "snapshot": snap.index, "realization": o.realization, "user": k,
                    "mode": cfg.mode, "ap_selection": cfg.ap_selection, "status": o.status,
                    "stage": o.stage, "start": o.start,
                    "iterations": r.iterations if r else "", "converged": r.converged if r else "",
                    "p": r.p[k] if r else nan, "f_user": r.f_user[k] if r else nan,
                    "se": r.se[k] if r else nan, "nu": r.nu[k] if r else nan,
                    "energy_per_mbit": energy_per_mbit(r.p, r.se, cfg.bandwidth)[k] if r else nan,
                    "latency_tx": r.latency.transmission[k] if r else nan,
                    "latency_comp": r.latency.computational[k] if r else nan,
                    "latency_fh": r.latency.fronthaul[k] if r else nan,
                    "latency_total": r.latency.total[k] if r else nan,
                    "budget": cfg.latency_budget_cell if cfg.mode == "cellular" else cfg.latency_budget,
                    "bits": snap.bits[k], "pilot": int(snap.pilot_of[k]), "n_serving": int(snap.n_serving[k]),
                    "server": server, "switched_off": snap.switched_off,
                }
                yield row


def write_outputs(res: CampaignResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "records.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for row in record_rows(res):
            w.writerow([row[f] if isinstance(row[f], str) else _fmt(row[f]) for f in RECORD_FIELDS])
    for metric, cdf in res.cdfs.items():
        with open(out / f"cdf_{metric}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["value", "cdf"])
            for v, f in cdf:
                w.writerow([repr(float(v)), repr(float(f))])
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snapshot", "realization", "iteration", "objective", "max_power_change",
                    "kkt_residual", "kept_previous"])
        for o in res.outcomes:
            if o.result is None:
                continue
            for t in o.result.trace:
                w.writerow([o.snapshot, o.realization, t.iteration, repr(t.objective),
                            repr(t.max_power_change), repr(t.kkt_residual), int(t.kept_previous)])
    with open(out / "feasibility.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snapshot", "realization", "rough", "stage", "verdict", "rho", "iterations"])
        for o in res.outcomes:
            rep = o.accurate
            w.writerow([o.snapshot, o.realization, o.rough, rep.stage if rep else "",
                         rep.verdict if rep else "", repr(float(rep.rho)) if rep else "",
                         rep.iterations if rep else ""])
    with open(out / "meta.json", "w") as fh:
        json.dump(res.metadata(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


# ---------------------------------------------------------------------------
# Feasibility-only campaign


@dataclass(frozen=True)
class FeasibilityRow:
    snapshot: int
    realization: int
    rough: str
    report: fz.FeasibilityReport


def _feasibility_snapshot(cfg: SystemConfig, index: int) -> list[FeasibilityRow]:
    rows = []
    with threadpool_limits(limits=1):
        ctx = prepare_snapshot(cfg, index)
        for r in range(cfg.n_realizations):
            h = propagation.draw_channels(ctx.roots, scenario.stream(cfg.rng_seed, index,
                                                                     scenario.STREAM_CHANNEL, r))
            est = estimate_mmse(h, ctx.stats, scenario.stream(cfg.rng_seed, index,
                                                              scenario.STREAM_PILOT_NOISE, r))
            model = jpca.RadioModel(est, ctx.topology, ctx.combiner, cfg.noise_power, cfg.prelog)
            se0 = model.se(ctx.p0)
            support = ctx.support
            if support is None:  # C-RAN: association first
                try:
                    mu = asc.cran_demands(ctx.demand.cycles, ctx.demand.bits,
                                          ctx.demand.effective_budget, se0, cfg.bandwidth)
                    support = asc.associate_cran(mu, cfg.f_cpu, ctx.snapshot.f_ap).support(
                        cfg.f_cpu, ctx.snapshot.f_ap)
                except InfeasibleError as exc:
                    rows.append(FeasibilityRow(index, r, "", fz.FeasibilityReport(
                        exc.stage, "association-infeasible", reason=exc.reason)))
                    continue
            rough = fz.rough_check(cfg.bandwidth * se0, ctx.demand, support).verdict
            rep = fz.accurate_pipeline(model, ctx.demand, support, cfg, ctx.p0)
            rows.append(FeasibilityRow(index, r, rough, rep))
    return rows


def run_feasibility(cfg: SystemConfig, workers: int = 1) -> list[FeasibilityRow]:
    """Rough check and accurate pipeline for every (snapshot, realization)."""
    indices = list(range(cfg.n_snapshots))
    if workers <= 1:
        parts = [_feasibility_snapshot(cfg, i) for i in indices]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_feasibility_snapshot, [cfg] * len(indices), indices))
    return [row for part in parts for row in part]


def write_feasibility(rows: list[FeasibilityRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snapshot", "realization", "rough", "stage", "verdict", "rho", "iterations",
                    "t_star"])
        for row in rows:
            rep = row.report
            w.writerow([row.snapshot, row.realization, row.rough, rep.stage, rep.verdict,
                        repr(float(rep.rho)), rep.iterations, repr(float(rep.t_star))])


# ---------------------------------------------------------------------------
# Comparisons


@dataclass(frozen=True)
class PairedComparison:
    metric: str
    mode_a: str
    mode_b: str
    n_pairs: int
    median_a: float
    median_b: float
    median_delta: float      # median over snapshots of (a - b)
    frac_a_lower: float
    sign_test_p: float


def paired_comparison(a: CampaignResult, b: CampaignResult, metric: str) -> PairedComparison:
    """Per-snapshot medians of ``metric``, compared on snapshots feasible in both runs."""
    ma, mb = a.per_snapshot_median(metric), b.per_snapshot_median(metric)
    ok = np.isfinite(ma) & np.isfinite(mb)
    da, db = ma[ok], mb[ok]
    n = int(ok.sum())
    if n == 0:
        return PairedComparison(metric, a.config.mode, b.config.mode, 0, *([math.nan] * 5))
    lower = int(np.sum(da < db))
    ties = int(np.sum(da == db))
    n_eff = n - ties
    p = float(scipy.stats.binomtest(lower, n_eff, 0.5).pvalue) if n_eff > 0 else 1.0
    return PairedComparison(metric, a.config.mode, b.config.mode, n, float(np.median(da)),
                            float(np.median(db)), float(np.median(da - db)), lower / n, p)


def compare_modes(cfg: SystemConfig, modes=("cellfree", "cellular", "cran"), workers: int = 1,
                  metrics=("total_power", "mean_latency", "mean_f_user", "mean_se")):
    """Matched-seed campaigns per mode and paired deltas of cell-free against the others."""
    runs = {m: run_campaign(cfg.replace(mode=m), workers) for m in modes}
    base = modes[0]
    table = [paired_comparison(runs[base], runs[m], metric)
             for m in modes[1:] for metric in metrics]
    return runs, table


def selection_switch_off(cfg: SystemConfig, selections=("dcc", "fcc:5", "lsfbs:0.95")) -> dict[str, np.ndarray]:
    """Fraction of APs serving nobody, per snapshot, for each AP-selection rule."""
    out = {}
    for sel in selections:
        c = cfg.replace(ap_selection=sel, mode="cellfree")
        fr = []
        for i in range(c.n_snapshots):
            snap = scenario.build_snapshot(c, i)
            topo = asc.assign_pilots_dcc(snap.beta, c.tau_p)
            kind, param = c.selection
            fr.append(asc.switched_off_fraction(asc.apply_selection(topo, snap.beta, kind, param)))
        out[sel] = np.array(fr)
    return out


def write_comparison(table: list[PairedComparison], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mode_a", "mode_b", "n_pairs", "median_a", "median_b", "median_delta",
                    "frac_a_lower", "sign_test_p"])
        for c in table:
            w.writerow([c.metric, c.mode_a, c.mode_b, c.n_pairs, repr(c.median_a), repr(c.median_b),
                        repr(c.median_delta), repr(c.frac_a_lower), repr(c.sign_test_p)])
