import math

import numpy as np
import pytest

from cfmec import association as asc
from cfmec import config, jpca
from cfmec import feasibility as fz
from cfmec.combining import LinkCoefficients
from cfmec.errors import InfeasibleError
from cfmec.offloading import OffloadingDemand, make_demand
from instances import Instance, random_links
from oracles import max_flow_value


class FixedModel:
    """Radio model whose combiners never change."""

    def __init__(self, coeffs):
        self.coeffs = coeffs

    def coefficients(self, p):
        return self.coeffs


def demand_of(bits, budget, cycles_per_bit=50.0):
    bits = np.asarray(bits, dtype=float)
    budget = np.broadcast_to(np.asarray(budget, dtype=float), bits.shape).copy()
    return OffloadingDemand(bits, cycles_per_bit * bits, budget, budget, np.zeros_like(bits))


def single_server(capacity):
    return asc.ComputeSupport(np.array([capacity]), np.array([[True]]), False, 1)


# rough check -----------------------------------------------------------------

def test_rough_rate_threshold(desk_cfg):
    d = make_demand([2e6], desk_cfg)
    assert d.bits[0] / d.effective_budget[0] == pytest.approx(1.1468e7, rel=1e-4)
    sup = asc.ComputeSupport(np.array([1e10, 2e9]), np.array([[True, True]]), True, 1)
    assert not fz.rough_check(np.array([1.14e7]), d, sup).passed
    assert fz.rough_check(np.array([1.2e7]), d, sup).rate_ok[0]


def test_rough_compute_condition():
    d = demand_of([2e6], 0.1744)
    rate = 2e6 / 0.0744               # leaves 0.1 s for processing
    sup = asc.ComputeSupport(np.array([1e10, 2e9]), np.array([[True, True]]), True, 1)
    v = fz.rough_check(np.array([rate]), d, sup)
    assert v.compute_need[0] == pytest.approx(1e9)
    assert v.compute_have[0] == pytest.approx(1.2e10)
    assert v.verdict == fz.LIKELY_FEASIBLE
    tight = asc.ComputeSupport(np.array([5e8, 4e8]), np.array([[True, True]]), True, 1)
    assert fz.rough_check(np.array([rate]), d, tight).verdict == fz.INCONCLUSIVE_FAIL


def test_rough_ignores_idle_aps():
    d = demand_of([2e6], 0.1744)
    rate = 2e6 / 0.0744
    sup = asc.ComputeSupport(np.array([5e8, 4e8, 1e10]), np.array([[True, True, False]]), True, 2)
    assert not fz.rough_check(np.array([rate]), d, sup).passed


def test_rough_per_bs_without_cpu():
    d = demand_of([2e6, 2e6], 0.1744)
    rate = np.full(2, 2e6 / 0.0744)
    # both users on BS 0 (need 2e9) while BS 1 idles with plenty
    sup = asc.ComputeSupport(np.array([1.5e9, 1e11]), np.array([[True, False], [True, False]]), False, 2)
    v = fz.rough_check(rate, d, sup)
    assert not v.passed and v.compute_need.tolist() == pytest.approx([2e9])


# LP --------------------------------------------------------------------------

def test_lp_matches_flow_oracle(rng):
    n_feasible = 0
    for _ in range(60):
        n_k, n_s = rng.integers(1, 9), rng.integers(2, 8)
        allowed = rng.uniform(size=(n_k, n_s)) < 0.5
        allowed[np.arange(n_k), rng.integers(0, n_s, n_k)] = True
        cap = rng.integers(1, 6, n_s) * 1e9
        need = rng.uniform(1e8, 3e9, n_k)
        d = demand_of(need / 50.0, 1.0)
        sup = asc.ComputeSupport(cap, allowed, False, n_s)
        flow = max_flow_value(need, allowed, cap)
        if flow >= need.sum() * (1 - 1e-9):
            n_feasible += 1
            lp = fz.min_compute_lp(d, sup)
            assert lp.objective == pytest.approx(need.sum(), rel=1e-6)
            assert np.all(sup.per_user(lp.f_pairs) >= need * (1 - 1e-9))
            assert np.all(sup.per_server(lp.f_pairs) <= cap * (1 + 1e-9))
        elif flow < need.sum() * (1 - 1e-6):
            with pytest.raises(InfeasibleError):
                fz.min_compute_lp(d, sup)
    assert n_feasible >= 10


def test_lp_single_user_prefers_cpu():
    d = demand_of([1e6], 0.1)   # w / L = 5e8
    sup = asc.ComputeSupport(np.array([1e10, 3e9]), np.array([[True, True]]), True, 1)
    lp = fz.min_compute_lp(d, sup)
    assert lp.objective == pytest.approx(5e8)
    assert lp.f_pairs[0] == pytest.approx(5e8) and lp.f_pairs[1] == pytest.approx(0, abs=1)


def test_lp_infeasible():
    d = demand_of([1e7], 0.01)
    sup = asc.ComputeSupport(np.array([1e10, 3e9]), np.array([[True, True]]), True, 1)
    with pytest.raises(InfeasibleError) as exc:
        fz.min_compute_lp(d, sup)
    assert exc.value.stage == "lp"


# bisection -------------------------------------------------------------------

def test_bisection_single_server_closed_form():
    b, w_per_bit, budget, cap, bw = 2e6, 50.0, 0.1744, 3e9, 2e7
    d = demand_of([b], budget, w_per_bit)
    res = fz.min_max_rate_bisection(d, single_server(cap), bw)
    t_star = (b / bw) / (budget - w_per_bit * b / cap)
    assert res.width <= 1e-5
    assert res.t_low <= t_star <= res.t_up
    assert res.t_star == pytest.approx(t_star, abs=1e-5)
    assert res.f_pairs[0] == pytest.approx(cap, rel=1e-4)


def test_bisection_interval_and_invariants(instance):
    d, sup, bw = instance.demand, instance.support, instance.cfg.bandwidth
    res = fz.min_max_rate_bisection(d, sup, bw)
    assert res.width <= 1e-5
    assert fz.rate_probe(res.t_low, d, sup, bw, d.effective_budget) is None
    assert fz.rate_probe(res.t_up, d, sup, bw, d.effective_budget) is not None
    assert np.all(sup.per_server(res.f_pairs) <= sup.capacity * (1 + 1e-9))


def test_bisection_initial_bounds(instance):
    d, bw = instance.demand, instance.cfg.bandwidth
    res = fz.min_max_rate_bisection(d, instance.support, bw, gap=math.inf)
    assert res.t_low == np.max(d.bits / (bw * d.effective_budget))
    assert res.t_up == pytest.approx(res.t_low / 0.005, rel=1e-12)
    assert res.probes == 1


def test_bisection_infeasible_at_upper_bound():
    d = demand_of([1e7], 0.05)
    with pytest.raises(InfeasibleError) as exc:
        fz.min_max_rate_bisection(d, single_server(1e9), 2e7)
    assert exc.value.stage == "bisection"


# spectral radius and the interference map ------------------------------------

def test_spectral_radius_vs_eig(rng):
    for n in (1, 2, 5, 20, 40):
        for _ in range(10):
            a = rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < 0.6)
            want = np.max(np.abs(np.linalg.eigvals(a)))
            assert fz.spectral_radius(a) == pytest.approx(want, rel=1e-8, abs=1e-12)


def test_spectral_radius_periodic_matrix():
    perm = np.roll(np.eye(6), 1, axis=1) * 0.7
    assert fz.spectral_radius(perm) == pytest.approx(0.7, rel=1e-8)


def symmetric_pair(cross):
    g = np.array([[1.0, cross], [cross, 1.0]])
    c = np.full((2, 2), 1e-3)
    return LinkCoefficients(g, c, np.ones(2), 1e-2)


def test_gate_rejects_spectral_radius_above_one(desk_cfg):
    coeffs = symmetric_pair(0.6)
    targets = fz.SinrTargets(np.log2(3.0) * np.ones(2), np.full(2, 2.0))
    imap = fz.InterferenceMap.build(coeffs, targets.gamma)
    assert imap.gate_open and imap.rho() >= 1
    res = fz.standard_power_control(targets, FixedModel(coeffs), np.full(2, 0.05), desk_cfg)
    assert res.verdict == fz.TARGETS_INFEASIBLE and res.rho >= 1


def test_gate_rejects_non_positive_diagonal(desk_cfg):
    coeffs = LinkCoefficients(np.array([[1.0]]), np.array([[0.6]]), np.ones(1), 1e-2)
    targets = fz.SinrTargets(np.ones(1), np.full(1, 2.0))   # g - c gamma < 0
    res = fz.standard_power_control(targets, FixedModel(coeffs), np.full(1, 0.05), desk_cfg)
    assert res.verdict == fz.TARGETS_INFEASIBLE


def test_single_user_closed_form(desk_cfg):
    g, c, noise, gamma = 2e3, 5.0, 1e-2, 50.0
    coeffs = LinkCoefficients(np.array([[g]]), np.array([[c]]), np.ones(1), noise)
    imap = fz.InterferenceMap.build(coeffs, np.array([gamma]))
    want = gamma * noise / (g - c * gamma)
    assert imap(np.array([0.03]))[0] == pytest.approx(want, rel=1e-14)
    res = fz.standard_power_control(fz.SinrTargets(np.log2(1 + np.array([gamma])), np.array([gamma])),
                                    FixedModel(coeffs), np.array([0.03]), desk_cfg)
    assert res.feasible and res.p[0] == pytest.approx(want, rel=1e-14)


def test_symmetric_pair_equal_powers(desk_cfg):
    coeffs = symmetric_pair(0.1)
    targets = fz.SinrTargets(np.ones(2), np.full(2, 1.0))
    res = fz.standard_power_control(targets, FixedModel(coeffs), np.array([0.01, 0.09]), desk_cfg,
                                    tol=1e-12, max_iter=2000)
    assert res.p[0] == pytest.approx(res.p[1], rel=1e-9)


def test_box_verdict(desk_cfg):
    coeffs = LinkCoefficients(np.array([[1.0]]), np.array([[0.0]]), np.ones(1), 1.0)
    targets = fz.SinrTargets(np.ones(1), np.full(1, 1.0))  # needs p = 1 W > p_max
    res = fz.standard_power_control(targets, FixedModel(coeffs), np.array([0.05]), desk_cfg)
    assert res.verdict == fz.TARGETS_INFEASIBLE_BOX


def test_interference_function_monotone_and_scalable(rng):
    for _ in range(20):
        k = int(rng.integers(2, 7))
        coeffs = random_links(rng, k, int(rng.integers(2, 9)), 2)
        imap = fz.InterferenceMap.build(coeffs, rng.uniform(0.01, 0.5, k))
        if not imap.gate_open:
            continue
        p = rng.uniform(0, 0.1, k)
        q = p + rng.uniform(0, 0.05, k)
        assert np.all(imap(p) <= imap(q))
        for alpha in (1.01, 2.0, 10.0):
            assert np.all(alpha * imap(p) > imap(alpha * p))


def test_sinr_targets_formula(desk_cfg):
    d = make_demand([2e6], desk_cfg)
    t = fz.SinrTargets.from_compute(np.array([2e9]), d, desk_cfg)
    z = 2e6 * 200 / (2e7 * 195) / (d.effective_budget[0] - 1e8 / 2e9)
    assert t.z[0] == pytest.approx(z) and t.gamma[0] == pytest.approx(2 ** z - 1)
    with pytest.raises(InfeasibleError):
        fz.SinrTargets.from_compute(np.array([1e8]), d, desk_cfg)


# accurate pipeline -----------------------------------------------------------

@pytest.fixture(scope="module")
def report(instance):
    return fz.accurate_pipeline(instance.model, instance.demand, instance.support, instance.cfg,
                                instance.p0)


def test_power_control_meets_targets_with_equality(report, instance):
    assert report.feasible and report.interval <= 1e-5
    cfg = instance.cfg
    targets = fz.SinrTargets.from_compute(instance.support.per_user(report.f_star),
                                          instance.demand, cfg)
    pc = fz.standard_power_control(targets, instance.model, instance.p0, cfg)
    assert pc.feasible
    assert np.all(np.abs(pc.sinr_ratio - 1) <= 0.005)


def test_pipeline_start_is_feasible(report, instance):
    cfg = instance.cfg
    assert np.all((report.p_star > 0) & (report.p_star <= cfg.p_max))
    se = instance.model.se(report.p_star)
    f_user = instance.support.per_user(report.f_star)
    lat = instance.demand.bits / (cfg.bandwidth * se) + instance.demand.cycles / f_user
    assert np.all(lat <= instance.demand.effective_budget * (1 + 0.01))
    res = jpca.run_sca(instance.model, report.p_star, instance.demand, instance.support, cfg)
    assert res.feasible and res.converged


def test_pipeline_stage_labels(instance):
    cfg = instance.cfg
    d = make_demand(np.full(8, 4e7), cfg)
    rep = fz.accurate_pipeline(instance.model, d, instance.support, cfg, instance.p0)
    assert not rep.feasible and rep.stage == "lp"
    with pytest.raises(InfeasibleError):
        rep.raise_if_infeasible()


def test_loose_preset_both_checks_pass():
    cfg = config.from_presets("desk", "loose", omega_se=0.5)
    both, iters_rough, iters_acc = 0, [], []
    for si in range(20):
        inst = Instance(cfg, si, 0)
        rough = fz.rough_check(cfg.bandwidth * inst.model.se(inst.p0), inst.demand, inst.support)
        rep = fz.accurate_pipeline(inst.model, inst.demand, inst.support, cfg, inst.p0)
        both += rough.passed and rep.feasible
        if rough.passed and rep.feasible:
            iters_rough.append(jpca.run_sca(inst.model, inst.p0, inst.demand, inst.support, cfg).iterations)
            iters_acc.append(jpca.run_sca(inst.model, rep.p_star, inst.demand, inst.support, cfg).iterations)
    assert both / 20 >= 0.95
    # the certified start sits on the SINR-target boundary and needs more iterations
    assert np.median(iters_acc) >= np.median(iters_rough)


def test_rough_fail_but_accurate_ok_converges():
    cfg = config.from_presets("desk", omega_se=0.5, task_bits_range=(4e6, 7e6))
    hits = 0
    for si in range(30):
        inst = Instance(cfg, si, 0)
        rough = fz.rough_check(cfg.bandwidth * inst.model.se(inst.p0), inst.demand, inst.support)
        if rough.passed:
            continue
        rep = fz.accurate_pipeline(inst.model, inst.demand, inst.support, cfg, inst.p0)
        if rep.feasible:
            hits += 1
            res = jpca.run_sca(inst.model, rep.p_star, inst.demand, inst.support, cfg)
            assert res.feasible and res.converged
    assert hits >= 1


def test_report_csv(tmp_path, report):
    path = tmp_path / "f.csv"
    fz.write_report_csv([(0, report)], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "snapshot,stage,verdict,rho,iterations"
    assert lines[1].startswith("0,power-control,feasible,")


def test_non_positive_budget_rejected():
    d = demand_of([1e6], [0.01])
    d = OffloadingDemand(d.bits, d.cycles, d.budget, np.array([-0.01]), d.fronthaul)
    sup = single_server(1e10)
    assert fz.rough_check(np.array([1e9]), d, sup).verdict == fz.INCONCLUSIVE_FAIL
    with pytest.raises(fz.InfeasibleError):
        fz.min_max_rate_bisection(d, sup, 1e6, 0.01, 1e-6)
