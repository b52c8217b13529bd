"""Problem instances built from the package's own pipeline for solver tests."""

from __future__ import annotations

import numpy as np

from cfmec import association as asc
from cfmec import jpca, propagation, scenario
from cfmec.combining import link_coefficients, pmmse
from cfmec.estimation import estimate_mmse, estimator_stats
from cfmec.harness import init_fractional_powers
from cfmec.offloading import generate_demands


class Instance:
    """One desk-scale cell-free channel realization with everything the solvers need."""

    def __init__(self, cfg, snapshot=0, realization=0):
        self.cfg = cfg
        self.snap = scenario.build_snapshot(cfg, snapshot)
        if cfg.mode == "cellular":
            self.topo = asc.associate_cellular(self.snap.beta, cfg.tau_p)
            combiner = "lmmse"
            self.support = asc.cellular_support(self.topo, self.snap.f_ap)
        else:
            self.topo = asc.assign_pilots_dcc(self.snap.beta, cfg.tau_p)
            self.topo = asc.apply_selection(self.topo, self.snap.beta, *cfg.selection)
            combiner = "pmmse"
            self.support = asc.cellfree_support(self.topo, cfg.f_cpu, self.snap.f_ap)
        self.stats = estimator_stats(self.snap.corr, self.topo.pilot_of, cfg.tau_p,
                                     cfg.noise_power, cfg.p_max)
        roots = propagation.correlation_roots(self.snap.corr)
        h = propagation.draw_channels(roots, scenario.stream(cfg.rng_seed, snapshot,
                                                             scenario.STREAM_CHANNEL, realization))
        self.h = h
        self.est = estimate_mmse(h, self.stats, scenario.stream(cfg.rng_seed, snapshot,
                                                                scenario.STREAM_PILOT_NOISE,
                                                                realization))
        self.demand = generate_demands(cfg, scenario.stream(cfg.rng_seed, snapshot,
                                                            scenario.STREAM_DEMANDS))
        self.p0 = init_fractional_powers(self.snap.beta, self.topo, cfg.p_max)
        self.model = jpca.RadioModel(self.est, self.topo, combiner, cfg.noise_power, cfg.prelog)


def random_links(rng, n_k, n_l, m, noise=1e-13, p_max=0.1):
    """Link coefficients of P-MMSE combiners on a random correlated instance.

    Correlations are random PSD matrices with log-uniform gains; pilots and
    clusters follow the DCC rule with tau_p drawn in [ceil(K / L), K].
    """
    beta = 10 ** rng.uniform(-11, -7, size=(n_l, n_k))
    corr = np.empty((n_l, n_k, m, m), dtype=complex)
    for l in range(n_l):
        for k in range(n_k):
            a = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
            r = a @ a.conj().T
            corr[l, k] = r * (beta[l, k] * m / np.trace(r).real)
    tau_p = int(rng.integers(-(-n_k // n_l), n_k + 1))
    topo = asc.assign_pilots_dcc(beta, tau_p)
    stats = estimator_stats(corr, topo.pilot_of, tau_p, noise, p_max)
    h = propagation.draw_channels(propagation.correlation_roots(corr), rng)
    est = estimate_mmse(h, stats, rng)
    p_built = rng.uniform(0.1, 1.0, size=n_k) * p_max
    comb = pmmse(est.h_hat, est.error_cov, topo, p_built, noise)
    return link_coefficients(comb, est.h_hat, est.error_cov, topo, noise)
