import numpy as np
import pytest

from cfmec import propagation, scenario
from cfmec.estimation import estimate_mmse, estimator_stats


@pytest.fixture(scope="module")
def small(desk_cfg):
    snap = scenario.build_snapshot(desk_cfg, 0)
    corr = snap.corr[:2, :4]
    pilot_of = np.array([0, 1, 0, 1])
    stats = estimator_stats(corr, pilot_of, 2, desk_cfg.noise_power, desk_cfg.p_max)
    return corr, stats


def test_psi_shared_by_copilot_users(small):
    corr, stats = small
    # Psi = tau_p sum_{same pilot} p R + noise I, written out for pilot 0 at AP 1
    want = 2 * 0.1 * (corr[1, 0] + corr[1, 2]) + stats.noise_power * np.eye(4)
    assert np.allclose(stats.psi[1, 0], want, rtol=1e-13, atol=0)
    est_psi = stats.psi[:, stats.pilot_of]
    assert np.array_equal(est_psi[:, 0], est_psi[:, 2])


def test_error_covariance_hermitian_psd(small):
    _, stats = small
    for c in stats.error_cov.reshape(-1, 4, 4):
        assert np.allclose(c, c.conj().T, atol=0)
        assert np.linalg.eigvalsh(c).min() >= -1e-12 * np.abs(c).max()


def test_mse_equals_trace_c(small, rng):
    """Monte-Carlo MSE over 1e5 draws matches tr(C_lk) within 2%."""
    corr, stats = small
    roots = propagation.correlation_roots(corr)
    h = propagation.draw_channels(roots, rng, n_draws=100_000)
    est = estimate_mmse(h, stats, rng)
    err = h - est.h_hat
    mse = np.mean(np.sum(np.abs(err) ** 2, axis=-1), axis=0)
    tr_c = np.real(np.einsum("lkii->lk", stats.error_cov))
    assert np.all(np.abs(mse / tr_c - 1) <= 0.02)


def test_estimate_error_uncorrelated(small, rng):
    """Entries of E[h_hat err^H] lie inside a 3-sigma band around zero."""
    corr, stats = small
    roots = propagation.correlation_roots(corr)
    h = propagation.draw_channels(roots, rng, n_draws=100_000)
    est = estimate_mmse(h, stats, rng)
    err = h - est.h_hat
    prod = est.h_hat[..., :, None] * err[..., None, :].conj()   # (N, L, K, M, M)
    mean = prod.mean(axis=0)
    sigma = np.sqrt(np.mean(np.abs(prod - mean) ** 2, axis=0) / prod.shape[0])
    assert np.all(np.abs(mean) <= 3 * sigma)


def test_noiseless_orthogonal_limit(desk_cfg, rng):
    snap = scenario.build_snapshot(desk_cfg, 0)
    corr = snap.corr[:2, :3] + 1e-3 * np.max(snap.beta) * np.eye(4)  # keep R invertible
    stats = estimator_stats(corr, np.arange(3), 3, 1e-30, 0.1)
    h = propagation.draw_channels(propagation.correlation_roots(corr), rng)
    est = estimate_mmse(h, stats, rng)
    assert np.max(np.abs(est.h_hat - h)) <= 1e-8 * np.max(np.abs(h))


def test_zero_channel_link(rng):
    corr = np.zeros((1, 2, 4, 4), dtype=complex)
    corr[0, 1] = 1e-9 * np.eye(4)
    stats = estimator_stats(corr, np.array([0, 0]), 1, 1e-13, 0.1)
    assert np.all(stats.error_cov[0, 0] == 0)
    h = propagation.draw_channels(propagation.correlation_roots(corr), rng)
    assert np.all(estimate_mmse(h, stats, rng).h_hat[0, 0] == 0)


def test_rank_one_copilot_estimates_parallel(rng):
    a = np.exp(1j * np.pi * np.arange(4) * 0.4)
    r = np.outer(a, a.conj()) * 1e-9
    corr = np.stack([r, 3 * r])[None]
    stats = estimator_stats(corr, np.array([0, 0]), 1, 1e-13, 0.1)
    h = propagation.draw_channels(propagation.correlation_roots(corr), rng)
    hh = estimate_mmse(h, stats, rng).h_hat[0]
    cos = abs(np.vdot(hh[0], hh[1])) / (np.linalg.norm(hh[0]) * np.linalg.norm(hh[1]))
    assert cos == pytest.approx(1.0, abs=1e-10)
