import math

import numpy as np
import pytest

from cfmec import propagation, scenario
from oracles import corr_quadrature


def test_pathloss_value():
    assert propagation.pathloss_db(100.0, 2e9) == pytest.approx(22.7 + 73.4 + 26 * math.log10(2), abs=1e-12)
    assert propagation.pathloss_db(100.0, 2e9) == pytest.approx(103.93, abs=0.005)


def test_pathloss_slope_and_monotone():
    d = np.linspace(10, 1000, 200)
    pl = propagation.pathloss_db(d, 2e9)
    assert np.all(np.diff(pl) > 0)
    assert propagation.pathloss_db(200.0, 2e9) - propagation.pathloss_db(100.0, 2e9) == pytest.approx(
        36.7 * math.log10(2))


def test_pathloss_domain():
    with pytest.raises(ValueError):
        propagation.pathloss_db(0.0, 2e9)


def test_shadowing_scales_gain():
    assert propagation.pathloss_gain(50.0, 2e9, 10.0) == pytest.approx(10 * propagation.pathloss_gain(50.0, 2e9))


def test_corr_diagonal_and_hermitian(rng):
    for _ in range(20):
        phi, th = rng.uniform(-math.pi, math.pi), rng.uniform(-0.5, 0)
        beta = 10 ** rng.uniform(-12, -6)
        r = propagation.local_scattering_corr(phi, th, math.radians(15), math.radians(15), beta, 4)
        assert np.array_equal(np.diag(r).real, np.full(4, beta))
        assert np.all(np.diag(r).imag == 0)
        assert np.max(np.abs(r - r.conj().T)) <= 1e-12 * beta


def test_corr_matches_linearised_integral():
    """The closed form is the exact Gaussian integral of the bilinearised phase."""
    for phi, th in [(math.radians(30), math.radians(-10)), (1.2, -0.3), (-2.0, -0.05)]:
        s = math.radians(15)
        r = propagation.local_scattering_corr(phi, th, s, s, 1.0, 4)
        q = corr_quadrature(phi, th, s, s, 1.0, 4, linearised=True)
        assert np.max(np.abs(r - q)) <= 1e-12


def test_corr_close_to_exact_integral_at_small_spread():
    s = math.radians(3)
    r = propagation.local_scattering_corr(math.radians(30), math.radians(-10), s, s, 1.0, 4)
    q = corr_quadrature(math.radians(30), math.radians(-10), s, s, 1.0, 4)
    assert np.max(np.abs(r - q) / np.abs(q)) <= 0.02


def test_corr_warns_outside_validity():
    with pytest.warns(RuntimeWarning):
        propagation.local_scattering_corr(0.3, -0.1, math.radians(20), math.radians(10), 1.0, 4)


def test_projection_keeps_trace(desk_cfg):
    snap = scenario.build_snapshot(desk_cfg, 1)
    m = snap.n_antennas
    tr = np.real(np.einsum("lkii->lk", snap.corr)) / m
    assert np.allclose(tr, snap.beta, rtol=1e-9, atol=0)
    for l in range(snap.n_aps):
        for k in range(snap.n_users):
            r = snap.corr[l, k]
            assert np.linalg.eigvalsh(r).min() >= -1e-12 * snap.beta[l, k]
            assert np.max(np.abs(r)) <= snap.beta[l, k] * (1 + 1e-9)


def test_project_psd_clips_negative():
    r = np.array([[1.0, 2.0], [2.0, 1.0]], dtype=complex)
    out = propagation.project_psd(r, 1.0)
    assert np.linalg.eigvalsh(out).min() >= -1e-15
    assert np.trace(out).real == pytest.approx(2.0)


def test_white_channel_covariance(rng):
    roots = np.broadcast_to(np.eye(4, dtype=complex), (1, 1, 4, 4)).copy()
    h = propagation.draw_channels(roots, rng, n_draws=100_000)[:, 0, 0]
    cov = h.T @ h.conj() / len(h)
    assert np.linalg.norm(cov - np.eye(4)) / 2.0 <= 0.02


def test_rank_one_draws_collinear(rng):
    a = np.exp(1j * np.pi * np.arange(4) * 0.3)
    r = np.outer(a, a.conj()) / 4
    roots = propagation.correlation_roots(r[None, None])
    h = propagation.draw_channels(roots, rng, n_draws=50)[:, 0, 0]
    for x in h:
        # x is a multiple of a; the eigen square root leaves O(sqrt(eps)) leakage
        assert np.linalg.norm(x - (np.vdot(a, x) / np.vdot(a, a)) * a) <= 1e-7 * np.linalg.norm(x)


def test_generic_covariance_and_energy(desk_cfg, rng):
    snap = scenario.build_snapshot(desk_cfg, 0)
    r = snap.corr[3, 2] / snap.beta[3, 2]
    roots = propagation.correlation_roots(r[None, None])
    h = propagation.draw_channels(roots, rng, n_draws=100_000)[:, 0, 0]
    cov = h.T @ h.conj() / len(h)
    assert np.linalg.norm(cov - r) / np.linalg.norm(r) <= 0.02
    assert np.mean(np.sum(np.abs(h) ** 2, axis=1)) == pytest.approx(np.trace(r).real, rel=0.02)


def test_dump_csv(tmp_path, desk_cfg):
    snap = scenario.build_snapshot(desk_cfg.replace(n_aps=4, n_users=2), 0)
    path = tmp_path / "r.csv"
    propagation.dump_snapshot_csv(snap, path)
    rows = path.read_text().splitlines()
    assert rows[0] == "ap,user,row,col,real,imag,beta"
    assert len(rows) == 1 + 4 * 2 * 16
    ap, user, i, j, re, im, beta = rows[1 + 16 + 4 + 1].split(",")
    assert (int(ap), int(user), int(i), int(j)) == (0, 1, 1, 1)
    assert complex(float(re), float(im)) == snap.corr[0, 1, 1, 1]
