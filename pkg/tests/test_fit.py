"""Tests for the per-voxel and whole-volume ML fitting."""

import numpy as np
import pytest

from certmap import fit as ft
from certmap import model as md
from certmap import simulate as sim
from certmap.volume import ReplicationSet


def _draw_voxel(lam, delta, nu, m, rng):
    params = md.MixtureParams(lam, delta)
    return md.PValueVector(sim.sample_pvalue(params, nu, rng, size=m), nu)


def test_fit_config_validation():
    ft.FitConfig()
    with pytest.raises(ValueError):
        ft.FitConfig(restarts=0)
    with pytest.raises(ValueError):
        ft.FitConfig(tol=0.0)
    with pytest.raises(ValueError):
        ft.FitConfig(delta_floor=0.5)


def test_nelder_mead_quadratic():
    x, f, conv = ft.nelder_mead(lambda v: (v[0] - 1) ** 2 + (v[1] + 2) ** 2, [0.0, 0.0])
    assert conv
    assert abs(x[0] - 1) < 1e-4 and abs(x[1] + 2) < 1e-4
    assert f < 1e-7


def test_fit_respects_constraints():
    rng = np.random.default_rng(5)
    for lam, delta in ((0.02, 2.0), (0.7, 3.0), (0.95, 6.0)):
        for _ in range(5):
            pv = _draw_voxel(lam, delta, 122.0, 12, rng)
            f = ft.fit_voxel(pv)
            assert 0.0 < f.lam_hat < 1.0
            assert 1.0 < f.delta_hat <= ft.DELTA_CAP
            assert np.isfinite(f.loglik)


def test_fit_reported_loglik_matches_model():
    rng = np.random.default_rng(6)
    pv = _draw_voxel(0.7, 3.0, 122.0, 12, rng)
    f = ft.fit_voxel(pv)
    ll = md.voxel_loglik(pv, md.MixtureParams(f.lam_hat, f.delta_hat))
    assert abs(f.loglik - ll) < 1e-9


def test_fit_dominates_parameter_grid():
    # the optimum must beat a coarse exhaustive scan, voxel by voxel
    rng = np.random.default_rng(7)
    lams = np.linspace(0.02, 0.98, 50)
    deltas = np.linspace(1.05, 12.0, 50)
    moments = {122.0: ft.get_moment_table(122.0)}
    for k in range(6):
        lam, delta = [(0.02, 2.0), (0.7, 3.0), (0.95, 6.0)][k % 3]
        pv = _draw_voxel(lam, delta, 122.0, 12, rng)
        f = ft.fit_voxel(pv)
        grid_best = max(
            md.voxel_loglik(pv, md.MixtureParams(la, de), moments=moments)
            for la in lams
            for de in deltas
        )
        assert f.loglik >= grid_best


def test_fit_invariant_under_replication_order():
    rng = np.random.default_rng(8)
    pv = _draw_voxel(0.7, 3.0, 122.0, 12, rng)
    shuffled = md.PValueVector(pv.values[::-1].copy(), 122.0)
    a = ft.fit_voxel(pv)
    b = ft.fit_voxel(shuffled)
    assert a.lam_hat == b.lam_hat and a.delta_hat == b.delta_hat


def test_fit_null_data_near_uniform_density():
    # voxels drawn from the null must come back close to the flat density
    rng = np.random.default_rng(9)
    shds = []
    for _ in range(40):
        pv = md.PValueVector(rng.uniform(size=12), 122.0)
        f = ft.fit_voxel(pv)
        shds.append(
            sim.hellinger_sq(
                md.MixtureParams(f.lam_hat, f.delta_hat),
                md.MixtureParams(0.0, 2.0),
                122.0,
            )
        )
    assert np.mean(shds) <= 0.05


def test_fit_recovers_strong_voxel():
    # lam=0.9, delta=5, nu=122, M=12 over 1000 Monte Carlo repeats: errors
    # comparable to the documented reference magnitudes (lam within 0.25,
    # delta within 2.8 in RMSE)
    rng = np.random.default_rng(10)
    n = 1000
    lam_err2 = 0.0
    delta_err2 = 0.0
    for _ in range(n):
        pv = _draw_voxel(0.9, 5.0, 122.0, 12, rng)
        f = ft.fit_voxel(pv)
        lam_err2 += (f.lam_hat - 0.9) ** 2
        delta_err2 += (f.delta_hat - 5.0) ** 2
    assert np.sqrt(lam_err2 / n) <= 0.25
    assert np.sqrt(delta_err2 / n) <= 2.8


def _small_volume(n=24, m=4, seed=3):
    truth = sim.make_ground_truth(n, seed=seed)
    return sim.generate_replications(truth, m, seed=seed)


def test_fit_volume_single_voxel_reduces_to_fit_voxel():
    data = _small_volume(n=1)
    fits = ft.fit_volume(data, ft.FitConfig())
    single = ft.fit_voxel(md.PValueVector(data.pvalues[:, 0], data.dofs))
    assert fits.lam[0] == single.lam_hat
    assert fits.delta[0] == single.delta_hat
    assert fits.loglik[0] == single.loglik


def test_fit_volume_is_permutation_invariant():
    data = _small_volume()
    fits = ft.fit_volume(data, ft.FitConfig())
    perm = np.random.default_rng(0).permutation(data.n_masked)
    shuffled = ReplicationSet(
        dims=data.dims, mask=data.mask.copy(), dofs=data.dofs,
        pvalues=data.pvalues[:, perm],
    )
    fits_p = ft.fit_volume(shuffled, ft.FitConfig())
    np.testing.assert_array_equal(fits_p.lam, fits.lam[perm])
    np.testing.assert_array_equal(fits_p.delta, fits.delta[perm])


def test_fit_volume_worker_count_is_invisible():
    data = _small_volume()
    serial = ft.fit_volume(data, ft.FitConfig(), workers=1)
    parallel = ft.fit_volume(data, ft.FitConfig(), workers=4)
    np.testing.assert_array_equal(serial.lam, parallel.lam)
    np.testing.assert_array_equal(serial.delta, parallel.delta)
    np.testing.assert_array_equal(serial.loglik, parallel.loglik)
    np.testing.assert_array_equal(serial.converged, parallel.converged)


def test_fit_volume_repeat_run_identical():
    data = _small_volume(seed=11)
    a = ft.fit_volume(data, ft.FitConfig(), workers=2)
    b = ft.fit_volume(data, ft.FitConfig(), workers=2)
    np.testing.assert_array_equal(a.lam, b.lam)
    np.testing.assert_array_equal(a.delta, b.delta)


def test_fit_volume_empty_mask_rejected():
    data = _small_volume(n=2)
    data.mask[:] = False
    data.pvalues = data.pvalues[:, :0]
    data.clamp_counts = data.clamp_counts[:0]
    with pytest.raises(ValueError):
        ft.fit_volume(data, ft.FitConfig())


def test_fit_volume_voxel_accessor():
    data = _small_volume(n=3)
    fits = ft.fit_volume(data, ft.FitConfig())
    v = fits.voxel(1)
    assert v.lam_hat == fits.lam[1]
    assert v.clamp_count == data.clamp_counts[1]


def test_restart_prefix_is_used():
    rng = np.random.default_rng(12)
    pv = _draw_voxel(0.7, 3.0, 122.0, 8, rng)
    f1 = ft.fit_voxel(pv, ft.FitConfig(restarts=1))
    f9 = ft.fit_voxel(pv, ft.FitConfig(restarts=9))
    assert f1.restarts_used == 1
    assert f9.restarts_used == 9
    assert f9.loglik >= f1.loglik - 1e-12
