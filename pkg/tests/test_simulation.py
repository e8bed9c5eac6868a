"""Tests for the simulation harness: sampler, Hellinger scoring, reports,
half-split robustness."""

import numpy as np
import pytest

from certmap import simulate as sim
from certmap.fit import FitConfig
from certmap.model import MixtureParams, mixture_cdf

from oracles import integrate_unit_interval

# frozen oracle value: independent adaptive quadrature on the p scale
H2_053_055_122 = 0.302657133431151


def _ks_stat(draws, cdf_fn):
    x = np.sort(draws)
    n = x.size
    c = cdf_fn(x)
    return max(np.max(c - np.arange(n) / n), np.max(np.arange(1, n + 1) / n - c))


KS_CRIT_1PCT = 1.63  # asymptotic 1% point of sqrt(n) * D_n


@pytest.mark.parametrize(
    "lam,delta",
    [(0.0, 2.0), (1.0, 5.0), (0.5, 3.0), (0.1, 1.5), (0.9, 6.0)],
)
def test_sampler_matches_mixture_cdf(lam, delta):
    # clamping turns the sub-clamp tail into an atom at the boundary, so the
    # distributional check splits in two: the interior draws against the
    # conditional CDF, and the atom count against the model's tail mass
    prm = MixtureParams(lam, delta)
    rng = sim._rng(42, int(lam * 10), int(delta * 10))
    draws = sim.sample_pvalue(prm, 122.0, rng, size=100_000)
    assert np.all((draws > 0) & (draws < 1))

    from certmap.model import CLAMP_HI, CLAMP_LO

    f_lo = mixture_cdf(CLAMP_LO, prm, 122.0)
    f_hi = mixture_cdf(CLAMP_HI, prm, 122.0)
    n_atom = int(np.count_nonzero(draws == CLAMP_LO))
    sd = np.sqrt(f_lo * (1 - f_lo) * draws.size)
    assert abs(n_atom - f_lo * draws.size) <= max(4.0 * sd, 8.0)

    interior = draws[(draws > CLAMP_LO) & (draws < CLAMP_HI)]
    ks = _ks_stat(
        interior,
        lambda x: (mixture_cdf(x, prm, 122.0) - f_lo) / (f_hi - f_lo),
    )
    assert ks < KS_CRIT_1PCT / np.sqrt(interior.size)


def test_sampler_pure_alternative_shifts_left():
    prm = MixtureParams(1.0, 5.0)
    rng = sim._rng(11, 0)
    draws = sim.sample_pvalue(prm, 122.0, rng, size=20_000)
    assert np.mean(draws) < 0.05


def test_sampler_scalar_mode():
    rng = sim._rng(1, 2, 3)
    v = sim.sample_pvalue(MixtureParams(0.5, 3.0), 122.0, rng)
    assert isinstance(v, float) and 0 < v < 1


def test_hellinger_identity_and_symmetry():
    a = MixtureParams(0.5, 3.0)
    b = MixtureParams(0.5, 5.0)
    assert sim.hellinger_sq(a, a, 122.0) == 0.0
    assert sim.hellinger_sq(a, b, 122.0) == sim.hellinger_sq(b, a, 122.0)


def test_hellinger_degenerate_equal_densities():
    # both mixtures collapse to the uniform: distance 0 despite different delta
    a = MixtureParams(0.0, 3.0)
    b = MixtureParams(0.0, 8.0)
    assert sim.hellinger_sq(a, b, 122.0) <= 1e-12


def test_hellinger_frozen_oracle_value():
    got = sim.hellinger_sq(MixtureParams(0.5, 3.0), MixtureParams(0.5, 5.0), 122.0)
    assert got == pytest.approx(H2_053_055_122, abs=1e-6)


def test_hellinger_matches_adaptive_oracle():
    from certmap.model import mixture_pdf

    pairs = [
        ((0.9, 6.0), (0.1, 1.5), 2.0),
        ((0.3, 2.0), (0.7, 4.0), 10.0),
        ((0.02, 2.0), (0.5, 1.2), 122.0),
    ]
    for pa, pb, nu in pairs:
        a, b = MixtureParams(*pa), MixtureParams(*pb)
        got = sim.hellinger_sq(a, b, nu)

        def integrand(p):
            fa = mixture_pdf(p, a, nu)
            fb = mixture_pdf(p, b, nu)
            return (np.sqrt(fa) - np.sqrt(fb)) ** 2

        want = integrate_unit_interval(integrand, epsabs=1e-11)
        assert got == pytest.approx(want, abs=1e-6)


def test_hellinger_bounds():
    rng = np.random.default_rng(19)
    for _ in range(10):
        a = MixtureParams(rng.uniform(0, 1), rng.uniform(0, 10))
        b = MixtureParams(rng.uniform(0, 1), rng.uniform(0, 10))
        h = sim.hellinger_sq(a, b, 122.0)
        assert 0.0 <= h <= 2.0


def test_ground_truth_deterministic_and_stratified():
    t1 = sim.make_ground_truth(200, seed=9)
    t2 = sim.make_ground_truth(200, seed=9)
    np.testing.assert_array_equal(t1.lam, t2.lam)
    np.testing.assert_array_equal(t1.delta, t2.delta)
    # exact largest-remainder counts
    assert np.count_nonzero(t1.lam == 0.02) == 170
    assert np.count_nonzero(t1.lam == 0.70) == 20
    assert np.count_nonzero(t1.lam == 0.95) == 10
    t3 = sim.make_ground_truth(200, seed=10)
    assert not np.array_equal(t1.lam, t3.lam)


def test_generation_keyed_per_voxel_and_replication():
    truth = sim.make_ground_truth(10, seed=4)
    d12 = sim.generate_replications(truth, 12, seed=4)
    d3 = sim.generate_replications(truth, 3, seed=4)
    # smaller volumes are prefixes: streams keyed by (seed, voxel, rep)
    np.testing.assert_array_equal(d3.pvalues, d12.pvalues[:3])
    again = sim.generate_replications(truth, 12, seed=4)
    np.testing.assert_array_equal(again.pvalues, d12.pvalues)
    other = sim.generate_replications(truth, 12, seed=5)
    assert not np.array_equal(other.pvalues, d12.pvalues)


def test_composite_null_uniformity():
    # a truth field with lam=0 everywhere: pooled p-values are U(0,1)
    truth = sim.make_ground_truth(4000, seed=6)
    truth.lam[:] = 0.0
    data = sim.generate_replications(truth, 6, seed=6)
    comp = sim.make_composite(data)
    ks = _ks_stat(comp, lambda x: x)
    assert ks < KS_CRIT_1PCT / np.sqrt(comp.size)


def test_composite_tracks_replication_evidence():
    truth = sim.make_ground_truth(300, seed=7)
    data = sim.generate_replications(truth, 12, seed=7)
    comp = sim.make_composite(data)
    strong = truth.lam == 0.95
    assert np.median(comp[strong]) < 1e-6
    # dependence: on the null stratum (no clamp saturation) the pooled
    # z-score determines the composite almost exactly
    from scipy.special import ndtri
    null = truth.lam == 0.02
    z = ndtri(1.0 - data.pvalues[:, null]).mean(axis=0)
    assert np.corrcoef(z, ndtri(1.0 - comp[null]))[0, 1] > 0.999


def test_score_fit_zero_error_on_truth():
    truth = sim.make_ground_truth(30, seed=8)
    # feeding the truth back as the fit scores exactly zero everywhere
    rmse_l, rmse_d, shd = sim.score_fit(truth.lam, truth.delta, truth)
    assert rmse_l == 0.0
    assert rmse_d == 0.0
    assert shd == 0.0


def test_large_m_consistency():
    # with many replications the harness recovers the truth closely
    truth = sim.make_ground_truth(40, seed=12)
    report = sim.run_simulation(truth, [200], FitConfig(), seed=12, workers=4)
    row = report.rows[0]
    assert row.avg_shd < 0.01
    assert row.rmse_lambda < 0.1


def test_report_determinism_and_layout():
    truth = sim.make_ground_truth(30, seed=13)
    r1 = sim.run_simulation(truth, [2, 4], FitConfig(), seed=13)
    r2 = sim.run_simulation(truth, [2, 4], FitConfig(), seed=13)
    assert r1.to_tsv() == r2.to_tsv()
    lines = r1.to_tsv().strip().splitlines()
    assert lines[0] == "M\trmse_lambda\trmse_delta\tavg_shd"
    assert len(lines) == 3
    assert [int(line.split("\t")[0]) for line in lines[1:]] == [2, 4]


def test_split_reproducible_and_complementary():
    a1, b1 = sim.split_replications(12, seed=5)
    a2, b2 = sim.split_replications(12, seed=5)
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(b1, b2)
    assert sorted(np.concatenate([a1, b1]).tolist()) == list(range(12))
    a3, _ = sim.split_replications(12, seed=6)
    assert not np.array_equal(a1, a3)


def test_split_rejects_odd_or_tiny_m():
    for m in (3, 7, 2):
        with pytest.raises(ValueError):
            sim.split_replications(m, seed=0)


def test_robustness_split_identical_halves_agree_exactly():
    truth = sim.make_ground_truth(25, seed=14)
    six = sim.generate_replications(truth, 6, seed=14)
    # duplicate the same six replications: both halves see identical data
    from certmap.volume import ReplicationSet
    data = ReplicationSet(
        dims=six.dims, mask=six.mask.copy(),
        dofs=np.concatenate([six.dofs, six.dofs]),
        pvalues=np.vstack([six.pvalues, six.pvalues]),
    )
    comp = sim.make_composite(six)
    res = sim.robustness_split(data, comp, FitConfig(), seed=3)
    assert res.decision_agreement == 1.0
    assert res.mean_abs_diff_rho_plus == 0.0
    assert res.mean_abs_diff_rho_minus == 0.0


def test_robustness_split_disjoint_indices():
    truth = sim.make_ground_truth(20, seed=15)
    data = sim.generate_replications(truth, 8, seed=15)
    comp = sim.make_composite(data)
    res = sim.robustness_split(data, comp, FitConfig(), seed=1)
    assert sorted(np.concatenate([res.indices_a, res.indices_b]).tolist()) == list(range(8))
    assert 0.0 <= res.decision_agreement <= 1.0
    assert res.fraction_compared >= 0.0
