import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from kfnoise.errors import (
    DimensionError,
    InsufficientDataError,
    SingularInnovationCovarianceError,
    UndefinedStatisticError,
)
from kfnoise.filter_core import NoiseCov, SystemModel, fixed_gain_covariance, steady_state
from kfnoise.innovation_stats import (
    InnovationSequence,
    chi2_quantile,
    consistency_report,
    nis_interval,
    normal_quantile,
    sample_correlation,
    theoretical_correlation,
    time_avg_autocorrelation,
    time_avg_nis,
)
from kfnoise.numerics import RandomSource
from kfnoise.vehicle import NoiseLabels

from conftest import simulate_scalar, slalom_innovations


def alternating(n):
    return np.where(np.arange(n) % 2 == 0, 1.0, -1.0)


def test_sequence_shapes():
    seq = InnovationSequence(np.ones(4), np.ones(4))
    assert seq.N == 4 and seq.p == 1
    with pytest.raises(DimensionError):
        InnovationSequence(np.ones(4), np.ones(3))


def test_sample_correlation_constant_and_alternating():
    for C in sample_correlation(np.full(20, 3.0), 4):
        assert C[0, 0] == pytest.approx(9.0)
    C = sample_correlation(alternating(20), 3)
    assert C[0][0, 0] == 1.0 and C[1][0, 0] == -1.0


def test_sample_correlation_needs_data():
    with pytest.raises(InsufficientDataError):
        sample_correlation(np.ones(5), 5)


def test_sample_correlation_white_noise():
    sigma = 0.7
    N = 100_000
    C = sample_correlation(RandomSource(1).normal(N) * sigma, 5)
    assert abs(C[0][0, 0] / sigma**2 - 1) <= 0.02
    for Ci in C[1:]:
        assert abs(Ci[0, 0]) <= 3 * sigma**2 / np.sqrt(N)


def test_sample_correlation_matrix_convention():
    rng = RandomSource(4)
    nu = rng.normal(60).reshape(30, 2)
    C = sample_correlation(nu, 3)
    ref = sum(np.outer(nu[j], nu[j + 1]) for j in range(27)) / 27
    np.testing.assert_allclose(C[1], ref, rtol=1e-13)
    np.testing.assert_allclose(C[0], C[0].T)


def test_theoretical_correlation_optimal_gain_vanishes(bicycle):
    noise = NoiseCov.diagonal([1e-5, 1e-4], [1e-4])
    sol = steady_state(bicycle, noise, tol=1e-16)
    C0 = theoretical_correlation(bicycle, noise, sol.P_prior, sol.gain, 0)
    np.testing.assert_allclose(C0, sol.S, rtol=1e-14)
    for m in range(1, 6):
        C = theoretical_correlation(bicycle, noise, sol.P_prior, sol.gain, m)
        assert abs(C[0, 0]) <= 1e-12 * C0[0, 0]


def test_theoretical_correlation_zero_gain():
    model = SystemModel([[0.8]], [[0.0]], [[1.0]], [[1.0]])
    noise = NoiseCov([[1.0]], [[0.5]])
    P = np.array([[1.0 / (1 - 0.64)]])
    C1 = theoretical_correlation(model, noise, P, [[0.0]], 1)
    assert C1[0, 0] == pytest.approx(0.8 * P[0, 0])


def test_theoretical_correlation_dimension_error(bicycle):
    noise = NoiseCov.diagonal([1e-5, 1e-4], [1e-4])
    with pytest.raises(DimensionError):
        theoretical_correlation(bicycle, noise, np.eye(3), np.zeros((2, 1)), 1)


def test_suboptimal_gain_correlation_matches_simulation():
    F, Q, R = 0.9, 1.0, 1.0
    model = SystemModel([[F]], [[0.0]], [[1.0]], [[1.0]])
    noise = NoiseCov([[Q]], [[R]])
    W = 0.5 * steady_state(model, noise).gain
    P = fixed_gain_covariance(model, noise, W)
    C1 = theoretical_correlation(model, noise, P, W, 1)[0, 0]
    nu = simulate_scalar(F, 1.0, Q, R, W[0, 0], 200_000, seed=3)[1000:]
    C_hat = sample_correlation(nu, 2)
    assert abs(C_hat[1][0, 0] - C1) <= 0.1 * abs(C1)
    C0 = theoretical_correlation(model, noise, P, W, 0)[0, 0]
    assert abs(C_hat[0][0, 0] - C0) <= 0.03 * C0


def test_rho_identity_cases():
    x = np.tile([1.0, 2.0, -1.0], 20)
    assert time_avg_autocorrelation(x, lags=3)[2] == pytest.approx(1.0)
    assert time_avg_autocorrelation(alternating(50), lags=1)[0] == pytest.approx(-1.0)


def test_rho_undefined_and_short():
    with pytest.raises(UndefinedStatisticError):
        time_avg_autocorrelation(np.zeros(10), lags=2)
    with pytest.raises(InsufficientDataError):
        time_avg_autocorrelation(np.ones(3), lags=3)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(25, 200))
def test_rho_bounded(seed, n):
    x = RandomSource(seed).normal(n) + 0.3
    rho = time_avg_autocorrelation(x, lags=20)
    assert np.all(np.abs(rho) <= 1.0 + 1e-12)


def test_rho_white_noise_inside_bounds():
    N = 10_000
    rho = time_avg_autocorrelation(RandomSource(5).normal(N), lags=20)
    assert np.mean(np.abs(rho) <= 1.96 / np.sqrt(N)) >= 0.95


def test_nis_trivial_cases():
    assert time_avg_nis(InnovationSequence(np.zeros(5), np.ones(5))) == 0.0
    assert time_avg_nis(InnovationSequence(np.ones(5), np.ones(5))) == 1.0
    with pytest.raises(SingularInnovationCovarianceError):
        time_avg_nis(InnovationSequence(np.ones(3), np.zeros(3)))


def test_nis_simulated_within_interval():
    N = 5000
    S = 2.5
    nu = RandomSource(12).normal(N) * np.sqrt(S)
    lo, hi = nis_interval(N, 1)
    assert lo <= time_avg_nis(InnovationSequence(nu, np.full(N, S))) <= hi


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_nis_invariant_under_rescaling(seed):
    rng = np.random.default_rng(seed)
    N, p = 20, 2
    nu = rng.standard_normal((N, p))
    S = np.array([m @ m.T + np.eye(p) for m in rng.standard_normal((N, p, p))])
    A = rng.standard_normal((p, p)) + 3 * np.eye(p)
    base = time_avg_nis(InnovationSequence(nu, S))
    scaled = time_avg_nis(InnovationSequence(nu @ A.T, A @ S @ A.T))
    assert scaled == pytest.approx(base, rel=1e-10)


def test_chi2_quantiles_against_scipy():
    for dof in (50, 100, 1000, 5000):
        for prob in (0.025, 0.975):
            assert chi2_quantile(prob, dof) == pytest.approx(sps.chi2.ppf(prob, dof), rel=3e-3)
    assert normal_quantile(0.975) == pytest.approx(1.959963984540054, rel=1e-12)


def test_nis_interval_at_5000():
    lo, hi = nis_interval(5000, 1)
    exact = sps.chi2.ppf([0.025, 0.975], 5000) / 5000
    np.testing.assert_allclose([lo, hi], exact, rtol=1e-4)
    assert lo == pytest.approx(0.9612, abs=5e-4) and hi == pytest.approx(1.0396, abs=5e-4)


def test_report_optimal_and_inflated_filters():
    labels = NoiseLabels(2e-4, 4e-4, 3e-4)
    nu, S = slalom_innovations(labels, labels.noise_cov(), seed=1)
    rep = consistency_report(InnovationSequence(nu, np.full(nu.size, S)))
    assert rep.whiteness_pass_fraction >= 0.9 and rep.whiteness_pass
    assert rep.nis_in_interval
    inflated = NoiseCov.diagonal([labels.Q_a, labels.Q_b], [100 * labels.R])
    nu2, S2 = slalom_innovations(labels, inflated, seed=1)
    rep2 = consistency_report(InnovationSequence(nu2, np.full(nu2.size, S2)))
    assert not rep2.nis_in_interval
    assert rep2.eps_bar < rep2.bounds["nis"][0]


def test_report_zero_lags_and_json():
    rep = consistency_report(InnovationSequence(np.ones(10), np.ones(10)), M=0, lags=0)
    assert rep.eps_bar == 1.0
    assert rep.whiteness_pass_fraction is None and rep.C_hat == []
    doc = json.loads(json.dumps(rep.to_json()))
    assert set(doc) == {"rho_bar", "eps_bar", "c_hat", "bounds", "flags"}


def test_report_rejects_bad_alpha():
    with pytest.raises(ValueError):
        consistency_report(InnovationSequence(np.ones(10), np.ones(10)), alpha=1.0)


def test_report_without_covariances_skips_nis():
    rep = consistency_report(RandomSource(2).normal(500), lags=5)
    assert rep.eps_bar is None and rep.nis_in_interval is None
    assert rep.whiteness_pass_fraction is not None
