import numpy as np
import pytest

from tgcimpute.emfit import (
    CorrelationModel,
    EmConfig,
    FitDiagnostics,
    conditional_dist,
    e_step,
    fill_latent,
    fit_em,
    init_sigma,
    m_step,
    observed_loglik,
    scale_to_correlation,
)
from tgcimpute.errors import ContractError, DomainError, NumericalError, ShapeError
from tgcimpute.kernels import available_backends

from oracles import conditional_oracle, loglik_oracle, mc_second_moment, random_correlation

BACKENDS = available_backends()


def masked_gaussian(rng, n, m, sigma, miss):
    chol = np.linalg.cholesky(sigma)
    z = rng.standard_normal((n, m)) @ chol.T
    mask = rng.random((n, m)) >= miss
    out = z.copy()
    out[~mask] = np.nan
    return out, mask


# ---------------------------------------------------------------------------
# init_sigma
# ---------------------------------------------------------------------------

def test_init_identical_columns_fully_observed():
    rng = np.random.default_rng(0)
    col = rng.standard_normal(50)
    z = np.column_stack([col, col])
    sigma = init_sigma(z, np.ones_like(z, bool))
    assert abs(sigma.sigma[0, 1] - 1.0) <= 1e-12


def test_init_independent_columns_near_zero():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((5000, 4))
    sigma = init_sigma(z, np.ones_like(z, bool))
    off = sigma.sigma[~np.eye(4, dtype=bool)]
    assert np.max(np.abs(off)) <= 0.1


def test_init_all_missing_column_pinned_to_identity_row():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((20, 3))
    mask = np.ones_like(z, bool)
    mask[:, 1] = False
    z[~mask] = np.nan
    sigma = init_sigma(z, mask, ridge=1e-6)
    assert sigma.sigma[1, 1] == 1.0
    assert np.allclose(sigma.sigma[1, [0, 2]], 0.0)
    assert np.allclose(sigma.sigma[[0, 2], 1], 0.0)


def test_init_empty_matrix_is_domain_error():
    with pytest.raises(DomainError):
        init_sigma(np.zeros((3, 0)), np.zeros((3, 0), bool))


# ---------------------------------------------------------------------------
# conditional_dist
# ---------------------------------------------------------------------------

def test_conditional_bivariate_regression_identity():
    rho, c = 0.6, 1.7
    sigma = np.array([[1.0, rho], [rho, 1.0]])
    mean, cov = conditional_dist(sigma, [0], [1], [c])
    assert mean[0] == pytest.approx(rho * c, abs=1e-14)
    assert cov[0, 0] == pytest.approx(1 - rho**2, abs=1e-14)


def test_conditional_identity_sigma_any_pattern():
    sigma = np.eye(5)
    mean, cov = conditional_dist(sigma, [0, 3], [1, 2, 4], [2.0, -1.0])
    assert np.allclose(mean, 0.0)
    assert np.allclose(cov, np.eye(3))


@pytest.mark.parametrize("backend", BACKENDS)
def test_conditional_matches_dense_oracle(backend):
    rng = np.random.default_rng(7)
    for _ in range(100):
        sigma = random_correlation(5, rng)
        obs = np.array([0, 3])
        mis = np.array([1, 2, 4])
        z_obs = rng.standard_normal(2)
        mean, cov = conditional_dist(sigma, obs, mis, z_obs, backend=backend)
        mean_o, cov_o = conditional_oracle(sigma, obs, mis, z_obs)
        assert np.max(np.abs(mean - mean_o)) <= 1e-10
        assert np.max(np.abs(cov - cov_o)) <= 1e-10


def test_conditional_empty_observation_set():
    sigma = random_correlation(4, np.random.default_rng(3))
    mean, cov = conditional_dist(sigma, [], [0, 1, 2, 3], [])
    assert np.allclose(mean, 0.0)
    assert np.allclose(cov, sigma)


def test_conditional_rejects_overlap_and_bad_lengths():
    sigma = np.eye(3)
    with pytest.raises(ContractError):
        conditional_dist(sigma, [0, 1], [1, 2], [0.0, 0.0])
    with pytest.raises(ShapeError):
        conditional_dist(sigma, [0], [1], [0.0, 0.0])
    with pytest.raises(ContractError):
        conditional_dist(sigma, [0, 0], [1], [0.0, 0.0])


# ---------------------------------------------------------------------------
# e_step / m_step
# ---------------------------------------------------------------------------

def test_e_step_fully_observed_row_passthrough():
    rng = np.random.default_rng(4)
    sigma = random_correlation(3, rng)
    z = rng.standard_normal((1, 3))
    zf, moments = e_step(z, np.ones_like(z, bool), sigma)
    assert np.array_equal(zf, z)
    assert np.allclose(moments.total, np.outer(z[0], z[0]), atol=1e-14)


def test_e_step_fully_missing_row_identity_sigma():
    z = np.full((1, 3), np.nan)
    zf, moments = e_step(z, np.zeros((1, 3), bool), np.eye(3))
    assert np.allclose(zf, 0.0)
    assert np.allclose(moments.total, np.eye(3))


def test_e_step_second_moment_matches_monte_carlo():
    rng = np.random.default_rng(5)
    sigma = random_correlation(3, rng)
    z_obs = np.array([0.8, -1.1])
    obs, mis = np.array([0, 2]), np.array([1])
    z = np.array([[z_obs[0], np.nan, z_obs[1]]])
    mask = np.array([[True, False, True]])
    _, moments = e_step(z, mask, sigma)
    estimate, se = mc_second_moment(sigma, obs, mis, z_obs, n_draws=1_000_000, seed=9)
    # the 1e-9 floor covers naive-summation roundoff on the deterministic
    # observed-observed entries, whose within-draw spread (hence se) is zero
    assert np.all(np.abs(moments.total - estimate) <= 3 * se + 1e-9)


def test_e_step_plugin_moment_drops_conditional_covariance():
    sigma = np.array([[1.0, 0.5], [0.5, 1.0]])
    z = np.array([[1.0, np.nan]])
    mask = np.array([[True, False]])
    _, full = e_step(z, mask, sigma)
    _, plugin = e_step(z, mask, sigma, plugin_moment=True)
    cond_var = 1 - 0.5**2
    assert full.total[1, 1] - plugin.total[1, 1] == pytest.approx(cond_var, abs=1e-12)


def test_m_step_complete_data_reduces_to_sample_covariance():
    rng = np.random.default_rng(6)
    z = rng.standard_normal((40, 4))
    _, moments = e_step(z, np.ones_like(z, bool), np.eye(4))
    ridge = 1e-6
    sraw = m_step(moments, ridge=ridge)
    expected = z.T @ z / 40 + ridge * np.eye(4)
    assert np.max(np.abs(sraw - expected)) <= 1e-12


def test_m_step_single_row_outer_product():
    z = np.array([[1.0, 2.0]])
    _, moments = e_step(z, np.ones_like(z, bool), np.eye(2))
    sraw = m_step(moments, ridge=1e-6)
    assert np.allclose(sraw, np.array([[1.0, 2.0], [2.0, 4.0]]) + 1e-6 * np.eye(2))


def test_m_step_row_duplication_invariance():
    rng = np.random.default_rng(7)
    sigma = random_correlation(3, rng)
    z, mask = masked_gaussian(rng, 30, 3, sigma, 0.3)
    _, m1 = e_step(z, mask, sigma)
    z2, mask2 = np.vstack([z, z]), np.vstack([mask, mask])
    _, m2 = e_step(z2, mask2, sigma)
    assert np.max(np.abs(m_step(m1, 0.0) - m_step(m2, 0.0))) <= 1e-14


# ---------------------------------------------------------------------------
# scale_to_correlation
# ---------------------------------------------------------------------------

def test_scale_hand_case():
    out = scale_to_correlation(np.array([[4.0, 2.0], [2.0, 9.0]]))
    assert np.allclose(out.sigma, [[1.0, 1 / 3], [1 / 3, 1.0]])


def test_scale_idempotent_on_correlation():
    rng = np.random.default_rng(8)
    corr = random_correlation(5, rng)
    out = scale_to_correlation(corr)
    assert np.max(np.abs(out.sigma - corr)) <= 1e-14


def test_scale_diagonal_to_identity():
    out = scale_to_correlation(np.diag([2.0, 5.0, 0.1]))
    assert np.array_equal(out.sigma, np.eye(3))


def test_scale_rejects_nonpositive_diagonal():
    with pytest.raises(NumericalError):
        scale_to_correlation(np.array([[0.0, 0.0], [0.0, 1.0]]))


# ---------------------------------------------------------------------------
# observed_loglik
# ---------------------------------------------------------------------------

def test_loglik_single_standard_cell():
    z = np.array([[0.0]])
    value = observed_loglik(z, np.array([[True]]), np.eye(1))
    assert value == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)


def test_loglik_two_independent_cells():
    z = np.array([[1.0, 1.0]])
    value = observed_loglik(z, np.ones((1, 2), bool), np.eye(2))
    assert value == pytest.approx(-np.log(2 * np.pi) - 1.0, abs=1e-12)


def test_loglik_empty_rows_contribute_zero():
    z = np.array([[0.5], [np.nan]])
    mask = np.array([[True], [False]])
    single = observed_loglik(np.array([[0.5]]), np.array([[True]]), np.eye(1))
    both = observed_loglik(z, mask, np.eye(1))
    assert both == pytest.approx(single / 2)


@pytest.mark.parametrize("backend", BACKENDS)
def test_loglik_matches_dense_oracle(backend):
    rng = np.random.default_rng(9)
    for _ in range(100):
        sigma = random_correlation(6, rng)
        z, mask = masked_gaussian(rng, 4, 6, sigma, 0.4)
        ours = observed_loglik(z, mask, sigma, backend=backend)
        assert ours == pytest.approx(loglik_oracle(z, mask, sigma), abs=1e-10)


# ---------------------------------------------------------------------------
# fit_em
# ---------------------------------------------------------------------------

def test_fit_em_complete_data_fixed_point():
    rng = np.random.default_rng(10)
    z = rng.standard_normal((200, 8))
    mask = np.ones_like(z, bool)
    config = EmConfig(ridge=0.0)
    sigma, diag = fit_em(z, mask, config)
    expected = scale_to_correlation(z.T @ z / 200)
    assert np.max(np.abs(sigma.sigma - expected.sigma)) <= 1e-10
    assert diag.converged and diag.iterations_run <= 2


def test_fit_em_scalar_dimension():
    z = np.random.default_rng(11).standard_normal((10, 1))
    sigma, diag = fit_em(z, np.ones_like(z, bool), EmConfig())
    assert np.array_equal(sigma.sigma, np.eye(1))
    assert diag.converged


def test_fit_em_recovers_synthetic_correlation():
    rng = np.random.default_rng(12)
    idx = np.arange(8)
    truth = 0.7 ** np.abs(np.subtract.outer(idx, idx))
    z, mask = masked_gaussian(rng, 1500, 8, truth, 0.3)
    sigma, diag = fit_em(z, mask, EmConfig())
    assert np.max(np.abs(sigma.sigma - truth)) <= 0.1
    sigma.check_valid()


def test_fit_em_invariants_after_fit():
    rng = np.random.default_rng(13)
    sigma_true = random_correlation(6, rng)
    z, mask = masked_gaussian(rng, 300, 6, sigma_true, 0.5)
    sigma, _ = fit_em(z, mask, EmConfig())
    s = sigma.sigma
    assert np.max(np.abs(s - s.T)) <= 1e-12
    assert np.max(np.abs(np.diag(s) - 1.0)) <= 1e-12
    assert np.linalg.eigvalsh(s).min() >= -1e-8


def test_fit_em_traces_align():
    rng = np.random.default_rng(14)
    sigma_true = random_correlation(4, rng)
    z, mask = masked_gaussian(rng, 100, 4, sigma_true, 0.4)
    _, diag = fit_em(z, mask, EmConfig(max_iters=7, rel_tol=1e-12))
    assert len(diag.loglik_trace) == diag.iterations_run
    assert len(diag.sigma_delta_trace) == diag.iterations_run


def test_fit_em_ascent_without_scale():
    rng = np.random.default_rng(15)
    idx = np.arange(6)
    truth = 0.8 ** np.abs(np.subtract.outer(idx, idx))
    z, mask = masked_gaussian(rng, 200, 6, truth, 0.5)
    config = EmConfig(max_iters=20, rel_tol=1e-300, ridge=0.0, scale=False)
    _, diag = fit_em(z, mask, config)
    steps = np.diff(diag.loglik_trace)
    assert np.all(steps >= -1e-8)


def test_fit_em_with_scale_loglik_roughly_monotone():
    rng = np.random.default_rng(16)
    idx = np.arange(6)
    truth = 0.8 ** np.abs(np.subtract.outer(idx, idx))
    z, mask = masked_gaussian(rng, 400, 6, truth, 0.4)
    _, diag = fit_em(z, mask, EmConfig(max_iters=25, rel_tol=1e-300))
    steps = np.diff(diag.loglik_trace)
    assert np.all(steps >= -1e-3)  # the projection may perturb exact ascent


def test_fit_em_fallback_column_stays_identity():
    rng = np.random.default_rng(17)
    z = rng.standard_normal((60, 4))
    mask = rng.random((60, 4)) >= 0.3
    mask[:, 2] = False
    z[~mask] = np.nan
    sigma, diag = fit_em(z, mask, EmConfig())
    assert diag.fallback_columns == (2,)
    assert sigma.sigma[2, 2] == 1.0
    assert np.allclose(np.delete(sigma.sigma[2], 2), 0.0)


def test_fit_em_determinism_bitwise():
    rng = np.random.default_rng(18)
    sigma_true = random_correlation(5, rng)
    z, mask = masked_gaussian(rng, 150, 5, sigma_true, 0.5)
    a, _ = fit_em(z, mask, EmConfig(max_iters=10, rel_tol=1e-12))
    b, _ = fit_em(z, mask, EmConfig(max_iters=10, rel_tol=1e-12))
    assert np.array_equal(a.sigma, b.sigma)


@pytest.mark.parametrize("backend", BACKENDS)
def test_fit_em_determinism_across_thread_limits(backend):
    threadpoolctl = pytest.importorskip("threadpoolctl")
    rng = np.random.default_rng(22)
    sigma_true = random_correlation(6, rng)
    z, mask = masked_gaussian(rng, 200, 6, sigma_true, 0.5)
    config = EmConfig(max_iters=8, rel_tol=1e-12, backend=backend)
    results = []
    for limit in (1, 4):
        with threadpoolctl.threadpool_limits(limits=limit):
            sigma, _ = fit_em(z, mask, config)
        results.append(sigma.sigma)
    assert np.array_equal(results[0], results[1])


@pytest.mark.parametrize("backend", BACKENDS)
def test_pattern_grouping_bit_identical_to_per_row(backend):
    rng = np.random.default_rng(19)
    sigma_true = random_correlation(5, rng)
    z, mask = masked_gaussian(rng, 120, 5, sigma_true, 0.5)
    config_g = EmConfig(max_iters=6, rel_tol=1e-12, group_patterns=True, backend=backend)
    config_n = EmConfig(max_iters=6, rel_tol=1e-12, group_patterns=False, backend=backend)
    a, diag_a = fit_em(z, mask, config_g)
    b, diag_b = fit_em(z, mask, config_n)
    assert np.array_equal(a.sigma, b.sigma)
    assert diag_a.loglik_trace == diag_b.loglik_trace
    # and the single-pass primitives agree bit-for-bit too
    zf_g, m_g = e_step(z, mask, sigma_true, group_patterns=True, backend=backend)
    zf_n, m_n = e_step(z, mask, sigma_true, group_patterns=False, backend=backend)
    assert np.array_equal(zf_g, zf_n)
    assert np.array_equal(m_g.total, m_n.total)


def test_fill_latent_only_touches_missing():
    rng = np.random.default_rng(20)
    sigma_true = random_correlation(4, rng)
    z, mask = masked_gaussian(rng, 50, 4, sigma_true, 0.4)
    zf = fill_latent(z, mask, sigma_true)
    assert np.array_equal(zf[mask], z[mask])
    assert np.all(np.isfinite(zf))


def test_numerical_error_carries_row_context():
    # a singular (rank-1) sigma defeats every jitter level at two observed cells
    sigma = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    sigma[0, 1] = sigma[1, 0] = 1.0 + 1e-3  # not PSD: leading block indefinite
    z = np.array([[0.3, -0.2, np.nan]])
    mask = np.array([[True, True, False]])
    with pytest.raises(NumericalError, match="row 0"):
        e_step(z, mask, sigma)


def test_em_config_validation():
    with pytest.raises(ContractError):
        EmConfig(max_iters=0)
    with pytest.raises(ContractError):
        EmConfig(rel_tol=0.0)
    with pytest.raises(ContractError):
        EmConfig(ridge=-1e-9)


def test_correlation_model_round_trip_and_validation():
    rng = np.random.default_rng(21)
    corr = CorrelationModel(random_correlation(4, rng))
    restored = CorrelationModel.from_dict(corr.to_dict())
    assert np.array_equal(corr.sigma, restored.sigma)
    corr.check_valid()
    with pytest.raises(ContractError):
        CorrelationModel(np.array([[1.0, 0.9], [0.2, 1.0]])).check_valid()


def test_diagnostics_round_trip():
    diag = FitDiagnostics([-1.0, -0.5], [0.4, 0.1], 2, True, (3,))
    restored = FitDiagnostics.from_dict(diag.to_dict())
    assert restored == diag
