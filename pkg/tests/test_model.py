import numpy as np
import pytest

from covreg.kernels import KernelParams, gram_matrix
from covreg.model import (
    LATENT_MEAN,
    ZERO_MEAN,
    Dataset,
    Hyperparameters,
    ShrinkageState,
    induced_covariance,
    induced_mean,
    factorize_covariances,
    prior_cov_elements,
    prior_mean_covariance,
    sample_prior,
    sample_shrinkage,
    prior_generating_hyper,
    default_inference_hyper,
    sigma0_prior_moments,
    simulate_from_prior_dataset,
    simulate_spline_covariance,
)


class TestInducedCovariance:
    def test_symmetric_psd(self):
        rng = np.random.default_rng(0)
        theta = rng.standard_normal((4, 3))
        xi = rng.standard_normal((3, 2))
        sigma0 = np.array([0.1, 0.2, 0.3, 0.4])
        s = induced_covariance(theta, xi, sigma0)
        assert np.array_equal(s, s.T)
        assert np.linalg.eigvalsh(s).min() > 0

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        theta = rng.standard_normal((3, 2))
        xi = rng.standard_normal((2, 2))
        sigma0 = np.full(3, 0.5)
        s = induced_covariance(theta, xi, sigma0)
        direct = theta @ xi @ xi.T @ theta.T + np.diag(sigma0)
        assert np.allclose(s, direct)

    def test_zero_xi_gives_diagonal(self):
        s = induced_covariance(np.ones((2, 2)), np.zeros((2, 2)),
                               np.array([1.0, 2.0]))
        assert np.allclose(s, np.diag([1.0, 2.0]))

    def test_induced_mean(self):
        theta = np.array([[1.0, 0.0], [0.0, 2.0]])
        xi = np.eye(2)
        psi = np.array([3.0, 4.0])
        assert np.allclose(induced_mean(theta, xi, psi), [3.0, 8.0])


class TestFactorizeCovariances:
    def test_round_trip(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((5, 3, 3))
        sigmas = np.einsum("nij,nkj->nik", a, a) + 0.5 * np.eye(3)
        theta, xi, sigma0 = factorize_covariances(sigmas, L=4, k=5)
        for i in range(5):
            rec = induced_covariance(theta, xi[:, :, i], sigma0)
            assert np.allclose(rec, sigmas[i], atol=1e-6)

    def test_requires_large_enough_truncations(self):
        with pytest.raises(ValueError):
            factorize_covariances(np.eye(3), L=2, k=3)


class TestGammaConvention:
    def test_precision_prior_mean_is_shape_over_rate(self):
        # Ga(1, 0.1) noise-precision prior has mean 1/0.1 = 10.
        rng = np.random.default_rng(3)
        draws = rng.gamma(1.0, scale=1.0 / 0.1, size=200000)
        assert draws.mean() == pytest.approx(10.0, rel=0.02)

    def test_sigma0_prior_moments(self):
        mu, var = sigma0_prior_moments(3.0, 0.3)
        assert mu == pytest.approx(0.3 / 2.0)
        assert var == pytest.approx(0.3**2 / (4.0 * 1.0))
        mu2, var2 = sigma0_prior_moments(1.5, 1.0)
        assert var2 is None
        with pytest.raises(ValueError):
            sigma0_prior_moments(1.0, 1.0)


class TestShrinkagePrior:
    def test_tau_is_running_product(self):
        s = ShrinkageState.from_delta(np.ones((2, 3)), np.array([2.0, 3.0, 4.0]))
        assert np.allclose(s.tau, [2.0, 6.0, 24.0])

    def test_sample_shrinkage_moments(self):
        hyper = prior_generating_hyper()
        rng = np.random.default_rng(4)
        phis = np.stack([
            sample_shrinkage(hyper, 2, rng).phi for _ in range(50000)
        ])
        # phi ~ Ga(3/2, 3/2): mean 1, variance 2/3
        assert phis.mean() == pytest.approx(1.0, abs=0.02)
        assert phis.var() == pytest.approx(2.0 / 3.0, abs=0.03)

    def test_delta_shapes(self):
        hyper = prior_generating_hyper()
        rng = np.random.default_rng(5)
        deltas = np.stack([
            sample_shrinkage(hyper, 2, rng).delta for _ in range(50000)
        ])
        # delta_1 ~ Ga(10, 1): mean 10, var 10
        assert deltas[:, 0].mean() == pytest.approx(10.0, rel=0.02)
        assert deltas[:, 0].var() == pytest.approx(10.0, rel=0.05)


class TestPresets:
    def test_generating_preset(self):
        h = prior_generating_hyper()
        assert (h.a1, h.a2) == (10.0, 10.0)
        assert (h.L_star, h.k_star) == (5, 4)
        assert (h.a_sigma, h.b_sigma) == (1.0, 0.1)
        assert h.kernel.kappa == 10.0

    def test_inference_preset(self):
        h = default_inference_hyper()
        assert (h.a1, h.a2) == (2.0, 2.0)
        assert (h.L_star, h.k_star) == (10, 10)

    def test_invalid_hyper(self):
        with pytest.raises(ValueError):
            Hyperparameters(a1=0, a2=1, a_sigma=1, b_sigma=1, L_star=1,
                            k_star=1, kernel=KernelParams(kappa=1.0))


class TestSamplePrior:
    def test_shapes_and_modes(self):
        hyper = prior_generating_hyper()
        rng = np.random.default_rng(6)
        xs = np.linspace(0.1, 1.0, 7)
        st = sample_prior(hyper, xs, p=3, mode=ZERO_MEAN, rng=rng)
        assert st.theta.shape == (3, 5)
        assert st.xi.shape == (5, 4, 7)
        assert st.eta.shape == (4, 7)
        st2 = sample_prior(hyper, xs, p=3, mode=LATENT_MEAN, rng=rng)
        assert st2.psi.shape == (4, 7)
        assert st2.nu.shape == (4, 7)

    def test_xi_gp_covariance(self):
        hyper = Hyperparameters(a1=3, a2=3, a_sigma=3, b_sigma=1, L_star=1,
                                k_star=1, kernel=KernelParams(kappa=5.0))
        xs = np.array([0.0, 0.25])
        gram = gram_matrix(xs, hyper.kernel)
        rng = np.random.default_rng(7)
        draws = np.stack([
            sample_prior(hyper, xs, p=1, mode=ZERO_MEAN, rng=rng,
                         gram=gram).xi[0, 0]
            for _ in range(40000)
        ])
        assert np.allclose(np.cov(draws.T), gram.values, atol=0.03)


class TestPriorMoments:
    def test_prior_mean_is_diagonal(self):
        phi = np.array([[1.0, 2.0], [0.5, 1.0]])
        tau = np.array([1.0, 4.0])
        m = prior_mean_covariance(3, phi, tau, mu_sigma=0.25)
        expected_diag = 3 * np.array([1.0 + 1 / 8.0, 2.0 + 1 / 4.0]) + 0.25
        assert np.allclose(m, np.diag(expected_diag))

    def test_cross_element_covariance_is_zero(self):
        phi = np.ones((3, 2))
        tau = np.ones(2)
        v = prior_cov_elements(2, phi, tau, None, 0, 1, 0, 2, 0.0, 0.1,
                               KernelParams(kappa=10.0))
        assert v == 0.0

    def test_diagonal_long_distance_limit(self):
        # at infinite distance the kernel term vanishes, leaving the
        # shared-coefficient-row term 2 k^2 sum(a^2) plus var(sigma^2)
        phi = np.ones((2, 2))
        tau = np.ones(2)
        _, svar = sigma0_prior_moments(3.0, 1.0)
        v = prior_cov_elements(2, phi, tau, svar, 0, 0, 0, 0, 0.0, 100.0,
                               KernelParams(kappa=10.0))
        assert v == pytest.approx(2 * 2**2 * 2 + svar)

    def test_distinct_diagonal_elements_decay_to_zero(self):
        phi = np.ones((2, 2))
        tau = np.ones(2)
        kern = KernelParams(kappa=10.0)
        near = prior_cov_elements(2, phi, tau, None, 0, 0, 1, 1, 0.0, 0.0,
                                  kern)
        far = prior_cov_elements(2, phi, tau, None, 0, 0, 1, 1, 0.0, 100.0,
                                 kern)
        assert near == pytest.approx(2 * 2 * 2)   # 2 k sum(a b)
        assert far == pytest.approx(0.0, abs=1e-12)

    def test_variance_requires_sigma_var(self):
        with pytest.raises(ValueError):
            prior_cov_elements(2, np.ones((2, 2)), np.ones(2), None,
                               0, 0, 0, 0, 0.0, 0.1, KernelParams(kappa=1.0))

    def test_exponent_switch(self):
        # the exponent only rescales the kernel-dependent part; the
        # distance-independent term is common to both variants
        phi = np.ones((2, 2))
        tau = np.ones(2)
        kern = KernelParams(kappa=10.0)
        vc = prior_cov_elements(2, phi, tau, None, 0, 1, 0, 1, 0.0, 0.1,
                                kern, exponent="c")
        vc2 = prior_cov_elements(2, phi, tau, None, 0, 1, 0, 1, 0.0, 0.1,
                                 kern, exponent="c2")
        const = prior_cov_elements(2, phi, tau, None, 0, 1, 0, 1, 0.0, 100.0,
                                   kern)
        c = np.exp(-10.0 * 0.01)
        assert (vc2 - const) / (vc - const) == pytest.approx(c)


class TestSplineGenerator:
    def test_shapes_and_positive_definite(self):
        rng = np.random.default_rng(8)
        traj = simulate_spline_covariance(rng, p=6, n=50)
        assert traj.sigmas.shape == (50, 6, 6)
        for i in range(0, 50, 7):
            assert np.linalg.eigvalsh(traj.sigmas[i]).min() > 0

    def test_quadratic_part_max_is_one(self):
        rng = np.random.default_rng(9)
        traj = simulate_spline_covariance(rng, p=5, n=60)
        quad = traj.sigmas.copy()
        # remove the diagonal noise: max over off-diagonal entries is <= 1
        # and the global max of the quadratic part equals 1 by construction.
        diag = quad[:, np.arange(5), np.arange(5)]
        assert quad.max() >= 1.0  # diag adds positive noise on top
        off = quad.copy()
        off[:, np.arange(5), np.arange(5)] = -np.inf
        assert off.max() <= 1.0 + 1e-12

    def test_requires_two_knots(self):
        with pytest.raises(ValueError):
            simulate_spline_covariance(np.random.default_rng(0), n_knots=1)


class TestSimulateFromPrior:
    def test_default_grid_and_shapes(self):
        rng = np.random.default_rng(10)
        data, truth = simulate_from_prior_dataset(rng)
        assert data.xs.shape == (100, 1)
        assert np.allclose(data.xs[:, 0], np.arange(1, 101) / 100.0)
        assert data.y.shape == (100, 10)
        assert truth.sigmas.shape == (100, 10, 10)
        assert truth.mus.shape == (100, 10)
        assert data.observed.all()


class TestDataset:
    def test_nan_among_observed_rejected(self):
        with pytest.raises(ValueError):
            Dataset(xs=np.array([0.0]), y=np.array([[np.nan]]),
                    observed=np.array([[True]]))

    def test_nan_among_missing_allowed(self):
        d = Dataset(xs=np.array([0.0]), y=np.array([[np.nan]]),
                    observed=np.array([[False]]))
        assert d.y_masked()[0, 0] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(xs=np.zeros(2), y=np.zeros((3, 1)),
                    observed=np.ones((3, 1), bool))
