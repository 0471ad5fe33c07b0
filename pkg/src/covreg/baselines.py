"""Comparison models: Wishart matrix discounting with FFBS, and two
homoscedastic mean-regression baselines sharing the main model's priors.

The discounting filter is a discrete-time volatility model; it requires
complete, time-ordered observations.  Both homoscedastic baselines put an
inverse-Wishart prior on the constant covariance.
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import invwishart

from .errors import DataFormatError, NumericalError
from .gibbs import (
    ChainConfig,
    PosteriorArchive,
    _gram_inverse,
    sample_gaussian_from_precision,
    update_delta,
    update_phi,
)
from .kernels import KernelParams, chol_psd, gram_matrix
from .model import (
    CovarianceTrajectory,
    Dataset,
    Hyperparameters,
    sample_shrinkage,
    sample_theta_given_shrinkage,
)


@dataclass
class DiscountState:
    """One step of the Wishart discounting filter: degrees h and scale D."""

    h: float
    D: np.ndarray
    beta: float


def _check_beta(beta: float, p: int):
    lo = (p - 2.0) / (p - 1.0) if p > 1 else 0.0
    if not (lo < beta <= 1.0):
        raise ValueError(f"beta must lie in ({lo:.4f}, 1] for p={p}")


def mdw_forward_filter(ys: np.ndarray, beta: float, h0: float,
                       D0: np.ndarray) -> list[DiscountState]:
    """Forward pass of the matrix discounting filter.

    D_t = beta D_{t-1} + y_t y_t' and h_t = beta h_{t-1} + 1; the filtered
    law of the precision is W(h_t, D_t^-1).  Missing entries are not
    supported by this method.
    """
    ys = np.asarray(ys, dtype=float)
    if np.any(~np.isfinite(ys)):
        raise DataFormatError(
            "matrix discounting requires complete observations; "
            "pre-fill missing entries explicitly if needed"
        )
    T, p = ys.shape
    _check_beta(beta, p)
    if h0 <= p - 1:
        raise ValueError(f"h0 must exceed p - 1 = {p - 1}")
    h = float(h0)
    D = np.asarray(D0, dtype=float).copy()
    states = []
    for t in range(T):
        D = beta * D + np.outer(ys[t], ys[t])
        h = beta * h + 1.0
        states.append(DiscountState(h=h, D=D.copy(), beta=beta))
    return states


def wishart_draw(df: float, scale: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """Sample W(df, scale), including integer-singular degrees below p.

    Uses the Bartlett decomposition when df > p - 1; integer df <= p - 1
    are drawn as sums of df Gaussian outer products.  Fractional singular
    degrees are sampled as a floor/ceil mixture matching the mean.
    """
    p = scale.shape[0]
    if df < 1e-12:
        return np.zeros((p, p))
    L = chol_psd(scale)
    if df > p - 1:
        A = np.zeros((p, p))
        tril = np.tril_indices(p, -1)
        A[tril] = rng.standard_normal(len(tril[0]))
        A[np.diag_indices(p)] = np.sqrt(
            rng.chisquare(df - np.arange(p))
        )
        X = L @ A
        return X @ X.T
    nearest = round(df)
    if abs(df - nearest) > 1e-9:
        frac = df - np.floor(df)
        nearest = int(np.floor(df)) + (1 if rng.random() < frac else 0)
    m = int(nearest)
    if m == 0:
        return np.zeros((p, p))
    Z = rng.standard_normal((p, m))
    X = L @ Z
    return X @ X.T


def _spd_inverse(m: np.ndarray) -> np.ndarray:
    L = chol_psd(m)
    eye = np.eye(m.shape[0])
    return np.linalg.solve(L.T, np.linalg.solve(L, eye))


def mdw_backward_sample(filtered: list[DiscountState], beta: float,
                        rng: np.random.Generator) -> CovarianceTrajectory:
    """One retrospective draw of the covariance trajectory.

    Phi_T ~ W(h_T, D_T^-1); going backwards, Phi_t = beta Phi_{t+1} + U_t
    with U_t ~ W((1 - beta) h_t, D_t^-1).  Returns Sigma_t = Phi_t^-1.
    """
    if not filtered:
        raise ValueError("filtered sequence is empty")
    T = len(filtered)
    p = filtered[-1].D.shape[0]
    phis = np.empty((T, p, p))
    last = filtered[-1]
    phis[-1] = wishart_draw(last.h, _spd_inverse(last.D), rng)
    for t in range(T - 2, -1, -1):
        st = filtered[t]
        innov = wishart_draw((1.0 - beta) * st.h, _spd_inverse(st.D), rng)
        phis[t] = beta * phis[t + 1] + innov
    sigmas = np.empty_like(phis)
    for t in range(T):
        try:
            sigmas[t] = _spd_inverse(phis[t])
        except NumericalError as err:
            raise NumericalError(f"non-PD precision at t={t}: {err}") from err
    return CovarianceTrajectory(sigmas=sigmas)


def mdw_sample_trajectories(ys: np.ndarray, beta: float, h0: float,
                            D0: np.ndarray, n_draws: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Stack of independent FFBS covariance trajectories, (m, T, p, p)."""
    filtered = mdw_forward_filter(ys, beta, h0, D0)
    return np.stack([
        mdw_backward_sample(filtered, beta, rng).sigmas for _ in range(n_draws)
    ])


# ---------------------------------------------------------------------------
# Homoscedastic baselines
# ---------------------------------------------------------------------------

def _require_complete_or_impute(data: Dataset, impute: bool):
    if not impute and not data.observed.all():
        raise DataFormatError(
            "homoscedastic baselines need complete data or the imputation toggle"
        )


def _impute_from_gaussian(mu_rows: np.ndarray, sigma: np.ndarray,
                          data: Dataset, work_y: np.ndarray,
                          rng: np.random.Generator):
    """Fill missing entries from the conditional of N(mu_i, Sigma)."""
    for i in range(data.n):
        obs = data.observed[i]
        mis = ~obs
        if not mis.any():
            continue
        if not obs.any():
            L = chol_psd(sigma)
            work_y[i] = mu_rows[i] + L @ rng.standard_normal(data.p)
            continue
        Soo = sigma[np.ix_(obs, obs)]
        Smo = sigma[np.ix_(mis, obs)]
        Smm = sigma[np.ix_(mis, mis)]
        sol = np.linalg.solve(Soo, data.y[i, obs] - mu_rows[i, obs])
        cmean = mu_rows[i, mis] + Smo @ sol
        ccov = Smm - Smo @ np.linalg.solve(Soo, Smo.T)
        L = chol_psd(0.5 * (ccov + ccov.T))
        work_y[i, mis] = cmean + L @ rng.standard_normal(int(mis.sum()))


def fit_homoscedastic_gp_mean(data: Dataset, kernel: KernelParams,
                              config: ChainConfig,
                              iw_df: float | None = None,
                              iw_scale: np.ndarray | None = None
                              ) -> PosteriorArchive:
    """Gaussian process mean regression with a constant covariance.

    Alternates per-component GP draws of mu_j(.) with an inverse-Wishart
    update of Sigma.  Weakly informative IW defaults: df = p + 2, scale = I.
    """
    _require_complete_or_impute(data, config.impute)
    rng = np.random.default_rng(config.seed)
    n, p = data.n, data.p
    if iw_df is None:
        iw_df = p + 2.0
    if iw_scale is None:
        iw_scale = np.eye(p)

    gram = gram_matrix(data.xs, kernel)
    kinv = _gram_inverse(gram)
    diag_idx = np.diag_indices(n)

    mu = np.zeros((n, p))
    sigma = np.eye(p)
    work_y = data.y_masked().copy()

    n_kept = config.n_kept
    sigmas = np.empty((n_kept, n, p, p))
    mus = np.empty((n_kept, n, p))
    kept = 0
    for it in range(1, config.n_iterations + 1):
        if config.impute:
            _impute_from_gaussian(mu, sigma, data, work_y, rng)
        omega = _spd_inverse(sigma)
        for j in range(p):
            mu_minus = mu.copy()
            mu_minus[:, j] = 0.0
            b = (work_y - mu_minus) @ omega[:, j]
            prec = kinv.copy()
            prec[diag_idx] += omega[j, j]
            mu[:, j] = sample_gaussian_from_precision(prec, b, rng)
        resid = work_y - mu
        sigma = invwishart.rvs(df=iw_df + n, scale=iw_scale + resid.T @ resid,
                               random_state=rng)
        sigma = np.atleast_2d(sigma)

        if it > config.burn_in and (it - config.burn_in) % config.thin == 0 \
                and kept < n_kept:
            sigmas[kept] = np.broadcast_to(sigma, (n, p, p))
            mus[kept] = mu
            kept += 1
    manifest = {"model": "homoscedastic-gp-mean", "seed": config.seed,
                "n_iterations": config.n_iterations, "burn_in": config.burn_in,
                "thin": config.thin, "impute": config.impute,
                "kappa": kernel.kappa}
    return PosteriorArchive(sigmas=sigmas, mus=mus, traces={}, manifest=manifest)


def fit_homoscedastic_latent_factor(data: Dataset, hyper: Hyperparameters,
                                    config: ChainConfig,
                                    iw_df: float | None = None,
                                    iw_scale: np.ndarray | None = None
                                    ) -> PosteriorArchive:
    """Latent factor mean regression mu(x) = Theta xi(x) psi(x) with a
    constant covariance under an inverse-Wishart prior.

    The mean structure, shrinkage priors, and conditional draws match the
    heteroscedastic model; only the covariance is predictor-independent.
    """
    _require_complete_or_impute(data, config.impute)
    rng = np.random.default_rng(config.seed)
    n, p = data.n, data.p
    L, k = hyper.L_star, hyper.k_star
    if iw_df is None:
        iw_df = p + 2.0
    if iw_scale is None:
        iw_scale = np.eye(p)

    gram = gram_matrix(data.xs, hyper.kernel)
    kinv = _gram_inverse(gram)
    Lc = chol_psd(gram.values)
    diag_idx = np.diag_indices(n)

    shrink = sample_shrinkage(hyper, p, rng)
    theta = sample_theta_given_shrinkage(shrink, rng)
    xi = np.einsum("ij,lkj->lki", Lc, rng.standard_normal((L, k, n)))
    psi = np.einsum("ij,kj->ki", Lc, rng.standard_normal((k, n)))
    sigma = np.eye(p)
    work_y = data.y_masked().copy()

    def mean_rows():
        return np.einsum("jl,lki,ki->ij", theta, xi, psi)

    n_kept = config.n_kept
    sigmas = np.empty((n_kept, n, p, p))
    mus = np.empty((n_kept, n, p))
    kept = 0
    for it in range(1, config.n_iterations + 1):
        if config.impute:
            _impute_from_gaussian(mean_rows(), sigma, data, work_y, rng)
        omega = _spd_inverse(sigma)

        # Dictionary functions, same scan order as the main sampler but with
        # psi in place of eta and the full constant precision.
        resid = work_y - mean_rows()
        for l in range(L):
            tl = theta[:, l]
            otl = omega @ tl
            quad = float(tl @ otl)
            for m in range(k):
                pm = psi[m]
                xi_lm = xi[l, m]
                b = pm * (resid @ otl + xi_lm * pm * quad)
                prec = kinv.copy()
                prec[diag_idx] += pm * pm * quad
                new = sample_gaussian_from_precision(prec, b, rng)
                resid -= np.outer((new - xi_lm) * pm, tl)
                xi[l, m] = new

        # Mean components psi_l(.)
        omegas = np.einsum("jl,lki->ijk", theta, xi)   # (n, p, k)
        resid = work_y - mean_rows()
        for l in range(k):
            col = omegas[:, :, l]                      # (n, p)
            ocol = col @ omega                         # (n, p)
            a = np.einsum("ij,ij->i", ocol, col)
            b = np.einsum("ij,ij->i", ocol, resid) + a * psi[l]
            prec = kinv.copy()
            prec[diag_idx] += a
            new = sample_gaussian_from_precision(prec, b, rng)
            resid -= col * (new - psi[l])[:, None]
            psi[l] = new

        # Rows of Theta; rows couple through the full covariance, so each row
        # conditions on the current values of the others.
        W = np.einsum("lki,ki->il", xi, psi)           # (n, L)
        WtW = W.T @ W
        for j in range(p):
            theta_minus = theta.copy()
            theta_minus[j] = 0.0
            c = (work_y - W @ theta_minus.T) @ omega[:, j]   # (n,)
            prec = omega[j, j] * WtW
            prec[np.diag_indices_from(prec)] += shrink.phi[j] * shrink.tau
            b = W.T @ c
            theta[j] = sample_gaussian_from_precision(prec, b, rng)

        update_phi(theta, shrink, rng)
        update_delta(theta, shrink, hyper, rng)

        resid = work_y - mean_rows()
        sigma = invwishart.rvs(df=iw_df + n, scale=iw_scale + resid.T @ resid,
                               random_state=rng)
        sigma = np.atleast_2d(sigma)

        if it > config.burn_in and (it - config.burn_in) % config.thin == 0 \
                and kept < n_kept:
            sigmas[kept] = np.broadcast_to(sigma, (n, p, p))
            mus[kept] = mean_rows()
            kept += 1
    manifest = {"model": "homoscedastic-latent-factor", "seed": config.seed,
                "n_iterations": config.n_iterations, "burn_in": config.burn_in,
                "thin": config.thin, "impute": config.impute,
                "kappa": hyper.kernel.kappa}
    return PosteriorArchive(sigmas=sigmas, mus=mus, traces={}, manifest=manifest)
