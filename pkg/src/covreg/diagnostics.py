"""Posterior summaries and model-checking utilities.

Conditional Gaussian predictives, closed-form Gaussian KL divergence,
pointwise Frobenius errors, minimum-width highest-posterior-density
intervals, a split-free potential scale reduction factor, a held-out
predictive divergence study, and a biased missingness mask generator.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError
from .gibbs import PosteriorArchive
from .kernels import chol_psd
from .model import CovarianceTrajectory, Dataset


@dataclass
class GaussianPredictive:
    """Conditional Gaussian law over a subset of response components.

    index_map records which original component each coordinate refers to.
    """

    mean: np.ndarray
    covariance: np.ndarray
    index_map: np.ndarray


@dataclass
class IntervalSummary:
    """A credible interval and its nominal posterior mass."""

    lower: float
    upper: float
    mass: float


def conditional_predictive(mu: np.ndarray, sigma: np.ndarray,
                           observed_values: np.ndarray,
                           observed_mask: np.ndarray) -> GaussianPredictive:
    """Gaussian conditional of the unobserved components given the observed.

    Standard Schur-complement formulas: with blocks (m = missing,
    o = observed), the conditional mean is mu_m + S_mo S_oo^-1 (y_o - mu_o)
    and the covariance is S_mm - S_mo S_oo^-1 S_om.
    """
    observed_mask = np.asarray(observed_mask, dtype=bool)
    mis = ~observed_mask
    idx = np.flatnonzero(mis)
    if idx.size == 0:
        return GaussianPredictive(mean=np.zeros(0),
                                  covariance=np.zeros((0, 0)),
                                  index_map=idx)
    if not observed_mask.any():
        return GaussianPredictive(mean=mu[mis].copy(),
                                  covariance=sigma[np.ix_(mis, mis)].copy(),
                                  index_map=idx)
    yo = np.asarray(observed_values, dtype=float)[observed_mask]
    Soo = sigma[np.ix_(observed_mask, observed_mask)]
    Smo = sigma[np.ix_(mis, observed_mask)]
    Smm = sigma[np.ix_(mis, mis)]
    sol = np.linalg.solve(Soo, yo - mu[observed_mask])
    mean = mu[mis] + Smo @ sol
    cov = Smm - Smo @ np.linalg.solve(Soo, Smo.T)
    cov = 0.5 * (cov + cov.T)
    return GaussianPredictive(mean=mean, covariance=cov, index_map=idx)


def gaussian_kl(mu0: np.ndarray, sigma0: np.ndarray,
                mu1: np.ndarray, sigma1: np.ndarray) -> float:
    """KL(N(mu0, sigma0) || N(mu1, sigma1)) in nats, closed form."""
    mu0 = np.asarray(mu0, float)
    mu1 = np.asarray(mu1, float)
    d = mu0.shape[0]
    L1 = chol_psd(sigma1)
    L0 = chol_psd(sigma0)
    # trace(Sigma1^-1 Sigma0) via triangular solves
    A = np.linalg.solve(L1, L0)
    trace_term = float(np.sum(A * A))
    diff = mu1 - mu0
    w = np.linalg.solve(L1, diff)
    quad = float(w @ w)
    logdet = 2.0 * (np.sum(np.log(np.diag(L1))) - np.sum(np.log(np.diag(L0))))
    return 0.5 * (trace_term + quad - d + logdet)


def frobenius_error(estimate: CovarianceTrajectory,
                    truth: CovarianceTrajectory) -> np.ndarray:
    """Per-grid-point Frobenius norm of the covariance error, length n."""
    if estimate.sigmas.shape != truth.sigmas.shape:
        raise ValueError("trajectory shapes differ")
    diff = estimate.sigmas - truth.sigmas
    return np.sqrt(np.sum(diff**2, axis=(1, 2)))


def hpd_interval(samples: np.ndarray, mass: float = 0.95) -> IntervalSummary:
    """Minimum-width interval containing the requested posterior mass.

    Order-statistic construction: sort the draws and slide a window of
    ceil(mass * m) consecutive values, keeping the narrowest.
    """
    samples = np.sort(np.asarray(samples, dtype=float).ravel())
    m = samples.size
    if m < 20:
        raise ValueError(f"need at least 20 samples for an HPD interval, got {m}")
    if not (0 < mass < 1):
        raise ValueError("mass must lie in (0, 1)")
    window = int(np.ceil(mass * m))
    window = min(window, m)
    widths = samples[window - 1:] - samples[: m - window + 1]
    j = int(np.argmin(widths))
    return IntervalSummary(lower=float(samples[j]),
                           upper=float(samples[j + window - 1]), mass=mass)


def psrf(chains: np.ndarray) -> float:
    """Potential scale reduction factor, reported on the scale-reduction
    (square-root) scale.

    chains is (n_chains, n_draws).  Uses the classic between/within variance
    decomposition.  Degenerate input (zero within- and between-chain
    variance) returns 1.0; zero within-variance with spread between chains
    returns +inf.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2 or chains.shape[1] < 2:
        raise ValueError("psrf needs at least 2 chains of at least 2 draws")
    m, n = chains.shape
    means = chains.mean(axis=1)
    W = float(np.mean(chains.var(axis=1, ddof=1)))
    B = n * float(np.var(means, ddof=1))
    if W == 0.0:
        return 1.0 if B == 0.0 else np.inf
    var_hat = (n - 1) / n * W + B / n
    return float(np.sqrt(var_hat / W))


def biased_missingness_mask(truth: np.ndarray, rng: np.random.Generator,
                            base: float = 0.03,
                            spread: float = 0.04) -> np.ndarray:
    """Row-dependent missingness: rows with smaller norm are dropped more.

    Each entry of row i is missing independently with probability
    base + spread * (1 - ||y_i|| / max_i ||y_i||).  Returns the observed
    (True = observed) boolean mask.
    """
    truth = np.asarray(truth, dtype=float)
    norms = np.linalg.norm(truth, axis=1)
    top = norms.max()
    if top == 0.0:
        probs = np.full(truth.shape[0], base + spread)
    else:
        probs = base + spread * (1.0 - norms / top)
    draw = rng.random(truth.shape)
    return draw >= probs[:, None]


def predictive_kl_study(archives: dict[str, PosteriorArchive],
                        data: Dataset,
                        truth: CovarianceTrajectory) -> dict[str, float]:
    """Average KL from the true conditional predictive to each model's.

    For every row with at least one missing and one observed entry, the true
    conditional law of the missing components given the observed ones is
    compared against the same conditional computed under each model's
    posterior-mean trajectory; reported per model as the mean over rows.
    """
    rows = [
        i for i in range(data.n)
        if data.observed[i].any() and not data.observed[i].all()
    ]
    if not rows:
        raise DataFormatError("no rows with a mix of observed and missing entries")
    out = {}
    true_mus = truth.mus if truth.mus is not None else np.zeros((data.n, data.p))
    for name, archive in archives.items():
        traj = archive.mean_trajectory()
        mus = traj.mus if traj.mus is not None else np.zeros((data.n, data.p))
        kls = []
        for i in rows:
            ref = conditional_predictive(true_mus[i], truth.sigmas[i],
                                         data.y_masked()[i], data.observed[i])
            fit = conditional_predictive(mus[i], traj.sigmas[i],
                                         data.y_masked()[i], data.observed[i])
            kls.append(gaussian_kl(ref.mean, ref.covariance,
                                   fit.mean, fit.covariance))
        out[name] = float(np.mean(kls))
    return out
