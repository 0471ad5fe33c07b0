"""Model types, induced moments, prior simulation, and synthetic generators.

The covariance regression model decomposes a predictor-indexed covariance as

    Sigma(x) = Theta xi(x) xi(x)' Theta' + Sigma_0,

with Theta a p x L coefficient matrix, xi(x) an L x k matrix of GP-distributed
dictionary functions, and Sigma_0 diagonal.  In latent-mean mode the induced
mean is mu(x) = Theta xi(x) psi(x).

Gamma distributions are parameterized as Ga(shape, rate) throughout.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .kernels import GramMatrix, KernelParams, chol_psd, gram_matrix

ZERO_MEAN = "zero-mean"
LATENT_MEAN = "latent-mean"


@dataclass(frozen=True)
class Hyperparameters:
    """Shrinkage shapes, noise prior, truncations, and kernel settings."""

    a1: float
    a2: float
    a_sigma: float
    b_sigma: float
    L_star: int
    k_star: int
    kernel: KernelParams

    def __post_init__(self):
        if min(self.a1, self.a2, self.a_sigma, self.b_sigma) <= 0:
            raise ValueError("gamma hyperparameters must be positive")
        if self.L_star < 1 or self.k_star < 1:
            raise ValueError("truncations must be >= 1")


def prior_generating_hyper(kappa: float = 10.0) -> Hyperparameters:
    """Settings used by the prior-draw simulation study (p=10 generator)."""
    return Hyperparameters(
        a1=10.0, a2=10.0, a_sigma=1.0, b_sigma=0.1, L_star=5, k_star=4,
        kernel=KernelParams(kappa=kappa),
    )


def default_inference_hyper(
    kappa: float = 10.0, L_star: int = 10, k_star: int = 10
) -> Hyperparameters:
    """Default inference settings for the prior-draw simulation study."""
    return Hyperparameters(
        a1=2.0, a2=2.0, a_sigma=1.0, b_sigma=0.1, L_star=L_star, k_star=k_star,
        kernel=KernelParams(kappa=kappa),
    )


@dataclass
class ShrinkageState:
    """Local precisions phi, column multipliers delta, running products tau."""

    phi: np.ndarray      # (p, L) positive
    delta: np.ndarray    # (L,) positive
    tau: np.ndarray      # (L,) running products of delta

    @classmethod
    def from_delta(cls, phi: np.ndarray, delta: np.ndarray) -> "ShrinkageState":
        return cls(phi=np.asarray(phi, float), delta=np.asarray(delta, float),
                   tau=np.cumprod(delta))

    def refresh_tau(self):
        self.tau = np.cumprod(self.delta)


@dataclass
class ModelState:
    """All latent quantities of one MCMC iteration.

    xi is stored as an (L, k, n) array of dictionary values at the observed
    predictors.  In zero-mean mode the factors are eta (k, n); in latent-mean
    mode they are psi(x_i) + nu_i with psi, nu each (k, n).
    """

    theta: np.ndarray
    xi: np.ndarray
    sigma0: np.ndarray
    shrinkage: ShrinkageState
    mode: str
    eta: np.ndarray | None = None
    psi: np.ndarray | None = None
    nu: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in (ZERO_MEAN, LATENT_MEAN):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == ZERO_MEAN and self.eta is None:
            raise ValueError("zero-mean mode requires eta")
        if self.mode == LATENT_MEAN and (self.psi is None or self.nu is None):
            raise ValueError("latent-mean mode requires psi and nu")
        if np.any(self.sigma0 <= 0):
            raise ValueError("sigma0 entries must be positive")

    @property
    def p(self) -> int:
        return self.theta.shape[0]

    @property
    def L(self) -> int:
        return self.theta.shape[1]

    @property
    def k(self) -> int:
        return self.xi.shape[1]

    @property
    def n(self) -> int:
        return self.xi.shape[2]

    def factors(self) -> np.ndarray:
        """The (k, n) latent factors entering the likelihood."""
        if self.mode == ZERO_MEAN:
            return self.eta
        return self.psi + self.nu

    def xi_at(self, i: int) -> np.ndarray:
        return self.xi[:, :, i]

    def covariance_at(self, i: int) -> np.ndarray:
        return induced_covariance(self.theta, self.xi[:, :, i], self.sigma0)

    def mean_at(self, i: int) -> np.ndarray:
        if self.mode == ZERO_MEAN:
            return np.zeros(self.p)
        return induced_mean(self.theta, self.xi[:, :, i], self.psi[:, i])

    def trajectory(self) -> "CovarianceTrajectory":
        sigmas = np.stack([self.covariance_at(i) for i in range(self.n)])
        mus = None
        if self.mode == LATENT_MEAN:
            mus = np.stack([self.mean_at(i) for i in range(self.n)])
        return CovarianceTrajectory(sigmas=sigmas, mus=mus)


@dataclass
class Dataset:
    """Predictor grid, response matrix, and observed-entry mask."""

    xs: np.ndarray        # (n, q)
    y: np.ndarray         # (n, p)
    observed: np.ndarray  # (n, p) bool

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=float)
        if self.xs.ndim == 1:
            self.xs = self.xs[:, None]
        self.y = np.asarray(self.y, dtype=float)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.y.shape != self.observed.shape:
            raise ValueError("y and observed mask shapes differ")
        if self.xs.shape[0] != self.y.shape[0]:
            raise ValueError("xs and y row counts differ")
        if np.any(~np.isfinite(self.y[self.observed])):
            raise ValueError("NaN/inf among entries flagged observed")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    def y_masked(self) -> np.ndarray:
        """Responses with unobserved entries replaced by zero."""
        return np.where(self.observed, self.y, 0.0)


@dataclass
class CovarianceTrajectory:
    """Per-predictor covariance matrices (and optional means) on a grid."""

    sigmas: np.ndarray            # (n, p, p)
    mus: np.ndarray | None = None  # (n, p)

    @property
    def n(self) -> int:
        return self.sigmas.shape[0]

    @property
    def p(self) -> int:
        return self.sigmas.shape[1]


def _symmetrize_from_lower(s: np.ndarray) -> np.ndarray:
    lower = np.tril(s)
    return lower + np.tril(s, -1).T


def induced_covariance(theta: np.ndarray, xi_at_x: np.ndarray,
                       sigma0: np.ndarray) -> np.ndarray:
    """Theta xi xi' Theta' + diag(sigma0), symmetric by construction."""
    g = theta @ xi_at_x
    s = _symmetrize_from_lower(g @ g.T)
    s[np.diag_indices_from(s)] += sigma0
    return s


def induced_mean(theta: np.ndarray, xi_at_x: np.ndarray,
                 psi_at_x: np.ndarray) -> np.ndarray:
    """Theta xi psi, the mean induced by the latent factor regression."""
    return theta @ (xi_at_x @ psi_at_x)


def factorize_covariances(sigmas: np.ndarray, L: int, k: int):
    """Constructive factorization of a PSD trajectory.

    Returns (theta, xi, sigma0) with theta = [I_p 0], xi(x) holding the
    Cholesky factor of Sigma(x) in its upper-left p x p block, and sigma0 = 0,
    so that the induced covariance reproduces the input trajectory.
    """
    sigmas = np.asarray(sigmas, dtype=float)
    if sigmas.ndim == 2:
        sigmas = sigmas[None]
    n, p, _ = sigmas.shape
    if L < p or k < p:
        raise ValueError(f"need L, k >= p = {p}")
    theta = np.zeros((p, L))
    theta[:, :p] = np.eye(p)
    xi = np.zeros((L, k, n))
    for i in range(n):
        xi[:p, :p, i] = chol_psd(sigmas[i])
    return theta, xi, np.zeros(p)


def sample_shrinkage(hyper: Hyperparameters, p: int,
                     rng: np.random.Generator) -> ShrinkageState:
    """phi ~ Ga(3/2, 3/2), delta_1 ~ Ga(a1, 1), delta_h ~ Ga(a2, 1)."""
    L = hyper.L_star
    phi = rng.gamma(1.5, scale=1.0 / 1.5, size=(p, L))
    delta = np.empty(L)
    delta[0] = rng.gamma(hyper.a1, scale=1.0)
    if L > 1:
        delta[1:] = rng.gamma(hyper.a2, scale=1.0, size=L - 1)
    return ShrinkageState.from_delta(phi, delta)


def sample_theta_given_shrinkage(shrinkage: ShrinkageState,
                                 rng: np.random.Generator) -> np.ndarray:
    sd = 1.0 / np.sqrt(shrinkage.phi * shrinkage.tau[None, :])
    return rng.standard_normal(shrinkage.phi.shape) * sd


def sample_prior(hyper: Hyperparameters, xs, p: int, mode: str,
                 rng: np.random.Generator,
                 shrinkage: ShrinkageState | None = None,
                 gram: GramMatrix | None = None) -> ModelState:
    """Ancestral draw of a full model state from the prior.

    A fixed shrinkage state can be supplied to condition on (phi, tau), as the
    prior-moment formulas do.
    """
    if gram is None:
        gram = gram_matrix(xs, hyper.kernel)
    n = gram.n
    L, k = hyper.L_star, hyper.k_star
    if shrinkage is None:
        shrinkage = sample_shrinkage(hyper, p, rng)
    theta = sample_theta_given_shrinkage(shrinkage, rng)
    Lc = chol_psd(gram.values)
    xi = np.einsum("ij,lkj->lki", Lc, rng.standard_normal((L, k, n)))
    prec = rng.gamma(hyper.a_sigma, scale=1.0 / hyper.b_sigma, size=p)
    sigma0 = 1.0 / prec
    if mode == ZERO_MEAN:
        return ModelState(theta=theta, xi=xi, sigma0=sigma0,
                          shrinkage=shrinkage, mode=mode,
                          eta=rng.standard_normal((k, n)))
    psi = np.einsum("ij,kj->ki", Lc, rng.standard_normal((k, n)))
    nu = rng.standard_normal((k, n))
    return ModelState(theta=theta, xi=xi, sigma0=sigma0,
                      shrinkage=shrinkage, mode=mode, psi=psi, nu=nu)


def sigma0_prior_moments(a_sigma: float, b_sigma: float):
    """Mean and variance of sigma_j^2 under the Ga(a, b) prior on sigma_j^-2.

    The mean requires a_sigma > 1 and the variance a_sigma > 2.
    """
    if a_sigma <= 1:
        raise ValueError("prior mean of sigma^2 undefined for a_sigma <= 1")
    mu = b_sigma / (a_sigma - 1.0)
    if a_sigma <= 2:
        return mu, None
    var = b_sigma**2 / ((a_sigma - 1.0) ** 2 * (a_sigma - 2.0))
    return mu, var


def prior_mean_covariance(k_star: int, phi: np.ndarray, tau: np.ndarray,
                          mu_sigma: float) -> np.ndarray:
    """Prior mean of Sigma(x) given (phi, tau): a diagonal matrix."""
    if np.any(phi <= 0) or np.any(tau <= 0):
        raise ValueError("phi and tau must be strictly positive")
    if not np.isfinite(mu_sigma):
        raise ValueError("mu_sigma must be finite")
    diag = k_star * np.sum(1.0 / (phi * tau[None, :]), axis=1) + mu_sigma
    return np.diag(diag)


def prior_cov_elements(k_star: int, phi: np.ndarray, tau: np.ndarray,
                       sigma_var: float | None, i: int, j: int, u: int, v: int,
                       x, x2, kernel: KernelParams,
                       exponent: str = "c2") -> float:
    """Prior covariance cov(Sigma_ij(x), Sigma_uv(x2)) given (phi, tau).

    The covariance is nonzero only when every response index appears an even
    number of times among (i, j, u, v): the coefficient rows are independent
    with zero mean, so any row appearing an odd number of times kills the
    expectation.  Nonzero cases carry a distance-independent term from the
    shared coefficient rows plus a kernel-dependent term that decays as
    c(x, x2)^2 under the default `exponent="c2"` ("c" substitutes a linear
    decay for comparison).  For i == j == u == v the variance of sigma^2 is
    added, which also does not decay with distance.
    """
    if exponent not in ("c", "c2"):
        raise ValueError(f"exponent must be 'c' or 'c2', got {exponent!r}")
    _, counts = np.unique([i, j, u, v], return_counts=True)
    if np.any(counts % 2):
        return 0.0
    from .kernels import se_kernel  # local import avoids a cycle at module load

    c = se_kernel(x, x2, kernel)
    ck = c**2 if exponent == "c2" else c
    inv_pt = 1.0 / (phi * tau[None, :])
    k = float(k_star)
    if i == j == u == v:
        if sigma_var is None:
            raise ValueError("variance of sigma^2 required (needs a_sigma > 2)")
        a = inv_pt[i]
        a2 = np.sum(a**2)
        return float(2.0 * k**2 * a2
                     + 2.0 * k * ck * (2.0 * a2 + np.sum(a) ** 2)
                     + sigma_var)
    if i != j and {i, j} == {u, v}:
        a, b = inv_pt[i], inv_pt[j]
        ab = np.sum(a * b)
        return float(k**2 * ab + k * ck * (ab + np.sum(a) * np.sum(b)))
    # remaining even-parity case: two distinct diagonal elements
    a, b = inv_pt[i], inv_pt[u]
    return float(2.0 * k * ck * np.sum(a * b))


def _truncated_standard_normal(size, rng: np.random.Generator) -> np.ndarray:
    """Standard normal truncated to (0, inf), sampled by rejection."""
    out = rng.standard_normal(size)
    bad = out <= 0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = out <= 0
    return out


def simulate_spline_covariance(rng: np.random.Generator, p: int = 30,
                               n: int = 500, n_knots: int = 5
                               ) -> CovarianceTrajectory:
    """Parametric heteroscedastic generator built on spline-interpolated knots.

    Knot matrices S(x_k) are drawn N(0, Sigma_s) columnwise with
    Sigma_s = sum_j s_j s_j' and s_j centered on a linear ramp; a natural
    cubic spline interpolates each matrix element between knots, and the
    result is scaled so the largest element of the quadratic part equals 1.
    """
    if n_knots < 2:
        raise ValueError("need at least 2 knots")
    grid = np.arange(1, n + 1, dtype=float)
    knots = np.linspace(1, n, n_knots)
    ramp = 2.0 * np.arange(p) - (p - 1.0)
    s = ramp[:, None] + rng.standard_normal((p, p))
    sigma_s = s @ s.T
    Ls = chol_psd(sigma_s)
    S_knots = np.stack([Ls @ rng.standard_normal((p, p)) for _ in range(n_knots)])
    spline = CubicSpline(knots, S_knots, axis=0, bc_type="natural")
    S_grid = spline(grid)                       # (n, p, p)
    quad = np.einsum("nij,nkj->nik", S_grid, S_grid)
    alpha = 1.0 / np.max(quad)
    sigma0 = _truncated_standard_normal(p, rng)
    sigmas = alpha * quad
    sigmas = 0.5 * (sigmas + np.transpose(sigmas, (0, 2, 1)))
    sigmas[:, np.arange(p), np.arange(p)] += sigma0
    return CovarianceTrajectory(sigmas=sigmas)


def simulate_from_prior_dataset(rng: np.random.Generator,
                                hyper: Hyperparameters | None = None,
                                xs=None, p: int = 10, mode: str = LATENT_MEAN,
                                return_state: bool = False):
    """Draw (Dataset, generating trajectory) from the model prior.

    Defaults reproduce the prior-draw simulation study: 100 predictors scaled
    to (0, 1], p = 10, L = 5, k = 4, kappa = 10, a1 = a2 = 10, and
    sigma_j^-2 ~ Ga(1, 0.1).
    """
    if hyper is None:
        hyper = prior_generating_hyper()
    if xs is None:
        xs = np.arange(1, 101, dtype=float) / 100.0
    state = sample_prior(hyper, xs, p, mode, rng)
    truth = state.trajectory()
    n = truth.n
    y = np.empty((n, p))
    for i in range(n):
        L = chol_psd(truth.sigmas[i])
        mu = truth.mus[i] if truth.mus is not None else np.zeros(p)
        y[i] = mu + L @ rng.standard_normal(p)
    data = Dataset(xs=np.asarray(xs, float), y=y,
                   observed=np.ones((n, p), dtype=bool))
    if return_state:
        return data, truth, state
    return data, truth
