"""Squared-exponential kernel, Gram matrices, and robust Cholesky machinery.

Everything downstream (dictionary-function updates, prior simulation, the
length-scale heuristic) goes through these few primitives, so they are kept
small, pure, and deterministic given an explicit random generator.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError

DEFAULT_NUGGET = 1e-5

# Diagonal jitter escalation: 1e-10 * 10**j for j = 0..6.
_JITTER_BASE = 1e-10
_JITTER_STEPS = 7


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential kernel: c(x, x') = exp(-kappa * ||x - x'||^2).

    kappa is an inverse squared length-scale; nugget is the diagonal term
    added to Gram matrices for numerical positive definiteness.
    """

    kappa: float
    nugget: float = DEFAULT_NUGGET

    def __post_init__(self):
        if not np.isfinite(self.kappa) or self.kappa <= 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not np.isfinite(self.nugget) or self.nugget < 0:
            raise ValueError(f"nugget must be nonnegative, got {self.nugget}")


@dataclass(frozen=True)
class GramMatrix:
    """Kernel Gram matrix over a fixed set of predictor points."""

    values: np.ndarray
    source_points: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _as_points(xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    return xs


def se_kernel(x, x2, params: KernelParams) -> float:
    """Evaluate exp(-kappa * ||x - x2||^2) for two predictor vectors."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape:
        raise ValueError(f"predictor dimensions differ: {x.shape} vs {x2.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x2))):
        raise ValueError("predictors must be finite")
    d2 = float(np.sum((x - x2) ** 2))
    return float(np.exp(-params.kappa * d2))


def gram_matrix(xs, params: KernelParams) -> GramMatrix:
    """Assemble the kernel Gram matrix with nugget on the diagonal.

    Entry (i, j) is se_kernel(x_i, x_j) plus nugget when i == j.  Symmetry
    holds exactly as stored because the matrix is built from squared
    pairwise distances.
    """
    pts = _as_points(xs)
    if pts.shape[0] < 1:
        raise ValueError("need at least one predictor point")
    if not np.all(np.isfinite(pts)):
        raise ValueError("predictors must be finite")
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    values = np.exp(-params.kappa * d2)
    values[np.diag_indices_from(values)] += params.nugget
    return GramMatrix(values=values, source_points=pts)


def chol_psd(m: np.ndarray, return_info: bool = False):
    """Lower Cholesky factor of a symmetric (nearly) PSD matrix.

    Retries with escalating diagonal jitter 1e-10 * 10**j, j = 0..6, when the
    plain factorization fails.  With return_info=True also returns the jitter
    that was added (0.0 when none was needed).
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(m, m.T, atol=1e-8 * max(1.0, np.abs(m).max())):
        raise ValueError("matrix is not symmetric within tolerance")

    last_err = None
    try:
        L = np.linalg.cholesky(m)
        return (L, 0.0) if return_info else L
    except np.linalg.LinAlgError as err:
        last_err = err

    eye = np.eye(m.shape[0])
    for j in range(_JITTER_STEPS):
        jitter = _JITTER_BASE * 10.0**j
        try:
            L = np.linalg.cholesky(m + jitter * eye)
            return (L, jitter) if return_info else L
        except np.linalg.LinAlgError as err:
            last_err = err
    raise NumericalError(
        f"Cholesky failed after max jitter {_JITTER_BASE * 10.0 ** (_JITTER_STEPS - 1):g}: {last_err}"
    )


def gp_draw(gram: GramMatrix, rng: np.random.Generator) -> np.ndarray:
    """One zero-mean Gaussian vector with covariance given by the Gram matrix."""
    L = chol_psd(gram.values)
    z = rng.standard_normal(gram.n)
    return L @ z


def sample_gaussian_from_precision(
    prec: np.ndarray, b: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw from N(P^-1 b, P^-1) given the precision matrix P.

    Uses the standard trick: with P = L L', mean solves P mu = b and the
    fluctuation is L'^-T z.
    """
    L = chol_psd(prec)
    mean = np.linalg.solve(L.T, np.linalg.solve(L, b))
    z = rng.standard_normal(b.shape[0])
    return mean + np.linalg.solve(L.T, z)


def sample_gaussian_from_covariance(
    cov: np.ndarray, mean: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw from N(mean, cov) via a jitter-robust Cholesky of the covariance."""
    L = chol_psd(cov)
    return mean + L @ rng.standard_normal(mean.shape[0])
