"""Dense Gaussian algebra: factorization, KL divergence, sampling and expectations."""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NotPSD

logger = logging.getLogger(__name__)

# Relative jitter added to both covariances before a KL evaluation.
KL_JITTER = 1e-8

# Cholesky retries escalate jitter from this fraction of the mean diagonal...
_JITTER_START = 1e-12
# ...up to this fraction.
_JITTER_MAX = 1e-4

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MvNormal:
    """Multivariate normal distribution N(mean, cov)."""
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(
                f"MvNormal mean has shape {mean.shape} but cov has shape {cov.shape}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        """Number of dimensions."""
        return self.mean.size


def cholesky_psd(M: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """
    Lower Cholesky factor of a symmetric PSD matrix.

    Factorizes M + jitter*I. When that fails, the jitter is escalated
    by factors of 10 starting at 1e-12 of the mean diagonal, up to 1e-4 of
    the mean diagonal.

    Args:
        M: Symmetric matrix
        jitter: Nonnegative diagonal offset to start from

    Returns:
        Lower-triangular L with L @ L.T == M + jitter*I

    Raises:
        NotPSD: If the factorization fails at the maximum jitter
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"Expected a square matrix, got shape {M.shape}")
    if jitter < 0:
        raise ValueError(f"jitter must be nonnegative, got {jitter}")

    n = M.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    if jitter == 0.0 and not np.any(M):
        # The zero matrix has the zero factor
        return np.zeros_like(M)

    mean_diag = float(np.mean(np.diag(M)))
    max_jitter = _JITTER_MAX * mean_diag
    eye = np.eye(n)
    current = jitter

    while True:
        try:
            L = np.linalg.cholesky(M + current * eye)
            if current > jitter:
                logger.debug(
                    f"Cholesky needed jitter {current:.3e} (mean diagonal {mean_diag:.3e})"
                )
            return L
        except np.linalg.LinAlgError:
            pass

        if mean_diag <= 0.0 or not np.isfinite(mean_diag):
            raise NotPSD(f"Matrix with mean diagonal {mean_diag} is not positive semidefinite")

        current = current * 10.0 if current > 0.0 else _JITTER_START * mean_diag
        if current > max_jitter * (1.0 + 1e-9):
            raise NotPSD(
                f"Cholesky failed with jitter up to {max_jitter:.3e} "
                f"(mean diagonal {mean_diag:.3e})"
            )


def logdet_from_cholesky(L: np.ndarray) -> float:
    """Log-determinant of L @ L.T from its Cholesky factor."""
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def kl_gaussian(q: MvNormal, p: MvNormal) -> float:
    """
    KL(q || p) between two multivariate normals.

    A symmetric jitter of KL_JITTER * max(tr(cov_q), tr(cov_p)) / n is
    added to both covariances, so rank-deficient q (for instance the
    finite-basis variational distribution) gives a finite value.
    """
    if q.dim != p.dim:
        raise DimensionMismatch(f"KL between distributions of dimension {q.dim} and {p.dim}")

    n = q.dim
    if n == 0:
        return 0.0

    eps = KL_JITTER * max(np.trace(q.cov), np.trace(p.cov)) / n
    eps = max(eps, 1e-12)
    eye = np.eye(n)

    Lp = cholesky_psd(p.cov + eps * eye)
    Lq = cholesky_psd(q.cov + eps * eye)

    A = solve_triangular(Lp, Lq, lower=True)
    d = solve_triangular(Lp, p.mean - q.mean, lower=True)

    trace_term = float(np.sum(A * A))
    mahalanobis = float(d @ d)
    logdet_ratio = logdet_from_cholesky(Lp) - logdet_from_cholesky(Lq)
    return 0.5 * (trace_term + mahalanobis - n + logdet_ratio)


def expected_gaussian_loglik(y, mu_q, var_q, noise_var):
    """
    Closed-form E_{f ~ N(mu_q, var_q)} log N(y | f, noise_var).

    Works element-wise on arrays; returns a float for scalar inputs.
    """
    y = np.asarray(y, dtype=float)
    mu_q = np.asarray(mu_q, dtype=float)
    var_q = np.asarray(var_q, dtype=float)
    if np.any(var_q < 0):
        raise ValueError("var_q must be nonnegative")
    if np.any(np.asarray(noise_var) <= 0):
        raise ValueError("noise_var must be positive")

    result = -0.5 * (LOG_2PI + np.log(noise_var)) - ((y - mu_q) ** 2 + var_q) / (2.0 * noise_var)
    return float(result) if result.ndim == 0 else result


def expected_gaussian_loglik_sampled(
    y: float,
    mu_q: float,
    var_q: float,
    noise_var: float,
    samples: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """
    Monte-Carlo estimate of the expected Gaussian log-likelihood.

    Draws f ~ N(mu_q, var_q) and averages log N(y | f, noise_var).

    Returns:
        (estimate, standard error)
    """
    f = mu_q + math.sqrt(var_q) * rng.standard_normal(samples)
    values = -0.5 * (LOG_2PI + math.log(noise_var)) - (y - f) ** 2 / (2.0 * noise_var)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(samples))


def sample_mvn(dist: MvNormal, count: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw samples mean + L z with z standard normal.

    Returns:
        Array of shape (count, dim)
    """
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    L = cholesky_psd(dist.cov)
    z = rng.standard_normal((count, dist.dim))
    return dist.mean + z @ L.T


def log_density(dist: MvNormal, X: np.ndarray) -> np.ndarray:
    """Log density of each row of X under dist."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    L = cholesky_psd(dist.cov)
    z = solve_triangular(L, (X - dist.mean).T, lower=True)
    return -0.5 * (dist.dim * LOG_2PI + logdet_from_cholesky(L) + np.sum(z * z, axis=0))


def kl_gaussian_sampled(
    q: MvNormal, p: MvNormal, count: int, rng: np.random.Generator
) -> tuple[float, float]:
    """
    Monte-Carlo estimate of KL(q || p) as E_q[log q - log p].

    Returns:
        (estimate, standard error)
    """
    X = sample_mvn(q, count, rng)
    diff = log_density(q, X) - log_density(p, X)
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(count))
