"""Bayesian linear regression over basis weights."""

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import DimensionMismatch
from .features import BasisSet, WeightPrior, feature_matrix
from .gauss import cholesky_psd

# Learning rate and noise standard deviation of the sequential mean update.
DEFAULT_ETA = 0.0005
DEFAULT_SGD_NOISE_STD = 0.02


class SgdMode(Enum):
    """Sign of the regularizing term in the sequential mean update."""
    SHRINK = "shrink"   # mu + eta((y - mu.phi) phi - s2 mu): ridge/MAP gradient
    GROW = "grow"       # mu + eta((y - mu.phi) phi + s2 mu): the printed form of the update


class Adapter(Enum):
    """Online weight adaptation schemes."""
    RECURSIVE = "recursive"
    SGD_MEAN = "sgd"
    NONE = "none"


@dataclass(frozen=True)
class LinearPosterior:
    """Gaussian N(mu_alpha, sigma_alpha) over the basis weights."""
    mu_alpha: np.ndarray
    sigma_alpha: np.ndarray

    def __post_init__(self) -> None:
        mu = np.atleast_1d(np.asarray(self.mu_alpha, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma_alpha, dtype=float))
        if sigma.shape != (mu.size, mu.size):
            raise DimensionMismatch(
                f"Posterior mean has {mu.size} entries but covariance has shape {sigma.shape}"
            )
        object.__setattr__(self, "mu_alpha", mu)
        object.__setattr__(self, "sigma_alpha", sigma)

    @property
    def size(self) -> int:
        return self.mu_alpha.size

    @classmethod
    def from_prior(cls, prior: WeightPrior) -> "LinearPosterior":
        return cls(prior.mean.copy(), prior.cov.copy())

    def with_mean(self, mu: np.ndarray) -> "LinearPosterior":
        return LinearPosterior(mu, self.sigma_alpha)

    def to_dict(self) -> dict:
        return {"mu": self.mu_alpha.tolist(), "sigma_rowmajor": self.sigma_alpha.ravel().tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "LinearPosterior":
        mu = np.asarray(data["mu"], dtype=float)
        return cls(mu, np.asarray(data["sigma_rowmajor"], dtype=float).reshape(mu.size, mu.size))

    def save(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: Path) -> "LinearPosterior":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def blr_fit(Phi, y, noise_var: float, prior: WeightPrior) -> LinearPosterior:
    """
    Batch conjugate posterior over the weights.

    Computes Sigma = (Phi^T Phi / s2 + Sigma_0^-1)^-1 and
    mu = Sigma (Phi^T y / s2 + Sigma_0^-1 mu_0) in square-root form
    Sigma = L0 B^-1 L0^T with B = I + L0^T Phi^T Phi L0 / s2, so neither
    Phi^T Phi nor Sigma_0 is ever inverted explicitly.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    E = prior.size
    if Phi.shape[0] == 0 or y.size == 0:
        if Phi.shape[0] != y.size:
            raise DimensionMismatch(f"Phi has {Phi.shape[0]} rows but y has {y.size} entries")
        return LinearPosterior.from_prior(prior)
    if Phi.shape != (y.size, E):
        raise DimensionMismatch(f"Phi has shape {Phi.shape}, expected ({y.size}, {E})")
    if noise_var <= 0:
        raise ValueError(f"noise_var must be positive, got {noise_var}")

    L0 = cholesky_psd(prior.cov)
    G = Phi @ L0
    B = np.eye(E) + G.T @ G / noise_var
    LB = cholesky_psd(B)

    rhs = G.T @ y / noise_var
    if np.any(prior.mean):
        rhs = rhs + solve_triangular(L0, prior.mean, lower=True)
    mu = L0 @ cho_solve((LB, True), rhs)

    W = solve_triangular(LB, L0.T, lower=True)
    sigma = W.T @ W
    return LinearPosterior(mu, 0.5 * (sigma + sigma.T))


def blr_update_recursive(post: LinearPosterior, phi, y: float, noise_var: float) -> LinearPosterior:
    """Exact rank-1 conjugate update with one observation y = phi^T alpha + noise."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    if phi.size != post.size:
        raise DimensionMismatch(f"phi has {phi.size} entries, posterior has {post.size}")
    if noise_var <= 0:
        raise ValueError(f"noise_var must be positive, got {noise_var}")

    Sphi = post.sigma_alpha @ phi
    s = float(phi @ Sphi) + noise_var
    k = Sphi / s
    mu = post.mu_alpha + k * (y - float(phi @ post.mu_alpha))
    sigma = post.sigma_alpha - np.outer(k, Sphi)
    return LinearPosterior(mu, 0.5 * (sigma + sigma.T))


def sgd_mean_update(
    mu,
    phi,
    y: float,
    eta: float = DEFAULT_ETA,
    noise_var: float = DEFAULT_SGD_NOISE_STD ** 2,
    mode: SgdMode = SgdMode.SHRINK,
) -> np.ndarray:
    """One step of the sequential mean update of the weights."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    residual = y - float(mu @ phi)
    sign = -1.0 if mode == SgdMode.SHRINK else 1.0
    return mu + eta * (residual * phi + sign * noise_var * mu)


def predict(
    post: LinearPosterior,
    basis: BasisSet,
    X,
    full_cov: bool = False,
    include_noise: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Predictive mean and variance of f = Phi alpha at the rows of X.

    Args:
        post: Weight posterior
        basis: Basis the posterior belongs to
        X: Inputs (N x d)
        full_cov: Return the N x N covariance instead of the variances
        include_noise: Add the basis noise variance (predictive distribution of y)

    Returns:
        (mean, var) with var of shape (N,) or (N, N)
    """
    if basis.size != post.size:
        raise DimensionMismatch(f"Basis has {basis.size} functions, posterior has {post.size}")
    Phi = feature_matrix(basis, X)
    mean = Phi @ post.mu_alpha
    noise = basis.noise_var if include_noise else 0.0

    if full_cov:
        cov = Phi @ post.sigma_alpha @ Phi.T
        cov = 0.5 * (cov + cov.T) + noise * np.eye(Phi.shape[0])
        return mean, cov

    var = np.einsum("ij,jk,ik->i", Phi, post.sigma_alpha, Phi)
    return mean, np.maximum(var, 0.0) + noise
