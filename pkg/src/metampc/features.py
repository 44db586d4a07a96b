"""Kernels and finite basis sets for the truncated GP expansion."""

import json
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch
from .gauss import cholesky_psd

# Relative jitter on K_ZZ before inverting it for the Nystrom weight prior.
NYSTROM_JITTER = 1e-8

# Box for exponentiated kernel hyperparameters.
HYPER_BOUNDS = (1e-3, 1e3)


class BasisKind(Enum):
    """Basis function families."""
    SUBSET_OF_REGRESSORS = "sor"      # phi_i(x) = k(z_i, x)
    PARAMETRIC_COSINE = "cosine"      # phi(p) = -T_s cos(sigma p)


class PriorKind(Enum):
    """Weight prior constructions."""
    NYSTROM = "nystrom"
    DIAGONAL = "diagonal"


@dataclass(frozen=True)
class KernelHyper:
    """Squared-exponential kernel hyperparameters, stored in log-space."""
    log_lengthscale: np.ndarray
    log_signal_var: float
    log_noise_var: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "log_lengthscale", np.atleast_1d(np.asarray(self.log_lengthscale, dtype=float))
        )
        object.__setattr__(self, "log_signal_var", float(self.log_signal_var))
        object.__setattr__(self, "log_noise_var", float(self.log_noise_var))

    @classmethod
    def from_values(cls, lengthscale, signal_var: float, noise_var: float) -> "KernelHyper":
        """Build from natural-space values."""
        lengthscale = np.atleast_1d(np.asarray(lengthscale, dtype=float))
        if np.any(lengthscale <= 0) or signal_var <= 0 or noise_var <= 0:
            raise ValueError("Kernel hyperparameters must be strictly positive")
        return cls(np.log(lengthscale), math.log(signal_var), math.log(noise_var))

    @property
    def lengthscale(self) -> np.ndarray:
        return np.exp(self.log_lengthscale)

    @property
    def signal_var(self) -> float:
        return math.exp(self.log_signal_var)

    @property
    def noise_var(self) -> float:
        return math.exp(self.log_noise_var)


@dataclass(frozen=True)
class WeightPrior:
    """Gaussian prior N(mean, cov) over the basis weights."""
    mean: np.ndarray
    cov: np.ndarray

    @property
    def size(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class BasisSet:
    """
    A finite basis [phi_1, ..., phi_E] with its kernel hyperparameters.

    For SUBSET_OF_REGRESSORS the basis functions are kernel evaluations at the
    inducing inputs (E x d). For PARAMETRIC_COSINE the single basis function is
    -T_s cos(sigma * p) on a scalar input.
    """
    kind: BasisKind
    kernel: KernelHyper
    inducing_inputs: np.ndarray | None = None
    cosine_freq: float = 3.0
    sample_time: float = 0.2
    prior: PriorKind = field(default=PriorKind.NYSTROM)

    def __post_init__(self) -> None:
        if self.kind == BasisKind.SUBSET_OF_REGRESSORS:
            if self.inducing_inputs is None:
                raise ValueError("Subset-of-regressors basis needs inducing inputs")
            Z = np.asarray(self.inducing_inputs, dtype=float)
            if Z.ndim == 1:
                Z = Z[:, None]
            if Z.shape[0] < 1 or not np.all(np.isfinite(Z)):
                raise ValueError("Inducing inputs must be a nonempty finite E x d matrix")
            if Z.shape[1] != self.kernel.log_lengthscale.size:
                raise DimensionMismatch(
                    f"Inducing inputs have {Z.shape[1]} columns but kernel has "
                    f"{self.kernel.log_lengthscale.size} lengthscales"
                )
            object.__setattr__(self, "inducing_inputs", Z)
        else:
            if self.sample_time <= 0:
                raise ValueError("Cosine basis sample time must be positive")
            object.__setattr__(self, "inducing_inputs", None)
            object.__setattr__(self, "prior", PriorKind.DIAGONAL)

    @property
    def size(self) -> int:
        """Number of basis functions E."""
        if self.kind == BasisKind.SUBSET_OF_REGRESSORS:
            return self.inducing_inputs.shape[0]
        return 1

    @property
    def input_dim(self) -> int:
        """Input dimension d."""
        if self.kind == BasisKind.SUBSET_OF_REGRESSORS:
            return self.inducing_inputs.shape[1]
        return 1

    @property
    def noise_var(self) -> float:
        return self.kernel.noise_var

    def to_dict(self) -> dict:
        """JSON-ready representation."""
        return {
            "kind": self.kind.value,
            "input_dim": self.input_dim,
            "Z": [] if self.inducing_inputs is None else self.inducing_inputs.ravel().tolist(),
            "T_s": self.sample_time,
            "sigma": self.cosine_freq,
            "log_lengthscale": self.kernel.log_lengthscale.tolist(),
            "log_signal_var": self.kernel.log_signal_var,
            "log_noise_var": self.kernel.log_noise_var,
            "prior": self.prior.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BasisSet":
        """Inverse of to_dict."""
        kind = BasisKind(data["kind"])
        kernel = KernelHyper(data["log_lengthscale"], data["log_signal_var"], data["log_noise_var"])
        Z = None
        if kind == BasisKind.SUBSET_OF_REGRESSORS:
            Z = np.asarray(data["Z"], dtype=float).reshape(-1, int(data["input_dim"]))
        return cls(
            kind=kind,
            kernel=kernel,
            inducing_inputs=Z,
            cosine_freq=float(data.get("sigma", 3.0)),
            sample_time=float(data.get("T_s", 0.2)),
            prior=PriorKind(data.get("prior", PriorKind.NYSTROM.value)),
        )

    def save(self, path: Path) -> None:
        """Write the basis as JSON."""
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: Path) -> "BasisSet":
        """Read a basis written by save()."""
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def sor_basis(
    inducing_inputs,
    lengthscale,
    signal_var: float,
    noise_var: float,
    prior: PriorKind = PriorKind.NYSTROM,
) -> BasisSet:
    """Subset-of-regressors basis from natural-space hyperparameters."""
    Z = np.asarray(inducing_inputs, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    lengthscale = np.broadcast_to(np.asarray(lengthscale, dtype=float), (Z.shape[1],))
    return BasisSet(
        kind=BasisKind.SUBSET_OF_REGRESSORS,
        kernel=KernelHyper.from_values(lengthscale, signal_var, noise_var),
        inducing_inputs=Z,
        prior=prior,
    )


def cosine_basis(
    sigma: float,
    sample_time: float,
    lengthscale: float,
    signal_var: float,
    noise_var: float,
) -> BasisSet:
    """Parametric cosine basis -T_s cos(sigma p) with a kernel for the GP prior."""
    return BasisSet(
        kind=BasisKind.PARAMETRIC_COSINE,
        kernel=KernelHyper.from_values([lengthscale], signal_var, noise_var),
        cosine_freq=sigma,
        sample_time=sample_time,
    )


def initial_inducing_inputs(X: np.ndarray, count: int) -> np.ndarray:
    """Place inducing inputs at uniform quantiles of the pooled inputs, per dimension."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("Cannot place inducing inputs without data")
    levels = (np.arange(count) + 0.5) / count
    return np.quantile(X, levels, axis=0).reshape(count, X.shape[1])


def se_gram(A: np.ndarray, B: np.ndarray, h: KernelHyper) -> np.ndarray:
    """Squared-exponential kernel matrix between the rows of A and B."""
    A = np.atleast_2d(np.asarray(A, dtype=float)) / h.lengthscale
    B = np.atleast_2d(np.asarray(B, dtype=float)) / h.lengthscale
    sq = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * A @ B.T
    )
    return h.signal_var * np.exp(-0.5 * np.maximum(sq, 0.0))


def se_kernel(x, x2, h: KernelHyper) -> float:
    """sigma_f^2 exp(-sum_j (x_j - x2_j)^2 / (2 l_j^2))."""
    diff = (np.atleast_1d(np.asarray(x, dtype=float)) - np.atleast_1d(np.asarray(x2, dtype=float)))
    diff = diff / h.lengthscale
    return h.signal_var * math.exp(-0.5 * float(diff @ diff))


def feature_matrix(basis: BasisSet, X) -> np.ndarray:
    """
    Evaluate all basis functions at the rows of X.

    Returns:
        Array of shape (N, E)
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, basis.input_dim) if basis.input_dim == 1 else X[None, :]
    if X.shape[1] != basis.input_dim:
        raise DimensionMismatch(
            f"Inputs have dimension {X.shape[1]} but basis expects {basis.input_dim}"
        )
    if X.shape[0] == 0:
        return np.zeros((0, basis.size))

    if basis.kind == BasisKind.SUBSET_OF_REGRESSORS:
        # Match the kernel argument order k(z_i, x)
        return se_gram(basis.inducing_inputs, X, basis.kernel).T

    return -basis.sample_time * np.cos(basis.cosine_freq * X)


def features(basis: BasisSet, x) -> np.ndarray:
    """Evaluate the basis at a single input; returns an E-vector."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1 or x.size != basis.input_dim:
        raise DimensionMismatch(f"Input has shape {x.shape} but basis expects {basis.input_dim}")
    return feature_matrix(basis, x[None, :])[0]


def nystrom_prior(basis: BasisSet) -> WeightPrior:
    """
    Weight prior N(0, (K_ZZ + eps I)^-1) that makes Phi Sigma_0 Phi^T the
    Nystrom approximation of the kernel Gram matrix.
    """
    if basis.kind != BasisKind.SUBSET_OF_REGRESSORS:
        raise ValueError("The Nystrom prior needs a subset-of-regressors basis")
    Z = basis.inducing_inputs
    E = basis.size
    K = se_gram(Z, Z, basis.kernel)
    eps = NYSTROM_JITTER * np.trace(K) / E
    L = cholesky_psd(K + eps * np.eye(E))
    L_inv = solve_triangular(L, np.eye(E), lower=True)
    cov = L_inv.T @ L_inv
    return WeightPrior(mean=np.zeros(E), cov=0.5 * (cov + cov.T))


def diagonal_prior(basis: BasisSet) -> WeightPrior:
    """Weight prior N(0, sigma_f^2 I)."""
    return WeightPrior(mean=np.zeros(basis.size), cov=basis.kernel.signal_var * np.eye(basis.size))


def weight_prior(basis: BasisSet) -> WeightPrior:
    """The prior selected by the basis configuration."""
    if basis.kind == BasisKind.SUBSET_OF_REGRESSORS and basis.prior == PriorKind.NYSTROM:
        return nystrom_prior(basis)
    return diagonal_prior(basis)


# --- hyperparameter vector ----------------------------------------------------------------


def theta_names(basis: BasisSet) -> list[str]:
    """Names of the entries of the packed hyperparameter vector."""
    names = [f"log_lengthscale[{j}]" for j in range(basis.kernel.log_lengthscale.size)]
    names += ["log_signal_var", "log_noise_var"]
    if basis.kind == BasisKind.SUBSET_OF_REGRESSORS:
        names += [
            f"Z[{i},{j}]" for i in range(basis.size) for j in range(basis.input_dim)
        ]
    else:
        names.append("sigma")
    return names


def pack_theta(basis: BasisSet) -> np.ndarray:
    """Hyperparameters as one vector: log l, log sigma_f^2, log sigma_w^2, then vec(Z) or sigma."""
    parts = [
        basis.kernel.log_lengthscale,
        [basis.kernel.log_signal_var, basis.kernel.log_noise_var],
    ]
    if basis.kind == BasisKind.SUBSET_OF_REGRESSORS:
        parts.append(basis.inducing_inputs.ravel())
    else:
        parts.append([basis.cosine_freq])
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def unpack_theta(basis: BasisSet, theta: np.ndarray) -> BasisSet:
    """A copy of basis with hyperparameters taken from theta."""
    theta = np.asarray(theta, dtype=float)
    if theta.size != len(theta_names(basis)):
        raise DimensionMismatch(
            f"theta has {theta.size} entries, basis needs {len(theta_names(basis))}"
        )
    d = basis.kernel.log_lengthscale.size
    kernel = KernelHyper(theta[:d], theta[d], theta[d + 1])
    rest = theta[d + 2:]
    if basis.kind == BasisKind.SUBSET_OF_REGRESSORS:
        Z = rest.reshape(basis.size, basis.input_dim)
        return replace(basis, kernel=kernel, inducing_inputs=Z)
    return replace(basis, kernel=kernel, cosine_freq=float(rest[0]))


def theta_bounds(basis: BasisSet) -> tuple[np.ndarray, np.ndarray]:
    """Box bounds on the packed vector: log-space box for kernel terms, free otherwise."""
    n = len(theta_names(basis))
    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    k = basis.kernel.log_lengthscale.size + 2
    lower[:k] = math.log(HYPER_BOUNDS[0])
    upper[:k] = math.log(HYPER_BOUNDS[1])
    return lower, upper


_Z_PARAM = re.compile(r"^Z\[(\d+)(?:,(\d+))?\]$")


def with_param(basis: BasisSet, name: str, value: float) -> BasisSet:
    """
    Set one named hyperparameter.

    Accepted names: sigma, lengthscale, signal_var, noise_var, their log_ forms,
    and Z[i] / Z[i,j] for inducing inputs.
    """
    kernel = basis.kernel
    if name == "sigma":
        if basis.kind != BasisKind.PARAMETRIC_COSINE:
            raise ValueError("sigma is only defined for the cosine basis")
        return replace(basis, cosine_freq=float(value))
    if name in ("lengthscale", "log_lengthscale"):
        log_value = math.log(value) if name == "lengthscale" else float(value)
        return replace(basis, kernel=replace(
            kernel, log_lengthscale=np.full_like(kernel.log_lengthscale, log_value)
        ))
    if name in ("signal_var", "log_signal_var"):
        log_value = math.log(value) if name == "signal_var" else float(value)
        return replace(basis, kernel=replace(kernel, log_signal_var=log_value))
    if name in ("noise_var", "log_noise_var"):
        log_value = math.log(value) if name == "noise_var" else float(value)
        return replace(basis, kernel=replace(kernel, log_noise_var=log_value))

    match = _Z_PARAM.match(name)
    if match and basis.kind == BasisKind.SUBSET_OF_REGRESSORS:
        i, j = int(match.group(1)), int(match.group(2) or 0)
        if i >= basis.size or j >= basis.input_dim:
            raise ValueError(f"{name} is out of range for a basis of size {basis.size}")
        Z = basis.inducing_inputs.copy()
        Z[i, j] = value
        return replace(basis, inducing_inputs=Z)

    raise ValueError(f"Unknown basis parameter: {name}")
