"""Multi-task datasets, the negative-ELBO meta-training loss, and hyperparameter optimization."""

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from .blr import LinearPosterior, blr_fit
from .errors import DimensionMismatch, OptimFailed
from .features import (
    BasisSet,
    WeightPrior,
    feature_matrix,
    pack_theta,
    se_gram,
    theta_bounds,
    unpack_theta,
    weight_prior,
)
from .gauss import LOG_2PI, MvNormal, expected_gaussian_loglik, kl_gaussian, sample_mvn

logger = logging.getLogger(__name__)

# Largest task used in one KL term; bigger tasks are subsampled.
MAX_TASK_POINTS = 200


@dataclass(frozen=True)
class TaskDataset:
    """Input/output pairs of one task."""
    task_id: str
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.shape[0] != y.size:
            raise DimensionMismatch(
                f"Task {self.task_id}: {X.shape[0]} inputs but {y.size} outputs"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError(f"Task {self.task_id} contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def size(self) -> int:
        return self.y.size

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def sorted_rows(self) -> "TaskDataset":
        """The same task with rows in lexicographic (X, y) order."""
        keys = (self.y,) + tuple(self.X[:, j] for j in reversed(range(self.input_dim)))
        order = np.lexsort(keys)
        return TaskDataset(self.task_id, self.X[order], self.y[order])


@dataclass(frozen=True)
class MetaDataset:
    """Collection of tasks sharing one input dimension."""
    tasks: tuple[TaskDataset, ...]
    input_dim: int

    def __post_init__(self) -> None:
        tasks = tuple(sorted(self.tasks, key=lambda t: t.task_id))
        for task in tasks:
            if task.size and task.input_dim != self.input_dim:
                raise DimensionMismatch(
                    f"Task {task.task_id} has input dimension {task.input_dim}, "
                    f"dataset has {self.input_dim}"
                )
        object.__setattr__(self, "tasks", tasks)

    @property
    def total_points(self) -> int:
        return sum(t.size for t in self.tasks)

    def pooled_inputs(self) -> np.ndarray:
        """All inputs stacked."""
        parts = [t.X for t in self.tasks if t.size]
        return np.vstack(parts) if parts else np.zeros((0, self.input_dim))


# --- file I/O -----------------------------------------------------------------------------


def write_task_csv(task: TaskDataset, path: Path) -> None:
    """Write a task as CSV with header x1,...,xd,y."""
    header = [f"x{j + 1}" for j in range(task.input_dim)] + ["y"]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for x, y in zip(task.X, task.y):
            writer.writerow([f"{v:.17g}" for v in x] + [f"{y:.17g}"])


def read_task_csv(path: Path) -> TaskDataset:
    """Read a task CSV; the task id is the file stem."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    d = len(header) - 1
    data = np.asarray(rows, dtype=float).reshape(-1, d + 1)
    return TaskDataset(task_id=path.stem, X=data[:, :d], y=data[:, d])


def load_meta_dataset(directory: Path) -> MetaDataset:
    """Load every *.csv file in a directory as one task."""
    paths = sorted(Path(directory).glob("*.csv"))
    if not paths:
        raise FileNotFoundError(f"No task CSV files in {directory}")
    tasks = [read_task_csv(p) for p in paths]
    return MetaDataset(tasks=tuple(tasks), input_dim=tasks[0].input_dim)


def save_meta_dataset(data: MetaDataset, directory: Path) -> list[Path]:
    """Write one CSV per task into directory."""
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for task in data.tasks:
        path = directory / f"{task.task_id}.csv"
        write_task_csv(task, path)
        paths.append(path)
    return paths


def cap_task_size(
    data: MetaDataset, max_points: int, rng: np.random.Generator
) -> tuple[MetaDataset, dict[str, list[int]]]:
    """
    Uniformly subsample tasks larger than max_points.

    Returns:
        (capped dataset, kept row indices for every subsampled task)
    """
    kept: dict[str, list[int]] = {}
    tasks = []
    for task in data.tasks:
        if task.size <= max_points:
            tasks.append(task)
            continue
        idx = np.sort(rng.choice(task.size, size=max_points, replace=False))
        kept[task.task_id] = idx.tolist()
        tasks.append(TaskDataset(task.task_id, task.X[idx], task.y[idx]))
        logger.debug(f"Subsampled task {task.task_id} from {task.size} to {max_points} points")
    return MetaDataset(tuple(tasks), data.input_dim), kept


def split_holdout(
    task: TaskDataset, fraction: float, rng: np.random.Generator
) -> tuple[TaskDataset, TaskDataset]:
    """Random (train, holdout) split with round(fraction * N) holdout points."""
    n_hold = int(round(fraction * task.size))
    perm = rng.permutation(task.size)
    hold, train = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
    return (
        TaskDataset(task.task_id, task.X[train], task.y[train]),
        TaskDataset(f"{task.task_id}-holdout", task.X[hold], task.y[hold]),
    )


# --- loss ---------------------------------------------------------------------------------


def per_task_posterior(
    basis: BasisSet, task: TaskDataset, prior: WeightPrior | None = None
) -> LinearPosterior:
    """Weight posterior for one task under the basis prior and noise variance."""
    if task.size and task.input_dim != basis.input_dim:
        raise DimensionMismatch(
            f"Task {task.task_id} has dimension {task.input_dim}, basis {basis.input_dim}"
        )
    prior = prior or weight_prior(basis)
    Phi = feature_matrix(basis, task.X)
    return blr_fit(Phi, task.y, basis.noise_var, prior)


@dataclass(frozen=True)
class ElboTerms:
    """Per-task contributions to the ELBO."""
    task_id: str
    expected_loglik: float
    kl: float


def elbo_terms(basis: BasisSet, task: TaskDataset, prior: WeightPrior | None = None) -> ElboTerms:
    """Expected log-likelihood and KL regularizer of one task."""
    if task.size == 0:
        return ElboTerms(task.task_id, 0.0, 0.0)

    # Rows in a fixed order, so stored row order cannot change the sums.
    task = task.sorted_rows()
    post = per_task_posterior(basis, task, prior)
    Phi = feature_matrix(basis, task.X)
    mean_q = Phi @ post.mu_alpha
    cov_q = Phi @ post.sigma_alpha @ Phi.T
    cov_q = 0.5 * (cov_q + cov_q.T)

    var_q = np.maximum(np.diag(cov_q), 0.0)
    loglik = expected_gaussian_loglik(task.y, mean_q, var_q, basis.noise_var)
    prior_gram = se_gram(task.X, task.X, basis.kernel)
    kl = kl_gaussian(MvNormal(mean_q, cov_q), MvNormal(np.zeros(task.size), prior_gram))
    return ElboTerms(task.task_id, float(np.sum(loglik)), kl)


def negative_elbo(basis: BasisSet, data: MetaDataset) -> float:
    """
    Meta-training loss: -sum_m [sum_i E_q log p(y_i | f) - KL(q^m || p^m)].

    Tasks are reduced in task_id order and rows within a task in sorted order,
    so the value does not depend on the order either was given in.
    """
    total = 0.0
    for task in data.tasks:
        terms = elbo_terms(basis, task)
        total += terms.expected_loglik - terms.kl
    return -total


def negative_elbo_multi(basis: BasisSet, outputs: list[MetaDataset]) -> float:
    """Loss summed over independent output dimensions sharing one basis."""
    return sum(negative_elbo(basis, data) for data in outputs)


def negative_elbo_sampled(
    basis: BasisSet, data: MetaDataset, samples: int, rng: np.random.Generator
) -> tuple[float, float]:
    """
    Negative ELBO with the expected log-likelihood estimated by sampling q^m.

    Samples weights alpha ~ N(mu, Sigma) and sets f = Phi alpha.

    Returns:
        (estimate, standard error)
    """
    totals = np.zeros(samples)
    kl_total = 0.0
    noise_var = basis.noise_var
    for task in data.tasks:
        if task.size == 0:
            continue
        post = per_task_posterior(basis, task)
        Phi = feature_matrix(basis, task.X)
        alpha = sample_mvn(MvNormal(post.mu_alpha, post.sigma_alpha), samples, rng)
        f = alpha @ Phi.T
        loglik = -0.5 * (LOG_2PI + math.log(noise_var)) - (task.y - f) ** 2 / (2.0 * noise_var)
        totals += loglik.sum(axis=1)
        kl_total += elbo_terms(basis, task).kl

    estimate = -(totals.mean() - kl_total)
    return float(estimate), float(totals.std(ddof=1) / math.sqrt(samples))


def elbo_gradient(
    basis: BasisSet,
    data: MetaDataset,
    grad_step: float = 1e-4,
    loss: Callable[[BasisSet, MetaDataset], float] = negative_elbo,
) -> np.ndarray:
    """
    Central finite-difference gradient of the loss over the packed hyperparameters.

    The step for entry j is grad_step * max(|theta_j|, 1).
    """
    theta = pack_theta(basis)
    grad = np.zeros_like(theta)
    for j in range(theta.size):
        h = grad_step * max(abs(theta[j]), 1.0)
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        f_up = loss(unpack_theta(basis, up), data)
        f_down = loss(unpack_theta(basis, down), data)
        grad[j] = (f_up - f_down) / (2 * h)
    return grad


# --- optimization -------------------------------------------------------------------------


class Optimizer(Enum):
    """First-order step rules for meta-training."""
    GRADIENT_DESCENT = "gd"          # steepest descent with backtracking
    ADAPTIVE = "adaptive"            # RMS-normalized per-parameter steps with backtracking


@dataclass(frozen=True)
class HyperInit:
    """Initial kernel hyperparameters and basis size."""
    lengthscale: float = 0.5
    signal_var: float = 0.05
    noise_var: float = 1e-4
    num_inducing: int = 4


@dataclass(frozen=True)
class MetaTrainConfig:
    """Settings of the hyperparameter optimization."""
    max_iters: int = 100
    grad_step: float = 1e-4
    optimizer: Optimizer = Optimizer.GRADIENT_DESCENT
    init: HyperInit = field(default_factory=HyperInit)
    seed: int = 0
    initial_step: float = 0.5
    max_halvings: int = 20
    tolerance: float = 1e-6
    patience: int = 10
    max_task_points: int = MAX_TASK_POINTS

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0.0 < self.grad_step < 0.1:
            raise ValueError("grad_step must lie in (0, 0.1)")


@dataclass(frozen=True)
class TraceEntry:
    """One accepted meta-training step."""
    iteration: int
    loss: float
    step_size: float


def meta_train(
    data: MetaDataset | list[MetaDataset],
    cfg: MetaTrainConfig,
    basis0: BasisSet,
    progress_callback: Callable[[int, float], None] | None = None,
) -> tuple[BasisSet, list[TraceEntry]]:
    """
    Minimize the negative ELBO over the basis hyperparameters.

    Takes first-order steps along the max-norm-normalized descent direction,
    halving the step until the loss decreases. Stops after cfg.max_iters or
    when the loss decreased by less than cfg.tolerance (relative) over the
    last cfg.patience accepted steps.

    Args:
        data: One dataset, or a list of per-output datasets sharing the basis
        cfg: Optimizer settings
        basis0: Initial basis
        progress_callback: Optional callback(iteration, loss)

    Returns:
        (best basis, trace of accepted steps)

    Raises:
        OptimFailed: If no descent step exists at the first iteration
    """
    outputs = data if isinstance(data, list) else [data]
    if sum(d.total_points for d in outputs) == 0:
        return basis0, [TraceEntry(0, 0.0, 0.0)]

    def loss(basis: BasisSet, _data=None) -> float:
        return negative_elbo_multi(basis, outputs)

    lower, upper = theta_bounds(basis0)
    theta = np.clip(pack_theta(basis0), lower, upper)
    basis = unpack_theta(basis0, theta)
    current = loss(basis)
    if not np.isfinite(current):
        raise OptimFailed(f"Initial loss is not finite: {current}")

    trace = [TraceEntry(0, current, 0.0)]
    step = cfg.initial_step
    rms = np.zeros_like(theta)

    for iteration in range(1, cfg.max_iters + 1):
        grad = elbo_gradient(basis, outputs[0], cfg.grad_step, loss=loss)
        if not np.all(np.isfinite(grad)) or not np.any(grad):
            logger.info(f"Meta-training stopped at iteration {iteration}: zero or invalid gradient")
            break

        if cfg.optimizer == Optimizer.ADAPTIVE:
            rms = 0.9 * rms + 0.1 * grad ** 2 if iteration > 1 else grad ** 2
            direction = -grad / (np.sqrt(rms) + 1e-12)
        else:
            direction = -grad
        direction = direction / np.max(np.abs(direction))

        accepted = False
        t = step
        for _ in range(cfg.max_halvings + 1):
            candidate = np.clip(theta + t * direction, lower, upper)
            trial = unpack_theta(basis, candidate)
            value = loss(trial)
            if np.isfinite(value) and value < current:
                accepted = True
                break
            t *= 0.5

        if not accepted:
            if iteration == 1:
                raise OptimFailed("No descent step found at the first iteration")
            logger.info(f"Meta-training converged at iteration {iteration}: no descent step")
            break

        theta, basis, current = candidate, trial, value
        trace.append(TraceEntry(iteration, current, t))
        step = min(2.0 * t, cfg.initial_step)
        if progress_callback:
            progress_callback(iteration, current)
        logger.debug(f"iter {iteration}: loss {current:.6g}, step {t:.3g}")

        if len(trace) > cfg.patience:
            previous = trace[-1 - cfg.patience].loss
            if (previous - current) / max(abs(current), 1.0) < cfg.tolerance:
                logger.info(f"Meta-training converged at iteration {iteration}")
                break

    logger.info(f"Meta-training finished: loss {trace[0].loss:.6g} -> {trace[-1].loss:.6g}")
    return basis, trace


def write_loss_trace(trace: list[TraceEntry], path: Path) -> None:
    """Write the trace as CSV iter,loss,step_size."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["iter", "loss", "step_size"])
        for entry in trace:
            writer.writerow([entry.iteration, f"{entry.loss:.17g}", f"{entry.step_size:.17g}"])


def task_average_mean(basis: BasisSet, data: MetaDataset) -> np.ndarray:
    """Average of the per-task posterior means over the nonempty tasks."""
    means = [per_task_posterior(basis, t).mu_alpha for t in data.tasks if t.size]
    if not means:
        return np.zeros(basis.size)
    return np.mean(means, axis=0)
