"""
Finite-horizon optimal control by single shooting, residual models and the
mountain-car controller.

Problems are written in least-squares form: each stage contributes
||r_k(x_k, u_k, u_{k-1})||^2 plus an optional scalar term, the terminal state
||r_N(x_N)||^2, and each soft state constraint g(x) <= 0 adds
weight * max(0, g(x_k))^2 for k = 1..N. All callables work on batches so a
whole finite-difference stencil is simulated in one pass.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve

from .blr import LinearPosterior
from .envs import MountainCarParams, mountain_car_nominal, mountain_car_step
from .errors import DimensionMismatch, NotPSD, SolveFailed
from .features import BasisSet, feature_matrix
from .gauss import cholesky_psd

logger = logging.getLogger(__name__)

# (x (B, n), u (B, m), k) -> x_next (B, n)
Dynamics = Callable[[np.ndarray, np.ndarray, int], np.ndarray]
# (k, x (B, n), u (B, m), u_prev (B, m)) -> residuals (B, r)
StageResidual = Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
# (k, x (B, n), u (B, m), x_next (B, n)) -> (B,)
StageScalar = Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
# x (B, n) -> residuals (B, r)
TerminalResidual = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SoftPenalty:
    """Soft state constraint g(x) <= 0 penalized as weight * max(0, g(x))^2."""
    constraint: Callable[[np.ndarray], np.ndarray]
    weight: float


@dataclass(frozen=True)
class OCP:
    """A finite-horizon optimal control problem over an input sequence."""
    horizon: int
    state_dim: int
    input_dim: int
    dynamics: Dynamics
    stage_residual: StageResidual
    input_lower: np.ndarray
    input_upper: np.ndarray
    terminal_residual: TerminalResidual | None = None
    stage_scalar: StageScalar | None = None
    soft_state_penalties: tuple[SoftPenalty, ...] = ()
    previous_input: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {self.horizon}")
        if any(p.weight < 0 for p in self.soft_state_penalties):
            raise ValueError("Soft penalty weights must be nonnegative")
        lower = np.broadcast_to(np.asarray(self.input_lower, dtype=float), (self.input_dim,))
        upper = np.broadcast_to(np.asarray(self.input_upper, dtype=float), (self.input_dim,))
        if np.any(lower > upper):
            raise ValueError("Input lower bounds exceed upper bounds")
        object.__setattr__(self, "input_lower", lower.copy())
        object.__setattr__(self, "input_upper", upper.copy())
        prev = self.previous_input
        prev = np.zeros(self.input_dim) if prev is None else np.asarray(prev, dtype=float)
        object.__setattr__(self, "previous_input", prev)

    @property
    def num_vars(self) -> int:
        return self.horizon * self.input_dim

    def rollout(self, x0, U: np.ndarray) -> np.ndarray:
        """States (B, N+1, n) for input sequences U of shape (B, N, m)."""
        x = np.broadcast_to(np.asarray(x0, dtype=float), (U.shape[0], self.state_dim)).copy()
        states = [x]
        for k in range(self.horizon):
            x = self.dynamics(x, U[:, k, :], k)
            states.append(x)
        return np.stack(states, axis=1)

    def evaluate(self, x0, U: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Roll out a batch of input sequences.

        Args:
            x0: Initial state (n,)
            U: Input sequences (B, N, m)

        Returns:
            (states (B, N+1, n), stacked residuals (B, R), scalar terms (B,))
        """
        B = U.shape[0]
        states = self.rollout(x0, U)
        residuals = []
        scalar = np.zeros(B)
        u_prev = np.broadcast_to(self.previous_input, (B, self.input_dim))
        for k in range(self.horizon):
            x_k, u_k = states[:, k, :], U[:, k, :]
            residuals.append(self.stage_residual(k, x_k, u_k, u_prev))
            if self.stage_scalar is not None:
                scalar = scalar + self.stage_scalar(k, x_k, u_k, states[:, k + 1, :])
            u_prev = u_k
        if self.terminal_residual is not None:
            residuals.append(self.terminal_residual(states[:, -1, :]))
        for penalty in self.soft_state_penalties:
            g = penalty.constraint(states[:, 1:, :].reshape(-1, self.state_dim)).reshape(B, -1)
            residuals.append(np.sqrt(penalty.weight) * np.maximum(g, 0.0))
        return states, np.concatenate([r.reshape(B, -1) for r in residuals], axis=1), scalar

    def costs(self, x0, U: np.ndarray) -> np.ndarray:
        """Total cost of each sequence in a batch (B, N, m)."""
        _, r, c = self.evaluate(x0, U)
        return np.sum(r * r, axis=1) + c

    def cost(self, x0, U) -> float:
        U = np.asarray(U, dtype=float).reshape(1, self.horizon, self.input_dim)
        return float(self.costs(x0, U)[0])


@dataclass(frozen=True)
class SolverOptions:
    """Budget and tolerances of the shooting solver."""
    max_iters: int = 30
    fd_step: float = 1e-6
    damping: float = 1e-8
    max_halvings: int = 20
    tolerance: float = 1e-10
    central: bool = False
    # Step sizes tried per batched rollout in the line search.
    line_search_batch: int = 4
    # Iterations per start before multi-start keeps only the cheapest.
    screen_iters: int = 0


@dataclass(frozen=True)
class OcpSolution:
    """Best input sequence found with its predicted states and cost."""
    inputs: np.ndarray
    states: np.ndarray
    cost: float
    iterations: int


def _gauss_newton_model(
    ocp: OCP, x0, U: np.ndarray, fd_step: float, central: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """
    Gradient and Gauss-Newton Hessian of the cost from one finite-difference
    stencil: n + 1 rollouts forward, 2n + 1 central.
    """
    n = U.size
    h = fd_step * np.maximum(np.abs(U), 1.0)
    idx = np.arange(n)
    batch = np.repeat(U[None, :], (2 * n + 1) if central else (n + 1), axis=0)
    batch[1 + idx, idx] += h
    if central:
        batch[1 + n + idx, idx] -= h
    _, r, c = ocp.evaluate(x0, batch.reshape(-1, ocp.horizon, ocp.input_dim))

    r0 = r[0]
    if central:
        J = ((r[1:n + 1] - r[n + 1:]) / (2.0 * h[:, None])).T
        grad_scalar = (c[1:n + 1] - c[n + 1:]) / (2.0 * h)
    else:
        J = ((r[1:] - r0) / h[:, None]).T
        grad_scalar = (c[1:] - c[0]) / h
    return 2.0 * J.T @ r0 + grad_scalar, 2.0 * J.T @ J


def _line_search(
    ocp: OCP,
    x0,
    U: np.ndarray,
    J: float,
    direction: np.ndarray,
    steps: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    options: SolverOptions,
) -> tuple[np.ndarray, float] | None:
    """Longest step in steps (projected onto the box) that lowers the cost, or None."""
    chunk = max(int(options.line_search_batch), 1)
    for start in range(0, steps.size, chunk):
        part = steps[start:start + chunk]
        candidates = np.clip(U[None, :] + part[:, None] * direction[None, :], lower, upper)
        costs = ocp.costs(x0, candidates.reshape(-1, ocp.horizon, ocp.input_dim))
        better = np.flatnonzero(np.isfinite(costs) & (costs < J))
        if better.size:
            return candidates[better[0]], float(costs[better[0]])
    return None


def solve_ocp(
    ocp: OCP,
    x0,
    warm: np.ndarray | None = None,
    options: SolverOptions = SolverOptions(),
) -> OcpSolution:
    """
    Projected Gauss-Newton single shooting with a backtracking line search.

    Each iteration linearizes the residuals by finite differences, solves the
    damped Gauss-Newton system on the inputs not held at an active bound, and
    takes the longest step of 1, 1/2, 1/4, ... (projected onto the input box)
    that lowers the cost. The returned cost never exceeds the cost of the
    (projected) warm start.

    Raises:
        SolveFailed: If the cost is non-finite at x0 for both the warm start
            and the zero input sequence
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (ocp.state_dim,):
        raise DimensionMismatch(f"x0 has shape {x0.shape}, expected ({ocp.state_dim},)")
    lower = np.tile(ocp.input_lower, ocp.horizon)
    upper = np.tile(ocp.input_upper, ocp.horizon)

    zero = np.clip(np.zeros(ocp.num_vars), lower, upper)
    if warm is None:
        U = zero
    else:
        U = np.asarray(warm, dtype=float).ravel()
        if U.size != ocp.num_vars:
            raise DimensionMismatch(f"Warm start has {U.size} entries, expected {ocp.num_vars}")
        U = np.clip(U, lower, upper)
    J = ocp.cost(x0, U)
    if not np.isfinite(J):
        U, J = zero, ocp.cost(x0, zero)
        if not np.isfinite(J):
            raise SolveFailed("Cost is not finite at the initial state with zero inputs")

    steps = 0.5 ** np.arange(options.max_halvings + 1)
    iterations = 0
    for iterations in range(1, options.max_iters + 1):
        grad, H = _gauss_newton_model(ocp, x0, U, options.fd_step, options.central)
        blocked = ((U <= lower) & (grad > 0)) | ((U >= upper) & (grad < 0))
        free = ~blocked
        if not np.any(free) or not np.all(np.isfinite(grad)):
            break

        Hf = H[np.ix_(free, free)]
        scale = max(float(np.trace(Hf)) / Hf.shape[0], 1e-12)
        Hf = Hf + options.damping * scale * np.eye(Hf.shape[0])
        direction = np.zeros_like(U)
        try:
            direction[free] = -cho_solve((cholesky_psd(Hf), True), grad[free])
        except NotPSD:
            direction[free] = -grad[free]
        if not np.all(np.isfinite(direction)):
            direction = np.where(free, -grad, 0.0)

        accepted = _line_search(ocp, x0, U, J, direction, steps, lower, upper, options)
        if accepted is None:
            break
        decrease = J - accepted[1]
        U, J = accepted
        if decrease <= options.tolerance * (1.0 + abs(J)):
            break

    states = ocp.rollout(x0, U.reshape(1, ocp.horizon, ocp.input_dim))[0]
    return OcpSolution(U.reshape(ocp.horizon, ocp.input_dim), states, J, iterations)


def solve_ocp_multi_start(
    ocp: OCP,
    x0,
    starts: Sequence[np.ndarray | None],
    options: SolverOptions = SolverOptions(),
) -> OcpSolution:
    """
    Solve from each start and keep the cheapest result (first wins ties).

    With options.screen_iters > 0 every start first gets that many iterations;
    only the cheapest screened sequence is then refined with the remaining budget.
    """
    screen = options.screen_iters
    first = replace(options, max_iters=screen) if 0 < screen < options.max_iters else options
    best = None
    for start in starts:
        solution = solve_ocp(ocp, x0, start, first)
        if best is None or solution.cost < best.cost:
            best = solution
    if first is options:
        return best
    rest = replace(options, max_iters=options.max_iters - screen)
    refined = solve_ocp(ocp, x0, best.inputs, rest)
    return replace(refined, iterations=best.iterations + refined.iterations)


def shift_inputs(inputs: np.ndarray) -> np.ndarray:
    """Receding-horizon warm start: drop the applied input and repeat the last one."""
    return np.concatenate([inputs[1:], inputs[-1:]], axis=0)


# --- residual models ----------------------------------------------------------------------


@dataclass(frozen=True)
class ResidualModel:
    """
    Learned residual f = Phi alpha, one weight posterior per output dimension.

    All outputs share one basis; output k is evaluated at its own feature inputs.
    """
    basis: BasisSet
    posteriors: tuple[LinearPosterior, ...]
    output_names: tuple[str, ...] = ("y",)

    def __post_init__(self) -> None:
        if len(self.posteriors) != len(self.output_names):
            raise DimensionMismatch(
                f"{len(self.posteriors)} posteriors for {len(self.output_names)} outputs"
            )
        for post in self.posteriors:
            if post.size != self.basis.size:
                raise DimensionMismatch(
                    f"Posterior has {post.size} weights, basis has {self.basis.size} functions"
                )

    @property
    def num_outputs(self) -> int:
        return len(self.posteriors)

    def mean(self, k: int, Z) -> np.ndarray:
        """Residual mean of output k at the rows of Z."""
        return feature_matrix(self.basis, Z) @ self.posteriors[k].mu_alpha

    def with_posterior(self, k: int, post: LinearPosterior) -> "ResidualModel":
        posteriors = list(self.posteriors)
        posteriors[k] = post
        return replace(self, posteriors=tuple(posteriors))

    def mean_snapshot(self) -> list[list[float]]:
        return [p.mu_alpha.tolist() for p in self.posteriors]


def adaptive_dynamics(
    nominal: Dynamics,
    residual: ResidualModel,
    feature_inputs: Callable[[np.ndarray, np.ndarray], list[np.ndarray]],
    output_map: Callable[[np.ndarray, list[np.ndarray]], np.ndarray],
) -> Dynamics:
    """
    Nominal dynamics plus the mean residual.

    Args:
        nominal: Known part of the model
        residual: Learned residual; only the weight means are used
        feature_inputs: (x, u) -> per-output basis inputs (B, d)
        output_map: (x, per-output means (B,)) -> state increment (B, n)
    """
    def dynamics(x, u, k):
        Z = feature_inputs(x, u)
        if len(Z) != residual.num_outputs:
            raise DimensionMismatch(
                f"{len(Z)} feature inputs for a residual with {residual.num_outputs} outputs"
            )
        means = [residual.mean(i, z) for i, z in enumerate(Z)]
        return nominal(x, u, k) + output_map(x, means)
    return dynamics


# --- mountain car -------------------------------------------------------------------------


class GoalCost(Enum):
    """Penalty on the position in the terminal half of the horizon."""
    QUADRATIC = "quadratic"  # (p - goal)^2
    HINGE = "hinge"  # max(0, goal - p)^2, free past the goal


@dataclass(frozen=True)
class MountainCarController:
    """
    Cost and solver settings of the mountain-car MPC.

    Stage cost input_weight * u^2 plus goal_weight times the goal penalty in the
    terminal half of the horizon and at the terminal state.
    """
    horizon: int = 25
    input_weight: float = 0.1
    goal_weight: float = 1.0
    goal_cost: GoalCost = GoalCost.QUADRATIC
    backup_lengths: tuple[int, ...] = (0, 3, 6, 9, 12)
    solver: SolverOptions = field(default_factory=SolverOptions)


def mountain_car_ocp(
    params: MountainCarParams, dynamics: Dynamics, cfg: MountainCarController
) -> OCP:
    """The mountain-car problem of driving to p >= params.goal."""
    N = cfg.horizon
    r_u = np.sqrt(cfg.input_weight)
    r_p = np.sqrt(cfg.goal_weight)

    def goal_error(p):
        if cfg.goal_cost == GoalCost.HINGE:
            return np.maximum(params.goal - p, 0.0)
        return p - params.goal

    def stage(k, x, u, u_prev):
        error = goal_error(x[:, 0]) if k >= N // 2 else np.zeros(x.shape[0])
        return np.stack([r_u * u[:, 0], r_p * error], axis=1)

    def terminal(x):
        return r_p * goal_error(x[:, :1])

    return OCP(
        horizon=N,
        state_dim=2,
        input_dim=1,
        dynamics=dynamics,
        stage_residual=stage,
        terminal_residual=terminal,
        input_lower=np.array([-params.input_bound]),
        input_upper=np.array([params.input_bound]),
    )


def backup_starts(cfg: MountainCarController, bound: float) -> list[np.ndarray]:
    """Bang-bang warm starts: full reverse for k steps, then full forward."""
    starts = []
    for k in cfg.backup_lengths:
        k = min(k, cfg.horizon)
        U = np.full((cfg.horizon, 1), bound)
        U[:k] = -bound
        starts.append(U)
    return starts


def mountain_car_model(params: MountainCarParams, residual: ResidualModel | None) -> Dynamics:
    """Controller model: the known part of the dynamics plus the learned slope residual."""
    if residual is None:
        return lambda x, u, k: mountain_car_step(x, u[:, 0], params)

    def nominal(x, u, k):
        return mountain_car_nominal(x, u[:, 0], params)

    def inputs(x, u):
        return [x[:, :1]]

    def to_velocity(x, means):
        inc = np.zeros_like(x)
        inc[:, 1] = means[0]
        return inc

    return adaptive_dynamics(nominal, residual, inputs, to_velocity)


class MountainCarMpc:
    """Receding-horizon mountain-car controller; ground_truth=True plans with the true plant."""

    def __init__(
        self, params: MountainCarParams, cfg: MountainCarController, ground_truth: bool = False
    ):
        self.params = params
        self.cfg = cfg
        self.ground_truth = ground_truth

    def reset(self, x0: np.ndarray) -> None:
        pass

    def solve(self, x, residual: ResidualModel | None, warm, u_prev) -> OcpSolution:
        model = mountain_car_model(self.params, None if self.ground_truth else residual)
        ocp = mountain_car_ocp(self.params, model, self.cfg)
        starts = [warm] + backup_starts(self.cfg, self.params.input_bound)
        return solve_ocp_multi_start(ocp, x, starts, self.cfg.solver)

    def info(self) -> dict[str, float]:
        return {}
