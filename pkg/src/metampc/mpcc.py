"""Model predictive contouring control of the race car on a track."""

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .envs import (
    PSI,
    VX,
    VY,
    CarParams,
    PacejkaParams,
    TireForces,
    car_integrate,
    pacejka_force,
)
from .mpc import OCP, Dynamics, OcpSolution, ResidualModel, SoftPenalty, SolverOptions, solve_ocp
from .track import Track, track_project

logger = logging.getLogger(__name__)

PROGRESS = 6  # index of the progress state in the augmented state


@dataclass(frozen=True)
class MpccConfig:
    """Contouring-control weights and horizon."""
    horizon: int = 20
    contour_weight: float = 20.0
    lag_weight: float = 50.0
    progress_reward: float = 0.5
    rate_weights: tuple[float, float] = (0.05, 0.5)
    bound_weight: float = 500.0
    bound_margin: float = 0.05
    speed_ref: float = 1.2
    speed_weight: float = 1.0
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(max_iters=10))

    def __post_init__(self) -> None:
        weights = [self.contour_weight, self.lag_weight, self.bound_weight, self.speed_weight]
        if min(weights + list(self.rate_weights)) < 0:
            raise ValueError("MPCC weights must be nonnegative")
        if self.progress_reward <= 0:
            raise ValueError("progress_reward must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")


@dataclass(frozen=True)
class GripSchedule:
    """
    Peak-force scaling along the track.

    The factor applies where the arclength fraction is at least split_fraction.
    With persistent=True it applies from the first time the car gets there on.
    """
    factor: float = 1.0
    split_fraction: float = 0.5
    persistent: bool = False

    def at(self, progress, length: float):
        progress = np.asarray(progress, dtype=float)
        if self.persistent:
            reached = progress >= self.split_fraction * length
        else:
            reached = np.mod(progress, length) >= self.split_fraction * length
        return np.where(reached, self.factor, 1.0)


def contour_lag_errors(track: Track, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Contouring (left-positive lateral) and lag errors of positions against the
    reference point at the progress state.
    """
    ref = track.position(xi[:, PROGRESS])
    t = track.tangent(xi[:, PROGRESS])
    d = xi[:, :2] - ref
    e_contour = t[:, 0] * d[:, 1] - t[:, 1] * d[:, 0]
    e_lag = -(t[:, 0] * d[:, 0] + t[:, 1] * d[:, 1])
    return e_contour, e_lag


def _stage_residuals(xi, u, u_prev, cfg: MpccConfig) -> list[np.ndarray]:
    rate = np.sqrt(np.asarray(cfg.rate_weights)) * (u - u_prev)
    speed = np.sqrt(cfg.speed_weight) * (xi[:, VX] - cfg.speed_ref)
    return [rate[:, 0], rate[:, 1], speed]


def _bound_violation(track: Track, cfg: MpccConfig, e_contour: np.ndarray) -> np.ndarray:
    return np.maximum(np.abs(e_contour) - (track.half_width - cfg.bound_margin), 0.0)


def mpcc_stage_cost(
    state,
    u,
    cfg: MpccConfig,
    track: Track,
    u_prev=None,
    progress_delta: float = 0.0,
) -> float:
    """
    q_c e_c^2 + q_l e_l^2 - gamma ds + du^T R du + speed term + bound penalty
    for one augmented state (X, Y, psi, v_x, v_y, omega, progress).
    """
    xi = np.asarray(state, dtype=float)[None, :]
    u = np.asarray(u, dtype=float)[None, :]
    u_prev = np.zeros_like(u) if u_prev is None else np.asarray(u_prev, dtype=float)[None, :]
    e_c, e_l = contour_lag_errors(track, xi)
    terms = _stage_residuals(xi, u, u_prev, cfg)
    cost = cfg.contour_weight * e_c[0] ** 2 + cfg.lag_weight * e_l[0] ** 2
    cost += sum(float(r[0]) ** 2 for r in terms)
    cost += cfg.bound_weight * float(_bound_violation(track, cfg, e_c)[0]) ** 2
    return float(cost - cfg.progress_reward * progress_delta)


def learned_tires(residual: ResidualModel, d_norm: tuple[float, float]) -> TireForces:
    """Chassis forces -D_norm Phi(s) mu from the front (output 0) and rear (output 1) posteriors."""
    def forces(s_f, s_r):
        F_f = residual.mean(0, np.reshape(s_f, (-1, 1))).reshape(np.shape(s_f))
        F_r = residual.mean(1, np.reshape(s_r, (-1, 1))).reshape(np.shape(s_r))
        return -d_norm[0] * F_f, -d_norm[1] * F_r
    return forces


def scheduled_tires(tires: PacejkaParams, grip: np.ndarray) -> TireForces:
    """True tire forces with a per-sample peak-force factor."""
    def forces(s_f, s_r):
        return (
            -pacejka_force(s_f, tires.B_f, tires.C_f, tires.D_f * grip),
            -pacejka_force(s_r, tires.B_r, tires.C_r, tires.D_r * grip),
        )
    return forces


def mpcc_dynamics(
    car: CarParams, track: Track, forces_for: Callable[[np.ndarray], TireForces]
) -> Dynamics:
    """Car model on the augmented state; the progress advances with the velocity along the track."""
    def dynamics(xi, u, k):
        x_next = car_integrate(xi[:, :6], u, car, forces_for(xi))
        theta = xi[:, PROGRESS]
        t = track.tangent(theta)
        psi, v_x, v_y = xi[:, PSI], xi[:, VX], xi[:, VY]
        v_world_x = v_x * np.cos(psi) - v_y * np.sin(psi)
        v_world_y = v_x * np.sin(psi) + v_y * np.cos(psi)
        theta_next = theta + car.sample_time * (v_world_x * t[:, 0] + v_world_y * t[:, 1])
        return np.concatenate([x_next, theta_next[:, None]], axis=1)
    return dynamics


def mpcc_ocp(
    car: CarParams,
    track: Track,
    cfg: MpccConfig,
    dynamics: Dynamics,
    previous_input,
) -> OCP:
    """The contouring problem over the augmented 7-dimensional state."""
    r_c, r_l = np.sqrt(cfg.contour_weight), np.sqrt(cfg.lag_weight)

    def tracking(xi):
        e_c, e_l = contour_lag_errors(track, xi)
        return [r_c * e_c, r_l * e_l]

    def stage(k, xi, u, u_prev):
        return np.stack(tracking(xi) + _stage_residuals(xi, u, u_prev, cfg), axis=1)

    def terminal(xi):
        return np.stack(tracking(xi), axis=1)

    def progress(k, xi, u, xi_next):
        return -cfg.progress_reward * (xi_next[:, PROGRESS] - xi[:, PROGRESS])

    def off_track(xi):
        e_c, _ = contour_lag_errors(track, xi)
        return np.abs(e_c) - (track.half_width - cfg.bound_margin)

    return OCP(
        horizon=cfg.horizon,
        state_dim=7,
        input_dim=2,
        dynamics=dynamics,
        stage_residual=stage,
        terminal_residual=terminal,
        stage_scalar=progress,
        input_lower=car.input_lower,
        input_upper=car.input_upper,
        soft_state_penalties=(SoftPenalty(off_track, cfg.bound_weight),),
        previous_input=previous_input,
    )


class RaceCarMpcc:
    """
    Receding-horizon contouring controller.

    Keeps the unwrapped progress of the car between calls; the progress state
    of each problem starts at the projection of the measured position.
    With true_tires set, the controller uses the exact tire curves (scaled by
    grip) and ignores the residual model.
    """

    def __init__(
        self,
        car: CarParams,
        track: Track,
        cfg: MpccConfig,
        d_norm: tuple[float, float],
        true_tires: PacejkaParams | None = None,
        grip: GripSchedule | None = None,
    ):
        self.car = car
        self.track = track
        self.cfg = cfg
        self.d_norm = d_norm
        self.true_tires = true_tires
        self.grip = grip or GripSchedule()
        self.progress = 0.0
        self.e_lat = 0.0

    def reset(self, x0: np.ndarray) -> None:
        self.progress, self.e_lat = track_project(self.track, x0[:2], 0.0)

    def observe(self, x: np.ndarray) -> None:
        """Update the unwrapped progress from a measured state."""
        s, self.e_lat = track_project(self.track, x[:2], self.progress)
        L = self.track.length
        self.progress += (s - self.progress + 0.5 * L) % L - 0.5 * L

    def forces_for(self, residual: ResidualModel) -> Callable[[np.ndarray], TireForces]:
        if self.true_tires is None:
            learned = learned_tires(residual, self.d_norm)
            return lambda xi: learned
        return lambda xi: scheduled_tires(
            self.true_tires, self.grip.at(xi[:, PROGRESS], self.track.length)
        )

    def solve(self, x, residual: ResidualModel, warm, u_prev) -> OcpSolution:
        self.observe(x)
        dynamics = mpcc_dynamics(self.car, self.track, self.forces_for(residual))
        ocp = mpcc_ocp(self.car, self.track, self.cfg, dynamics, u_prev)
        xi0 = np.append(np.asarray(x, dtype=float), self.progress)
        return solve_ocp(ocp, xi0, warm, self.cfg.solver)

    def info(self) -> dict[str, float]:
        return {"s": self.progress, "e_lat": self.e_lat}
