"""Simulated plants: mountain car and a dynamic bicycle race car with Pacejka tires."""

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .seeding import stream

logger = logging.getLogger(__name__)

# Index of each component in a car state vector.
X_POS, Y_POS, PSI, VX, VY, OMEGA = range(6)
CAR_STATE_NAMES = ("X", "Y", "psi", "v_x", "v_y", "omega")
MOUNTAIN_CAR_STATE_NAMES = ("p", "v")

# Lateral tire forces on the chassis (F_f, F_r) as a function of the slip angles.
TireForces = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


# --- mountain car -------------------------------------------------------------------------


@dataclass(frozen=True)
class MountainCarParams:
    """Mountain-car plant; theta1 scales the slope force, theta2 the actuator."""
    sample_time: float = 0.2
    theta1: float = 0.5
    theta2: float = 0.3
    process_noise_std: float = 0.001
    input_bound: float = 1.0
    goal: float = 0.6
    start: tuple[float, float] = (-0.5, 0.0)

    def __post_init__(self) -> None:
        if self.sample_time <= 0:
            raise ValueError("sample_time must be positive")
        if self.process_noise_std < 0:
            raise ValueError("process_noise_std must be nonnegative")


def mountain_car_step(state, u, params: MountainCarParams, noise=0.0) -> np.ndarray:
    """
    One step of p' = p + T_s v, v' = v - T_s cos(3p) theta1 + T_s u theta2 + noise.

    Works on a single state (2,) or a batch (B, 2).
    """
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim == state.ndim and u.shape[-1:] == (1,):
        u = u[..., 0]
    p, v = state[..., 0], state[..., 1]
    T = params.sample_time
    p_next = p + T * v
    v_next = v - T * np.cos(3.0 * p) * params.theta1 + T * u * params.theta2 + noise
    return np.stack([p_next, v_next], axis=-1)


def mountain_car_residual(p, theta1: float, sample_time: float):
    """Noise-free residual -T_s cos(3p) theta1 of the velocity update."""
    return -sample_time * np.cos(3.0 * np.asarray(p, dtype=float)) * theta1


def mountain_car_nominal(state, u, params: MountainCarParams) -> np.ndarray:
    """The mountain car without its slope term: the part of the model known a priori."""
    return mountain_car_step(state, u, replace(params, theta1=0.0))


# --- tires --------------------------------------------------------------------------------


@dataclass(frozen=True)
class PacejkaParams:
    """Simplified Pacejka coefficients per axle: stiffness B, shape C, peak D."""
    B_f: float = 2.58
    C_f: float = 1.2
    D_f: float = 0.192
    B_r: float = 3.38
    C_r: float = 1.26
    D_r: float = 0.173

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"Pacejka coefficient {name} must be positive, got {value}")

    def with_grip(self, factor: float) -> "PacejkaParams":
        """Scale both peak forces."""
        return replace(self, D_f=self.D_f * factor, D_r=self.D_r * factor)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PacejkaParams":
        return cls(**{k: float(v) for k, v in data.items()})


def pacejka_force(s, B: float, C: float, D: float):
    """D sin(C arctan(B s))."""
    return D * np.sin(C * np.arctan(B * np.asarray(s, dtype=float)))


def pacejka_tires(tires: PacejkaParams) -> TireForces:
    """Chassis forces from the true tire curves; the force opposes the slip."""
    def forces(s_f, s_r):
        return (
            -pacejka_force(s_f, tires.B_f, tires.C_f, tires.D_f),
            -pacejka_force(s_r, tires.B_r, tires.C_r, tires.D_r),
        )
    return forces


def make_task_tires(base: PacejkaParams, task_index: int, M: int, seed: int) -> PacejkaParams:
    """
    Tire set of meta-training task task_index out of M.

    Peak forces are scaled by g in linspace(0.6, 1.2, M); B and C get a
    deterministic +-10% perturbation drawn from the (seed, task_index) stream.
    """
    if not 0 <= task_index < M:
        raise ValueError(f"task_index {task_index} outside [0, {M})")
    grip = float(np.linspace(0.6, 1.2, M)[task_index])
    rng = stream(seed, "tires", task_index)
    b_f, c_f, b_r, c_r = 1.0 + rng.uniform(-0.1, 0.1, size=4)
    return PacejkaParams(
        B_f=base.B_f * b_f,
        C_f=base.C_f * c_f,
        D_f=base.D_f * grip,
        B_r=base.B_r * b_r,
        C_r=base.C_r * c_r,
        D_r=base.D_r * grip,
    )


def save_task_tires(tire_sets: list[PacejkaParams], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([t.to_dict() for t in tire_sets], f, indent=2)


def load_task_tires(path: Path) -> list[PacejkaParams]:
    with open(path, "r", encoding="utf-8") as f:
        return [PacejkaParams.from_dict(d) for d in json.load(f)]


# --- race car -----------------------------------------------------------------------------


@dataclass(frozen=True)
class CarState:
    """Pose and body-frame velocities of the car."""
    X: float = 0.0
    Y: float = 0.0
    psi: float = 0.0
    v_x: float = 1.0
    v_y: float = 0.0
    omega: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.psi, self.v_x, self.v_y, self.omega])

    @classmethod
    def from_array(cls, x) -> "CarState":
        return cls(*(float(v) for v in np.asarray(x, dtype=float)[:6]))


@dataclass(frozen=True)
class CarParams:
    """Chassis, drivetrain and actuator limits of the 1:43-scale car."""
    mass: float = 0.041
    I_z: float = 2.78e-5
    l_f: float = 0.029
    l_r: float = 0.033
    C_m: float = 0.287
    C_d: float = 0.0012
    C_roll: float = 0.005
    throttle_bounds: tuple[float, float] = (-1.0, 1.0)
    steer_bounds: tuple[float, float] = (-0.4, 0.4)
    sample_time: float = 0.02
    v_floor: float = 0.05
    process_noise_std: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if min(self.mass, self.I_z, self.l_f, self.l_r) <= 0:
            raise ValueError("mass, I_z, l_f and l_r must be positive")
        if self.sample_time <= 0:
            raise ValueError("sample_time must be positive")

    @property
    def input_lower(self) -> np.ndarray:
        return np.array([self.throttle_bounds[0], self.steer_bounds[0]])

    @property
    def input_upper(self) -> np.ndarray:
        return np.array([self.throttle_bounds[1], self.steer_bounds[1]])


def slip_angles(state, delta, params: CarParams) -> tuple[np.ndarray, np.ndarray]:
    """
    Front and rear slip angles.

    s_f = atan2(v_y + l_f omega, v_x) - delta, s_r = atan2(v_y - l_r omega, v_x).
    Accepts a CarState or state arrays with the components on the last axis.
    """
    x = state.as_array() if isinstance(state, CarState) else np.asarray(state, dtype=float)
    v_x, v_y, omega = x[..., VX], x[..., VY], x[..., OMEGA]
    s_f = np.arctan2(v_y + params.l_f * omega, v_x) - delta
    s_r = np.arctan2(v_y - params.l_r * omega, v_x)
    return s_f, s_r


def car_derivatives(
    x: np.ndarray, u: np.ndarray, car: CarParams, tire_forces: TireForces
) -> np.ndarray:
    """Time derivative of the dynamic single-track model; batched over leading axes."""
    psi, v_x, v_y, omega = x[..., PSI], x[..., VX], x[..., VY], x[..., OMEGA]
    throttle, delta = u[..., 0], u[..., 1]

    s_f, s_r = slip_angles(x, delta, car)
    F_f, F_r = tire_forces(s_f, s_r)
    F_x = car.C_m * throttle - car.C_d * v_x ** 2 - car.C_roll

    cos_d, sin_d = np.cos(delta), np.sin(delta)
    cos_p, sin_p = np.cos(psi), np.sin(psi)
    return np.stack(
        [
            v_x * cos_p - v_y * sin_p,
            v_x * sin_p + v_y * cos_p,
            omega,
            (F_x - F_f * sin_d + car.mass * v_y * omega) / car.mass,
            (F_r + F_f * cos_d - car.mass * v_x * omega) / car.mass,
            (F_f * car.l_f * cos_d - F_r * car.l_r) / car.I_z,
        ],
        axis=-1,
    )


def clamp_inputs(u, car: CarParams) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=float), car.input_lower, car.input_upper)


def car_integrate(
    x, u, car: CarParams, tire_forces: TireForces, substeps: int = 1
) -> np.ndarray:
    """RK4 over one sample time with clamped inputs and the v_x floor; no noise."""
    x = np.asarray(x, dtype=float)
    u = clamp_inputs(u, car)
    h = car.sample_time / substeps
    for _ in range(substeps):
        k1 = car_derivatives(x, u, car, tire_forces)
        k2 = car_derivatives(x + 0.5 * h * k1, u, car, tire_forces)
        k3 = car_derivatives(x + 0.5 * h * k2, u, car, tire_forces)
        k4 = car_derivatives(x + h * k3, u, car, tire_forces)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    x = x.copy()
    x[..., VX] = np.maximum(x[..., VX], car.v_floor)
    return x


def car_step(
    state: CarState,
    u,
    car: CarParams,
    tires: PacejkaParams,
    noise=(0.0, 0.0),
) -> CarState:
    """True plant step: RK4 with Pacejka forces, then additive noise on (v_y, omega)."""
    x = car_integrate(state.as_array(), u, car, pacejka_tires(tires))
    x[VY] += noise[0]
    x[OMEGA] += noise[1]
    return CarState.from_array(x)
