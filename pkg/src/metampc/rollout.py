"""Closed-loop episodes: true plants, online weight adaptation and trajectory logs."""

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .blr import (
    DEFAULT_ETA,
    DEFAULT_SGD_NOISE_STD,
    Adapter,
    SgdMode,
    blr_update_recursive,
    sgd_mean_update,
)
from .envs import (
    CAR_STATE_NAMES,
    MOUNTAIN_CAR_STATE_NAMES,
    OMEGA,
    VY,
    CarParams,
    MountainCarParams,
    PacejkaParams,
    car_integrate,
    mountain_car_nominal,
    mountain_car_residual,
    mountain_car_step,
    pacejka_force,
    slip_angles,
)
from .features import features
from .mpc import OcpSolution, ResidualModel, shift_inputs
from .mpcc import GripSchedule, scheduled_tires
from .track import Track, track_project

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Measurement:
    """Residual observations of one step: basis inputs, noisy values, noise-free values."""
    inputs: list[np.ndarray]
    values: list[float]
    truth: list[float]


class Plant(Protocol):
    state_names: tuple[str, ...]
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]

    def initial_state(self) -> np.ndarray: ...

    def step(
        self, x: np.ndarray, u: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, Measurement]: ...

    def abort_reason(self, x: np.ndarray) -> str | None: ...


class Controller(Protocol):
    def reset(self, x0: np.ndarray) -> None: ...

    def solve(self, x, residual, warm, u_prev) -> OcpSolution: ...

    def info(self) -> dict[str, float]: ...


class MountainCarPlant:
    """True mountain car; the residual observation is v' minus the known part of the model."""
    state_names = MOUNTAIN_CAR_STATE_NAMES
    input_names = ("u",)
    output_names = ("y",)

    def __init__(self, params: MountainCarParams):
        self.params = params

    def initial_state(self) -> np.ndarray:
        return np.array(self.params.start, dtype=float)

    def step(self, x, u, rng):
        noise = self.params.process_noise_std * rng.standard_normal()
        u = np.clip(u, -self.params.input_bound, self.params.input_bound)
        x_next = mountain_car_step(x, u[0], self.params, noise)
        y = float(x_next[1] - mountain_car_nominal(x, u[0], self.params)[1])
        truth = float(mountain_car_residual(x[0], self.params.theta1, self.params.sample_time))
        return x_next, Measurement([x[:1].copy()], [y], [truth])

    def abort_reason(self, x) -> str | None:
        return None if np.all(np.isfinite(x)) else "non-finite state"


class RaceCarPlant:
    """
    True race car. Measures noisy normalized tire forces at the applied slip angles.

    The grip factor follows the car's projected arclength.
    """
    state_names = CAR_STATE_NAMES
    input_names = ("throttle", "steer")
    output_names = ("front", "rear")

    def __init__(
        self,
        car: CarParams,
        tires: PacejkaParams,
        track: Track,
        d_norm: tuple[float, float],
        measurement_noise_std: float = DEFAULT_SGD_NOISE_STD,
        grip: GripSchedule | None = None,
        start_speed: float = 1.0,
    ):
        self.car = car
        self.tires = tires
        self.track = track
        self.d_norm = d_norm
        self.measurement_noise_std = measurement_noise_std
        self.grip = grip or GripSchedule()
        self.start_speed = start_speed
        self.progress = 0.0

    def initial_state(self) -> np.ndarray:
        self.progress = 0.0
        X, Y = self.track.position(0.0)
        return np.array([X, Y, float(self.track.heading(0.0)), self.start_speed, 0.0, 0.0])

    def _advance_progress(self, x) -> float:
        s, e_lat = track_project(self.track, x[:2], self.progress)
        L = self.track.length
        self.progress += (s - self.progress + 0.5 * L) % L - 0.5 * L
        return e_lat

    def step(self, x, u, rng):
        self._advance_progress(x)
        grip = self.grip.at(np.array([self.progress]), self.track.length)
        u = np.clip(u, self.car.input_lower, self.car.input_upper)
        forces = scheduled_tires(self.tires, grip)
        x_next = car_integrate(x[None, :], u[None, :], self.car, forces)[0]
        noise = np.asarray(self.car.process_noise_std) * rng.standard_normal(2)
        x_next[VY] += noise[0]
        x_next[OMEGA] += noise[1]

        s_f, s_r = slip_angles(x, u[1], self.car)
        g = float(grip[0])
        tires = self.tires.with_grip(g)
        truth = [
            float(pacejka_force(s_f, tires.B_f, tires.C_f, tires.D_f)) / self.d_norm[0],
            float(pacejka_force(s_r, tires.B_r, tires.C_r, tires.D_r)) / self.d_norm[1],
        ]
        values = [t + self.measurement_noise_std * rng.standard_normal() for t in truth]
        return x_next, Measurement([np.array([s_f]), np.array([s_r])], values, truth)

    def abort_reason(self, x) -> str | None:
        if not np.all(np.isfinite(x)):
            return "non-finite state"
        e_lat = self._advance_progress(x)
        if abs(e_lat) > 2.0 * self.track.half_width:
            return f"left the track (lateral error {e_lat:.3f} m)"
        return None


@dataclass(frozen=True)
class AdaptConfig:
    """Online adaptation of the residual weights."""
    method: Adapter = Adapter.RECURSIVE
    eta: float = DEFAULT_ETA
    sgd_noise_std: float = DEFAULT_SGD_NOISE_STD
    sgd_mode: SgdMode = SgdMode.SHRINK
    checkpoint_every: int = 10


def adapt(residual: ResidualModel, measurement: Measurement, cfg: AdaptConfig) -> ResidualModel:
    """Fold one step of measurements into the posterior of each output."""
    if cfg.method == Adapter.NONE:
        return residual
    for k, (z, y) in enumerate(zip(measurement.inputs, measurement.values)):
        phi = features(residual.basis, z)
        post = residual.posteriors[k]
        if cfg.method == Adapter.RECURSIVE:
            post = blr_update_recursive(post, phi, y, residual.basis.noise_var)
        else:
            mu = sgd_mean_update(
                post.mu_alpha, phi, y, cfg.eta, cfg.sgd_noise_std ** 2, cfg.sgd_mode
            )
            post = post.with_mean(mu)
        residual = residual.with_posterior(k, post)
    return residual


@dataclass
class TrajectoryLog:
    """Record of one closed-loop episode."""
    state_names: tuple[str, ...]
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]
    states: list[np.ndarray] = field(default_factory=list)
    inputs: list[np.ndarray] = field(default_factory=list)
    feature_inputs: list[list[float]] = field(default_factory=list)
    measurements: list[list[float]] = field(default_factory=list)
    truths: list[list[float]] = field(default_factory=list)
    predictions: list[list[float]] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    info: list[dict[str, float]] = field(default_factory=list)
    checkpoints: dict[int, list[list[float]]] = field(default_factory=dict)
    final_state: np.ndarray | None = None
    aborted: bool = False
    abort_reason: str | None = None
    solve_seconds: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.inputs)

    def positions(self) -> np.ndarray:
        """Positions per logged step: (X, Y) for the car, p for the mountain car."""
        states = np.asarray(self.states)
        if states.size == 0:
            return np.zeros((0, 1))
        return states[:, :2] if "X" in self.state_names else states[:, :1]

    def info_column(self, key: str) -> np.ndarray:
        return np.array([row.get(key, np.nan) for row in self.info])

    @classmethod
    def read_csv(cls, path: Path) -> "TrajectoryLog":
        """Read back the states and inputs of a log written by write_csv."""
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            header = reader.fieldnames or []
            rows = list(reader)
        if "X" in header:
            state_names, input_names, output_names = (
                RaceCarPlant.state_names, RaceCarPlant.input_names, RaceCarPlant.output_names
            )
        elif "p" in header:
            state_names, input_names, output_names = (
                MountainCarPlant.state_names,
                MountainCarPlant.input_names,
                MountainCarPlant.output_names,
            )
        else:
            raise ValueError(f"{path} is not a trajectory log: no state columns")
        log = cls(state_names, input_names, output_names)
        for row in rows:
            log.states.append(np.array([float(row[n]) for n in state_names]))
            log.inputs.append(np.array([float(row[n]) for n in input_names]))
        return log

    def write_csv(self, path: Path) -> None:
        """Columns t, states, inputs, y, cost, iters, then basis inputs, predictions, info."""
        info_keys = sorted(self.info[0]) if self.info else []
        header = (
            ["t"]
            + list(self.state_names)
            + list(self.input_names)
            + [f"y_{o}" for o in self.output_names]
            + ["cost", "iters"]
            + [f"z_{o}" for o in self.output_names]
            + [f"pred_{o}" for o in self.output_names]
            + [f"truth_{o}" for o in self.output_names]
            + info_keys
        )
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for t in range(self.steps):
                row = [str(t)]
                row += [f"{v:.17g}" for v in self.states[t]]
                row += [f"{v:.17g}" for v in self.inputs[t]]
                row += [f"{v:.17g}" for v in self.measurements[t]]
                row += [f"{self.costs[t]:.17g}", str(self.iterations[t])]
                row += [f"{v:.17g}" for v in self.feature_inputs[t]]
                row += [f"{v:.17g}" for v in self.predictions[t]]
                row += [f"{v:.17g}" for v in self.truths[t]]
                row += [f"{self.info[t][k]:.17g}" for k in info_keys]
                writer.writerow(row)

    def sidecar(self) -> dict:
        return {
            "state_names": list(self.state_names),
            "input_names": list(self.input_names),
            "output_names": list(self.output_names),
            "steps": self.steps,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "final_state": None if self.final_state is None else self.final_state.tolist(),
            "mu_alpha_checkpoints": {str(t): mu for t, mu in sorted(self.checkpoints.items())},
            **self.metadata,
        }

    def write(self, csv_path: Path) -> Path:
        """Write the CSV and its JSON sidecar next to it; returns the sidecar path."""
        self.write_csv(csv_path)
        sidecar = csv_path.with_suffix(".json")
        with open(sidecar, "w", encoding="utf-8") as f:
            json.dump(self.sidecar(), f, indent=2, sort_keys=True)
        return sidecar


def run_closed_loop(
    plant: Plant,
    controller: Controller,
    residual: ResidualModel | None,
    steps: int,
    rng: np.random.Generator,
    adapt_cfg: AdaptConfig = AdaptConfig(),
    stop: Callable[[np.ndarray], bool] | None = None,
    x0: np.ndarray | None = None,
) -> tuple[TrajectoryLog, ResidualModel]:
    """
    Receding-horizon episode with online adaptation of the residual weights.

    Each step solves the controller's problem under the current residual mean
    (warm-started by shifting the previous solution), applies the first input
    to the plant, logs the one-step residual prediction made before the
    update, and then folds the measurement into the posterior. Without a
    residual model the episode only records the plant (data collection).

    Returns:
        (trajectory log, adapted residual model)

    Raises:
        ValueError: If steps < 1
    """
    if steps < 1:
        raise ValueError(f"steps must be at least 1, got {steps}")

    log = TrajectoryLog(plant.state_names, plant.input_names, plant.output_names)
    x = plant.initial_state() if x0 is None else np.asarray(x0, dtype=float)
    controller.reset(x)
    warm = None
    u_prev = None
    if residual is not None:
        log.checkpoints[0] = residual.mean_snapshot()

    for t in range(steps):
        started = time.perf_counter()
        solution = controller.solve(x, residual, warm, u_prev)
        log.solve_seconds += time.perf_counter() - started
        u = solution.inputs[0].copy()
        info = controller.info()

        x_next, meas = plant.step(x, u, rng)
        if residual is None:
            predictions = [float("nan")] * len(meas.inputs)
        else:
            predictions = [
                float(residual.mean(k, z[None, :])[0]) for k, z in enumerate(meas.inputs)
            ]

        log.states.append(x.copy())
        log.inputs.append(u)
        log.feature_inputs.append([float(z[0]) for z in meas.inputs])
        log.measurements.append(list(meas.values))
        log.truths.append(list(meas.truth))
        log.predictions.append(predictions)
        log.costs.append(solution.cost)
        log.iterations.append(solution.iterations)
        log.info.append(info)

        if residual is not None:
            residual = adapt(residual, meas, adapt_cfg)
            if adapt_cfg.checkpoint_every and (t + 1) % adapt_cfg.checkpoint_every == 0:
                log.checkpoints[t + 1] = residual.mean_snapshot()

        x = x_next
        warm = shift_inputs(solution.inputs)
        u_prev = u

        reason = plant.abort_reason(x)
        if reason is not None:
            log.aborted, log.abort_reason = True, reason
            logger.info(f"Episode aborted at step {t + 1}: {reason}")
            break
        if stop is not None and stop(x):
            break

    log.final_state = x.copy()
    return log, residual
