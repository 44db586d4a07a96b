"""YAML experiment configuration with documented defaults and dotted overrides."""

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .blr import Adapter, SgdMode
from .envs import CarParams, MountainCarParams, PacejkaParams
from .errors import ConfigError
from .features import BasisKind, PriorKind
from .meta import HyperInit, MetaTrainConfig, Optimizer
from .mpc import GoalCost, MountainCarController, SolverOptions
from .mpcc import GripSchedule, MpccConfig
from .rollout import AdaptConfig
from .track import Track

logger = logging.getLogger(__name__)

ENVIRONMENTS = ("mountain_car", "car")

DEFAULTS: dict = {
    "mountain_car": {
        "sample_time": 0.2,
        "theta2": 0.3,
        "process_noise_std": 0.001,
        "input_bound": 1.0,
        "goal": 0.6,
        "start": [-0.5, 0.0],
        "train_thetas": [0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6],
        "test_thetas": [0.65, 0.9, 1.3],
        "episode_steps": 60,
        "test_steps": 60,
        "closed_loop_seeds": 10,
    },
    "car": {
        "mass": 0.041,
        "I_z": 2.78e-5,
        "l_f": 0.029,
        "l_r": 0.033,
        "C_m": 0.287,
        "C_d": 0.0012,
        "C_roll": 0.005,
        "throttle_bounds": [-1.0, 1.0],
        "steer_bounds": [-0.4, 0.4],
        "sample_time": 0.02,
        "v_floor": 0.05,
        "process_noise_std": [0.005, 0.05],
        "start_speed": 1.0,
    },
    "tires": {
        "B_f": 2.58,
        "C_f": 1.2,
        "D_f": 0.192,
        "B_r": 3.38,
        "C_r": 1.26,
        "D_r": 0.173,
        "num_tasks": 7,
        "samples_per_task": 200,
        "noise_std": 0.02,
        "test_grip": 0.75,
    },
    "track": {"path": None, "half_width": 0.2, "closed": True},
    "basis": {
        "kind": "sor",
        "num_inducing": None,
        "lengthscale": None,
        "signal_var": None,
        "noise_var": None,
        "prior": "nystrom",
        "sigma": 3.0,
    },
    "meta_train": {
        "max_iters": 100,
        "grad_step": 1e-4,
        "optimizer": "gd",
        "initial_step": 0.5,
        "max_halvings": 20,
        "tolerance": 1e-6,
        "patience": 10,
        "max_task_points": 200,
        "holdout_fraction": 0.0,
    },
    "controller": {
        "horizon": 25,
        "input_weight": 0.1,
        "goal_weight": 1.0,
        "goal_cost": "quadratic",
        "backup_lengths": [0, 3, 6, 9, 12],
        "max_iters": 30,
        "screen_iters": 3,
        "tolerance": 1e-8,
    },
    "mpcc": {
        "horizon": 20,
        "contour_weight": 20.0,
        "lag_weight": 50.0,
        "progress_reward": 0.5,
        "rate_weights": [0.05, 0.5],
        "bound_weight": 500.0,
        "bound_margin": 0.05,
        "speed_ref": 1.2,
        "speed_weight": 1.0,
        "max_iters": 6,
        "tolerance": 1e-6,
    },
    "adapt": {
        "method": None,
        "eta": 0.0005,
        "sgd_noise_std": 0.02,
        "sgd_mode": "shrink",
        "prior_mean": None,
        "checkpoint_every": 10,
    },
    "experiment": {
        "env": "mountain_car",
        "seed": 0,
        "output_dir": "runs",
        "workers": None,
        "realizations": 30,
        "laps": 1,
        "max_steps_per_lap": 1500,
        "grip_factor": 0.64,
        "split_fraction": 0.5,
        "grip_persistent": True,
        "grip_laps": 2,
        "scan_param": "sigma",
        "scan_start": -5.0,
        "scan_stop": 5.0,
        "scan_step": 0.1,
        "scan_samples": 0,
    },
}

# Basis, prior and adapter defaults that differ between the two environments.
ENV_DEFAULTS = {
    "mountain_car": {
        "num_inducing": 4,
        "lengthscale": 0.3,
        "signal_var": 0.05,
        "noise_var": 1e-6,
        "prior_mean": "zero",
        "adapt_method": "recursive",
    },
    "car": {
        "num_inducing": 14,
        "lengthscale": 0.1,
        "signal_var": 1.0,
        "noise_var": 4e-4,
        "prior_mean": "task_average",
        "adapt_method": "sgd",
    },
}


def _merge(base: dict, update: dict, where: str = "") -> dict:
    """Recursively merge update into base; keys missing from base are errors."""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in merged:
            raise ConfigError(f"Unknown configuration key: {path}")
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Configuration key {path} must be a mapping")
            merged[key] = _merge(merged[key], value, path)
        else:
            merged[key] = value
    return merged


def parse_override(text: str) -> dict:
    """Turn 'section.key=value' into a nested mapping; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"Override must look like section.key=value, got {text!r}")
    dotted, raw = text.split("=", 1)
    parts = [p for p in dotted.strip().split(".") if p]
    if len(parts) < 2:
        raise ConfigError(f"Override key must be dotted (section.key), got {dotted!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse override value {raw!r}: {e}") from e
    nested: dict = value
    for part in reversed(parts):
        nested = {part: nested}
    return nested


@dataclass(frozen=True)
class ExperimentConfig:
    """Merged configuration of one run plus typed accessors for every section."""
    data: dict

    @classmethod
    def load(
        cls,
        path: Path | None = None,
        overrides: tuple[str, ...] | list[str] = (),
        seed: int | None = None,
        output_dir: str | None = None,
    ) -> "ExperimentConfig":
        """Defaults, then the YAML file, then --set overrides, then --seed / --out."""
        data = copy.deepcopy(DEFAULTS)
        if path is not None:
            with open(path, "r", encoding="utf-8") as f:
                try:
                    loaded = yaml.safe_load(f) or {}
                except yaml.YAMLError as e:
                    raise ConfigError(f"Cannot parse {path}: {e}") from e
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path} must contain a mapping of sections")
            data = _merge(data, loaded)
        for text in overrides:
            data = _merge(data, parse_override(text))
        if seed is not None:
            data["experiment"]["seed"] = int(seed)
        if output_dir is not None:
            data["experiment"]["output_dir"] = str(output_dir)
        config = cls(data)
        config.validate()
        return config

    def validate(self) -> None:
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"experiment.env must be one of {ENVIRONMENTS}, got {self.env!r}")
        if self.experiment["workers"] is not None and int(self.experiment["workers"]) < 1:
            raise ConfigError("experiment.workers must be at least 1")
        if self.experiment["scan_step"] <= 0:
            raise ConfigError("experiment.scan_step must be positive")
        path = self.data["track"]["path"]
        if path is not None and not Path(path).exists():
            raise ConfigError(f"Track file not found: {path}")
        try:
            self.mountain_car_params()
            self.car_params()
            self.base_tires()
            self.meta_train_config()
            self.mpcc_config()
            self.controller_config()
            self.adapt_config()
            BasisKind(self.data["basis"]["kind"])
            PriorKind(self.data["basis"]["prior"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid configuration: {e}") from e

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        canonical = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, *overrides: str) -> "ExperimentConfig":
        """A validated copy with section.key=value overrides applied."""
        data = self.data
        for text in overrides:
            data = _merge(data, parse_override(text))
        config = ExperimentConfig(data)
        config.validate()
        return config

    # --- sections -------------------------------------------------------------------------

    @property
    def experiment(self) -> dict:
        return self.data["experiment"]

    @property
    def env(self) -> str:
        return self.experiment["env"]

    @property
    def seed(self) -> int:
        return int(self.experiment["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.experiment["output_dir"])

    @property
    def workers(self) -> int:
        """Worker processes for independent episodes; null means one per CPU."""
        value = self.experiment["workers"]
        return (os.cpu_count() or 1) if value is None else int(value)

    def mountain_car_params(self, theta1: float = 0.5) -> MountainCarParams:
        mc = self.data["mountain_car"]
        return MountainCarParams(
            sample_time=float(mc["sample_time"]),
            theta1=float(theta1),
            theta2=float(mc["theta2"]),
            process_noise_std=float(mc["process_noise_std"]),
            input_bound=float(mc["input_bound"]),
            goal=float(mc["goal"]),
            start=tuple(float(v) for v in mc["start"]),
        )

    def car_params(self) -> CarParams:
        c = self.data["car"]
        return CarParams(
            mass=float(c["mass"]),
            I_z=float(c["I_z"]),
            l_f=float(c["l_f"]),
            l_r=float(c["l_r"]),
            C_m=float(c["C_m"]),
            C_d=float(c["C_d"]),
            C_roll=float(c["C_roll"]),
            throttle_bounds=tuple(float(v) for v in c["throttle_bounds"]),
            steer_bounds=tuple(float(v) for v in c["steer_bounds"]),
            sample_time=float(c["sample_time"]),
            v_floor=float(c["v_floor"]),
            process_noise_std=tuple(float(v) for v in c["process_noise_std"]),
        )

    def base_tires(self) -> PacejkaParams:
        t = self.data["tires"]
        return PacejkaParams(**{k: float(t[k]) for k in ("B_f", "C_f", "D_f", "B_r", "C_r", "D_r")})

    def d_norm(self) -> tuple[float, float]:
        """Per-axle force normalization: the base peak forces."""
        base = self.base_tires()
        return base.D_f, base.D_r

    def track(self) -> Track:
        t = self.data["track"]
        if t["path"] is None:
            return Track.default(float(t["half_width"]))
        return Track.from_csv(Path(t["path"]), float(t["half_width"]), bool(t["closed"]))

    def basis_setting(self, key: str):
        """A basis hyperparameter, falling back to the environment default."""
        value = self.data["basis"].get(key)
        return ENV_DEFAULTS[self.env][key] if value is None else value

    def hyper_init(self) -> HyperInit:
        return HyperInit(
            lengthscale=float(self.basis_setting("lengthscale")),
            signal_var=float(self.basis_setting("signal_var")),
            noise_var=float(self.basis_setting("noise_var")),
            num_inducing=int(self.basis_setting("num_inducing")),
        )

    def basis_kind(self) -> BasisKind:
        return BasisKind(self.data["basis"]["kind"])

    def prior_kind(self) -> PriorKind:
        return PriorKind(self.data["basis"]["prior"])

    def meta_train_config(self) -> MetaTrainConfig:
        m = self.data["meta_train"]
        return MetaTrainConfig(
            max_iters=int(m["max_iters"]),
            grad_step=float(m["grad_step"]),
            optimizer=Optimizer(m["optimizer"]),
            init=self.hyper_init(),
            seed=self.seed,
            initial_step=float(m["initial_step"]),
            max_halvings=int(m["max_halvings"]),
            tolerance=float(m["tolerance"]),
            patience=int(m["patience"]),
            max_task_points=int(m["max_task_points"]),
        )

    def controller_config(self) -> MountainCarController:
        c = self.data["controller"]
        return MountainCarController(
            horizon=int(c["horizon"]),
            input_weight=float(c["input_weight"]),
            goal_weight=float(c["goal_weight"]),
            goal_cost=GoalCost(c["goal_cost"]),
            backup_lengths=tuple(int(v) for v in c["backup_lengths"]),
            solver=SolverOptions(
                max_iters=int(c["max_iters"]),
                tolerance=float(c["tolerance"]),
                screen_iters=int(c["screen_iters"]),
            ),
        )

    def mpcc_config(self) -> MpccConfig:
        m = self.data["mpcc"]
        return MpccConfig(
            horizon=int(m["horizon"]),
            contour_weight=float(m["contour_weight"]),
            lag_weight=float(m["lag_weight"]),
            progress_reward=float(m["progress_reward"]),
            rate_weights=tuple(float(v) for v in m["rate_weights"]),
            bound_weight=float(m["bound_weight"]),
            bound_margin=float(m["bound_margin"]),
            speed_ref=float(m["speed_ref"]),
            speed_weight=float(m["speed_weight"]),
            solver=SolverOptions(
                max_iters=int(m["max_iters"]), tolerance=float(m["tolerance"])
            ),
        )

    def adapt_config(self) -> AdaptConfig:
        a = self.data["adapt"]
        method = ENV_DEFAULTS[self.env]["adapt_method"] if a["method"] is None else a["method"]
        return AdaptConfig(
            method=Adapter(method),
            eta=float(a["eta"]),
            sgd_noise_std=float(a["sgd_noise_std"]),
            sgd_mode=SgdMode(a["sgd_mode"]),
            checkpoint_every=int(a["checkpoint_every"]),
        )

    def prior_mean(self) -> str:
        value = self.data["adapt"]["prior_mean"]
        value = ENV_DEFAULTS[self.env]["prior_mean"] if value is None else value
        if value not in ("zero", "task_average"):
            raise ConfigError(f"adapt.prior_mean must be zero or task_average, got {value!r}")
        return value

    def grip_schedule(self, factor: float | None = None) -> GripSchedule:
        e = self.experiment
        return GripSchedule(
            factor=float(e["grip_factor"] if factor is None else factor),
            split_fraction=float(e["split_fraction"]),
            persistent=bool(e["grip_persistent"]),
        )
