"""
Experiment drivers: task collection, meta-training, ELBO scans, meta-testing,
race and grip-change runs, and RMSE statistics.

Every driver writes into its own directory below experiment.output_dir and
finishes with a manifest.json recording the configuration hash, seed, package
versions and wall-clock time.
"""

import csv
import json
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy

from . import __version__
from .blr import Adapter, LinearPosterior, predict
from .config import ExperimentConfig
from .envs import PacejkaParams, make_task_tires, save_task_tires
from .errors import ConfigError, EmptyLog, EpisodeFailed
from .features import (
    BasisKind,
    BasisSet,
    cosine_basis,
    initial_inducing_inputs,
    sor_basis,
    theta_names,
    weight_prior,
    with_param,
)
from .meta import (
    MetaDataset,
    TaskDataset,
    TraceEntry,
    cap_task_size,
    load_meta_dataset,
    meta_train,
    negative_elbo_multi,
    negative_elbo_sampled,
    per_task_posterior,
    save_meta_dataset,
    split_holdout,
    task_average_mean,
    write_loss_trace,
)
from .mpc import MountainCarMpc, ResidualModel
from .mpcc import GripSchedule, RaceCarMpcc
from .rollout import (
    AdaptConfig,
    MountainCarPlant,
    RaceCarPlant,
    TrajectoryLog,
    run_closed_loop,
)
from .seeding import stream

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[str, int, int], None]

OUTPUT_NAMES = {"mountain_car": ("y",), "car": ("front", "rear")}

COLLECT_DIR = "collect"
META_TRAIN_DIR = "meta_train"
ELBO_SCAN_DIR = "elbo_scan"
META_TEST_DIR = "meta_test"
RACE_DIR = "race"
GRIP_CHANGE_DIR = "grip_change"

BASIS_FILE = "basis.json"
PRIOR_FILE = "prior.json"


@dataclass(frozen=True)
class CheckResult:
    """Outcome of one acceptance threshold."""
    name: str
    passed: bool
    detail: str


# --- run bookkeeping ----------------------------------------------------------------------


def stage_dir(cfg: ExperimentConfig, name: str) -> Path:
    path = cfg.output_dir / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(
    cfg: ExperimentConfig,
    directory: Path,
    command: str,
    started: float,
    outputs: list[Path],
    extra: dict | None = None,
) -> Path:
    """Write manifest.json for one experiment; everything needed to re-run it."""
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "config": cfg.data,
        "versions": {
            "metampc": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "platform": platform.platform(),
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
        "outputs": sorted(str(p.relative_to(directory)) for p in outputs),
        **(extra or {}),
    }
    path = directory / "manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def run_pool(
    fn: Callable[[Any], Any],
    jobs: list,
    workers: int = 1,
    progress_callback: ProgressCallback | None = None,
    description: str = "",
) -> list:
    """
    Run fn over jobs on a process pool.

    Results come back in job order, so anything reduced from them does not
    depend on the number of workers. fn must be a module-level function.
    """
    results: list = [None] * len(jobs)
    if workers <= 1 or len(jobs) <= 1:
        for i, job in enumerate(jobs):
            results[i] = fn(job)
            if progress_callback:
                progress_callback(description, i + 1, len(jobs))
        return results

    with ProcessPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(fn, job): i for i, job in enumerate(jobs)}
        for done, future in enumerate(as_completed(futures), start=1):
            results[futures[future]] = future.result()
            if progress_callback:
                progress_callback(description, done, len(jobs))
    return results


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])


def task_id(index: int) -> str:
    return f"task_{index:02d}"


# --- data collection ----------------------------------------------------------------------


@dataclass
class CollectResult:
    outputs: list[MetaDataset]
    directory: Path
    manifest: Path


def _collect_mountain_car(job: tuple[ExperimentConfig, int]) -> list[TaskDataset] | str:
    cfg, index = job
    theta1 = float(cfg.data["mountain_car"]["train_thetas"][index])
    params = cfg.mountain_car_params(theta1)
    controller = MountainCarMpc(params, cfg.controller_config(), ground_truth=True)
    steps = int(cfg.data["mountain_car"]["episode_steps"])
    log, _ = run_closed_loop(
        MountainCarPlant(params),
        controller,
        None,
        steps,
        stream(cfg.seed, "collect", index),
        stop=lambda x: x[0] >= params.goal,
    )
    if log.aborted:
        return log.abort_reason or "aborted"
    if log.final_state[0] < params.goal:
        logger.warning(f"Task {task_id(index)} did not reach p >= {params.goal} in {steps} steps")
    Z = np.asarray(log.feature_inputs)
    y = np.asarray(log.measurements)[:, 0]
    return [TaskDataset(task_id(index), Z, y)]


def task_tires(cfg: ExperimentConfig, index: int) -> PacejkaParams:
    return make_task_tires(
        cfg.base_tires(), index, int(cfg.data["tires"]["num_tasks"]), cfg.seed
    )


def _collect_car(job: tuple[ExperimentConfig, int]) -> list[TaskDataset] | str:
    cfg, index = job
    car, track, d_norm = cfg.car_params(), cfg.track(), cfg.d_norm()
    tires = task_tires(cfg, index)
    plant = RaceCarPlant(
        car,
        tires,
        track,
        d_norm,
        measurement_noise_std=float(cfg.data["tires"]["noise_std"]),
        start_speed=float(cfg.data["car"]["start_speed"]),
    )
    controller = RaceCarMpcc(car, track, cfg.mpcc_config(), d_norm, true_tires=tires)
    steps = int(cfg.data["tires"]["samples_per_task"])
    log, _ = run_closed_loop(plant, controller, None, steps, stream(cfg.seed, "collect", index))
    if log.aborted:
        return log.abort_reason or "aborted"
    Z = np.asarray(log.feature_inputs)
    Y = np.asarray(log.measurements)
    return [
        TaskDataset(task_id(index), Z[:, k:k + 1], Y[:, k]) for k in range(Y.shape[1])
    ]


def collect_tasks(
    cfg: ExperimentConfig, progress_callback: ProgressCallback | None = None
) -> CollectResult:
    """
    Record meta-training tasks by driving each task's true plant with a
    ground-truth-model controller.

    Writes collect/tasks/<output>/task_XX.csv plus collect/tasks.json with
    the parameters of every task.

    Raises:
        EpisodeFailed: If any episode aborts; collect/incomplete.json lists them
    """
    started = time.perf_counter()
    directory = stage_dir(cfg, COLLECT_DIR)
    if cfg.env == "mountain_car":
        count = len(cfg.data["mountain_car"]["train_thetas"])
        fn = _collect_mountain_car
    else:
        count = int(cfg.data["tires"]["num_tasks"])
        fn = _collect_car

    jobs = [(cfg, i) for i in range(count)]
    results = run_pool(
        fn, jobs, cfg.workers, progress_callback, "Collecting tasks"
    )

    failed = {task_id(i): r for i, r in enumerate(results) if isinstance(r, str)}
    if failed:
        with open(directory / "incomplete.json", "w", encoding="utf-8") as f:
            json.dump(failed, f, indent=2, sort_keys=True)
        raise EpisodeFailed(
            f"{len(failed)} of {count} collection episodes aborted: "
            + ", ".join(f"{k} ({v})" for k, v in sorted(failed.items()))
        )

    outputs = []
    paths = []
    for k, name in enumerate(OUTPUT_NAMES[cfg.env]):
        data = MetaDataset(tuple(r[k] for r in results), input_dim=1)
        paths += save_meta_dataset(data, directory / "tasks" / name)
        outputs.append(data)

    params_path = directory / "tasks.json"
    if cfg.env == "mountain_car":
        thetas = cfg.data["mountain_car"]["train_thetas"]
        with open(params_path, "w", encoding="utf-8") as f:
            json.dump({task_id(i): {"theta1": t} for i, t in enumerate(thetas)}, f, indent=2)
    else:
        save_task_tires([task_tires(cfg, i) for i in range(count)], params_path)
    paths.append(params_path)

    manifest = write_manifest(cfg, directory, "collect", started, paths)
    logger.info(f"Collected {count} tasks into {directory}")
    return CollectResult(outputs, directory, manifest)


def load_tasks(cfg: ExperimentConfig) -> list[MetaDataset]:
    """Collected datasets, one per residual output."""
    base = cfg.output_dir / COLLECT_DIR / "tasks"
    try:
        return [load_meta_dataset(base / name) for name in OUTPUT_NAMES[cfg.env]]
    except FileNotFoundError as e:
        raise ConfigError(f"{e}; run 'metampc collect' first") from e


# --- meta-training ------------------------------------------------------------------------


def initial_basis(cfg: ExperimentConfig, data: list[MetaDataset]) -> BasisSet:
    """Starting basis from the configuration; inducing inputs at quantiles of the data."""
    init = cfg.hyper_init()
    if cfg.basis_kind() == BasisKind.PARAMETRIC_COSINE:
        return cosine_basis(
            float(cfg.data["basis"]["sigma"]),
            float(cfg.data["mountain_car"]["sample_time"]),
            init.lengthscale,
            init.signal_var,
            init.noise_var,
        )
    pooled = np.vstack([d.pooled_inputs() for d in data])
    Z = initial_inducing_inputs(pooled, init.num_inducing)
    return sor_basis(Z, init.lengthscale, init.signal_var, init.noise_var, cfg.prior_kind())


def online_prior(
    cfg: ExperimentConfig, basis: BasisSet, data: list[MetaDataset]
) -> list[LinearPosterior]:
    """Starting weight distribution of each output for online adaptation."""
    prior = weight_prior(basis)
    posteriors = []
    for d in data:
        if cfg.prior_mean() == "task_average":
            mean = task_average_mean(basis, d)
        else:
            mean = prior.mean
        posteriors.append(LinearPosterior(mean, prior.cov))
    return posteriors


@dataclass
class MetaTrainResult:
    basis: BasisSet
    trace: list[TraceEntry]
    holdout: list[dict] = field(default_factory=list)
    directory: Path | None = None
    manifest: Path | None = None


def holdout_rmse(
    basis: BasisSet, train: MetaDataset, holdout: MetaDataset, output: str
) -> list[dict]:
    """RMSE of each task's posterior mean on its held-out points."""
    held = {t.task_id.removesuffix("-holdout"): t for t in holdout.tasks}
    rows = []
    for task in train.tasks:
        test = held.get(task.task_id)
        if test is None or test.size == 0:
            continue
        post = per_task_posterior(basis, task)
        mean, _ = predict(post, basis, test.X)
        rmse = float(np.sqrt(np.mean((mean - test.y) ** 2)))
        rows.append({
            "output": output,
            "task": task.task_id,
            "train_points": task.size,
            "holdout_points": test.size,
            "rmse": rmse,
        })
    return rows


def run_meta_train(
    cfg: ExperimentConfig, progress_callback: ProgressCallback | None = None
) -> MetaTrainResult:
    """
    Meta-train the basis on the collected tasks.

    Writes meta_train/basis.json, prior.json (the online starting weights per
    output), loss_trace.csv and, with a holdout fraction, holdout.csv.
    """
    started = time.perf_counter()
    directory = stage_dir(cfg, META_TRAIN_DIR)
    train_cfg = cfg.meta_train_config()
    data = load_tasks(cfg)
    names = OUTPUT_NAMES[cfg.env]

    fraction = float(cfg.data["meta_train"]["holdout_fraction"])
    train_sets, holdout_sets = [], []
    for k, d in enumerate(data):
        if fraction > 0:
            pairs = [
                split_holdout(t, fraction, stream(cfg.seed, "holdout", k, t.task_id))
                for t in d.tasks
            ]
            train_sets.append(MetaDataset(tuple(p[0] for p in pairs), d.input_dim))
            holdout_sets.append(MetaDataset(tuple(p[1] for p in pairs), d.input_dim))
        else:
            train_sets.append(d)

    capped, subsampled = [], {}
    for k, (name, d) in enumerate(zip(names, train_sets)):
        data_k, kept = cap_task_size(d, train_cfg.max_task_points, stream(cfg.seed, "cap", k))
        capped.append(data_k)
        if kept:
            subsampled[name] = kept
    basis0 = initial_basis(cfg, capped)

    def on_iteration(iteration: int, loss: float) -> None:
        if progress_callback:
            progress_callback(f"Meta-training (loss {loss:.5g})", iteration, train_cfg.max_iters)

    basis, trace = meta_train(capped, train_cfg, basis0, on_iteration)

    basis_path = directory / BASIS_FILE
    basis.save(basis_path)
    trace_path = directory / "loss_trace.csv"
    write_loss_trace(trace, trace_path)
    prior_path = directory / PRIOR_FILE
    priors = online_prior(cfg, basis, train_sets)
    with open(prior_path, "w", encoding="utf-8") as f:
        json.dump({n: p.to_dict() for n, p in zip(names, priors)}, f, indent=2)
    paths = [basis_path, trace_path, prior_path]

    holdout = []
    if holdout_sets:
        for name, train, held in zip(names, train_sets, holdout_sets):
            holdout += holdout_rmse(basis, train, held, name)
        holdout_path = directory / "holdout.csv"
        header = ["output", "task", "train_points", "holdout_points", "rmse"]
        _write_rows(holdout_path, header, [[r[h] for h in header] for r in holdout])
        paths.append(holdout_path)

    manifest = write_manifest(
        cfg,
        directory,
        "meta-train",
        started,
        paths,
        {
            "initial_loss": trace[0].loss,
            "final_loss": trace[-1].loss,
            "subsampled_rows": subsampled,
        },
    )
    return MetaTrainResult(basis, trace, holdout, directory, manifest)


def check_meta_train(trace: list[TraceEntry]) -> list[CheckResult]:
    losses = [e.loss for e in trace]
    monotone = all(b <= a for a, b in zip(losses, losses[1:]))
    return [
        CheckResult("loss non-increasing", monotone, f"{len(losses)} accepted steps"),
        CheckResult(
            "final loss below initial",
            len(losses) > 1 and losses[-1] < losses[0],
            f"{losses[0]:.6g} -> {losses[-1]:.6g}",
        ),
    ]


def load_residual(cfg: ExperimentConfig) -> ResidualModel:
    """Meta-trained basis with its online starting weights."""
    directory = cfg.output_dir / META_TRAIN_DIR
    basis_path = directory / BASIS_FILE
    if not basis_path.exists():
        raise ConfigError(f"{basis_path} not found; run 'metampc meta-train' first")
    basis = BasisSet.load(basis_path)
    with open(directory / PRIOR_FILE, "r", encoding="utf-8") as f:
        stored = json.load(f)
    names = OUTPUT_NAMES[cfg.env]
    missing = [n for n in names if n not in stored]
    if missing:
        raise ConfigError(f"{PRIOR_FILE} has no weights for outputs {missing}")
    posteriors = tuple(LinearPosterior.from_dict(stored[n]) for n in names)
    return ResidualModel(basis, posteriors, names)


# --- ELBO scan ----------------------------------------------------------------------------


def scan_grid(start: float, stop: float, step: float) -> np.ndarray:
    """Inclusive grid start, start + step, ..., up to stop."""
    if step <= 0:
        raise ConfigError("scan step must be positive")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    if count < 1:
        raise ConfigError(f"Empty scan grid [{start}, {stop}]")
    return np.round(start + step * np.arange(count), 12)


@dataclass
class ScanResult:
    param: str
    values: np.ndarray
    losses: np.ndarray
    stderr: np.ndarray | None = None
    path: Path | None = None


def elbo_scan(
    cfg: ExperimentConfig,
    param: str,
    grid,
    basis: BasisSet | None = None,
    samples: int = 0,
    progress_callback: ProgressCallback | None = None,
) -> ScanResult:
    """
    Negative ELBO over a grid of one hyperparameter, all others fixed.

    With samples > 0 the expected log-likelihood is estimated by sampling and
    the CSV gets a stderr column.
    """
    started = time.perf_counter()
    data = load_tasks(cfg)
    basis = basis or initial_basis(cfg, data)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    try:
        with_param(basis, param, float(grid[0]))
    except ValueError as e:
        raise ConfigError(
            f"Cannot scan {param!r}: {e} (basis parameters: {theta_names(basis)})"
        ) from e

    losses = np.empty(grid.size)
    stderr = np.empty(grid.size) if samples > 0 else None
    for i, value in enumerate(grid):
        trial = with_param(basis, param, float(value))
        if samples > 0:
            estimates = [
                negative_elbo_sampled(trial, d, samples, stream(cfg.seed, "elbo_scan", i, k))
                for k, d in enumerate(data)
            ]
            losses[i] = sum(e[0] for e in estimates)
            stderr[i] = math.sqrt(sum(e[1] ** 2 for e in estimates))
        else:
            losses[i] = negative_elbo_multi(trial, data)
        if progress_callback:
            progress_callback(f"Scanning {param}", i + 1, grid.size)

    directory = stage_dir(cfg, ELBO_SCAN_DIR)
    path = directory / f"{param}.csv"
    header = ["value", "neg_elbo"] + (["stderr"] if stderr is not None else [])
    rows = [
        [float(v), float(losses[i])] + ([float(stderr[i])] if stderr is not None else [])
        for i, v in enumerate(grid)
    ]
    _write_rows(path, header, rows)
    write_manifest(cfg, directory, "elbo-scan", started, [path], {"param": param})
    return ScanResult(param, grid, losses, stderr, path)


def local_minima(values: np.ndarray, losses: np.ndarray) -> list[float]:
    """Interior grid points lower than the left neighbour and not above the right one."""
    return [
        float(values[i])
        for i in range(1, len(values) - 1)
        if losses[i] < losses[i - 1] and losses[i] <= losses[i + 1]
    ]


def check_elbo_scan(
    result: ScanResult, expected: float = 3.0, tolerance: float = 0.2
) -> list[CheckResult]:
    """Two minima at +-expected and a curve symmetric within 2% of its range."""
    minima = local_minima(result.values, result.losses)
    near = sorted(minima) if len(minima) == 2 else []
    located = (
        len(near) == 2
        and abs(near[0] + expected) <= tolerance
        and abs(near[1] - expected) <= tolerance
    )
    by_value = {round(float(v), 9): float(f) for v, f in zip(result.values, result.losses)}
    gaps = [abs(f - by_value[-v]) for v, f in by_value.items() if -v in by_value]
    spread = float(np.ptp(result.losses)) if result.losses.size else 0.0
    asymmetry = max(gaps, default=0.0)
    return [
        CheckResult("two local minima", len(minima) == 2, f"minima at {minima}"),
        CheckResult(f"minima at +-{expected}", located, f"tolerance {tolerance}"),
        CheckResult(
            "symmetric curve",
            bool(gaps) and asymmetry <= 0.02 * spread,
            f"max |f(s) - f(-s)| = {asymmetry:.4g}, range {spread:.4g}",
        ),
    ]


# --- RMSE ---------------------------------------------------------------------------------


def rmse_vs_ground_truth(run: TrajectoryLog, ref: TrajectoryLog) -> float:
    """
    Cumulative position RMSE of run against ref over their common steps.

    Raises:
        EmptyLog: If either log has no steps
    """
    a, b = run.positions(), ref.positions()
    n = min(len(a), len(b))
    if n == 0:
        raise EmptyLog("Cannot compare an empty trajectory log")
    err = a[:n] - b[:n]
    return float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))


def rmse_files(run_csv: Path, ref_csv: Path) -> float:
    return rmse_vs_ground_truth(TrajectoryLog.read_csv(run_csv), TrajectoryLog.read_csv(ref_csv))


@dataclass(frozen=True)
class RmseReport:
    """
    Box statistics over seeds.

    Quartiles use linear interpolation between order statistics (inclusive);
    whiskers reach the most extreme values within 1.5 IQR of the box.
    """
    values: tuple[float, ...]
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float

    @classmethod
    def from_values(cls, values) -> "RmseReport":
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            raise EmptyLog("No RMSE values to summarize")
        q1, median, q3 = np.percentile(v, [25.0, 50.0, 75.0], method="linear")
        iqr = q3 - q1
        inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
        return cls(
            values=tuple(float(x) for x in v),
            median=float(median),
            q1=float(q1),
            q3=float(q3),
            whisker_low=float(inside.min()),
            whisker_high=float(inside.max()),
        )

    def to_dict(self) -> dict:
        return {
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "whisker_low": self.whisker_low,
            "whisker_high": self.whisker_high,
            "values": list(self.values),
        }


# --- mountain-car meta-test ---------------------------------------------------------------


@dataclass
class TaskReport:
    """Fit and closed-loop results of one test task."""
    theta1: float
    rmse: float
    coverage: float
    reached: list[bool]
    steps_to_goal: list[int]


def band_fit(residual: ResidualModel, log: TrajectoryLog) -> tuple[float, float]:
    """
    RMSE of the adapted residual mean against the noise-free residual along the
    logged inputs, and the share of points inside the +-2 sigma predictive band.
    """
    Z = np.asarray(log.feature_inputs)[:, :1]
    truth = np.asarray(log.truths)[:, 0]
    mean, var = predict(residual.posteriors[0], residual.basis, Z, include_noise=True)
    rmse = float(np.sqrt(np.mean((mean - truth) ** 2)))
    coverage = float(np.mean(np.abs(mean - truth) <= 2.0 * np.sqrt(var)))
    return rmse, coverage


def _meta_test_episode(job) -> tuple[TrajectoryLog, ResidualModel]:
    cfg, residual, task_index, episode = job
    theta1 = float(cfg.data["mountain_car"]["test_thetas"][task_index])
    params = cfg.mountain_car_params(theta1)
    controller = MountainCarMpc(params, cfg.controller_config())
    steps = int(cfg.data["mountain_car"]["test_steps"])
    log, adapted = run_closed_loop(
        MountainCarPlant(params),
        controller,
        residual,
        steps,
        stream(cfg.seed, "meta_test", task_index, episode),
        cfg.adapt_config(),
        stop=lambda x: x[0] >= params.goal,
    )
    log.metadata["theta1"] = theta1
    return log, adapted


def _reached_goal(log: TrajectoryLog, goal: float) -> bool:
    return log.final_state is not None and float(log.final_state[0]) >= goal


def meta_test(
    cfg: ExperimentConfig,
    residual: ResidualModel | None = None,
    progress_callback: ProgressCallback | None = None,
) -> list[TaskReport]:
    """
    Adaptive MPC on the mountain-car test tasks.

    Every task runs closed_loop_seeds episodes from the meta-trained prior.
    The fit report (RMSE and band coverage) uses the adapted model of episode 0
    along its own trajectory. Writes meta_test/report.csv and one log per
    episode.
    """
    if cfg.env != "mountain_car":
        raise ConfigError("meta-test runs on the mountain car; use 'race' for the car")
    started = time.perf_counter()
    residual = residual or load_residual(cfg)
    thetas = [float(t) for t in cfg.data["mountain_car"]["test_thetas"]]
    seeds = int(cfg.data["mountain_car"]["closed_loop_seeds"])
    goal = float(cfg.data["mountain_car"]["goal"])

    jobs = [(cfg, residual, i, e) for i in range(len(thetas)) for e in range(seeds)]
    results = run_pool(
        _meta_test_episode,
        jobs,
        cfg.workers,
        progress_callback,
        "Meta-testing",
    )

    directory = stage_dir(cfg, META_TEST_DIR)
    paths = []
    reports = []
    for i, theta1 in enumerate(thetas):
        episodes = results[i * seeds:(i + 1) * seeds]
        task_dir = directory / f"theta_{theta1:g}"
        task_dir.mkdir(exist_ok=True)
        for e, (log, _) in enumerate(episodes):
            csv_path = task_dir / f"episode_{e:03d}.csv"
            paths += [csv_path, log.write(csv_path)]
        log0, adapted0 = episodes[0]
        rmse, coverage = band_fit(adapted0, log0)
        reports.append(TaskReport(
            theta1=theta1,
            rmse=rmse,
            coverage=coverage,
            reached=[_reached_goal(log, goal) for log, _ in episodes],
            steps_to_goal=[log.steps for log, _ in episodes],
        ))

    report_path = directory / "report.csv"
    _write_rows(
        report_path,
        ["theta1", "rmse", "coverage", "reached", "episodes", "max_steps"],
        [
            [r.theta1, r.rmse, r.coverage, sum(r.reached), len(r.reached), max(r.steps_to_goal)]
            for r in reports
        ],
    )
    paths.append(report_path)
    write_manifest(cfg, directory, "meta-test", started, paths)
    return reports


def check_meta_test(
    reports: list[TaskReport], max_steps: int, min_coverage: float = 0.9, max_rmse: float = 0.01
) -> list[CheckResult]:
    checks = []
    for r in reports:
        checks += [
            CheckResult(
                f"theta1={r.theta1:g} band coverage",
                r.coverage >= min_coverage,
                f"{100 * r.coverage:.1f}% inside +-2 sigma",
            ),
            CheckResult(f"theta1={r.theta1:g} fit RMSE", r.rmse <= max_rmse, f"{r.rmse:.4g}"),
            CheckResult(
                f"theta1={r.theta1:g} reaches goal",
                all(r.reached) and max(r.steps_to_goal) <= max_steps,
                f"{sum(r.reached)}/{len(r.reached)} episodes, at most {max(r.steps_to_goal)} steps",
            ),
        ]
    return checks


# --- race car -----------------------------------------------------------------------------


def race_tires(cfg: ExperimentConfig) -> PacejkaParams:
    """Tires of the race and grip-change experiments."""
    return cfg.base_tires().with_grip(float(cfg.data["tires"]["test_grip"]))


def race_episode(
    cfg: ExperimentConfig,
    residual: ResidualModel | None,
    adapt_cfg: AdaptConfig,
    realization: int,
    laps: int,
    grip: GripSchedule | None = None,
) -> tuple[TrajectoryLog, ResidualModel | None]:
    """
    One run of the race car for the given number of laps.

    Without a residual the controller plans with the true tires. The noise
    stream depends only on the realization, so every controller variant of a
    realization sees the same noise.
    """
    car, track, d_norm = cfg.car_params(), cfg.track(), cfg.d_norm()
    tires = race_tires(cfg)
    grip = grip or GripSchedule()
    plant = RaceCarPlant(
        car,
        tires,
        track,
        d_norm,
        measurement_noise_std=float(cfg.data["tires"]["noise_std"]),
        grip=grip,
        start_speed=float(cfg.data["car"]["start_speed"]),
    )
    controller = RaceCarMpcc(
        car,
        track,
        cfg.mpcc_config(),
        d_norm,
        true_tires=tires if residual is None else None,
        grip=grip,
    )
    target = laps * track.length
    log, adapted = run_closed_loop(
        plant,
        controller,
        residual,
        laps * int(cfg.experiment["max_steps_per_lap"]),
        stream(cfg.seed, "race", realization),
        adapt_cfg,
        stop=lambda x: plant.progress >= target,
    )
    log.metadata.update({
        "realization": realization,
        "progress": plant.progress,
        "laps_completed": int(plant.progress // track.length),
    })
    return log, adapted


RACE_VARIANTS = ("adaptive", "baseline", "ground_truth")


def _race_realization(job) -> dict[str, TrajectoryLog]:
    cfg, residual, realization = job
    laps = int(cfg.experiment["laps"])
    frozen = AdaptConfig(method=Adapter.NONE)
    return {
        "adaptive": race_episode(cfg, residual, cfg.adapt_config(), realization, laps)[0],
        "baseline": race_episode(cfg, residual, frozen, realization, laps)[0],
        "ground_truth": race_episode(cfg, None, frozen, realization, laps)[0],
    }


@dataclass
class RaceResult:
    adaptive: RmseReport
    baseline: RmseReport
    adaptive_laps_completed: list[bool]
    directory: Path


def race(
    cfg: ExperimentConfig,
    residual: ResidualModel | None = None,
    progress_callback: ProgressCallback | None = None,
) -> RaceResult:
    """
    Adaptive MPCC, non-adaptive baseline and ground-truth MPCC over noise
    realizations; position RMSE of both learned controllers against ground truth.
    """
    if cfg.env != "car":
        raise ConfigError("race runs on the car; set experiment.env=car")
    started = time.perf_counter()
    residual = residual or load_residual(cfg)
    count = int(cfg.experiment["realizations"])
    laps = int(cfg.experiment["laps"])
    results = run_pool(
        _race_realization,
        [(cfg, residual, r) for r in range(count)],
        cfg.workers,
        progress_callback,
        "Racing",
    )

    directory = stage_dir(cfg, RACE_DIR)
    (directory / "logs").mkdir(exist_ok=True)
    paths = []
    rows = []
    completed = []
    for r, logs in enumerate(results):
        for variant in RACE_VARIANTS:
            csv_path = directory / "logs" / f"r{r:03d}_{variant}.csv"
            paths += [csv_path, logs[variant].write(csv_path)]
        adaptive = rmse_vs_ground_truth(logs["adaptive"], logs["ground_truth"])
        baseline = rmse_vs_ground_truth(logs["baseline"], logs["ground_truth"])
        done = (
            not logs["adaptive"].aborted and logs["adaptive"].metadata["laps_completed"] >= laps
        )
        rows.append([r, adaptive, baseline, int(done)])
        completed.append(done)

    rmse_path = directory / "rmse.csv"
    _write_rows(rmse_path, ["realization", "adaptive", "baseline", "adaptive_completed"], rows)
    result = RaceResult(
        adaptive=RmseReport.from_values([row[1] for row in rows]),
        baseline=RmseReport.from_values([row[2] for row in rows]),
        adaptive_laps_completed=completed,
        directory=directory,
    )
    summary_path = directory / "summary.json"
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(
            {
                "adaptive": result.adaptive.to_dict(),
                "baseline": result.baseline.to_dict(),
                "adaptive_laps_completed": sum(completed),
                "realizations": count,
            },
            f,
            indent=2,
            sort_keys=True,
        )
    paths += [rmse_path, summary_path]
    write_manifest(cfg, directory, "race", started, paths)
    return result


def check_race(result: RaceResult, ratio: float = 0.5) -> list[CheckResult]:
    return [
        CheckResult(
            "adaptive median RMSE below baseline",
            result.adaptive.median < ratio * result.baseline.median,
            f"{result.adaptive.median:.4g} vs {ratio:g} x {result.baseline.median:.4g}",
        ),
        CheckResult(
            "adaptive car completes every run",
            all(result.adaptive_laps_completed),
            f"{sum(result.adaptive_laps_completed)}/{len(result.adaptive_laps_completed)}",
        ),
    ]


# --- grip change --------------------------------------------------------------------------


@dataclass(frozen=True)
class HalfLapStats:
    lap: int
    half: str
    steps: int
    rmse: float


@dataclass
class GripChangeResult:
    log: TrajectoryLog
    halves: list[HalfLapStats]
    laps_completed: list[bool]
    in_bounds: list[bool]
    directory: Path | None = None


def grip_report(
    log: TrajectoryLog, track_length: float, split_fraction: float, half_width: float, laps: int
) -> tuple[list[HalfLapStats], list[bool], list[bool]]:
    """
    Residual prediction RMSE per lap and track half, lap completion flags and
    per-lap track-bound flags.

    Predictions are the ones logged before each update.
    """
    s = log.info_column("s")
    e_lat = log.info_column("e_lat")
    lap = np.floor(s / track_length).astype(int)
    second = np.mod(s, track_length) >= split_fraction * track_length
    err = np.asarray(log.predictions) - np.asarray(log.truths)

    halves = []
    for k in range(laps):
        for name, mask in (("first", ~second), ("second", second)):
            rows = (lap == k) & mask
            count = int(np.sum(rows))
            rmse = float(np.sqrt(np.mean(err[rows] ** 2))) if count else float("nan")
            halves.append(HalfLapStats(k + 1, name, count, rmse))

    progress = float(log.metadata.get("progress", np.max(s, initial=0.0)))
    completed = [progress >= (k + 1) * track_length for k in range(laps)]
    in_bounds = [bool(np.all(np.abs(e_lat[lap == k]) <= half_width)) for k in range(laps)]
    return halves, completed, in_bounds


def grip_change_run(
    cfg: ExperimentConfig,
    residual: ResidualModel | None = None,
    factor: float | None = None,
) -> GripChangeResult:
    """Adaptive MPCC over several laps with reduced grip on part of the track."""
    if cfg.env != "car":
        raise ConfigError("grip-change runs on the car; set experiment.env=car")
    started = time.perf_counter()
    residual = residual or load_residual(cfg)
    laps = int(cfg.experiment["grip_laps"])
    grip = cfg.grip_schedule(factor)
    log, _ = race_episode(cfg, residual, cfg.adapt_config(), 0, laps, grip)
    track = cfg.track()
    halves, completed, in_bounds = grip_report(
        log, track.length, grip.split_fraction, track.half_width, laps
    )

    directory = stage_dir(cfg, GRIP_CHANGE_DIR)
    log_path = directory / "log.csv"
    paths = [log_path, log.write(log_path)]
    report_path = directory / "report.csv"
    _write_rows(
        report_path,
        ["lap", "half", "steps", "rmse", "completed", "in_bounds"],
        [
            [h.lap, h.half, h.steps, h.rmse, int(completed[h.lap - 1]), int(in_bounds[h.lap - 1])]
            for h in halves
        ],
    )
    paths.append(report_path)
    write_manifest(cfg, directory, "grip-change", started, paths, {"grip_factor": grip.factor})
    return GripChangeResult(log, halves, completed, in_bounds, directory)


def check_grip_change(result: GripChangeResult, ratio: float = 0.5) -> list[CheckResult]:
    second = {h.lap: h.rmse for h in result.halves if h.half == "second"}
    before, after = second.get(1, float("nan")), second.get(2, float("nan"))
    return [
        CheckResult(
            "second-half RMSE drops in lap 2",
            bool(after < ratio * before),
            f"lap 1 {before:.4g}, lap 2 {after:.4g}",
        ),
        CheckResult(
            "lap 2 completed",
            len(result.laps_completed) > 1 and result.laps_completed[1],
            f"{sum(result.laps_completed)} laps completed",
        ),
        CheckResult(
            "lap 2 inside track bounds",
            len(result.in_bounds) > 1 and result.in_bounds[1],
            "",
        ),
    ]
