import json
import time

import numpy as np
import pytest

from metampc import harness
from metampc.config import ExperimentConfig
from metampc.errors import ConfigError, EmptyLog
from metampc.features import BasisKind
from metampc.meta import TraceEntry
from metampc.rollout import TrajectoryLog

MOUNTAIN_CAR_SMALL = [
    "mountain_car.train_thetas=[0.3, 0.5]",
    "mountain_car.test_thetas=[0.9]",
    "mountain_car.episode_steps=6",
    "mountain_car.test_steps=4",
    "mountain_car.closed_loop_seeds=2",
    "controller.horizon=8",
    "controller.max_iters=3",
    "controller.backup_lengths=[0, 3]",
    "meta_train.max_iters=3",
    "experiment.workers=1",
]

CAR_SMALL = [
    "experiment.env=car",
    "tires.num_tasks=2",
    "tires.samples_per_task=5",
    "basis.num_inducing=3",
    "mpcc.horizon=5",
    "mpcc.max_iters=2",
    "meta_train.max_iters=2",
    "experiment.realizations=2",
    "experiment.max_steps_per_lap=4",
    "experiment.workers=1",
]


def small_config(tmp_path, overrides, *extra):
    return ExperimentConfig.load(overrides=list(overrides) + list(extra), output_dir=str(tmp_path))


def car_positions(points):
    log = TrajectoryLog(("X", "Y", "psi", "v_x", "v_y", "omega"), ("throttle", "steer"), ())
    for X, Y in points:
        log.states.append(np.array([X, Y, 0.0, 1.0, 0.0, 0.0]))
        log.inputs.append(np.zeros(2))
    return log


def test_rmse_identical_logs_is_zero():
    log = car_positions([(0, 0), (1, 1), (2, 0)])
    assert harness.rmse_vs_ground_truth(log, log) == 0.0


def test_rmse_constant_offset():
    ref = car_positions([(0, 0), (1, 1), (2, 0)])
    run = car_positions([(3, 4), (4, 5), (5, 4)])
    assert harness.rmse_vs_ground_truth(run, ref) == pytest.approx(5.0)


def test_rmse_uses_common_prefix():
    ref = car_positions([(0, 0), (1, 1)])
    run = car_positions([(0, 1), (1, 2), (50, 50)])
    assert harness.rmse_vs_ground_truth(run, ref) == pytest.approx(1.0)


def test_rmse_empty_log():
    with pytest.raises(EmptyLog):
        harness.rmse_vs_ground_truth(car_positions([]), car_positions([(0, 0)]))


def test_rmse_report_box_statistics():
    report = harness.RmseReport.from_values([1.0, 2.0, 3.0, 4.0, 100.0])
    assert (report.q1, report.median, report.q3) == (2.0, 3.0, 4.0)
    assert report.whisker_low == 1.0
    assert report.whisker_high == 4.0
    assert report.to_dict()["values"][-1] == 100.0
    with pytest.raises(EmptyLog):
        harness.RmseReport.from_values([])


def test_scan_grid():
    assert harness.scan_grid(-5.0, 5.0, 0.1).size == 101
    assert harness.scan_grid(-5.0, 5.0, 0.1)[80] == 3.0
    np.testing.assert_array_equal(harness.scan_grid(1.0, 1.0, 0.1), [1.0])
    with pytest.raises(ConfigError):
        harness.scan_grid(0.0, 1.0, 0.0)
    with pytest.raises(ConfigError):
        harness.scan_grid(1.0, 0.0, 0.1)


def test_local_minima():
    values = np.arange(7.0)
    losses = np.array([5.0, 3.0, 4.0, 4.0, 2.0, 2.0, 6.0])
    assert harness.local_minima(values, losses) == [1.0, 4.0]


def test_check_elbo_scan():
    grid = harness.scan_grid(-5.0, 5.0, 0.1)
    good = harness.ScanResult("sigma", grid, (np.abs(grid) - 3.0) ** 2)
    assert all(c.passed for c in harness.check_elbo_scan(good))

    lopsided = harness.ScanResult("sigma", grid, (np.abs(grid) - 3.0) ** 2 + 0.5 * grid)
    assert not all(c.passed for c in harness.check_elbo_scan(lopsided))

    single = harness.ScanResult("sigma", grid, (grid - 3.0) ** 2)
    assert not harness.check_elbo_scan(single)[0].passed


def test_check_meta_train():
    good = [TraceEntry(0, 5.0, 0.0), TraceEntry(1, 4.0, 0.5), TraceEntry(2, 3.5, 0.5)]
    assert all(c.passed for c in harness.check_meta_train(good))
    assert not harness.check_meta_train([TraceEntry(0, 1.0, 0.0)])[1].passed


def test_check_meta_test():
    ok = harness.TaskReport(0.9, 0.005, 0.95, [True, True], [30, 40])
    slow = harness.TaskReport(1.3, 0.005, 0.95, [True, False], [30, 60])
    assert all(c.passed for c in harness.check_meta_test([ok], max_steps=60))
    assert not harness.check_meta_test([slow], max_steps=60)[2].passed


def test_check_race():
    adaptive = harness.RmseReport.from_values([0.01, 0.02, 0.03])
    baseline = harness.RmseReport.from_values([0.1, 0.2, 0.3])
    result = harness.RaceResult(adaptive, baseline, [True, True, True], None)
    assert all(c.passed for c in harness.check_race(result))
    swapped = harness.RaceResult(baseline, adaptive, [True, False, True], None)
    assert not any(c.passed for c in harness.check_race(swapped))


def test_grip_report_and_check():
    L = 10.0
    log = TrajectoryLog(("X", "Y", "psi", "v_x", "v_y", "omega"), ("throttle", "steer"),
                        ("front", "rear"))
    s_values = np.arange(0.5, 20.0, 1.0)
    for s in s_values:
        lap_two_second_half = s >= 15.0
        error = 0.01 if lap_two_second_half else (0.1 if 5.0 <= s < 10.0 else 0.0)
        log.info.append({"s": float(s), "e_lat": 0.05})
        log.predictions.append([error, error])
        log.truths.append([0.0, 0.0])
    log.metadata["progress"] = 20.0

    halves, completed, in_bounds = harness.grip_report(log, L, 0.5, 0.2, laps=2)
    by_key = {(h.lap, h.half): h for h in halves}
    assert by_key[(1, "first")].steps == 5
    assert by_key[(1, "second")].rmse == pytest.approx(0.1)
    assert by_key[(2, "second")].rmse == pytest.approx(0.01)
    assert completed == [True, True]
    assert in_bounds == [True, True]

    result = harness.GripChangeResult(log, halves, completed, in_bounds)
    assert all(c.passed for c in harness.check_grip_change(result))


def test_run_pool_keeps_job_order():
    seen = []
    results = harness.run_pool(
        abs, [-3, 1, -2, 5], workers=2, progress_callback=lambda d, c, t: seen.append((c, t))
    )
    assert results == [3, 1, 2, 5]
    assert seen[-1] == (4, 4)
    assert harness.run_pool(abs, [-1, -2], workers=1) == [1, 2]


def test_write_manifest(tmp_path):
    cfg = ExperimentConfig.load(output_dir=str(tmp_path))
    out = tmp_path / "result.csv"
    out.write_text("a\n")
    path = harness.write_manifest(cfg, tmp_path, "collect", time.perf_counter(), [out], {"k": 1})
    data = json.loads(path.read_text())
    assert data["config_sha256"] == cfg.digest()
    assert data["outputs"] == ["result.csv"]
    assert data["seed"] == 0 and data["k"] == 1
    assert {"metampc", "numpy", "scipy", "python"} <= set(data["versions"])


def test_missing_stages_are_config_errors(tmp_path):
    cfg = small_config(tmp_path, MOUNTAIN_CAR_SMALL)
    with pytest.raises(ConfigError):
        harness.load_tasks(cfg)
    with pytest.raises(ConfigError):
        harness.load_residual(cfg)
    with pytest.raises(ConfigError):
        harness.race(cfg)


def test_mountain_car_pipeline(tmp_path):
    cfg = small_config(tmp_path, MOUNTAIN_CAR_SMALL)
    collected = harness.collect_tasks(cfg)
    tasks = collected.outputs[0].tasks
    assert [t.task_id for t in tasks] == ["task_00", "task_01"]
    assert all(t.size == 6 for t in tasks)
    files = sorted((tmp_path / "collect" / "tasks" / "y").glob("*.csv"))
    assert [f.name for f in files] == ["task_00.csv", "task_01.csv"]

    first = [f.read_bytes() for f in files]
    harness.collect_tasks(cfg)
    assert [f.read_bytes() for f in files] == first

    trained = harness.run_meta_train(cfg)
    assert trained.trace[-1].loss <= trained.trace[0].loss
    assert (tmp_path / "meta_train" / "manifest.json").exists()
    residual = harness.load_residual(cfg)
    assert residual.basis.size == 4
    np.testing.assert_array_equal(residual.posteriors[0].mu_alpha, np.zeros(4))

    reports = harness.meta_test(cfg)
    assert len(reports) == 1 and len(reports[0].reached) == 2
    assert (tmp_path / "meta_test" / "theta_0.9" / "episode_001.csv").exists()
    assert (tmp_path / "meta_test" / "report.csv").exists()


def test_elbo_scan_writes_curve(tmp_path):
    cfg = small_config(tmp_path, MOUNTAIN_CAR_SMALL, "basis.kind=cosine")
    harness.collect_tasks(cfg)
    result = harness.elbo_scan(cfg, "sigma", harness.scan_grid(2.0, 4.0, 0.5))
    lines = result.path.read_text().splitlines()
    assert lines[0] == "value,neg_elbo"
    assert len(lines) == 6
    assert harness.initial_basis(cfg, harness.load_tasks(cfg)).kind == BasisKind.PARAMETRIC_COSINE

    single = harness.elbo_scan(cfg, "sigma", [3.0], samples=50)
    lines = single.path.read_text().splitlines()
    assert lines[0] == "value,neg_elbo,stderr" and len(lines) == 2

    with pytest.raises(ConfigError):
        harness.elbo_scan(cfg, "Z[0]", [0.0])


def test_meta_test_needs_mountain_car(tmp_path):
    cfg = small_config(tmp_path, CAR_SMALL)
    with pytest.raises(ConfigError):
        harness.meta_test(cfg)


def test_car_pipeline(tmp_path):
    cfg = small_config(tmp_path, CAR_SMALL)
    collected = harness.collect_tasks(cfg)
    assert [len(d.tasks) for d in collected.outputs] == [2, 2]
    assert all(t.size == 5 for d in collected.outputs for t in d.tasks)
    assert (tmp_path / "collect" / "tasks" / "rear" / "task_01.csv").exists()

    harness.run_meta_train(cfg)
    residual = harness.load_residual(cfg)
    assert residual.output_names == ("front", "rear")

    result = harness.race(cfg)
    assert len(result.adaptive.values) == 2
    assert (tmp_path / "race" / "logs" / "r001_ground_truth.csv").exists()
    summary = json.loads((tmp_path / "race" / "summary.json").read_text())
    assert summary["realizations"] == 2

    grip = harness.grip_change_run(cfg, residual, factor=0.8)
    assert len(grip.halves) == 4
    assert (tmp_path / "grip_change" / "report.csv").exists()


def test_collection_stops_at_goal(tmp_path):
    # every state at or right of -0.6 counts as arrived
    cfg = small_config(tmp_path, MOUNTAIN_CAR_SMALL, "mountain_car.goal=-0.6")
    tasks = harness.collect_tasks(cfg).outputs[0].tasks
    assert all(t.size == 1 for t in tasks)


def test_meta_train_manifest_records_subsampled_rows(tmp_path):
    cfg = small_config(tmp_path, MOUNTAIN_CAR_SMALL, "meta_train.max_task_points=3")
    harness.collect_tasks(cfg)
    trained = harness.run_meta_train(cfg)
    manifest = json.loads(trained.manifest.read_text())
    kept = manifest["subsampled_rows"]["y"]
    assert sorted(kept) == ["task_00", "task_01"]
    for rows in kept.values():
        assert len(rows) == 3 and rows == sorted(rows)
        assert all(0 <= r < 6 for r in rows)

    uncapped = small_config(tmp_path / "full", MOUNTAIN_CAR_SMALL)
    harness.collect_tasks(uncapped)
    manifest = json.loads(harness.run_meta_train(uncapped).manifest.read_text())
    assert manifest["subsampled_rows"] == {}
