import json

import numpy as np
import pytest

from metampc.blr import Adapter, LinearPosterior
from metampc.envs import CarParams, MountainCarParams, PacejkaParams, pacejka_force
from metampc.features import cosine_basis, diagonal_prior
from metampc.mpc import MountainCarController, MountainCarMpc, ResidualModel, SolverOptions
from metampc.rollout import (
    AdaptConfig,
    Measurement,
    MountainCarPlant,
    RaceCarPlant,
    TrajectoryLog,
    adapt,
    run_closed_loop,
)
from metampc.track import Track

PARAMS = MountainCarParams(theta1=0.9)
CONTROLLER = MountainCarController(horizon=10, solver=SolverOptions(max_iters=5))


def cosine_residual():
    basis = cosine_basis(3.0, PARAMS.sample_time, 0.3, 0.05, 1e-6)
    return ResidualModel(basis, (LinearPosterior.from_prior(diagonal_prior(basis)),))


def run(residual, steps=6, seed=0, adapt_cfg=AdaptConfig(checkpoint_every=2), stop=None):
    return run_closed_loop(
        MountainCarPlant(PARAMS),
        MountainCarMpc(PARAMS, CONTROLLER),
        residual,
        steps,
        np.random.default_rng(seed),
        adapt_cfg,
        stop=stop,
    )


def test_identical_seeds_give_identical_logs():
    a, _ = run(cosine_residual())
    b, _ = run(cosine_residual())
    np.testing.assert_array_equal(np.asarray(a.states), np.asarray(b.states))
    np.testing.assert_array_equal(np.asarray(a.inputs), np.asarray(b.inputs))
    assert a.measurements == b.measurements
    assert a.checkpoints == b.checkpoints


def test_log_contents():
    log, residual = run(cosine_residual())
    assert log.steps == 6
    assert sorted(log.checkpoints) == [0, 2, 4, 6]
    assert np.all(np.abs(np.asarray(log.inputs)) <= PARAMS.input_bound)
    assert log.final_state.shape == (2,)
    assert not log.aborted
    # the measured residual is the slope term plus process noise
    err = np.asarray(log.measurements)[:, 0] - np.asarray(log.truths)[:, 0]
    assert np.max(np.abs(err)) < 5 * PARAMS.process_noise_std


def test_recursive_adaptation_moves_towards_true_weight():
    start = cosine_residual()
    _, adapted = run(start, steps=10)
    post = adapted.posteriors[0]
    assert post.sigma_alpha[0, 0] < start.posteriors[0].sigma_alpha[0, 0]
    assert abs(post.mu_alpha[0] - PARAMS.theta1) < PARAMS.theta1


@pytest.mark.slow
@pytest.mark.parametrize("theta1", [0.65, 0.9, 1.3])
def test_recursive_adaptation_recovers_unseen_weight(theta1):
    params = MountainCarParams(theta1=theta1)
    start = cosine_residual()
    _, adapted = run_closed_loop(
        MountainCarPlant(params),
        MountainCarMpc(params, CONTROLLER),
        start,
        30,
        np.random.default_rng(7),
        AdaptConfig(method=Adapter.RECURSIVE),
    )
    assert abs(adapted.posteriors[0].mu_alpha[0] - theta1) <= 0.05 * theta1


def test_sgd_adaptation_keeps_covariance():
    start = cosine_residual()
    _, adapted = run(start, adapt_cfg=AdaptConfig(method=Adapter.SGD_MEAN))
    np.testing.assert_array_equal(adapted.posteriors[0].sigma_alpha,
                                  start.posteriors[0].sigma_alpha)
    assert adapted.posteriors[0].mu_alpha[0] != 0.0


def test_no_adaptation():
    start = cosine_residual()
    log, adapted = run(start, adapt_cfg=AdaptConfig(method=Adapter.NONE))
    assert adapted is start
    assert all(mu == start.mean_snapshot() for mu in log.checkpoints.values())


def test_without_residual_records_plant_only():
    log, residual = run(None)
    assert residual is None
    assert log.checkpoints == {}
    assert np.all(np.isnan(np.asarray(log.predictions)))


def test_stop_condition():
    log, _ = run(None, steps=20, stop=lambda x: True)
    assert log.steps == 1


def test_steps_must_be_positive():
    with pytest.raises(ValueError):
        run(None, steps=0)


def test_adapt_single_measurement():
    residual = cosine_residual()
    meas = Measurement([np.array([0.0])], [-0.18], [-0.18])
    updated = adapt(residual, meas, AdaptConfig())
    assert updated.posteriors[0].mu_alpha[0] > 0.0


def test_write_and_read_back(tmp_path):
    log, _ = run(cosine_residual())
    log.metadata["seed"] = 0
    sidecar = log.write(tmp_path / "episode.csv")
    header = (tmp_path / "episode.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["t", "p", "v", "u"]
    assert "pred_y" in header and "truth_y" in header

    data = json.loads(sidecar.read_text())
    assert data["steps"] == 6 and data["seed"] == 0
    assert set(data["mu_alpha_checkpoints"]) == {"0", "2", "4", "6"}

    back = TrajectoryLog.read_csv(tmp_path / "episode.csv")
    np.testing.assert_array_equal(np.asarray(back.states), np.asarray(log.states))
    np.testing.assert_array_equal(np.asarray(back.inputs), np.asarray(log.inputs))


def test_read_csv_rejects_other_files(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        TrajectoryLog.read_csv(path)


def test_race_car_plant_measurements(rng):
    track = Track.default()
    tires = PacejkaParams()
    d_norm = (tires.D_f, tires.D_r)
    plant = RaceCarPlant(CarParams(), tires, track, d_norm, measurement_noise_std=0.0)
    x0 = plant.initial_state()
    assert plant.abort_reason(x0) is None

    x1, meas = plant.step(x0, np.array([0.2, 0.1]), rng)
    s_f = meas.inputs[0][0]
    assert s_f == pytest.approx(-0.1)
    expected = pacejka_force(s_f, tires.B_f, tires.C_f, tires.D_f) / d_norm[0]
    assert meas.values[0] == pytest.approx(expected)
    assert x1[0] > x0[0]

    off = x0.copy()
    off[1] -= 1.0
    assert "left the track" in plant.abort_reason(off)
