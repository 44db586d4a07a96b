"""End-to-end reproductions of the experiment thresholds; run with -m slow."""

import numpy as np
import pytest

from metampc import harness
from metampc.blr import Adapter, LinearPosterior, blr_fit, blr_update_recursive
from metampc.config import ExperimentConfig
from metampc.features import WeightPrior
from metampc.gauss import (
    MvNormal,
    expected_gaussian_loglik,
    expected_gaussian_loglik_sampled,
    kl_gaussian,
    kl_gaussian_sampled,
)
from metampc.mpc import OCP, solve_ocp
from metampc.rollout import AdaptConfig

pytestmark = pytest.mark.slow


def all_passed(checks):
    return all(c.passed for c in checks), [c for c in checks if not c.passed]


@pytest.fixture(scope="module")
def mountain_car_run(tmp_path_factory):
    cfg = ExperimentConfig.load(output_dir=str(tmp_path_factory.mktemp("mountain_car")))
    harness.collect_tasks(cfg)
    trained = harness.run_meta_train(cfg)
    return cfg, trained


@pytest.fixture(scope="module")
def car_run(tmp_path_factory):
    cfg = ExperimentConfig.load(
        overrides=["experiment.env=car", "meta_train.holdout_fraction=0.2"],
        output_dir=str(tmp_path_factory.mktemp("car")),
    )
    harness.collect_tasks(cfg)
    trained = harness.run_meta_train(cfg)
    return cfg, trained


def test_elbo_landscape(mountain_car_run):
    cfg, _ = mountain_car_run
    cosine = cfg.with_overrides("basis.kind=cosine")
    result = harness.elbo_scan(cosine, "sigma", harness.scan_grid(-5.0, 5.0, 0.1))
    ok, failed = all_passed(harness.check_elbo_scan(result))
    assert ok, failed


def test_recursive_matches_batch_on_random_streams():
    rng = np.random.default_rng(0)
    for _ in range(100):
        N, E = int(rng.integers(1, 201)), int(rng.integers(1, 21))
        Phi = rng.standard_normal((N, E))
        y = rng.standard_normal(N)
        noise_var = float(rng.uniform(0.05, 2.0))
        A = rng.standard_normal((E, E))
        prior = WeightPrior(np.zeros(E), A @ A.T / E + np.eye(E))
        post = LinearPosterior.from_prior(prior)
        for phi, target in zip(Phi, y):
            post = blr_update_recursive(post, phi, target, noise_var)
        batch = blr_fit(Phi, y, noise_var, prior)
        np.testing.assert_allclose(post.mu_alpha, batch.mu_alpha, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(post.sigma_alpha, batch.sigma_alpha, rtol=1e-8, atol=1e-10)


def test_closed_forms_match_monte_carlo():
    rng = np.random.default_rng(1)
    misses = 0
    for _ in range(100):
        y, mu = rng.standard_normal(2)
        var, noise = rng.uniform(0.01, 1.0, size=2)
        est, se = expected_gaussian_loglik_sampled(y, mu, var, noise, 1_000_000, rng)
        misses += abs(expected_gaussian_loglik(y, mu, var, noise) - est) > 3 * se

        B1, B2 = rng.standard_normal((2, 3, 3))
        q = MvNormal(rng.standard_normal(3), B1 @ B1.T + 0.1 * np.eye(3))
        p = MvNormal(rng.standard_normal(3), B2 @ B2.T + 0.1 * np.eye(3))
        est, se = kl_gaussian_sampled(q, p, 1_000_000, rng)
        misses += abs(kl_gaussian(q, p) - est) > 3 * se
    # 3 standard errors: about 0.3% of 200 comparisons may miss by chance
    assert misses <= 3


def test_meta_test_fit_and_closed_loop(mountain_car_run):
    cfg, trained = mountain_car_run
    assert all_passed(harness.check_meta_train(trained.trace))[0]
    reports = harness.meta_test(cfg)
    ok, failed = all_passed(harness.check_meta_test(reports, max_steps=60))
    assert ok, failed


def test_meta_train_descends_on_car_tasks(car_run):
    _, trained = car_run
    ok, failed = all_passed(harness.check_meta_train(trained.trace))
    assert ok, failed
    sigma_w = np.sqrt(trained.basis.noise_var)
    assert all(row["rmse"] <= 2 * sigma_w for row in trained.holdout)


def test_race_adaptation(car_run):
    cfg, _ = car_run
    result = harness.race(cfg)
    ok, failed = all_passed(harness.check_race(result))
    assert ok, failed


def test_contouring_progress_never_decreases_over_a_lap(tmp_path):
    cfg = ExperimentConfig.load(overrides=["experiment.env=car"], output_dir=str(tmp_path))
    log, _ = harness.race_episode(cfg, None, AdaptConfig(method=Adapter.NONE), 0, laps=1)
    assert log.metadata["laps_completed"] == 1
    s = log.info_column("s")
    assert np.all(np.diff(s) >= 0.0)


def test_grip_change(car_run):
    cfg, _ = car_run
    result = harness.grip_change_run(cfg)
    ok, failed = all_passed(harness.check_grip_change(result))
    assert ok, failed


def test_solver_matches_riccati_on_random_lqr():
    rng = np.random.default_rng(2)
    n, m, N = 4, 2, 20
    for _instance in range(100):
        A = np.eye(n) + 0.1 * rng.standard_normal((n, n))
        B = rng.standard_normal((n, m))
        L = rng.standard_normal((n, n))
        Q = L @ L.T / n + 0.1 * np.eye(n)
        R = np.diag(rng.uniform(0.1, 1.0, size=m))
        Lq, Lr = np.linalg.cholesky(Q).T, np.sqrt(R)

        ocp = OCP(
            horizon=N,
            state_dim=n,
            input_dim=m,
            dynamics=lambda x, u, k, A=A, B=B: x @ A.T + u @ B.T,
            stage_residual=lambda k, x, u, u_prev, Lq=Lq, Lr=Lr: np.concatenate(
                [x @ Lq.T, u @ Lr.T], axis=1
            ),
            terminal_residual=lambda x, Lq=Lq: x @ Lq.T,
            input_lower=np.full(m, -1e6),
            input_upper=np.full(m, 1e6),
        )
        P = Q.copy()
        for _ in range(N):
            K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
            P = Q + A.T @ P @ (A - B @ K)

        x0 = rng.standard_normal(n)
        solution = solve_ocp(ocp, x0)
        expected = -K @ x0
        np.testing.assert_allclose(
            solution.inputs[0], expected, rtol=1e-4, atol=1e-4 * np.abs(expected).max()
        )


def test_reruns_are_byte_identical(tmp_path):
    outputs = []
    for name in ("a", "b"):
        cfg = ExperimentConfig.load(output_dir=str(tmp_path / name))
        harness.collect_tasks(cfg)
        files = sorted((tmp_path / name / "collect" / "tasks" / "y").glob("*.csv"))
        assert len(files) == 7
        assert all(len(f.read_text().splitlines()) - 1 >= 18 for f in files)
        outputs.append([f.read_bytes() for f in files])
    assert outputs[0] == outputs[1]
