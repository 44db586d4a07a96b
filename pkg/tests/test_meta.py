import numpy as np
import pytest

from metampc.errors import DimensionMismatch
from metampc.features import PriorKind, initial_inducing_inputs, nystrom_prior, sor_basis
from metampc.meta import (
    MetaDataset,
    MetaTrainConfig,
    Optimizer,
    TaskDataset,
    cap_task_size,
    elbo_gradient,
    load_meta_dataset,
    meta_train,
    negative_elbo,
    negative_elbo_multi,
    negative_elbo_sampled,
    per_task_posterior,
    save_meta_dataset,
    split_holdout,
    task_average_mean,
    write_loss_trace,
)


def basis_for(data, count=4):
    Z = initial_inducing_inputs(data.pooled_inputs(), count)
    return sor_basis(Z, 0.6, 0.5, 0.01)


def test_task_validation():
    with pytest.raises(DimensionMismatch):
        TaskDataset("t", np.zeros((3, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        TaskDataset("t", np.array([[np.nan]]), np.zeros(1))


def test_tasks_sorted_by_id():
    data = MetaDataset(
        (TaskDataset("b", np.zeros((1, 1)), [0.0]), TaskDataset("a", np.ones((1, 1)), [1.0])),
        input_dim=1,
    )
    assert [t.task_id for t in data.tasks] == ["a", "b"]


def test_csv_roundtrip_preserves_values(tmp_path, sine_tasks):
    paths = save_meta_dataset(sine_tasks, tmp_path / "tasks")
    assert len(paths) == 3
    loaded = load_meta_dataset(tmp_path / "tasks")
    for a, b in zip(loaded.tasks, sine_tasks.tasks):
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)
    assert paths[0].read_text().splitlines()[0] == "x1,y"


def test_load_empty_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_meta_dataset(tmp_path)


def test_empty_task_posterior_is_prior():
    basis = sor_basis([[0.0], [1.0]], 0.5, 1.0, 0.01)
    post = per_task_posterior(basis, TaskDataset("t", np.zeros((0, 1)), np.zeros(0)))
    np.testing.assert_allclose(post.sigma_alpha, nystrom_prior(basis).cov)


def test_negative_elbo_empty_task_is_zero():
    basis = sor_basis([[0.0], [1.0]], 0.5, 1.0, 0.01)
    data = MetaDataset((TaskDataset("t", np.zeros((0, 1)), np.zeros(0)),), input_dim=1)
    assert negative_elbo(basis, data) == 0.0


def test_negative_elbo_order_invariant(sine_tasks):
    basis = basis_for(sine_tasks)
    reversed_data = MetaDataset(tuple(reversed(sine_tasks.tasks)), input_dim=1)
    assert negative_elbo(basis, reversed_data) == negative_elbo(basis, sine_tasks)


def test_negative_elbo_ignores_row_order(sine_tasks, rng):
    basis = basis_for(sine_tasks)
    shuffled = []
    for task in sine_tasks.tasks:
        perm = rng.permutation(task.size)
        shuffled.append(TaskDataset(task.task_id, task.X[perm], task.y[perm]))
    shuffled_data = MetaDataset(tuple(shuffled), input_dim=1)
    assert negative_elbo(basis, shuffled_data) == pytest.approx(
        negative_elbo(basis, sine_tasks), rel=0, abs=1e-9
    )


def test_sorted_rows_is_lexicographic():
    task = TaskDataset("t", np.array([[1.0], [0.0], [1.0]]), [2.0, 5.0, -1.0])
    ordered = task.sorted_rows()
    np.testing.assert_array_equal(ordered.X[:, 0], [0.0, 1.0, 1.0])
    np.testing.assert_array_equal(ordered.y, [5.0, -1.0, 2.0])


def test_negative_elbo_matches_sampling(sine_tasks, rng):
    basis = basis_for(sine_tasks)
    estimate, stderr = negative_elbo_sampled(basis, sine_tasks, 100_000, rng)
    assert abs(negative_elbo(basis, sine_tasks) - estimate) <= 3 * stderr + 1e-6


def test_noise_scan_has_interior_minimum(sine_tasks):
    basis = basis_for(sine_tasks, count=6)
    noise = np.logspace(-6, 2, 17)
    losses = []
    for value in noise:
        losses.append(negative_elbo(sor_basis(basis.inducing_inputs, 0.6, 0.5, value), sine_tasks))
    best = int(np.argmin(losses))
    assert 0 < best < len(noise) - 1


def test_gradient_of_empty_data_is_zero():
    basis = sor_basis([[0.0], [1.0]], 0.5, 1.0, 0.01)
    data = MetaDataset((TaskDataset("t", np.zeros((0, 1)), np.zeros(0)),), input_dim=1)
    np.testing.assert_array_equal(elbo_gradient(basis, data), np.zeros(5))


def test_gradient_at_quadratic_minimum():
    basis = sor_basis([[0.0]], 1.0, 1.0, 1.0)

    def quadratic(b, _data):
        return float(np.sum(b.inducing_inputs ** 2) + b.kernel.log_signal_var ** 2)

    grad = elbo_gradient(basis, None, grad_step=1e-4, loss=quadratic)
    assert np.linalg.norm(grad) <= 10 * 1e-4 ** 2 * 2


def test_meta_train_empty_data_returns_initial_basis():
    basis = sor_basis([[0.0]], 0.5, 1.0, 0.01)
    data = MetaDataset((), input_dim=1)
    out, trace = meta_train(data, MetaTrainConfig(max_iters=5), basis)
    assert out is basis
    assert [e.loss for e in trace] == [0.0]


@pytest.mark.parametrize("optimizer", list(Optimizer))
def test_meta_train_descends(sine_tasks, optimizer):
    basis0 = basis_for(sine_tasks)
    seen = []
    basis, trace = meta_train(
        sine_tasks,
        MetaTrainConfig(max_iters=8, optimizer=optimizer),
        basis0,
        progress_callback=lambda it, loss: seen.append(loss),
    )
    losses = [e.loss for e in trace]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert negative_elbo(basis, sine_tasks) == pytest.approx(losses[-1])
    assert seen == losses[1:]


def test_meta_train_config_validation():
    with pytest.raises(ValueError):
        MetaTrainConfig(max_iters=0)
    with pytest.raises(ValueError):
        MetaTrainConfig(grad_step=0.5)


def test_loss_trace_csv(tmp_path, sine_tasks):
    _, trace = meta_train(sine_tasks, MetaTrainConfig(max_iters=2), basis_for(sine_tasks))
    path = tmp_path / "loss_trace.csv"
    write_loss_trace(trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,loss,step_size"
    assert len(lines) == len(trace) + 1


def test_cap_task_size(sine_tasks, rng):
    capped, kept = cap_task_size(sine_tasks, 10, rng)
    assert all(t.size == 10 for t in capped.tasks)
    assert set(kept) == {"task_00", "task_01", "task_02"}
    assert all(len(idx) == 10 for idx in kept.values())


def test_split_holdout(sine_tasks, rng):
    train, hold = split_holdout(sine_tasks.tasks[0], 0.2, rng)
    assert hold.size == 5 and train.size == 20
    assert hold.task_id == "task_00-holdout"


def test_task_average_mean(sine_tasks):
    basis = sor_basis(initial_inducing_inputs(sine_tasks.pooled_inputs(), 3), 0.6, 0.5, 0.01,
                      prior=PriorKind.DIAGONAL)
    means = [per_task_posterior(basis, t).mu_alpha for t in sine_tasks.tasks]
    np.testing.assert_allclose(task_average_mean(basis, sine_tasks), np.mean(means, axis=0))


def test_negative_elbo_multi_sums_outputs(sine_tasks):
    basis = basis_for(sine_tasks)
    flipped = MetaDataset(
        tuple(TaskDataset(t.task_id, t.X, -2.0 * t.y) for t in sine_tasks.tasks), input_dim=1
    )
    total = negative_elbo_multi(basis, [sine_tasks, flipped])
    assert total == pytest.approx(negative_elbo(basis, sine_tasks) + negative_elbo(basis, flipped))
    assert negative_elbo_multi(basis, []) == 0
