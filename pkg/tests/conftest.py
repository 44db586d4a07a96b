import numpy as np
import pytest

from metampc.meta import MetaDataset, TaskDataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sine_tasks(rng):
    """Three 1-D regression tasks sharing a sine shape with different amplitudes."""
    tasks = []
    for i, amplitude in enumerate((0.8, 1.0, 1.2)):
        X = rng.uniform(-2.0, 2.0, size=(25, 1))
        y = amplitude * np.sin(2.0 * X[:, 0]) + 0.05 * rng.standard_normal(25)
        tasks.append(TaskDataset(f"task_{i:02d}", X, y))
    return MetaDataset(tuple(tasks), input_dim=1)
