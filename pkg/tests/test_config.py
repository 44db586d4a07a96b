import os

import pytest

from metampc.blr import Adapter
from metampc.config import DEFAULTS, ExperimentConfig, parse_override
from metampc.errors import ConfigError
from metampc.features import BasisKind
from metampc.meta import Optimizer
from metampc.mpc import GoalCost


def test_defaults():
    cfg = ExperimentConfig.load()
    assert cfg.env == "mountain_car"
    assert cfg.seed == 0
    assert cfg.hyper_init().num_inducing == 4
    assert cfg.prior_mean() == "zero"
    assert cfg.adapt_config().method == Adapter.RECURSIVE
    assert cfg.mountain_car_params(0.9).theta1 == 0.9
    assert cfg.d_norm() == (0.192, 0.173)


def test_car_environment_defaults():
    cfg = ExperimentConfig.load(overrides=["experiment.env=car"])
    init = cfg.hyper_init()
    assert init.num_inducing == 14
    assert init.noise_var == pytest.approx(4e-4)
    assert cfg.prior_mean() == "task_average"
    assert cfg.adapt_config().method == Adapter.SGD_MEAN
    assert cfg.grip_schedule().persistent


def test_adapter_override_beats_environment_default():
    cfg = ExperimentConfig.load(overrides=["experiment.env=car", "adapt.method=recursive"])
    assert cfg.adapt_config().method == Adapter.RECURSIVE
    cfg = ExperimentConfig.load(overrides=["adapt.method=none"])
    assert cfg.adapt_config().method == Adapter.NONE


def test_goal_cost_choice():
    assert ExperimentConfig.load().controller_config().goal_cost == GoalCost.QUADRATIC
    cfg = ExperimentConfig.load(overrides=["controller.goal_cost=hinge"])
    assert cfg.controller_config().goal_cost == GoalCost.HINGE
    with pytest.raises(ConfigError):
        ExperimentConfig.load(overrides=["controller.goal_cost=cubic"])


def test_yaml_file_and_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(
        "experiment:\n  seed: 5\n  env: car\nmeta_train:\n  optimizer: adaptive\n"
    )
    cfg = ExperimentConfig.load(path, ["basis.kind=cosine", "mpcc.horizon=12"], seed=9,
                                output_dir=str(tmp_path / "out"))
    assert cfg.seed == 9
    assert cfg.env == "car"
    assert cfg.basis_kind() == BasisKind.PARAMETRIC_COSINE
    assert cfg.meta_train_config().optimizer == Optimizer.ADAPTIVE
    assert cfg.mpcc_config().horizon == 12
    assert cfg.output_dir == tmp_path / "out"


def test_parse_override():
    assert parse_override("a.b=[1, 2]") == {"a": {"b": [1, 2]}}
    assert parse_override("a.b=null") == {"a": {"b": None}}
    with pytest.raises(ConfigError):
        parse_override("a.b")
    with pytest.raises(ConfigError):
        parse_override("seed=1")


@pytest.mark.parametrize(
    "override",
    [
        "experiment.bogus=1",
        "bogus.key=1",
        "experiment.env=boat",
        "experiment.workers=0",
        "experiment.scan_step=0",
        "meta_train.optimizer=newton",
        "adapt.method=magic",
        "meta_train.max_iters=0",
        "track.path=/does/not/exist.csv",
        "mountain_car=3",
    ],
)
def test_invalid_configurations(override):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(overrides=[override])


def test_bad_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(path)


def test_prior_mean_choice():
    cfg = ExperimentConfig.load(overrides=["adapt.prior_mean=median"])
    with pytest.raises(ConfigError):
        cfg.prior_mean()


def test_digest_stable_and_sensitive():
    a = ExperimentConfig.load()
    b = ExperimentConfig.load()
    assert a.digest() == b.digest()
    assert len(a.digest()) == 64
    assert a.with_overrides("experiment.seed=1").digest() != a.digest()


def test_with_overrides_leaves_original():
    cfg = ExperimentConfig.load()
    changed = cfg.with_overrides("experiment.realizations=3")
    assert changed.experiment["realizations"] == 3
    assert cfg.experiment["realizations"] == DEFAULTS["experiment"]["realizations"]


def test_grip_schedule():
    cfg = ExperimentConfig.load(overrides=["experiment.grip_persistent=false"])
    grip = cfg.grip_schedule(0.5)
    assert grip.factor == 0.5 and not grip.persistent
    assert cfg.grip_schedule().factor == pytest.approx(0.64)


def test_workers_default_to_cpu_count():
    assert ExperimentConfig.load().workers == (os.cpu_count() or 1)
    assert ExperimentConfig.load(overrides=["experiment.workers=3"]).workers == 3
