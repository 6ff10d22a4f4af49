import logging
import os
import shutil
from dataclasses import fields
from typing import Any, Type

from pyintersect.categories import ExperimentType
from pyintersect.config import RunConfig, SimConfig, TrainConfig, parse_config

logger = logging.getLogger(__name__)

TEST_DATA_DIR = os.path.join("test_data")
TEST_RUN_BASE_DIR = os.path.join(TEST_DATA_DIR, "run")

if not os.path.exists(TEST_RUN_BASE_DIR):
    os.makedirs(TEST_RUN_BASE_DIR)


def get_test_run_dir(name: str, clean: bool = True) -> str:
    """Return a directory for a test to write into, emptied first unless `clean` is False."""
    dir_path = os.path.join(TEST_RUN_BASE_DIR, name)
    if clean and os.path.exists(dir_path):
        shutil.rmtree(dir_path)
    if not os.path.exists(dir_path):
        os.makedirs(dir_path)
    return dir_path


def small_train_config(**kwargs) -> TrainConfig:
    """A training configuration small enough for unit tests."""
    values = {"iterations": 4, "batch_size": 8, "snapshot_every": 2}
    values.update(kwargs)
    return TrainConfig(**values)


def quiet_sim_config(**kwargs) -> SimConfig:
    """A simulator configuration with short warm-up, for fast tests."""
    values = {"warmup_seconds": 2.0}
    values.update(kwargs)
    return SimConfig(**values)


def verify_types(val: Any, type_: Type, name: str):
    """Verify that `val` is of type `type_`. If `val` is a dataclass, also check that its fields that have plain class
    annotations hold values of those classes (recursively).

    :param val: Value to check against `type_`.
    :param type_: Expected type of `val`.
    :param name: The variable name of `val`.
    """
    assert isinstance(val, type_), f"{name} should be {type_} but is {val}"
    try:
        for f in fields(val):
            if isinstance(f.type, type):
                verify_types(getattr(val, f.name), f.type, f"{name}.{f.name}")
    except TypeError:
        pass


TINY_OVERRIDES = {
    "scenarios": "Right,Left",
    "seeds": 1,
    "sim.warmup_seconds": 2,
    "train.iterations": 2,
    "train.batch_size": 4,
    "train.snapshot_every": 1,
    "train.eval_episodes": 1,
    "transfer.pretrain_iterations": 1,
    "transfer.finetune_iterations": 2,
    "transfer.eval_episodes": 2,
    "lifelong.order": "Right,Left",
    "lifelong.iterations_per_task": 2,
    "lifelong.eval_every": 1,
    "lifelong.eval_episodes": 1,
}
"""Overrides that make every experiment finish in seconds."""


def tiny_run_config(experiment: ExperimentType = ExperimentType.TRAIN, **overrides) -> RunConfig:
    """A complete run configuration scaled down for tests. Keyword arguments are extra overrides, with `__` standing
    in for `.` in key names (eg `train__buffer="split"`)."""
    values = dict(TINY_OVERRIDES)
    values["output_dir"] = get_test_run_dir(f"runs_{experiment}", clean=False)
    values.update({k.replace("__", "."): v for k, v in overrides.items()})
    return parse_config(overrides=values, experiment=experiment)
