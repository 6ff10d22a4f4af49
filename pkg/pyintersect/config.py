"""Configuration of simulator, training and experiments.

Every tunable is addressed by a flat dotted key (`train.epsilon`, `sim.idm.min_gap`, ...). A YAML config file may use
either flat keys or nested mappings; flags given on the command line override values from the file. Defaults are the
values reported for the original experiments wherever those are known.
"""

import logging
import os
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any, Optional, Union, get_args, get_origin, get_type_hints

import yaml

from pyintersect.categories import BufferKind, ExperimentType, ScenarioId, TASK_ORDER

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PYINTERSECT_OUTPUT_ROOT"
"""Environment variable overriding the default output root directory."""


class ConfigError(Exception):
    """Base class for configuration problems. `key` names the offending key, where there is one."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class MalformedConfigError(ConfigError): pass


class UnknownConfigKeyError(ConfigError): pass


class ConfigRangeError(ConfigError): pass


def _check(ok: bool, key: str, message: str):
    if not ok:
        raise ConfigRangeError(f"{key}: {message}", key=key)


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")


@dataclass
class IdmParams:
    """Parameters of the intelligent driver model."""

    desired_speed: float = 20.0
    """v0, the speed approached on a free road."""
    max_accel: float = 2.0
    """a, the maximum acceleration."""
    comfortable_decel: float = 2.0
    """b, the comfortable deceleration."""
    min_gap: float = 2.0
    """s0, the bumper-to-bumper gap kept at standstill."""
    headway_time: float = 1.0
    """T, the desired time headway."""
    emergency_decel: float = 9.0
    """Magnitude of the strongest deceleration the model will ever command."""

    def validate(self, prefix: str = "sim.idm"):
        for f in fields(self):
            _check(getattr(self, f.name) > 0, f"{prefix}.{f.name}", "must be strictly positive")


@dataclass
class SimConfig:
    """Settings of the traffic simulator."""

    dt: float = 0.2
    """Length of one simulator step."""
    max_steps: int = 100
    """Episode length cap. `max_steps * dt` must equal 20 seconds."""
    depart_probability: float = 0.2
    """Probability per second and per lane that a vehicle is emitted."""
    idm: IdmParams = field(default_factory=IdmParams)
    krauss_sigma: float = 0.5
    """Driver imperfection of the Krauss model, in [0, 1]."""
    speed_deviation: float = 0.1
    """Relative standard deviation of traffic drivers' desired speeds."""
    warmup_seconds: float = 10.0
    """Traffic-only simulated time before the episode clock starts."""
    brake_threshold: float = 0.5
    """A traffic vehicle counts as braking when it is commanded to decelerate harder than this (m/s²)."""
    vehicle_length: float = 5.0
    vehicle_width: float = 2.0

    @property
    def spawn_probability_per_step(self) -> float:
        """Per-step emission probability equivalent to `depart_probability` per second."""
        return 1.0 - (1.0 - self.depart_probability) ** self.dt

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_seconds / self.dt))

    def validate(self, prefix: str = "sim"):
        _check(self.dt > 0, f"{prefix}.dt", "must be strictly positive")
        _check(self.max_steps >= 1, f"{prefix}.max_steps", "must be at least 1")
        _check(abs(self.max_steps * self.dt - 20.0) < 1e-9, f"{prefix}.max_steps",
               f"max_steps * dt must equal 20 seconds, not {self.max_steps * self.dt}")
        _check(0.0 <= self.depart_probability <= 1.0, f"{prefix}.depart_probability", "must be in [0, 1]")
        _check(0.0 <= self.krauss_sigma <= 1.0, f"{prefix}.krauss_sigma", "must be in [0, 1]")
        _check(0.0 <= self.speed_deviation < 0.5, f"{prefix}.speed_deviation", "must be in [0, 0.5)")
        _check(self.warmup_seconds >= 0, f"{prefix}.warmup_seconds", "must not be negative")
        _check(self.brake_threshold >= 0, f"{prefix}.brake_threshold", "must not be negative")
        _check(self.vehicle_length > 0, f"{prefix}.vehicle_length", "must be strictly positive")
        _check(self.vehicle_width > 0, f"{prefix}.vehicle_width", "must be strictly positive")
        self.idm.validate(f"{prefix}.idm")


@dataclass
class TrainConfig:
    """Settings of DQN training."""

    epsilon: float = 0.05
    gamma: float = 0.95
    batch_size: int = 60
    iterations: int = 2000
    """Training iterations; one iteration is one episode followed by one batch update."""
    learning_rate: float = 1e-3
    rmsprop_decay: float = 0.95
    rmsprop_epsilon: float = 1e-6
    leaky_slope: float = 0.01
    buffer: BufferKind = BufferKind.FIFO
    buffer_capacity: int = 1000
    """Capacity of the FIFO or selective-only buffer."""
    selective_capacity: int = 900
    """Capacity of the selective part of a split buffer."""
    fifo_capacity: int = 100
    """Capacity of the FIFO part of a split buffer."""
    snapshot_every: int = 250
    """Iterations between learning-curve evaluations."""
    eval_episodes: int = 100
    """Episodes per learning-curve evaluation."""
    seed: int = field(default=0, metadata={"config": False})
    """Seed of one training run. Derived from the run's master seed, so not a config key."""

    def validate(self, prefix: str = "train"):
        _check(0.0 <= self.epsilon <= 1.0, f"{prefix}.epsilon", "must be in [0, 1]")
        _check(0.0 < self.gamma <= 1.0, f"{prefix}.gamma", "must be in (0, 1]")
        _check(self.batch_size >= 1, f"{prefix}.batch_size", "must be at least 1")
        _check(self.iterations >= 0, f"{prefix}.iterations", "must not be negative")
        _check(self.learning_rate > 0, f"{prefix}.learning_rate", "must be strictly positive")
        _check(0.0 <= self.rmsprop_decay < 1.0, f"{prefix}.rmsprop_decay", "must be in [0, 1)")
        _check(self.rmsprop_epsilon > 0, f"{prefix}.rmsprop_epsilon", "must be strictly positive")
        _check(self.leaky_slope > 0, f"{prefix}.leaky_slope", "must be strictly positive")
        _check(self.snapshot_every >= 1, f"{prefix}.snapshot_every", "must be at least 1")
        _check(self.eval_episodes >= 1, f"{prefix}.eval_episodes", "must be at least 1")
        if self.buffer == BufferKind.SPLIT:
            _check(self.selective_capacity >= 1, f"{prefix}.selective_capacity", "must be at least 1")
            _check(self.fifo_capacity >= 1, f"{prefix}.fifo_capacity", "must be at least 1")
            _check(self.batch_size % 2 == 0, f"{prefix}.batch_size", "must be even for a split buffer")
            _check(self.batch_size // 2 <= min(self.selective_capacity, self.fifo_capacity), f"{prefix}.batch_size",
                   "half a batch must fit in each part of a split buffer")
        else:
            _check(self.buffer_capacity >= 1, f"{prefix}.buffer_capacity", "must be at least 1")
            _check(self.batch_size <= self.buffer_capacity, f"{prefix}.batch_size",
                   "must not exceed the buffer capacity")


@dataclass
class TransferConfig:
    """Settings of the fine-tuning and reverse-transfer experiments."""

    pretrain_iterations: int = 2000
    finetune_iterations: int = 5000
    source: Optional[ScenarioId] = None
    """Source task. When unset, every ordered pair of the configured scenarios is run."""
    target: Optional[ScenarioId] = None
    keep_buffer: bool = True
    """Whether the fine-tuned network starts with the source run's replay buffer (optimizer state is always reset)."""
    eval_episodes: int = 500
    """Episodes behind each reported evaluation."""

    def validate(self, prefix: str = "transfer"):
        _check(self.pretrain_iterations >= 0, f"{prefix}.pretrain_iterations", "must not be negative")
        _check(self.finetune_iterations >= 0, f"{prefix}.finetune_iterations", "must not be negative")
        _check(self.eval_episodes >= 1, f"{prefix}.eval_episodes", "must be at least 1")
        _check((self.source is None) == (self.target is None), f"{prefix}.source",
               "source and target must be given together")


@dataclass
class LifelongConfig:
    """Settings of the sequential (lifelong) learning experiment."""

    order: tuple[ScenarioId, ...] = (ScenarioId.FORWARD, ScenarioId.RIGHT, ScenarioId.LEFT, ScenarioId.LEFT2,
                                     ScenarioId.CHALLENGE)
    iterations_per_task: int = 2000
    eval_every: int = 250
    """Iterations between test sweeps over all five tasks."""
    eval_episodes: int = 100

    def validate(self, prefix: str = "lifelong"):
        _check(len(self.order) >= 1, f"{prefix}.order", "must name at least one task")
        _check(self.iterations_per_task >= 0, f"{prefix}.iterations_per_task", "must not be negative")
        _check(self.eval_every >= 1, f"{prefix}.eval_every", "must be at least 1")
        _check(self.eval_episodes >= 1, f"{prefix}.eval_episodes", "must be at least 1")


@dataclass
class RunConfig:
    """The complete configuration of one command-line run."""

    experiment: ExperimentType = field(default=ExperimentType.TRAIN, metadata={"config": False})
    scenarios: tuple[ScenarioId, ...] = TASK_ORDER
    """The tasks a run trains on and evaluates. Defaults to all five."""
    seed: int = 0
    """Master seed from which every other seed is derived."""
    seeds: int = 3
    """Number of independent seeds an experiment is repeated over."""
    workers: int = 1
    """Processes used for independent experiment cells."""
    output_dir: str = field(default_factory=default_output_root)
    """Root under which the run directory is created."""
    checkpoint: Optional[str] = None
    """Checkpoint to evaluate, or to start training from."""
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    lifelong: LifelongConfig = field(default_factory=LifelongConfig)
    file_values: dict[str, Any] = field(default_factory=dict, repr=False, metadata={"config": False})
    """Values read from the config file, as given."""
    overrides: dict[str, Any] = field(default_factory=dict, repr=False, metadata={"config": False})
    """Values given as command-line flags, as given."""

    def validate(self):
        _check(len(self.scenarios) >= 1, "scenarios", "must name at least one task")
        _check(len(set(self.scenarios)) == len(self.scenarios), "scenarios", "must not repeat a task")
        _check(self.seeds >= 1, "seeds", "must be at least 1")
        _check(self.workers >= 1, "workers", "must be at least 1")
        self.sim.validate()
        self.train.validate()
        self.transfer.validate()
        self.lifelong.validate()


def _is_config_field(f) -> bool:
    return f.metadata.get("config", True)


def _flatten(d: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    flat = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, f"{key}."))
        else:
            flat[key] = v
    return flat


def config_keys(obj: Any = None, prefix: str = "") -> dict[str, type]:
    """Map every valid dotted key to its declared type."""
    obj = obj if obj is not None else RunConfig()
    hints = get_type_hints(type(obj))
    keys = {}
    for f in fields(obj):
        if not _is_config_field(f):
            continue
        value = getattr(obj, f.name)
        if is_dataclass(value):
            keys.update(config_keys(value, f"{prefix}{f.name}."))
        else:
            keys[f"{prefix}{f.name}"] = hints[f.name]
    return keys


def _parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "yes", "1", "on"):
        return True
    if text in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"cannot convert '{value}' to a boolean")


def _convert(value: Any, type_: Any) -> Any:
    """Convert a value read from YAML or from a flag to the declared type of its key."""
    origin = get_origin(type_)
    if origin is Union:
        inner = [a for a in get_args(type_) if a is not type(None)][0]
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
            return None
        return _convert(value, inner)
    if origin is tuple:
        inner = get_args(type_)[0]
        items = value.split(",") if isinstance(value, str) else list(value)
        return tuple(_convert(i, inner) for i in items if not (isinstance(i, str) and not i.strip()))
    if type_ is ScenarioId:
        return ScenarioId.parse(str(value))
    if type_ is bool:
        return _parse_bool(value)
    if type_ is int:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ValueError(f"expected an integer, got '{value}'")
        return int(value)
    if type_ is float:
        if isinstance(value, bool):
            raise ValueError(f"expected a number, got '{value}'")
        return float(value)
    if isinstance(type_, type) and issubclass(type_, (BufferKind, ExperimentType)):
        return type_(str(value).strip().lower())
    return str(value)


def assign(cfg: RunConfig, key: str, value: Any):
    """Set the value of one dotted key on `cfg`, converting it to the key's declared type."""
    keys = config_keys(cfg)
    if key not in keys:
        raise UnknownConfigKeyError(f"Unknown config key `{key}`.", key=key)
    try:
        converted = _convert(value, keys[key])
    except ValueError as e:
        raise ConfigRangeError(f"{key}: {e}", key=key)
    *parents, name = key.split(".")
    target = cfg
    for p in parents:
        target = getattr(target, p)
    setattr(target, name, converted)


def read_config_file(path: str) -> dict[str, Any]:
    """Read a YAML config file into a flat dict of dotted keys.

    :param path: Path of the file.
    """
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise MalformedConfigError(f"Config file {path} is not valid YAML: {e}")
    except OSError as e:
        raise MalformedConfigError(f"Cannot read config file {path}: {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise MalformedConfigError(f"Config file {path} must hold a mapping of keys to values.")
    return _flatten(data)


def parse_config(
        path: Optional[str] = None,
        overrides: Optional[dict[str, Any]] = None,
        experiment: ExperimentType = ExperimentType.TRAIN
) -> RunConfig:
    """Build and validate a :class:`RunConfig`.

    :param path: Optional YAML config file.
    :param overrides: Dotted keys given as command-line flags. These win over values from the file.
    :param experiment: The experiment the configuration is for.
    """
    file_values = read_config_file(path) if path else {}
    overrides = dict(overrides or {})
    cfg = RunConfig(experiment=experiment)
    for key, value in file_values.items():
        assign(cfg, key, value)
    for key, value in overrides.items():
        if key in file_values:
            logger.debug(f"Flag value {key}={value} overrides file value {file_values[key]}.")
        assign(cfg, key, value)
    cfg.file_values = file_values
    cfg.overrides = overrides
    cfg.validate()
    return cfg


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, (BufferKind, ExperimentType, ScenarioId)):
        return str(value)
    return value


def to_flat_dict(cfg: RunConfig) -> dict[str, Any]:
    """The resolved value of every config key, as plain YAML/JSON-friendly values."""
    out = {}
    for key in config_keys(cfg):
        target = cfg
        for part in key.split("."):
            target = getattr(target, part)
        out[key] = _plain(target)
    return out


def dump_config(cfg: RunConfig) -> str:
    """Render the resolved configuration as YAML that :func:`parse_config` accepts back."""
    return yaml.safe_dump(to_flat_dict(cfg), sort_keys=False)
