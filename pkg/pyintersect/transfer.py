"""Knowledge-transfer experiments and their evaluation metrics.

Four protocols are implemented:

- direct copy: train one network per task and evaluate each, unmodified, on every task;
- fine-tuning: continue training a source-task network on a target task, alongside a freshly initialised network
  trained on the target task for comparison;
- reverse transfer: evaluate the fine-tuned network back on its source task and compare it with a network trained on the
  target task only (empirical retention);
- lifelong learning: train a single network on a sequence of tasks, testing it on all five tasks at regular intervals.

Evaluation always runs on a frozen copy of a network and its own random number generators, so it never affects a
training run. Every seed is derived from the run's master seed, so an experiment is reproducible from its
configuration alone.
"""

import copy
import logging
import multiprocessing as mp
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Optional, Sequence, TypeVar

import numpy as np
import pandas as pd

from pyintersect.agent import (Trainer, TrainResult, episode_seed, execute_action, init_params, run_training,
                               select_action, train)
from pyintersect.categories import Outcome, ScenarioId, TASK_ORDER
from pyintersect.config import RunConfig, SimConfig, TrainConfig
from pyintersect.encoder import encode
from pyintersect.model import EpisodeRecord
from pyintersect.network import QNetwork, q_values
from pyintersect.replay import Buffer
from pyintersect.sim import IntersectionEnv

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# Seed streams, so that no two purposes ever share a seed.
_TRAIN, _FINE_TUNE, _EVAL, _LIFELONG = range(4)

METRICS = ("pct_success", "pct_collision", "avg_time_success", "avg_brake_time")
"""Metric names, in the order they are reported."""

MATRIX_COLUMNS = ["train_task", "eval_task", "metric", "value", "seed"]
CURVE_COLUMNS = ["experiment_id", "iteration", "task", "success_rate", "stddev"]
RETENTION_COLUMNS = ["source", "target", "retention_points", "seed"]
LEARNING_CURVE_COLUMNS = ["iteration", "mean_loss", "eval_success_rate", "eval_collision_rate"]
"""Columns of `learning_curve-<task>-seed<k>.csv`. `mean_loss` is left empty for a snapshot with no batch update since
the previous one, which is always the case at iteration 0."""
REPORT_COLUMNS = ["task", "metric", "value"]


def run_seeds(cfg: RunConfig) -> list[int]:
    """One seed per repetition of an experiment, derived from the master seed."""
    return [episode_seed(cfg.seed, r) for r in range(cfg.seeds)]


def task_index(task: ScenarioId) -> int:
    return TASK_ORDER.index(task)


def train_seed(run_seed: int, task: ScenarioId) -> int:
    """Seed of the from-scratch training run on `task`. Also determines that run's initial network."""
    return episode_seed(run_seed, _TRAIN, task_index(task))


def eval_seed(run_seed: int, task: ScenarioId) -> int:
    """Seed of evaluations on `task`. All networks evaluated on a task within one repetition see the same episodes."""
    return episode_seed(run_seed, _EVAL, task_index(task))


@dataclass(slots=True, frozen=True)
class EvaluationReport:
    """Aggregate performance of a network on one task."""

    task: ScenarioId
    n_episodes: int
    pct_success: float
    pct_collision: float
    pct_timeout: float
    avg_time_success: Optional[float]
    """Mean time to the goal over successful episodes, or None if there were none."""
    avg_brake_time: float
    """Mean over episodes of the total time traffic vehicles spent braking."""

    def metrics(self) -> dict[str, float]:
        """The reported metrics by name. An undefined metric is left out."""
        values = {
            "pct_success": self.pct_success,
            "pct_collision": self.pct_collision,
            "avg_time_success": self.avg_time_success,
            "avg_brake_time": self.avg_brake_time,
        }
        return {k: v for k, v in values.items() if v is not None}

    @classmethod
    def from_records(cls, task: ScenarioId, records: Sequence[EpisodeRecord]) -> 'EvaluationReport':
        n = len(records)
        if n == 0:
            raise ValueError("Cannot aggregate an evaluation of zero episodes.")
        successes = [r for r in records if r.outcome == Outcome.SUCCESS]
        collisions = sum(1 for r in records if r.outcome == Outcome.COLLISION)
        timeouts = n - len(successes) - collisions
        avg_time = float(np.mean([r.elapsed_time for r in successes])) if successes else None
        if avg_time is None:
            logger.warning(f"No successful episode out of {n} on {task}; average time to success is undefined.")
        return cls(
            task=task,
            n_episodes=n,
            pct_success=100.0 * len(successes) / n,
            pct_collision=100.0 * collisions / n,
            pct_timeout=100.0 * timeouts / n,
            avg_time_success=avg_time,
            avg_brake_time=float(np.mean([r.total_other_brake_time for r in records]))
        )


def greedy_episode(params: QNetwork, task: ScenarioId, sim_cfg: SimConfig, seed: int) -> EpisodeRecord:
    """Run one episode following the network's greedy policy."""
    env = IntersectionEnv(task, sim_cfg, seed)
    no_exploration = np.random.default_rng(0)
    while not env.done:
        action = select_action(q_values(params, encode(env.state)), 0.0, no_exploration)
        execute_action(env, action)
    return env.record()


def evaluate(
        params: QNetwork,
        task: ScenarioId,
        n_episodes: int,
        seed: int,
        sim_cfg: Optional[SimConfig] = None
) -> EvaluationReport:
    """Evaluate the greedy policy of `params` on `task`.

    Episode `k` is seeded from `(seed, k)`, so the same seed always produces the same traffic. `params` is only read.

    :param params: The network.
    :param task: The task to evaluate on.
    :param n_episodes: Episodes to run; at least 1.
    :param seed: Evaluation seed.
    :param sim_cfg: Simulator settings. Defaults to :class:`SimConfig` defaults.
    """
    if n_episodes < 1:
        raise ValueError(f"An evaluation needs at least one episode, not {n_episodes}.")
    sim_cfg = sim_cfg or SimConfig()
    records = [greedy_episode(params, task, sim_cfg, episode_seed(seed, k)) for k in range(n_episodes)]
    report = EvaluationReport.from_records(task, records)
    logger.debug(f"Evaluated on {task}: {report.pct_success:.1f}% success, {report.pct_collision:.1f}% collision "
                 f"over {n_episodes} episodes.")
    return report


def map_cells(fn: Callable[[T], R], cells: Iterable[T], workers: int = 1) -> list[R]:
    """Apply `fn` to independent experiment cells, in a pool of `workers` processes if more than one.

    Results are returned in the order of `cells`.
    """
    cells = list(cells)
    if workers <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with mp.get_context("spawn").Pool(processes=min(workers, len(cells))) as pool:
        return pool.map(fn, cells)


@dataclass(slots=True)
class CurvePoint:
    """One point of a learning curve: a snapshot and how it performed on the task being trained."""

    iteration: int
    mean_loss: Optional[float]
    """None if no batch update happened since the previous snapshot."""
    eval_success_rate: float
    eval_collision_rate: float


def train_with_curve(
        task: ScenarioId,
        train_cfg: TrainConfig,
        sim_cfg: SimConfig,
        eval_episodes: int,
        evaluation_seed: int,
        initial_params: Optional[QNetwork] = None,
        buffer: Optional[Buffer] = None
) -> tuple[TrainResult, list[CurvePoint]]:
    """:func:`~pyintersect.agent.train`, evaluating every snapshot on the training task."""
    evaluations = {}

    def on_snapshot(iteration: int, snapshot: QNetwork):
        evaluations[iteration] = evaluate(snapshot, task, eval_episodes, evaluation_seed, sim_cfg)

    result = train(task, train_cfg, sim_cfg, initial_params=initial_params, buffer=buffer, on_snapshot=on_snapshot)
    curve = [CurvePoint(
        iteration=s.iteration,
        mean_loss=s.mean_loss,
        eval_success_rate=evaluations[s.iteration].pct_success / 100.0,
        eval_collision_rate=evaluations[s.iteration].pct_collision / 100.0
    ) for s in result.snapshots]
    return result, curve


@dataclass(slots=True)
class TrainedTask:
    task: ScenarioId
    seed: int
    result: TrainResult
    curve: list[CurvePoint]


def _train_task_cell(cell: tuple[ScenarioId, int, int, RunConfig, Optional[QNetwork]]) -> TrainedTask:
    task, run_seed, iterations, cfg, initial_params = cell
    seed = train_seed(run_seed, task)
    train_cfg = replace(cfg.train, iterations=iterations, seed=seed)
    result, curve = train_with_curve(task, train_cfg, cfg.sim, cfg.train.eval_episodes, eval_seed(run_seed, task),
                                     initial_params=initial_params)
    return TrainedTask(task=task, seed=seed, result=result, curve=curve)


def pretrain_tasks(
        cfg: RunConfig,
        run_seed: int,
        iterations: int,
        tasks: Optional[Sequence[ScenarioId]] = None,
        initial_params: Optional[QNetwork] = None
) -> dict[ScenarioId, TrainedTask]:
    """Train one network on each task, in parallel when `cfg.workers > 1`.

    :param cfg: Run configuration.
    :param run_seed: Seed of this repetition.
    :param iterations: Training iterations per task.
    :param tasks: Tasks to train on. Defaults to `cfg.scenarios`.
    :param initial_params: Network every run starts from. Defaults to a fresh network per task.
    """
    tasks = tuple(tasks or cfg.scenarios)
    cells = [(task, run_seed, iterations, cfg, initial_params) for task in tasks]
    return {t.task: t for t in map_cells(_train_task_cell, cells, cfg.workers)}


@dataclass(slots=True)
class TransferMatrix:
    """Evaluation of every trained network on every task."""

    tasks: tuple[ScenarioId, ...]
    reports: dict[tuple[ScenarioId, ScenarioId], EvaluationReport] = field(default_factory=dict)
    """Reports keyed by (training task, evaluation task)."""

    def validate(self):
        missing = [(a, b) for a in self.tasks for b in self.tasks if (a, b) not in self.reports]
        if missing:
            raise ValueError(f"Transfer matrix is missing {len(missing)} cells, eg {missing[0]}.")

    def success(self, train_task: ScenarioId, eval_task: ScenarioId) -> float:
        return self.reports[(train_task, eval_task)].pct_success

    def rows(self, seed: int) -> list[dict[str, Any]]:
        """Rows of `matrix.csv`, in task order then metric order."""
        rows = []
        for a in self.tasks:
            for b in self.tasks:
                for metric, value in self.reports[(a, b)].metrics().items():
                    rows.append({"train_task": str(a), "eval_task": str(b), "metric": metric, "value": value,
                                 "seed": seed})
        return rows


@dataclass(slots=True)
class DirectCopyResult:
    seed: int
    matrix: TransferMatrix
    trained: dict[ScenarioId, TrainedTask]


def direct_copy_experiment(cfg: RunConfig, run_seed: int) -> DirectCopyResult:
    """Train a network on each configured task, then evaluate every network on every task.

    :param cfg: Run configuration; `cfg.train.iterations` sets the training length and `cfg.transfer.eval_episodes`
        the episodes behind each cell.
    :param run_seed: Seed of this repetition.
    """
    tasks = tuple(cfg.scenarios)
    trained = pretrain_tasks(cfg, run_seed, cfg.train.iterations, tasks)
    matrix = TransferMatrix(tasks=tasks)
    for a in tasks:
        for b in tasks:
            matrix.reports[(a, b)] = evaluate(trained[a].result.params, b, cfg.transfer.eval_episodes,
                                              eval_seed(run_seed, b), cfg.sim)
        logger.info(f"Direct copy from {a}: " + ", ".join(f"{b} {matrix.success(a, b):.1f}%" for b in tasks))
    matrix.validate()
    return DirectCopyResult(seed=run_seed, matrix=matrix, trained=trained)


@dataclass(slots=True)
class FineTuneResult:
    source: ScenarioId
    target: ScenarioId
    seed: int
    source_params: QNetwork
    params: QNetwork
    """The fine-tuned network."""
    pretrained_curve: list[CurvePoint]
    """Learning curve on the target task starting from the source network."""
    fresh_curve: list[CurvePoint]
    """Learning curve on the target task starting from a fresh network."""

    @property
    def jumpstart(self) -> float:
        """Difference in success rate between the two curves' first points."""
        return self.pretrained_curve[0].eval_success_rate - self.fresh_curve[0].eval_success_rate

    @property
    def asymptote_gain(self) -> float:
        """Difference in success rate between the two curves' last points."""
        return self.pretrained_curve[-1].eval_success_rate - self.fresh_curve[-1].eval_success_rate


def fine_tune_experiment(
        source: ScenarioId,
        target: ScenarioId,
        cfg: RunConfig,
        run_seed: int,
        pretrained: Optional[TrainedTask] = None
) -> FineTuneResult:
    """Fine-tune a source-task network on a target task, and train a fresh network on the target task alongside it.

    The fresh network starts from the same initial weights the source network started from, so with no pretraining the
    two curves coincide. The optimizer state is reset at the switch; the source run's replay buffer is carried over
    when `cfg.transfer.keep_buffer` is set.

    :param source: Source task. May equal `target`, as a control.
    :param target: Target task.
    :param cfg: Run configuration (`transfer.pretrain_iterations`, `transfer.finetune_iterations`, ...).
    :param run_seed: Seed of this repetition.
    :param pretrained: The source network, if already trained with :func:`pretrain_tasks` for this repetition.
    """
    t = cfg.transfer
    if pretrained is None:
        pretrained = pretrain_tasks(cfg, run_seed, t.pretrain_iterations, (source,))[source]
    ft_cfg = replace(cfg.train, iterations=t.finetune_iterations,
                     seed=episode_seed(run_seed, _FINE_TUNE, task_index(source), task_index(target)))
    evaluation_seed = eval_seed(run_seed, target)
    buffer = copy.deepcopy(pretrained.result.buffer) if t.keep_buffer else None
    logger.info(f"Fine-tuning {source} -> {target} for {t.finetune_iterations} iterations.")
    tuned, pretrained_curve = train_with_curve(target, ft_cfg, cfg.sim, cfg.train.eval_episodes, evaluation_seed,
                                               initial_params=pretrained.result.params, buffer=buffer)
    fresh_params = init_params(pretrained.seed, cfg.train.leaky_slope)
    _, fresh_curve = train_with_curve(target, ft_cfg, cfg.sim, cfg.train.eval_episodes, evaluation_seed,
                                      initial_params=fresh_params)
    return FineTuneResult(source=source, target=target, seed=run_seed, source_params=pretrained.result.params,
                          params=tuned.params, pretrained_curve=pretrained_curve, fresh_curve=fresh_curve)


@dataclass(slots=True, frozen=True)
class RetentionEntry:
    source: ScenarioId
    target: ScenarioId
    retention_points: float
    """Success of the fine-tuned network on the source task minus that of the target-only network, in points."""
    seed: int = 0
    fine_tuned_on_source: Optional[EvaluationReport] = None
    baseline_on_source: Optional[EvaluationReport] = None


def reverse_transfer_experiment(
        fine_tuned: FineTuneResult,
        baseline_params: QNetwork,
        cfg: RunConfig
) -> RetentionEntry:
    """Evaluate a fine-tuned network back on its source task and compute its empirical retention.

    :param fine_tuned: A completed fine-tuning run.
    :param baseline_params: A network trained on the target task only (the direct-copy baseline).
    :param cfg: Run configuration; `transfer.eval_episodes` episodes are run for each evaluation.
    """
    source = fine_tuned.source
    seed = eval_seed(fine_tuned.seed, source)
    n = cfg.transfer.eval_episodes
    tuned = evaluate(fine_tuned.params, source, n, seed, cfg.sim)
    baseline = evaluate(baseline_params, source, n, seed, cfg.sim)
    entry = RetentionEntry(source=source, target=fine_tuned.target,
                           retention_points=tuned.pct_success - baseline.pct_success, seed=fine_tuned.seed,
                           fine_tuned_on_source=tuned, baseline_on_source=baseline)
    logger.info(f"Retention {source} -> {fine_tuned.target}: {entry.retention_points:+.1f} points.")
    return entry


def transfer_pairs(cfg: RunConfig) -> list[tuple[ScenarioId, ScenarioId]]:
    """The (source, target) pairs a fine-tuning or reverse-transfer run covers."""
    if cfg.transfer.source is not None:
        return [(cfg.transfer.source, cfg.transfer.target)]
    return [(a, b) for a in cfg.scenarios for b in cfg.scenarios if a != b]


@dataclass(slots=True)
class TransferRun:
    """Fine-tuning and reverse-transfer results of one repetition."""

    seed: int
    fine_tunes: list[FineTuneResult]
    retention: list[RetentionEntry]


def _transfer_cell(cell: tuple[RunConfig, int, bool]) -> TransferRun:
    cfg, run_seed, with_retention = cell
    pairs = transfer_pairs(cfg)
    tasks = sorted({a for a, _ in pairs} | ({b for _, b in pairs} if with_retention else set()), key=task_index)
    serial = replace(cfg, workers=1)
    pretrained = pretrain_tasks(serial, run_seed, cfg.transfer.pretrain_iterations, tasks)
    fine_tunes = [fine_tune_experiment(a, b, serial, run_seed, pretrained[a]) for a, b in pairs]
    retention = []
    if with_retention:
        retention = [reverse_transfer_experiment(ft, pretrained[ft.target].result.params, serial) for ft in fine_tunes]
    return TransferRun(seed=run_seed, fine_tunes=fine_tunes, retention=retention)


def transfer_runs(cfg: RunConfig, with_retention: bool) -> list[TransferRun]:
    """Run the fine-tuning (and optionally reverse-transfer) protocol for every repetition."""
    return map_cells(_transfer_cell, [(cfg, s, with_retention) for s in run_seeds(cfg)], cfg.workers)


@dataclass(slots=True, frozen=True)
class LifelongSchedule:
    entries: tuple[tuple[ScenarioId, int], ...]
    """(task, iterations) blocks, trained in order."""
    eval_cadence: int
    """Iterations between test sweeps."""

    def __post_init__(self):
        if not self.entries:
            raise ValueError("A lifelong schedule needs at least one task.")
        if self.eval_cadence < 1:
            raise ValueError(f"Evaluation cadence must be at least 1, not {self.eval_cadence}.")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> 'LifelongSchedule':
        ll = cfg.lifelong
        return cls(entries=tuple((t, ll.iterations_per_task) for t in ll.order), eval_cadence=ll.eval_every)

    @property
    def total_iterations(self) -> int:
        return sum(n for _, n in self.entries)


@dataclass(slots=True, frozen=True)
class LifelongPoint:
    iteration: int
    training_task: ScenarioId
    """The task being trained when the sweep was taken."""
    task: ScenarioId
    """The task evaluated."""
    success_rate: float


@dataclass(slots=True)
class LifelongResult:
    seed: int
    schedule: LifelongSchedule
    points: list[LifelongPoint]
    params: QNetwork

    def series(self, task: ScenarioId) -> list[LifelongPoint]:
        return [p for p in self.points if p.task == task]

    def peak(self, task: ScenarioId) -> float:
        return max(p.success_rate for p in self.series(task))

    def final(self, task: ScenarioId) -> float:
        return self.series(task)[-1].success_rate


def forgetting(points: Sequence[LifelongPoint]) -> dict[ScenarioId, float]:
    """For each task, the largest drop in success rate from its running peak to any later sweep."""
    drops = {}
    for task in TASK_ORDER:
        peak = None
        worst = 0.0
        for p in (p for p in points if p.task == task):
            peak = p.success_rate if peak is None else max(peak, p.success_rate)
            worst = max(worst, peak - p.success_rate)
        if peak is not None:
            drops[task] = worst
    return drops


def lifelong_experiment(schedule: LifelongSchedule, cfg: RunConfig, run_seed: int) -> LifelongResult:
    """Train one network, with one replay buffer, through every block of `schedule`, sweeping all five tasks every
    `schedule.eval_cadence` iterations and at every block boundary.

    :param schedule: The task blocks and the sweep cadence.
    :param cfg: Run configuration (training and simulator settings, `lifelong.eval_episodes`).
    :param run_seed: Seed of this repetition.
    """
    train_cfg = replace(cfg.train, seed=episode_seed(run_seed, _LIFELONG), snapshot_every=schedule.eval_cadence)
    first_task = schedule.entries[0][0]
    trainer = Trainer(first_task, train_cfg, cfg.sim)
    points = []
    swept = set()

    def sweep(iteration: int, snapshot: QNetwork):
        if iteration in swept:
            return
        swept.add(iteration)
        for task in TASK_ORDER:
            report = evaluate(snapshot, task, cfg.lifelong.eval_episodes, eval_seed(run_seed, task), cfg.sim)
            points.append(LifelongPoint(iteration=iteration, training_task=trainer.task, task=task,
                                        success_rate=report.pct_success / 100.0))
        logger.info(f"Lifelong sweep at iteration {iteration} (training {trainer.task}): " +
                    ", ".join(f"{p.task} {p.success_rate:.2f}" for p in points[-len(TASK_ORDER):]))

    offset = 0
    for task, iterations in schedule.entries:
        if task != trainer.task:
            trainer.set_task(task)
        run_training(trainer, iterations, on_snapshot=sweep, start_iteration=offset)
        offset += iterations
    return LifelongResult(seed=run_seed, schedule=schedule, points=points, params=trainer.params)


def _lifelong_cell(cell: tuple[RunConfig, int]) -> LifelongResult:
    cfg, run_seed = cell
    return lifelong_experiment(LifelongSchedule.from_config(cfg), cfg, run_seed)


def lifelong_runs(cfg: RunConfig) -> list[LifelongResult]:
    return map_cells(_lifelong_cell, [(cfg, s) for s in run_seeds(cfg)], cfg.workers)


def matrix_frame(results: Iterable[DirectCopyResult]) -> pd.DataFrame:
    rows = [row for r in results for row in r.matrix.rows(r.seed)]
    return pd.DataFrame(rows, columns=MATRIX_COLUMNS)


def retention_frame(entries: Iterable[RetentionEntry]) -> pd.DataFrame:
    rows = [{"source": str(e.source), "target": str(e.target), "retention_points": e.retention_points,
             "seed": e.seed} for e in entries]
    return pd.DataFrame(rows, columns=RETENTION_COLUMNS)


def learning_curve_frame(curve: Iterable[CurvePoint]) -> pd.DataFrame:
    rows = [{"iteration": p.iteration, "mean_loss": p.mean_loss, "eval_success_rate": p.eval_success_rate,
             "eval_collision_rate": p.eval_collision_rate} for p in curve]
    return pd.DataFrame(rows, columns=LEARNING_CURVE_COLUMNS)


def report_frame(reports: Iterable[EvaluationReport]) -> pd.DataFrame:
    rows = [{"task": str(r.task), "metric": k, "value": v} for r in reports for k, v in r.metrics().items()]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def curve_frame(samples: Iterable[tuple[str, int, ScenarioId, float]]) -> pd.DataFrame:
    """Aggregate (experiment_id, iteration, task, success_rate) samples over seeds into `curve.csv` rows: mean success
    rate and its standard deviation across seeds (0 for a single seed)."""
    raw = pd.DataFrame(list(samples), columns=["experiment_id", "iteration", "task", "success_rate"])
    raw["task"] = raw["task"].astype(str)
    grouped = raw.groupby(["experiment_id", "iteration", "task"], sort=False)["success_rate"]
    out = grouped.agg(["mean", "std"]).reset_index()
    out = out.rename(columns={"mean": "success_rate", "std": "stddev"})
    out["stddev"] = out["stddev"].fillna(0.0)
    return out[CURVE_COLUMNS]


def fine_tune_samples(runs: Iterable[TransferRun]) -> list[tuple[str, int, ScenarioId, float]]:
    samples = []
    for run in runs:
        for ft in run.fine_tunes:
            for label, curve in (("pretrained", ft.pretrained_curve), ("fresh", ft.fresh_curve)):
                experiment_id = f"fine-tune:{ft.source}:{ft.target}:{label}"
                samples.extend((experiment_id, p.iteration, ft.target, p.eval_success_rate) for p in curve)
    return samples


def lifelong_samples(results: Iterable[LifelongResult]) -> list[tuple[str, int, ScenarioId, float]]:
    return [("lifelong", p.iteration, p.task, p.success_rate) for r in results for p in r.points]
