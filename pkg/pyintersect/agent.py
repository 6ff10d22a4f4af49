"""Epsilon-greedy DQN training with dynamic frame skipping and Monte Carlo return targets.

The agent chooses among five macro-actions: go, or wait for 1, 2, 4 or 8 simulator steps. Once an episode has ended,
the full discounted return from each decision point to the end of the episode is computed (discounting per simulator
step, also inside a macro-action) and the decisions are pushed into the replay buffer. There is no bootstrap term and so
no target network.

One training iteration is one completed episode followed by one batch update, which is skipped while the buffer cannot
yet supply a full batch.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from pyintersect.categories import ActionId, EgoCommand, ScenarioId
from pyintersect.config import SimConfig, TrainConfig
from pyintersect.encoder import encode
from pyintersect.model import EpisodeRecord, StepEvents
from pyintersect.network import NetworkParams, QNetwork, RmsPropState, q_values, rmsprop_update
from pyintersect.replay import Batch, Buffer, Experience, make_buffer
from pyintersect.sim import EpisodeTerminatedError, IntersectionEnv

logger = logging.getLogger(__name__)

SnapshotHook = Callable[[int, QNetwork], None]


class TrainingError(Exception):
    pass


class NonFiniteLossError(TrainingError):
    """Raised when a batch update produces a NaN or infinite loss."""
    pass


class IncompleteTrajectoryError(TrainingError):
    """Raised when returns are requested for a trajectory whose episode has not ended."""
    pass


def select_index(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice of an output index.

    One uniform number is always drawn; a second one only when exploring. Ties between maximal Q-values go to the lowest
    index.
    """
    if rng.random() < epsilon:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def select_action(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> ActionId:
    return ActionId.from_index(select_index(q, epsilon, rng))


@dataclass(slots=True, frozen=True)
class MacroStep:
    """The result of executing one macro-action."""

    rewards: tuple[float, ...]
    """Reward of each simulator step taken, undiscounted."""
    terminal: bool
    events: StepEvents
    """Events of the last step taken."""

    @property
    def total_reward(self) -> float:
        return sum(self.rewards)


def execute_action(env: IntersectionEnv, action: ActionId) -> MacroStep:
    """Carry out a macro-action.

    A wait action advances the simulator by its number of steps with the ego waiting, stopping early if the episode ends.
    Go hands the ego to its car-following controller for good and runs the episode to its end.
    """
    if env.done:
        raise EpisodeTerminatedError(f"Cannot execute {action}: the episode has already ended.")
    rewards = []
    events = None
    if action == ActionId.GO:
        while not env.done:
            events, reward = env.step(EgoCommand.GO)
            rewards.append(reward)
    else:
        for _ in range(action.wait_steps):
            events, reward = env.step(EgoCommand.WAIT)
            rewards.append(reward)
            if env.done:
                break
    return MacroStep(rewards=tuple(rewards), terminal=env.done, events=events)


@dataclass(slots=True, frozen=True)
class Decision:
    """One decision point of an episode."""

    grid: np.ndarray
    """The encoded state the decision was taken in."""
    action: ActionId
    rewards: tuple[float, ...]
    """Per-step rewards received while the action ran."""
    terminal: bool


def compute_returns(trajectory: Sequence[Decision], gamma: float) -> list[Experience]:
    """Monte Carlo return targets for every decision of a finished episode.

    The target of a decision is `sum_k gamma**k * r_k` over every simulator step `k` from the decision to the end of the
    episode.

    :param trajectory: The episode's decisions, in order. The last one must have ended the episode.
    :param gamma: Discount per simulator step.
    """
    if not trajectory or not trajectory[-1].terminal:
        raise IncompleteTrajectoryError("Returns can only be computed for a trajectory that ends its episode.")
    targets = []
    g = 0.0
    for decision in reversed(trajectory):
        for r in reversed(decision.rewards):
            g = r + gamma * g
        targets.append(g)
    targets.reverse()
    return [Experience(state=d.grid, action=d.action, target_return=t) for d, t in zip(trajectory, targets)]


def train_step(params: QNetwork, opt: RmsPropState, batch: Batch) -> float:
    """One RMSProp update on the mean squared error between each experience's target and the Q-value of its action.

    Only the taken action's output receives a gradient.

    :return: The mean loss over the batch, before the update.
    """
    if len(batch) == 0:
        raise ValueError("Cannot train on an empty batch.")
    q, cache = params.forward(batch.states)
    rows = np.arange(len(batch))
    diff = q[rows, batch.actions] - batch.targets
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise NonFiniteLossError(
            f"Loss is {loss} on a batch of {len(batch)}: {np.count_nonzero(~np.isfinite(q))} non-finite Q-values, "
            f"targets in [{batch.targets.min()}, {batch.targets.max()}], parameters at version {params.version}."
        )
    dq = np.zeros_like(q)
    dq[rows, batch.actions] = 2.0 * diff / len(batch)
    rmsprop_update(params, params.backward(dq, cache), opt)
    return loss


def episode_seed(*entropy: int) -> int:
    """A 63-bit episode seed derived from any number of integers."""
    return int(np.random.SeedSequence(list(entropy)).generate_state(1, np.uint64)[0] >> np.uint64(1))


def init_params(seed: int, leaky_slope: float = 0.01) -> NetworkParams:
    """The freshly initialised network a training run with `seed` starts from."""
    return NetworkParams.random(np.random.default_rng(np.random.SeedSequence([seed, 0])), leaky_slope)


@dataclass(slots=True)
class IterationResult:
    record: EpisodeRecord
    decisions: int
    loss: Optional[float]
    """Loss of the batch update, or None if the buffer could not yet supply a batch."""


@dataclass(slots=True)
class SnapshotPoint:
    iteration: int
    mean_loss: Optional[float]
    """Mean batch loss since the previous snapshot, or None if no update happened."""


class Trainer:
    """Owns everything one training run mutates: the network, its optimizer state, the replay buffer and the random
    number generator.

    :param task: Scenario trained on.
    :param cfg: Training settings; `cfg.seed` seeds the run.
    :param sim_cfg: Simulator settings.
    :param params: Network to continue training. It is copied. Defaults to a fresh network derived from `cfg.seed`.
    :param buffer: Replay buffer to continue filling. It is used (not copied). Defaults to an empty one.
    """

    def __init__(
            self,
            task: ScenarioId,
            cfg: TrainConfig,
            sim_cfg: SimConfig,
            params: Optional[QNetwork] = None,
            buffer: Optional[Buffer] = None
    ):
        self.task = task
        self.cfg = cfg
        self.sim_cfg = sim_cfg
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.params = params.copy() if params is not None else init_params(cfg.seed, cfg.leaky_slope)
        self.opt = RmsPropState.for_params(self.params, cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_epsilon)
        if buffer is None:
            buffer = make_buffer(cfg, np.random.default_rng(np.random.SeedSequence([cfg.seed, 2])))
        self.buffer = buffer
        self.iteration = 0

    def set_task(self, task: ScenarioId):
        """Switch the scenario episodes are drawn from. Network, optimizer and buffer carry over."""
        logger.info(f"Switching training task from {self.task} to {task} at iteration {self.iteration}.")
        self.task = task

    def run_episode(self) -> tuple[EpisodeRecord, list[Decision]]:
        """Play one epsilon-greedy episode with the current network."""
        env = IntersectionEnv(self.task, self.sim_cfg, int(self.rng.integers(2 ** 63)))
        decisions = []
        while not env.done:
            grid = encode(env.state)
            action = select_action(q_values(self.params, grid), self.cfg.epsilon, self.rng)
            macro = execute_action(env, action)
            decisions.append(Decision(grid=grid, action=action, rewards=macro.rewards, terminal=macro.terminal))
        return env.record(), decisions

    def run_iteration(self) -> IterationResult:
        record, decisions = self.run_episode()
        self.buffer.push(compute_returns(decisions, self.cfg.gamma))
        loss = None
        if self.buffer.ready(self.cfg.batch_size):
            loss = train_step(self.params, self.opt, self.buffer.sample(self.cfg.batch_size, self.rng))
        self.iteration += 1
        return IterationResult(record=record, decisions=len(decisions), loss=loss)

    def state_digest(self) -> str:
        """SHA-256 over the network, optimizer accumulators, buffer contents and generator state."""
        h = hashlib.sha256()
        for name, a in self.params.arrays().items():
            h.update(name.encode())
            h.update(a.tobytes())
        for name, a in self.opt.accumulators.items():
            h.update(name.encode())
            h.update(a.tobytes())
        h.update(self.buffer.digest().encode())
        h.update(repr(self.rng.bit_generator.state).encode())
        h.update(str(self.iteration).encode())
        return h.hexdigest()


@dataclass(slots=True)
class TrainResult:
    params: QNetwork
    buffer: Buffer
    snapshots: list[SnapshotPoint] = field(default_factory=list)
    iterations: int = 0


def run_training(
        trainer: Trainer,
        iterations: int,
        on_snapshot: Optional[SnapshotHook] = None,
        start_iteration: int = 0
) -> list[SnapshotPoint]:
    """Run `iterations` iterations on an existing trainer, taking a snapshot before the first iteration, every
    `snapshot_every` iterations and after the last one.

    :param trainer: The trainer.
    :param iterations: Iterations to run.
    :param on_snapshot: Called with the iteration count (offset by `start_iteration`) and a frozen copy of the network.
    :param start_iteration: Added to the iteration numbers reported, for runs that continue an earlier one.
    """
    every = trainer.cfg.snapshot_every
    snapshots = []
    losses = []

    def snapshot(i: int):
        mean_loss = float(np.mean(losses)) if losses else None
        snapshots.append(SnapshotPoint(iteration=start_iteration + i, mean_loss=mean_loss))
        losses.clear()
        if on_snapshot is not None:
            on_snapshot(start_iteration + i, trainer.params.copy())

    snapshot(0)
    outcomes = {}
    for i in range(1, iterations + 1):
        result = trainer.run_iteration()
        outcomes[result.record.outcome] = outcomes.get(result.record.outcome, 0) + 1
        if result.loss is not None:
            losses.append(result.loss)
        if i % every == 0 or i == iterations:
            logger.info(f"{trainer.task} iteration {start_iteration + i}: "
                        f"{', '.join(f'{k} {v}' for k, v in sorted(outcomes.items()))} since last snapshot.")
            outcomes.clear()
            snapshot(i)
    return snapshots


def train(
        task: ScenarioId,
        cfg: TrainConfig,
        sim_cfg: SimConfig,
        initial_params: Optional[QNetwork] = None,
        buffer: Optional[Buffer] = None,
        on_snapshot: Optional[SnapshotHook] = None
) -> TrainResult:
    """Train a network on one task.

    :param task: The task.
    :param cfg: Training settings, including the seed that makes the run deterministic.
    :param sim_cfg: Simulator settings.
    :param initial_params: Network to start from (it is not modified). Defaults to a fresh network.
    :param buffer: Replay buffer to start from (it is modified). Defaults to an empty buffer.
    :param on_snapshot: Called at each snapshot with the iteration count and a frozen copy of the network.
    """
    trainer = Trainer(task, cfg, sim_cfg, params=initial_params, buffer=buffer)
    logger.info(f"Training on {task} for {cfg.iterations} iterations (seed {cfg.seed}).")
    snapshots = run_training(trainer, cfg.iterations, on_snapshot)
    return TrainResult(params=trainer.params, buffer=trainer.buffer, snapshots=snapshots, iterations=cfg.iterations)
