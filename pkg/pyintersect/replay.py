"""Experience replay buffers.

Three layouts are available (see :class:`~pyintersect.categories.BufferKind`):

- :class:`ReplayBuffer`, a FIFO ring that evicts the oldest experience first;
- :class:`SelectiveBuffer`, which keeps a uniform random sample (reservoir sampling) of every experience offered;
- :class:`SplitReplayBuffer`, a selective buffer and a small FIFO buffer that both see every experience, with batches
  drawn half from each.
"""

import hashlib
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from pyintersect.categories import ActionId, BufferKind
from pyintersect.config import TrainConfig
from pyintersect.encoder import GRID_SHAPE

logger = logging.getLogger(__name__)

MIN_RETURN = -2.0
MAX_RETURN = 1.0
_RETURN_TOLERANCE = 1e-9


class ReturnOutOfRangeError(ValueError):
    """Raised when an experience's target return falls outside the range episode rewards allow."""
    pass


@dataclass(slots=True, frozen=True)
class Experience:
    state: np.ndarray
    """The encoded state at the decision point."""
    action: ActionId
    target_return: float
    """Discounted return from the decision point to the end of the episode."""

    def __post_init__(self):
        if not (MIN_RETURN - _RETURN_TOLERANCE <= self.target_return <= MAX_RETURN + _RETURN_TOLERANCE):
            raise ReturnOutOfRangeError(f"Target return {self.target_return} for action {self.action} is outside "
                                        f"[{MIN_RETURN}, {MAX_RETURN}].")


@dataclass(slots=True, frozen=True)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    """Network output index of each experience's action."""
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    @classmethod
    def concat(cls, *batches: 'Batch') -> 'Batch':
        return cls(
            states=np.concatenate([b.states for b in batches]),
            actions=np.concatenate([b.actions for b in batches]),
            targets=np.concatenate([b.targets for b in batches])
        )


class Buffer(ABC):
    """Common interface of the replay buffer layouts."""

    @abstractmethod
    def push(self, experiences: Iterable[Experience]):
        raise NotImplementedError

    @abstractmethod
    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        raise NotImplementedError

    @abstractmethod
    def ready(self, batch_size: int) -> bool:
        """Whether a batch of `batch_size` can be sampled (without replacement)."""
        raise NotImplementedError

    @abstractmethod
    def __len__(self) -> int:
        raise NotImplementedError

    @abstractmethod
    def _update_digest(self, h):
        raise NotImplementedError

    def digest(self) -> str:
        """SHA-256 over the buffer's full contents and bookkeeping. Equal digests mean equal buffers."""
        h = hashlib.sha256()
        self._update_digest(h)
        return h.hexdigest()


class _ArrayStore:
    """Fixed-capacity, numpy-backed storage of experiences."""

    def __init__(self, capacity: int, state_shape: tuple[int, ...]):
        if capacity < 1:
            raise ValueError(f"Buffer capacity must be at least 1, not {capacity}.")
        self.capacity = capacity
        self.states = np.zeros((capacity,) + tuple(state_shape), dtype=np.float64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.targets = np.zeros(capacity, dtype=np.float64)
        self.size = 0

    def put(self, slot: int, e: Experience):
        self.states[slot] = e.state
        self.actions[slot] = e.action.output_index
        self.targets[slot] = e.target_return

    def take(self, slots: np.ndarray) -> Batch:
        return Batch(states=self.states[slots].copy(), actions=self.actions[slots].copy(),
                     targets=self.targets[slots].copy())

    def update_digest(self, h):
        h.update(np.int64([self.capacity, self.size]).tobytes())
        h.update(self.states[:self.size].tobytes())
        h.update(self.actions[:self.size].tobytes())
        h.update(self.targets[:self.size].tobytes())


class ReplayBuffer(Buffer):
    """A FIFO ring buffer. Pushing beyond capacity evicts the oldest experience."""

    def __init__(self, capacity: int = 1000, state_shape: tuple[int, ...] = GRID_SHAPE):
        self._store = _ArrayStore(capacity, state_shape)
        self._next = 0
        self.pushed = 0
        """Experiences ever pushed."""

    @property
    def capacity(self) -> int:
        return self._store.capacity

    def __len__(self) -> int:
        return self._store.size

    def push(self, experiences: Iterable[Experience]):
        store = self._store
        for e in experiences:
            store.put(self._next, e)
            self._next = (self._next + 1) % store.capacity
            store.size = min(store.size + 1, store.capacity)
            self.pushed += 1

    def oldest_first(self) -> list[int]:
        """Storage slots from the oldest experience to the newest."""
        store = self._store
        start = self._next if store.size == store.capacity else 0
        return [(start + i) % store.capacity for i in range(store.size)]

    def targets_in_order(self) -> np.ndarray:
        """Target returns from oldest to newest."""
        return self._store.targets[self.oldest_first()].copy()

    def ready(self, batch_size: int) -> bool:
        return len(self) >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Draw `batch_size` distinct stored experiences uniformly at random."""
        if not self.ready(batch_size):
            raise ValueError(f"Cannot sample {batch_size} experiences from a buffer holding {len(self)}.")
        return self._store.take(rng.choice(len(self), size=batch_size, replace=False))

    def _update_digest(self, h):
        self._store.update_digest(h)
        h.update(np.int64([self._next, self.pushed]).tobytes())


class SelectiveBuffer(Buffer):
    """Keeps a uniform random sample of all experiences ever offered to it (reservoir sampling).

    :param capacity: How many experiences are kept.
    :param rng: Generator used to decide which experiences are kept. The buffer takes ownership of it.
    """

    def __init__(self, capacity: int, rng: np.random.Generator, state_shape: tuple[int, ...] = GRID_SHAPE):
        self._store = _ArrayStore(capacity, state_shape)
        self._rng = rng
        self.seen = 0
        """Experiences ever offered."""

    @property
    def capacity(self) -> int:
        return self._store.capacity

    def __len__(self) -> int:
        return self._store.size

    def push(self, experiences: Iterable[Experience]):
        store = self._store
        for e in experiences:
            if store.size < store.capacity:
                store.put(store.size, e)
                store.size += 1
            else:
                j = int(self._rng.integers(0, self.seen + 1))
                if j < store.capacity:
                    store.put(j, e)
            self.seen += 1

    def ready(self, batch_size: int) -> bool:
        return len(self) >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if not self.ready(batch_size):
            raise ValueError(f"Cannot sample {batch_size} experiences from a buffer holding {len(self)}.")
        return self._store.take(rng.choice(len(self), size=batch_size, replace=False))

    def _update_digest(self, h):
        self._store.update_digest(h)
        h.update(np.int64([self.seen]).tobytes())
        h.update(repr(self._rng.bit_generator.state).encode())


class SplitReplayBuffer(Buffer):
    """A large selective buffer alongside a small FIFO buffer. Both receive every experience; a batch is drawn half from
    each."""

    def __init__(
            self,
            rng: np.random.Generator,
            selective_capacity: int = 900,
            fifo_capacity: int = 100,
            state_shape: tuple[int, ...] = GRID_SHAPE
    ):
        self.selective = SelectiveBuffer(selective_capacity, rng, state_shape)
        self.fifo = ReplayBuffer(fifo_capacity, state_shape)

    def __len__(self) -> int:
        return len(self.selective) + len(self.fifo)

    def push(self, experiences: Iterable[Experience]):
        experiences = list(experiences)
        self.selective.push(experiences)
        self.fifo.push(experiences)

    def ready(self, batch_size: int) -> bool:
        half = batch_size // 2
        return self.selective.ready(batch_size - half) and self.fifo.ready(half)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Draw `batch_size // 2` experiences from the FIFO part and the rest from the selective part."""
        half = batch_size // 2
        return Batch.concat(self.selective.sample(batch_size - half, rng), self.fifo.sample(half, rng))

    def _update_digest(self, h):
        self.selective._update_digest(h)
        self.fifo._update_digest(h)


def make_buffer(
        cfg: TrainConfig,
        rng: np.random.Generator,
        state_shape: Optional[tuple[int, ...]] = None
) -> Buffer:
    """Create the buffer layout `cfg.buffer` asks for.

    :param cfg: Training settings (buffer kind and capacities).
    :param rng: Generator handed to a selective buffer; unused by a plain FIFO buffer.
    :param state_shape: Shape of one stored state. Defaults to the occupancy grid's.
    """
    shape = state_shape or GRID_SHAPE
    if cfg.buffer == BufferKind.FIFO:
        return ReplayBuffer(cfg.buffer_capacity, shape)
    if cfg.buffer == BufferKind.SELECTIVE:
        return SelectiveBuffer(cfg.buffer_capacity, rng, shape)
    return SplitReplayBuffer(rng, cfg.selective_capacity, cfg.fifo_capacity, shape)
