"""Enumerations used as building blocks throughout the simulator, the agent and the experiment harness."""

from enum import StrEnum


class ScenarioId(StrEnum):
    """One of the five intersection tasks."""

    RIGHT = "Right"
    LEFT = "Left"
    LEFT2 = "Left2"
    FORWARD = "Forward"
    CHALLENGE = "Challenge"

    @classmethod
    def parse(cls, text: str) -> 'ScenarioId':
        """Look up a scenario by its name, ignoring case (eg, `left2` -> :attr:`LEFT2`)."""
        for member in cls:
            if member.value.lower() == text.strip().lower():
                return member
        raise ValueError(f"Unknown scenario `{text}`. Expected one of {', '.join(m.value for m in cls)}.")


# Row/column order of every task table.
TASK_ORDER = (ScenarioId.RIGHT, ScenarioId.LEFT, ScenarioId.LEFT2, ScenarioId.FORWARD, ScenarioId.CHALLENGE)


class EgoCommand(StrEnum):
    """The primitive command given to the ego vehicle for one simulator step."""

    WAIT = "wait"
    GO = "go"


class ActionId(StrEnum):
    """The five outputs of the Q-network: a single go action and a wait action at four time scales."""

    GO = "go"
    WAIT1 = "wait1"
    WAIT2 = "wait2"
    WAIT4 = "wait4"
    WAIT8 = "wait8"

    @property
    def output_index(self) -> int:
        """Position of the action in the network output vector."""
        return ACTIONS.index(self)

    @property
    def wait_steps(self) -> int:
        """Number of simulator steps the action waits for (0 for :attr:`GO`)."""
        return _WAIT_STEPS[self]

    @classmethod
    def from_index(cls, index: int) -> 'ActionId':
        return ACTIONS[index]


ACTIONS = (ActionId.GO, ActionId.WAIT1, ActionId.WAIT2, ActionId.WAIT4, ActionId.WAIT8)
_WAIT_STEPS = {ActionId.GO: 0, ActionId.WAIT1: 1, ActionId.WAIT2: 2, ActionId.WAIT4: 4, ActionId.WAIT8: 8}


class Outcome(StrEnum):
    """How an episode ended."""

    SUCCESS = "success"
    COLLISION = "collision"
    TIMEOUT = "timeout"


class BufferKind(StrEnum):
    """Which replay buffer layout the agent trains from."""

    FIFO = "fifo"
    SPLIT = "split"  # 900 selective + 100 FIFO, sampled 30 + 30
    SELECTIVE = "selective"


class ExperimentType(StrEnum):
    TRAIN = "train"
    EVALUATE = "evaluate"
    DIRECT_COPY = "direct-copy"
    FINE_TUNE = "fine-tune"
    REVERSE = "reverse"
    LIFELONG = "lifelong"
