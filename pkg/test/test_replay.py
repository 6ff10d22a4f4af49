import numpy as np
import pytest

from pyintersect.categories import ActionId, BufferKind
from pyintersect.config import TrainConfig
from pyintersect.replay import (Experience, ReplayBuffer, ReturnOutOfRangeError, SelectiveBuffer, SplitReplayBuffer,
                                make_buffer)

STATE_SHAPE = (2,)


def _experience(i: int) -> Experience:
    """An experience whose state and target both identify it."""
    return Experience(state=np.array([i, -i], dtype=np.float64), action=ActionId.WAIT1,
                      target_return=(i % 1000) / 1000)


def test_01_fifo_eviction():
    """Test that pushing past capacity evicts the oldest experience first."""
    buf = ReplayBuffer(1000, STATE_SHAPE)
    buf.push(_experience(i) for i in range(1001))
    assert len(buf) == 1000
    assert buf.pushed == 1001
    targets = buf.targets_in_order()
    assert targets[0] == pytest.approx(0.001)
    assert targets[-1] == pytest.approx(0.0)
    batch = buf.sample(1000, np.random.default_rng(0))
    assert 0 not in set(batch.states[:, 0].astype(int))
    assert set(batch.states[:, 0].astype(int)) == set(range(1, 1001))


def test_02_sample():
    """Test that a sample holds distinct stored experiences with their actions."""
    buf = ReplayBuffer(50, STATE_SHAPE)
    buf.push(_experience(i) for i in range(30))
    assert buf.ready(30)
    assert not buf.ready(31)
    batch = buf.sample(20, np.random.default_rng(1))
    assert len(batch) == 20
    ids = batch.states[:, 0].astype(int)
    assert len(set(ids)) == 20
    assert np.allclose(batch.targets, ids / 1000)
    assert np.all(batch.actions == ActionId.WAIT1.output_index)
    with pytest.raises(ValueError):
        buf.sample(31, np.random.default_rng(1))


def test_03_return_range():
    """Test that experiences with impossible returns are rejected."""
    with pytest.raises(ReturnOutOfRangeError):
        Experience(state=np.zeros(2), action=ActionId.GO, target_return=1.5)
    with pytest.raises(ReturnOutOfRangeError):
        Experience(state=np.zeros(2), action=ActionId.GO, target_return=-2.5)
    Experience(state=np.zeros(2), action=ActionId.GO, target_return=-2.0)


def test_04_selective_is_uniform():
    """Test that reservoir sampling keeps early and late experiences alike."""
    kept_early = 0
    trials = 200
    for seed in range(trials):
        buf = SelectiveBuffer(10, np.random.default_rng(seed), STATE_SHAPE)
        buf.push(_experience(i) for i in range(100))
        assert len(buf) == 10
        assert buf.seen == 100
        ids = buf.sample(10, np.random.default_rng(0)).states[:, 0].astype(int)
        kept_early += int(np.sum(ids < 50))
    # Half of the kept experiences should come from the first half of the stream
    assert abs(kept_early / (10 * trials) - 0.5) < 0.05


def test_05_split_sampling():
    """Test that a split buffer draws half its batch from each part."""
    rng = np.random.default_rng(2)
    buf = SplitReplayBuffer(rng, selective_capacity=900, fifo_capacity=100, state_shape=STATE_SHAPE)
    buf.push(_experience(i) for i in range(2000))
    assert len(buf.selective) == 900
    assert len(buf.fifo) == 100
    assert buf.ready(60)
    batch = buf.sample(60, np.random.default_rng(3))
    assert len(batch) == 60
    fifo_ids = batch.states[30:, 0].astype(int)
    assert np.all(fifo_ids >= 1900)
    assert len(set(batch.states[:30, 0].astype(int))) == 30


def test_06_split_ready():
    """Test that a split buffer is ready only when both parts can fill their half."""
    buf = SplitReplayBuffer(np.random.default_rng(4), selective_capacity=900, fifo_capacity=100,
                            state_shape=STATE_SHAPE)
    buf.push(_experience(i) for i in range(29))
    assert not buf.ready(60)
    buf.push([_experience(29)])
    assert buf.ready(60)


def test_07_make_buffer():
    """Test that the configured layout is built."""
    rng = np.random.default_rng(5)
    assert isinstance(make_buffer(TrainConfig(), rng), ReplayBuffer)
    assert isinstance(make_buffer(TrainConfig(buffer=BufferKind.SPLIT), rng), SplitReplayBuffer)
    selective = make_buffer(TrainConfig(buffer=BufferKind.SELECTIVE, buffer_capacity=7), rng, STATE_SHAPE)
    assert isinstance(selective, SelectiveBuffer)
    assert selective.capacity == 7


def test_08_digest():
    """Test that equal buffers have equal digests and any push changes the digest."""
    a = ReplayBuffer(10, STATE_SHAPE)
    b = ReplayBuffer(10, STATE_SHAPE)
    a.push(_experience(i) for i in range(5))
    b.push(_experience(i) for i in range(5))
    assert a.digest() == b.digest()
    b.push([_experience(5)])
    assert a.digest() != b.digest()
