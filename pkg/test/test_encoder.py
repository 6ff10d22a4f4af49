import numpy as np

from pyintersect.categories import ScenarioId, TASK_ORDER
from pyintersect.config import SimConfig
from pyintersect.encoder import EGO, GRID_SHAPE, OCCUPANCY, SPEED, encode, world_to_cell
from pyintersect.model import EGO_LANE, GridFrame, SimState, VehicleState
from pyintersect.sim import build_scenario, initial_state

FRAME = GridFrame(origin=(-36.0, -52.0), cell_size=4.0)


def _vehicle(vehicle_id: int, lane_id: str, position: float, speed: float) -> VehicleState:
    return VehicleState(vehicle_id=vehicle_id, lane_id=lane_id, position=position, speed=speed, length=5.0, width=2.0,
                        desired_speed=20.0)


def _state(*traffic: VehicleState) -> SimState:
    return SimState(network=build_scenario(ScenarioId.FORWARD), traffic=tuple(traffic),
                    ego=_vehicle(0, EGO_LANE, 0.0, 0.0))


def test_01_world_to_cell():
    """Test cell lookup at the corners and edges of the grid."""
    assert world_to_cell(np.array([-36.0, -52.0]), FRAME) == (0, 0)
    assert world_to_cell(np.array([35.99, 51.99]), FRAME) == (17, 25)
    assert world_to_cell(np.array([36.0, 0.0]), FRAME) is None
    assert world_to_cell(np.array([0.0, -52.01]), FRAME) is None
    assert world_to_cell(np.array([-6.7, -1.6]), FRAME) == (7, 12)


def test_02_empty_road():
    """Test that an empty road encodes to the ego marker alone."""
    grid = encode(_state())
    assert grid.shape == GRID_SHAPE
    assert grid.dtype == np.float64
    assert grid[..., OCCUPANCY].sum() == 0
    assert grid[..., SPEED].sum() == 0
    assert grid[..., EGO].sum() == 1
    assert grid[7, 12, EGO] == 1


def test_03_vehicles():
    """Test occupancy and speed channels, including two vehicles sharing a cell."""
    grid = encode(_state(_vehicle(1, "n0", 100.0, 10.0), _vehicle(2, "n0", 99.0, 16.0), _vehicle(3, "f0", 100.0, 4.0)))
    assert grid[8, 13, OCCUPANCY] == 1
    assert grid[8, 13, SPEED] == np.float64(16.0 / 20.0)
    # f0 runs +y at x = 1.6, so position 100 is the point (1.6, 0)
    assert grid[9, 13, OCCUPANCY] == 1
    assert grid[9, 13, SPEED] == np.float64(4.0 / 20.0)
    assert grid[..., OCCUPANCY].sum() == 2


def test_04_off_grid():
    """Test that vehicles outside the grid are left out."""
    grid = encode(_state(_vehicle(1, "n0", 2.5, 20.0)))
    assert grid[..., OCCUPANCY].sum() == 0


def test_05_range():
    """Test that encoded live states stay within [0, 1] on every task."""
    cfg = SimConfig()
    rng = np.random.default_rng(0)
    for scenario in TASK_ORDER:
        state = initial_state(build_scenario(scenario), cfg, rng)
        grid = encode(state)
        assert grid.min() >= 0.0
        assert grid.max() <= 1.0
        assert grid[..., EGO].sum() == 1
        assert np.array_equal(grid[..., OCCUPANCY] > 0, grid[..., OCCUPANCY] == 1)
        assert np.all(grid[..., SPEED][grid[..., OCCUPANCY] == 0] == 0)
