"""Rasterize a :class:`~pyintersect.model.SimState` into the occupancy grid the Q-network reads.

The grid has :data:`~pyintersect.model.GRID_ROWS` x :data:`~pyintersect.model.GRID_COLS` cells laid out in global
coordinates and three channels:

0. traffic occupancy (1 where a traffic vehicle's center falls in the cell);
1. that vehicle's speed divided by :data:`SPEED_NORMALIZER`, the fastest one if several share the cell;
2. the ego marker (1 at the cell of the ego's center).

Vehicles whose center lies outside the grid are left out.
"""

import math
from typing import Optional

import numpy as np

from pyintersect.model import GRID_COLS, GRID_ROWS, GridFrame, SimState
from pyintersect.sim import ego_pose, traffic_pose

CHANNELS = 3
OCCUPANCY, SPEED, EGO = range(CHANNELS)
GRID_SHAPE = (GRID_ROWS, GRID_COLS, CHANNELS)

SPEED_NORMALIZER = 20.0
"""Speed (m/s) encoded as 1.0. Equal to the lanes' speed limit, so traffic speeds never exceed it."""


def world_to_cell(p: np.ndarray, frame: GridFrame) -> Optional[tuple[int, int]]:
    """The (row, column) of the cell containing world point `p`, or None if `p` is outside the grid.

    The first world coordinate selects the row, the second the column.
    """
    row = math.floor((p[0] - frame.origin[0]) / frame.cell_size)
    col = math.floor((p[1] - frame.origin[1]) / frame.cell_size)
    if 0 <= row < GRID_ROWS and 0 <= col < GRID_COLS:
        return row, col
    return None


def encode(state: SimState, frame: Optional[GridFrame] = None) -> np.ndarray:
    """Encode a state as a float64 array of shape :data:`GRID_SHAPE` with values in [0, 1].

    :param state: The state to encode. It is not modified.
    :param frame: The grid frame. Defaults to the frame of the state's scenario.
    """
    frame = frame or state.network.frame
    grid = np.zeros(GRID_SHAPE, dtype=np.float64)
    for vehicle in state.traffic:
        center, _ = traffic_pose(vehicle, state.network.lane(vehicle.lane_id))
        cell = world_to_cell(center, frame)
        if cell is None:
            continue
        grid[cell + (OCCUPANCY,)] = 1.0
        speed = min(vehicle.speed / SPEED_NORMALIZER, 1.0)
        grid[cell + (SPEED,)] = max(grid[cell + (SPEED,)], speed)
    ego_cell = world_to_cell(ego_pose(state)[0], frame)
    if ego_cell is not None:
        grid[ego_cell + (EGO,)] = 1.0
    return grid
