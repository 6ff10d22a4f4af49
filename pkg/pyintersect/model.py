"""Dataclasses describing road geometry and the state of a running simulation.

All lengths are in meters, speeds in m/s and times in seconds. Points are `(x, y)` pairs in the global frame in which
the scenario geometry file is written.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from lxml import etree
from shapely.geometry import LineString

from pyintersect.categories import EgoCommand, Outcome, ScenarioId
from pyintersect.xml_utils import GeometryFileError, parse_float, parse_shape

logger = logging.getLogger(__name__)

EGO_LANE = "ego"
"""The `lane_id` marker carried by the ego vehicle's :class:`VehicleState`."""

GRID_ROWS = 18
GRID_COLS = 26


@dataclass(slots=True, eq=False)
class Polyline:
    """A piecewise-linear curve, parameterised by arc length from its first point."""

    points: np.ndarray
    """The (N, 2) array of vertices."""
    cumulative: np.ndarray = field(init=False, repr=False)
    """Arc length at each vertex."""
    units: np.ndarray = field(init=False, repr=False)
    """Unit direction vector of each segment."""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        deltas = np.diff(self.points, axis=0)
        lengths = np.hypot(deltas[:, 0], deltas[:, 1])
        if np.any(lengths <= 0):
            raise GeometryFileError("Polyline contains a zero-length segment.")
        self.cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
        self.units = deltas / lengths[:, None]

    @property
    def length(self) -> float:
        return float(self.cumulative[-1])

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def _segment(self, s: float) -> int:
        i = int(np.searchsorted(self.cumulative, s, side="right")) - 1
        return min(max(i, 0), len(self.units) - 1)

    def point_at(self, s: float) -> np.ndarray:
        """The point at arc length `s`. Values outside `[0, length]` extrapolate along the first/last segment."""
        i = self._segment(s)
        return self.points[i] + (s - self.cumulative[i]) * self.units[i]

    def heading_at(self, s: float) -> np.ndarray:
        """Unit direction of travel at arc length `s`."""
        return self.units[self._segment(s)]

    def project(self, p: np.ndarray) -> tuple[float, float]:
        """Project a point onto the polyline.

        :return: The arc length of the closest point on the polyline and the distance to it.
        """
        a = self.points[:-1]
        rel = p - a
        seg_len = np.diff(self.cumulative)
        t = np.clip(np.einsum("ij,ij->i", rel, self.units), 0.0, seg_len)
        closest = a + t[:, None] * self.units
        dist = np.hypot(p[0] - closest[:, 0], p[1] - closest[:, 1])
        k = int(np.argmin(dist))
        return float(self.cumulative[k] + t[k]), float(dist[k])

    def as_linestring(self) -> LineString:
        return LineString(self.points)


@dataclass(slots=True, eq=False)
class LaneGeometry:
    """A single traffic lane. Vehicles enter at the first point of the centerline and leave at the last."""

    lane_id: str
    """Identifier of the lane, unique within its scenario."""
    centerline: Polyline
    """Centerline of the lane, in the direction of travel."""
    width: float
    """Width of the lane."""
    speed_limit: float
    """Maximum speed on the lane."""

    @property
    def length(self) -> float:
        return self.centerline.length

    @property
    def travel_direction(self) -> np.ndarray:
        """Unit vector from the lane's entry to its exit."""
        d = self.centerline.end - self.centerline.start
        return d / np.hypot(d[0], d[1])

    def validate(self):
        if self.width <= 0:
            raise GeometryFileError(f"Lane {self.lane_id} must have a positive width, not {self.width}.")
        if self.speed_limit <= 0:
            raise GeometryFileError(f"Lane {self.lane_id} must have a positive speed limit, not {self.speed_limit}.")

    @classmethod
    def from_xml(cls, elem: etree.Element) -> 'LaneGeometry':
        """Parse a `<lane id=".." width=".." speed=".." shape=".."/>` element."""
        lane = LaneGeometry(
            lane_id=elem.get("id"),
            centerline=Polyline(parse_shape(elem)),
            width=parse_float(elem, "width"),
            speed_limit=parse_float(elem, "speed")
        )
        lane.validate()
        return lane


@dataclass(slots=True, frozen=True)
class GridFrame:
    """The global-coordinate frame in which the occupancy grid is laid out."""

    origin: tuple[float, float]
    """World point at the corner of cell (0, 0)."""
    cell_size: float
    """Edge length of a (square) cell."""

    @classmethod
    def from_xml(cls, elem: etree.Element) -> 'GridFrame':
        """Parse a `<frame originX=".." originY=".." cellSize=".."/>` element."""
        cell_size = parse_float(elem, "cellSize")
        if cell_size <= 0:
            raise GeometryFileError(f"Grid cell size must be positive, not {cell_size}.")
        return GridFrame(origin=(parse_float(elem, "originX"), parse_float(elem, "originY")), cell_size=cell_size)


@dataclass(slots=True, eq=False)
class RoadNetwork:
    """The fixed geometry of one intersection scenario."""

    scenario: ScenarioId
    lanes: list[LaneGeometry]
    """The traffic lanes, in file order."""
    ego_path: Polyline
    """The path the ego vehicle follows once it goes; it starts at the ego's waiting position."""
    goal_position: np.ndarray
    """The ego has reached its goal once it has travelled the full length of `ego_path`."""
    frame: GridFrame
    """The occupancy-grid frame used when encoding states of this scenario."""
    description: Optional[str] = None

    def lane(self, lane_id: str) -> LaneGeometry:
        for lane in self.lanes:
            if lane.lane_id == lane_id:
                return lane
        raise KeyError(lane_id)

    def crossed_lanes(self) -> list[LaneGeometry]:
        """The lanes whose centerline the ego path crosses. A lane the path merges into (runs along) is not crossed."""
        path = self.ego_path.as_linestring()
        return [lane for lane in self.lanes if path.crosses(lane.centerline.as_linestring())]

    def conflict_lanes(self) -> list[LaneGeometry]:
        """The lanes whose strip the ego path enters, whether it crosses them or merges into them. Every scenario has
        at least one; Right has only the lane it merges into."""
        path = self.ego_path.as_linestring()
        conflicts = []
        for lane in self.lanes:
            strip = lane.centerline.as_linestring().buffer(lane.width / 2, cap_style="flat")
            if path.intersection(strip).length > 0:
                conflicts.append(lane)
        return conflicts

    @classmethod
    def from_xml(cls, elem: etree.Element) -> 'RoadNetwork':
        """Parse a `<scenario>` element holding a `<frame>`, one or more `<lane>`s and an `<egoPath>`."""
        try:
            scenario = ScenarioId.parse(elem.get("id", ""))
        except ValueError as e:
            raise GeometryFileError(f"Bad scenario id: {e}")
        frame_elem = elem.find("frame")
        path_elem = elem.find("egoPath")
        if frame_elem is None or path_elem is None:
            raise GeometryFileError(f"Scenario {scenario} needs both a <frame> and an <egoPath> element.")
        lanes = [LaneGeometry.from_xml(e) for e in elem.findall("lane")]
        if not lanes:
            raise GeometryFileError(f"Scenario {scenario} has no lanes.")
        ego_path = Polyline(parse_shape(path_elem))
        network = RoadNetwork(
            scenario=scenario,
            lanes=lanes,
            ego_path=ego_path,
            goal_position=ego_path.end.copy(),
            frame=GridFrame.from_xml(frame_elem),
            description=elem.get("description")
        )
        conflicts = network.conflict_lanes()
        if not conflicts:
            raise GeometryFileError(f"The ego path of scenario {scenario} does not enter any lane.")
        logger.debug(f"Parsed scenario {scenario} with {len(lanes)} lanes, {len(conflicts)} in conflict with the ego "
                     f"path ({len(network.crossed_lanes())} crossed), ego path {ego_path.length:.1f}m.")
        return network


@dataclass(slots=True, frozen=True)
class VehicleState:
    """Kinematic state of one vehicle."""

    vehicle_id: int
    lane_id: str
    """The lane the vehicle drives on, or :data:`EGO_LANE` for the ego vehicle."""
    position: float
    """Position of the vehicle's center, measured along its lane (or along the ego path)."""
    speed: float
    length: float
    width: float
    desired_speed: float
    """The speed this driver would travel at on a free road."""
    acceleration: float = 0.0
    """The acceleration the car-following model commanded in the last step."""

    @property
    def front(self) -> float:
        return self.position + self.length / 2

    @property
    def rear(self) -> float:
        return self.position - self.length / 2


@dataclass(slots=True, frozen=True)
class SimState:
    """Everything that changes during one episode of one scenario."""

    network: RoadNetwork
    traffic: tuple[VehicleState, ...]
    """Traffic vehicles, in spawn order."""
    ego: VehicleState
    clock: float = 0.0
    step_count: int = 0
    go_issued: bool = False
    """Whether the ego has ever been told to go. Once set it never clears."""
    terminated: bool = False
    next_vehicle_id: int = 1


@dataclass(slots=True, frozen=True)
class StepEvents:
    """What happened during one simulator step."""

    collision: bool = False
    ego_reached_goal: bool = False
    timeout: bool = False
    braking_vehicle_count: int = 0
    """Number of traffic vehicles braking harder than the braking threshold during the step."""

    @property
    def terminal(self) -> bool:
        return self.collision or self.ego_reached_goal or self.timeout

    @property
    def outcome(self) -> Optional[Outcome]:
        if self.collision:
            return Outcome.COLLISION
        if self.ego_reached_goal:
            return Outcome.SUCCESS
        if self.timeout:
            return Outcome.TIMEOUT
        return None


@dataclass(slots=True, frozen=True)
class TrajectoryStep:
    state: SimState
    """The state before the step."""
    command: EgoCommand
    reward: float


@dataclass(slots=True)
class EpisodeRecord:
    """The result of running one episode to completion."""

    scenario: ScenarioId
    seed: int
    outcome: Outcome
    steps_taken: int
    elapsed_time: float
    total_other_brake_time: float
    """Summed over traffic vehicles: the time each spent braking."""
    trajectory: list[TrajectoryStep]

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.trajectory]

    @property
    def total_reward(self) -> float:
        return sum(self.rewards)
