"""A small microscopic traffic simulator for the intersection scenarios.

Traffic vehicles follow the intelligent driver model (IDM) along their lane, with the Krauss model's random
deceleration as driver imperfection. The ego vehicle waits at its stop position until it is told to go; from then on it
drives along its path under IDM, keeping its distance to any vehicle in front of it, and ignores further wait commands.

Everything random is drawn from the one :class:`numpy.random.Generator` handed to the simulator, in a fixed order, so an
episode is fully determined by its scenario, seed and ego commands.
"""

import logging
import math
import os
from dataclasses import replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from shapely.affinity import rotate, translate
from shapely.geometry import Polygon, box

from pyintersect.categories import EgoCommand, ScenarioId
from pyintersect.config import IdmParams, SimConfig
from pyintersect.model import (EGO_LANE, EpisodeRecord, LaneGeometry, RoadNetwork, SimState, StepEvents,
                               TrajectoryStep, VehicleState)
from pyintersect.xml_utils import GeometryFileError, iter_elements

logger = logging.getLogger(__name__)

SCENARIO_FILE = os.path.join(os.path.dirname(__file__), "data", "scenarios.xml")

STEP_COST = -0.01
SUCCESS_REWARD = 1.0
COLLISION_REWARD = -1.0

Policy = Callable[[SimState], EgoCommand]


class SimulationError(Exception):
    pass


class EpisodeTerminatedError(SimulationError):
    """Raised when something tries to advance an episode that has already ended."""
    pass


def load_scenarios(path: str = SCENARIO_FILE) -> dict[ScenarioId, RoadNetwork]:
    """Read every scenario from a geometry file. Each file is parsed once; later calls return the same networks.

    :param path: Path to the geometry XML file. Defaults to the file shipped with the package.
    """
    return _load_scenarios(os.path.abspath(path))


@lru_cache(maxsize=None)
def _load_scenarios(path: str) -> dict[ScenarioId, RoadNetwork]:
    networks = {}
    for elem in iter_elements(path, "scenario"):
        network = RoadNetwork.from_xml(elem)
        networks[network.scenario] = network
    missing = [s for s in ScenarioId if s not in networks]
    if missing:
        raise GeometryFileError(f"Geometry file {path} does not define scenarios {', '.join(missing)}.")
    logger.debug(f"Loaded {len(networks)} scenarios from {path}.")
    return networks


def build_scenario(scenario: ScenarioId, path: str = SCENARIO_FILE) -> RoadNetwork:
    """Return the fixed road network of a scenario. Repeated calls return the same object."""
    return load_scenarios(path)[scenario]


def idm_acceleration(
        v: float,
        gap: float,
        lead_speed: float,
        p: IdmParams,
        desired_speed: Optional[float] = None
) -> float:
    """Acceleration commanded by the intelligent driver model.

    :param v: Own speed.
    :param gap: Bumper-to-bumper distance to the leader; `math.inf` on a free road.
    :param lead_speed: Speed of the leader (ignored on a free road).
    :param p: Model parameters.
    :param desired_speed: This driver's desired speed, if it differs from `p.desired_speed`.
    :return: The acceleration, bounded to `[-p.emergency_decel, p.max_accel]`.
    """
    v0 = desired_speed if desired_speed is not None else p.desired_speed
    free_term = (v / v0) ** 4
    if math.isinf(gap):
        interaction = 0.0
    elif gap <= 0:
        return -p.emergency_decel if v > 0 else 0.0
    else:
        dv = v - lead_speed
        s_star = p.min_gap + max(0.0, v * p.headway_time + v * dv / (2 * math.sqrt(p.max_accel * p.comfortable_decel)))
        interaction = (s_star / gap) ** 2
    acc = p.max_accel * (1.0 - free_term - interaction)
    return min(max(acc, -p.emergency_decel), p.max_accel)


def krauss_speed_update(
        v: float,
        v_desired: float,
        sigma: float,
        max_accel: float,
        dt: float,
        rng: np.random.Generator
) -> float:
    """Apply the Krauss model's driver imperfection to a speed update.

    The new speed is `max(0, min(v_desired, v + max_accel*dt) - sigma*max_accel*dt*u)` with `u` uniform on [0, 1).
    One number is always drawn from `rng`, whatever `sigma` is.
    """
    u = rng.random()
    return max(0.0, min(v_desired, v + max_accel * dt) - sigma * max_accel * dt * u)


def vehicle_footprint(center: np.ndarray, heading: np.ndarray, length: float, width: float) -> Polygon:
    """The oriented rectangle covered by a vehicle."""
    angle = math.atan2(heading[1], heading[0])
    rect = rotate(box(-length / 2, -width / 2, length / 2, width / 2), angle, origin=(0, 0), use_radians=True)
    return translate(rect, xoff=center[0], yoff=center[1])


def footprints_overlap(a: Polygon, b: Polygon) -> bool:
    """Whether two footprints overlap with strictly positive area. Touching edges do not count."""
    return a.intersection(b).area > 0


def traffic_pose(vehicle: VehicleState, lane: LaneGeometry) -> tuple[np.ndarray, np.ndarray]:
    return lane.centerline.point_at(vehicle.position), lane.travel_direction


def ego_pose(state: SimState) -> tuple[np.ndarray, np.ndarray]:
    path = state.network.ego_path
    return path.point_at(state.ego.position), path.heading_at(state.ego.position)


def _ego_corners(state: SimState) -> np.ndarray:
    center, heading = ego_pose(state)
    normal = np.array([-heading[1], heading[0]])
    half_l, half_w = state.ego.length / 2, state.ego.width / 2
    return np.array([center + sx * half_l * heading + sy * half_w * normal
                     for sx in (-1, 1) for sy in (-1, 1)])


def _ego_lane_extent(corners: np.ndarray, lane: LaneGeometry) -> Optional[tuple[float, float]]:
    """The stretch of `lane` (as rear and front positions along it) covered by the ego, or None if the ego's footprint
    is not inside the lane strip."""
    d = lane.travel_direction
    rel = corners - lane.centerline.start
    lateral = d[0] * rel[:, 1] - d[1] * rel[:, 0]
    if lateral.max() <= -lane.width / 2 or lateral.min() >= lane.width / 2:
        return None
    longitudinal = rel @ d
    return float(longitudinal.min()), float(longitudinal.max())


def _entry_blocked(lane: LaneGeometry, traffic: list[VehicleState], cfg: SimConfig) -> bool:
    """Whether a vehicle entering `lane` at its speed limit could not stop behind the last vehicle in the lane."""
    v = lane.speed_limit
    clearance = cfg.vehicle_length + cfg.idm.min_gap + v * v / (2 * cfg.idm.emergency_decel) + v * cfg.dt
    return any(t.lane_id == lane.lane_id and t.rear < clearance for t in traffic)


def spawn_traffic(state: SimState, cfg: SimConfig, rng: np.random.Generator) -> SimState:
    """Emit new vehicles at the start of each lane.

    Each lane draws one number per step and emits a vehicle with probability `cfg.spawn_probability_per_step`, unless
    its entry is occupied, in which case the emission is skipped. Emitted vehicles draw a desired speed around the lane's
    speed limit (never above it) and enter at that speed.
    """
    p_step = cfg.spawn_probability_per_step
    traffic = list(state.traffic)
    next_id = state.next_vehicle_id
    for lane in state.network.lanes:
        if rng.random() >= p_step:
            continue
        if _entry_blocked(lane, traffic, cfg):
            logger.debug(f"Entry of lane {lane.lane_id} is occupied; skipping emission.")
            continue
        factor = 1.0
        if cfg.speed_deviation > 0:
            factor = float(np.clip(rng.normal(1.0, cfg.speed_deviation), 1.0 - 2 * cfg.speed_deviation, 1.0))
        speed = lane.speed_limit * factor
        traffic.append(VehicleState(
            vehicle_id=next_id,
            lane_id=lane.lane_id,
            position=cfg.vehicle_length / 2,
            speed=speed,
            length=cfg.vehicle_length,
            width=cfg.vehicle_width,
            desired_speed=speed
        ))
        next_id += 1
    if next_id == state.next_vehicle_id:
        return state
    return replace(state, traffic=tuple(traffic), next_vehicle_id=next_id)


def _advance_traffic(
        state: SimState,
        cfg: SimConfig,
        rng: np.random.Generator
) -> tuple[tuple[VehicleState, ...], int]:
    """Move every traffic vehicle one step. Accelerations are all computed from the state before the step.

    :return: The vehicles still on the road, and how many of them braked harder than the braking threshold.
    """
    network = state.network
    corners = _ego_corners(state)
    ego_heading = network.ego_path.heading_at(state.ego.position)

    leaders: dict[int, tuple[float, float]] = {}
    for lane in network.lanes:
        in_lane = sorted((t for t in state.traffic if t.lane_id == lane.lane_id), key=lambda t: t.position)
        ego_extent = _ego_lane_extent(corners, lane)
        ego_speed = max(0.0, state.ego.speed * float(ego_heading @ lane.travel_direction))
        for i, vehicle in enumerate(in_lane):
            gap, lead_speed = math.inf, 0.0
            if i + 1 < len(in_lane):
                leader = in_lane[i + 1]
                gap, lead_speed = leader.rear - vehicle.front, leader.speed
            if ego_extent is not None and vehicle.position < (ego_extent[0] + ego_extent[1]) / 2:
                ego_gap = ego_extent[0] - vehicle.front
                if ego_gap < gap:
                    gap, lead_speed = ego_gap, ego_speed
            leaders[vehicle.vehicle_id] = (gap, lead_speed)

    moved = []
    braking = 0
    for vehicle in state.traffic:
        lane = network.lane(vehicle.lane_id)
        gap, lead_speed = leaders[vehicle.vehicle_id]
        acc = idm_acceleration(vehicle.speed, gap, lead_speed, cfg.idm, desired_speed=vehicle.desired_speed)
        v_idm = max(0.0, vehicle.speed + acc * cfg.dt)
        speed = krauss_speed_update(vehicle.speed, v_idm, cfg.krauss_sigma, cfg.idm.max_accel, cfg.dt, rng)
        if acc < -cfg.brake_threshold:
            braking += 1
        position = vehicle.position + speed * cfg.dt
        if position - vehicle.length / 2 > lane.length:
            logger.debug(f"Vehicle {vehicle.vehicle_id} left lane {lane.lane_id}.")
            continue
        moved.append(replace(vehicle, position=position, speed=speed, acceleration=acc))
    return tuple(moved), braking


def _path_leader(state: SimState, cfg: SimConfig) -> tuple[float, float]:
    """Gap and speed (along the path) of the nearest traffic vehicle ahead of the ego inside its path corridor."""
    network = state.network
    path = network.ego_path
    ego = state.ego
    gap, lead_speed = math.inf, 0.0
    for vehicle in state.traffic:
        lane = network.lane(vehicle.lane_id)
        center, heading = traffic_pose(vehicle, lane)
        s, lateral = path.project(center)
        if lateral >= cfg.vehicle_width or s <= ego.position:
            continue
        candidate = s - ego.position - (ego.length + vehicle.length) / 2
        if candidate < gap:
            gap = candidate
            lead_speed = max(0.0, vehicle.speed * float(heading @ path.heading_at(s)))
    return gap, lead_speed


def _advance_ego(state: SimState, cfg: SimConfig) -> VehicleState:
    ego = state.ego
    gap, lead_speed = _path_leader(state, cfg)
    acc = idm_acceleration(ego.speed, gap, lead_speed, cfg.idm, desired_speed=ego.desired_speed)
    speed = max(0.0, ego.speed + acc * cfg.dt)
    return replace(ego, position=ego.position + speed * cfg.dt, speed=speed, acceleration=acc)


def detect_collisions(state: SimState) -> StepEvents:
    """Check the ego against every traffic vehicle and against its goal.

    :return: Events with `collision` and `ego_reached_goal` set; the other fields are left at their defaults.
    """
    network = state.network
    center, heading = ego_pose(state)
    ego = state.ego
    ego_rect = None
    collision = False
    ego_radius = math.hypot(ego.length, ego.width) / 2
    for vehicle in state.traffic:
        lane = network.lane(vehicle.lane_id)
        t_center, t_heading = traffic_pose(vehicle, lane)
        if math.dist(center, t_center) >= ego_radius + math.hypot(vehicle.length, vehicle.width) / 2:
            continue
        if ego_rect is None:
            ego_rect = vehicle_footprint(center, heading, ego.length, ego.width)
        if footprints_overlap(ego_rect, vehicle_footprint(t_center, t_heading, vehicle.length, vehicle.width)):
            logger.debug(f"Ego collided with vehicle {vehicle.vehicle_id} on lane {lane.lane_id}.")
            collision = True
            break
    return StepEvents(collision=collision, ego_reached_goal=ego.position >= network.ego_path.length)


def traffic_collisions(state: SimState) -> list[tuple[int, int]]:
    """Pairs of traffic vehicles that overlap each other. Lanes are parallel, so only vehicles sharing a lane can."""
    pairs = []
    for lane in state.network.lanes:
        in_lane = sorted((t for t in state.traffic if t.lane_id == lane.lane_id), key=lambda t: t.position)
        for behind, ahead in zip(in_lane, in_lane[1:]):
            if behind.front > ahead.rear:
                pairs.append((behind.vehicle_id, ahead.vehicle_id))
    return pairs


def initial_state(network: RoadNetwork, cfg: SimConfig, rng: np.random.Generator) -> SimState:
    """The state at the start of an episode: the ego stopped at its waiting position, traffic already flowing."""
    ego = VehicleState(
        vehicle_id=0,
        lane_id=EGO_LANE,
        position=0.0,
        speed=0.0,
        length=cfg.vehicle_length,
        width=cfg.vehicle_width,
        desired_speed=cfg.idm.desired_speed
    )
    state = SimState(network=network, traffic=(), ego=ego)
    for _ in range(cfg.warmup_steps):
        traffic, _ = _advance_traffic(state, cfg, rng)
        state = spawn_traffic(replace(state, traffic=traffic), cfg, rng)
    return state


def step(
        state: SimState,
        ego_command: EgoCommand,
        cfg: SimConfig,
        rng: np.random.Generator
) -> tuple[SimState, StepEvents]:
    """Advance the simulation by one step of `cfg.dt` seconds.

    :param state: The current state. Must not be terminated.
    :param ego_command: What the ego should do. Ignored once the ego has been told to go.
    :param cfg: Simulator settings.
    :param rng: The episode's random number generator.
    :return: The next state and what happened during the step.
    """
    if state.terminated:
        raise EpisodeTerminatedError(f"Episode already ended after {state.step_count} steps.")
    go = state.go_issued or ego_command == EgoCommand.GO
    traffic, braking = _advance_traffic(state, cfg, rng)
    ego = _advance_ego(state, cfg) if go else state.ego
    step_count = state.step_count + 1
    moved = replace(state, traffic=traffic, ego=ego, go_issued=go, step_count=step_count, clock=step_count * cfg.dt)
    moved = spawn_traffic(moved, cfg, rng)

    found = detect_collisions(moved)
    reached = found.ego_reached_goal and not found.collision
    timeout = not (found.collision or reached) and step_count >= cfg.max_steps
    events = StepEvents(collision=found.collision, ego_reached_goal=reached, timeout=timeout,
                        braking_vehicle_count=braking)
    return replace(moved, terminated=events.terminal), events


def step_reward(events: StepEvents) -> float:
    """The step cost, plus the terminal reward on the step that ends the episode by success or collision."""
    reward = STEP_COST
    if events.collision:
        reward += COLLISION_REWARD
    elif events.ego_reached_goal:
        reward += SUCCESS_REWARD
    return reward


class IntersectionEnv:
    """One episode of one scenario, advanced a step at a time."""

    def __init__(self, scenario: ScenarioId, cfg: SimConfig, seed: int):
        self.scenario = scenario
        self.cfg = cfg
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.state = initial_state(build_scenario(scenario), cfg, self.rng)
        self.trajectory: list[TrajectoryStep] = []
        self.brake_time = 0.0
        self.last_events: Optional[StepEvents] = None

    @property
    def done(self) -> bool:
        return self.state.terminated

    def step(self, command: EgoCommand) -> tuple[StepEvents, float]:
        """Advance one step.

        :return: The step's events and reward.
        """
        previous = self.state
        self.state, events = step(previous, command, self.cfg, self.rng)
        reward = step_reward(events)
        self.trajectory.append(TrajectoryStep(state=previous, command=command, reward=reward))
        self.brake_time += events.braking_vehicle_count * self.cfg.dt
        self.last_events = events
        if events.terminal:
            logger.debug(f"{self.scenario} episode (seed {self.seed}) ended in {events.outcome} "
                         f"after {self.state.step_count} steps.")
        return events, reward

    def record(self) -> EpisodeRecord:
        if not self.done:
            raise SimulationError("Cannot build a record of an episode that is still running.")
        steps = self.state.step_count
        return EpisodeRecord(
            scenario=self.scenario,
            seed=self.seed,
            outcome=self.last_events.outcome,
            steps_taken=steps,
            elapsed_time=steps * self.cfg.dt,
            total_other_brake_time=self.brake_time,
            trajectory=list(self.trajectory)
        )


def run_episode(policy: Policy, scenario: ScenarioId, cfg: SimConfig, seed: int) -> EpisodeRecord:
    """Run one episode to its end, asking `policy` for a command before every step."""
    env = IntersectionEnv(scenario, cfg, seed)
    while not env.done:
        env.step(policy(env.state))
    return env.record()
