import math
import os
from dataclasses import replace

import numpy as np
import pytest

from pyintersect.categories import EgoCommand, Outcome, ScenarioId, TASK_ORDER
from pyintersect.config import IdmParams, SimConfig
from pyintersect.model import (EGO_LANE, GridFrame, LaneGeometry, Polyline, RoadNetwork, SimState, StepEvents,
                               VehicleState)
from pyintersect.sim import (SCENARIO_FILE, EpisodeTerminatedError, IntersectionEnv, SimulationError, build_scenario,
                             detect_collisions, idm_acceleration, initial_state, krauss_speed_update, load_scenarios,
                             run_episode, spawn_traffic, step, step_reward, traffic_collisions)
from pyintersect.xml_utils import GeometryFileError
from test.common import get_test_run_dir, quiet_sim_config

EXPECTED_CROSSED = {
    ScenarioId.RIGHT: 0,
    ScenarioId.LEFT: 1,
    ScenarioId.LEFT2: 2,
    ScenarioId.FORWARD: 2,
    ScenarioId.CHALLENGE: 6,
}

# Lanes the ego path enters, crossed or merged into
EXPECTED_CONFLICTS = {
    ScenarioId.RIGHT: ["n0"],
    ScenarioId.LEFT: ["n0", "f0"],
    ScenarioId.LEFT2: ["n0", "n1", "f0"],
    ScenarioId.FORWARD: ["n0", "f0"],
    ScenarioId.CHALLENGE: ["n0", "n1", "n2", "f0", "f1", "f2"],
}


def always(command: EgoCommand):
    return lambda state: command


def test_01_load_scenarios():
    """Test that all five scenarios load and cross the expected number of lanes."""
    networks = load_scenarios()
    assert set(networks) == set(TASK_ORDER)
    assert load_scenarios(SCENARIO_FILE) is networks
    for scenario, n in EXPECTED_CROSSED.items():
        network = build_scenario(scenario)
        assert network is networks[scenario]
        assert build_scenario(scenario, SCENARIO_FILE) is network
        assert len(network.crossed_lanes()) == n, scenario
        assert [lane.lane_id for lane in network.conflict_lanes()] == EXPECTED_CONFLICTS[scenario]
        assert network.frame.cell_size == 4.0
        assert np.allclose(network.goal_position, network.ego_path.end)


def _geometry_file(name: str, text: str) -> str:
    fpath = os.path.join(get_test_run_dir("sim_geometry", clean=False), name)
    with open(fpath, "w", encoding="utf-8") as f:
        f.write(text)
    return fpath


def test_02_bad_geometry_files():
    """Test that missing, malformed and incomplete geometry files are rejected."""
    get_test_run_dir("sim_geometry")
    forward = ('<scenario id="Forward"><frame originX="0" originY="0" cellSize="4"/>'
               '<lane id="n0" width="3.2" speed="20" shape="0,10 0,-10"/>'
               '<egoPath shape="{path}"/></scenario>')
    with pytest.raises(GeometryFileError):
        load_scenarios(_geometry_file("partial.xml", f"<scenarios>{forward.format(path='-5,0 5,0')}</scenarios>"))
    with pytest.raises(GeometryFileError) as e:
        load_scenarios(_geometry_file("apart.xml", f"<scenarios>{forward.format(path='-9,0 -5,0')}</scenarios>"))
    assert "does not enter any lane" in str(e.value)
    with pytest.raises(GeometryFileError):
        load_scenarios(_geometry_file("broken.xml", f"<scenarios>{forward.format(path='-5,0 5,0')}"))
    with pytest.raises(GeometryFileError):
        load_scenarios(_geometry_file("unknown.xml", '<scenarios><scenario id="Roundabout"/></scenarios>'))
    with pytest.raises(GeometryFileError):
        load_scenarios(os.path.join(get_test_run_dir("sim_geometry", clean=False), "missing.xml"))


def test_03_idm():
    """Test the intelligent driver model against hand-computed values."""
    p = IdmParams()
    assert idm_acceleration(10.0, 30.0, 10.0, p) == pytest.approx(1.555)
    assert idm_acceleration(0.0, math.inf, 0.0, p) == pytest.approx(p.max_accel)
    assert idm_acceleration(p.desired_speed, math.inf, 0.0, p) == pytest.approx(0.0)
    assert idm_acceleration(20.0, 1.0, 0.0, p) == -p.emergency_decel
    assert idm_acceleration(5.0, 0.0, 0.0, p) == -p.emergency_decel
    assert idm_acceleration(0.0, -1.0, 0.0, p) == 0.0
    # A driver with a lower desired speed is at equilibrium at that speed
    assert idm_acceleration(10.0, math.inf, 0.0, p, desired_speed=10.0) == pytest.approx(0.0)


def test_04_krauss():
    """Test that driver imperfection only slows vehicles, and vanishes with sigma = 0."""
    rng = np.random.default_rng(0)
    assert krauss_speed_update(10.0, 10.2, 0.0, 2.0, 0.2, rng) == pytest.approx(10.2)
    assert krauss_speed_update(10.0, 20.0, 0.0, 2.0, 0.2, rng) == pytest.approx(10.4)
    for _ in range(100):
        v = krauss_speed_update(10.0, 10.2, 0.5, 2.0, 0.2, rng)
        assert 10.2 - 0.2 <= v <= 10.2
    assert krauss_speed_update(0.0, 0.0, 1.0, 2.0, 0.2, rng) == 0.0


def test_05_determinism():
    """Test that an episode is fully determined by its scenario, seed and commands."""
    cfg = SimConfig()

    def policy(state: SimState) -> EgoCommand:
        return EgoCommand.GO if state.step_count >= 10 else EgoCommand.WAIT

    for scenario in (ScenarioId.LEFT, ScenarioId.CHALLENGE):
        a = run_episode(policy, scenario, cfg, seed=42)
        b = run_episode(policy, scenario, cfg, seed=42)
        assert a.outcome == b.outcome
        assert a.steps_taken == b.steps_taken
        assert a.total_other_brake_time == b.total_other_brake_time
        assert a.rewards == b.rewards
        for sa, sb in zip(a.trajectory, b.trajectory):
            assert sa.state.traffic == sb.state.traffic
            assert sa.state.ego == sb.state.ego


def test_06_waiting_times_out():
    """Test that an ego that only waits is never hit and times out after 20 seconds."""
    cfg = SimConfig()
    for scenario in TASK_ORDER:
        record = run_episode(always(EgoCommand.WAIT), scenario, cfg, seed=3)
        assert record.outcome == Outcome.TIMEOUT
        assert record.steps_taken == cfg.max_steps
        assert record.elapsed_time == pytest.approx(20.0)
        assert record.total_reward == pytest.approx(cfg.max_steps * -0.01)
        assert all(s.state.ego.position == 0.0 for s in record.trajectory)


def test_07_go_is_absorbing():
    """Test that wait commands after a go are ignored."""
    cfg = SimConfig(depart_probability=0.0)
    env = IntersectionEnv(ScenarioId.FORWARD, cfg, seed=1)
    env.step(EgoCommand.GO)
    positions = [env.state.ego.position]
    while not env.done:
        env.step(EgoCommand.WAIT)
        positions.append(env.state.ego.position)
    assert env.state.go_issued
    assert all(b > a for a, b in zip(positions, positions[1:]))
    record = env.record()
    assert record.outcome == Outcome.SUCCESS
    assert record.total_reward == pytest.approx(1.0 - 0.01 * record.steps_taken)


def test_08_empty_road_success():
    """Test that going immediately on an empty road succeeds on every task within the time limit."""
    cfg = SimConfig(depart_probability=0.0)
    for scenario in TASK_ORDER:
        record = run_episode(always(EgoCommand.GO), scenario, cfg, seed=0)
        assert record.outcome == Outcome.SUCCESS, scenario
        assert record.total_other_brake_time == 0.0
        assert record.elapsed_time == pytest.approx(record.steps_taken * cfg.dt)


def test_09_terminated_state():
    """Test that stepping an ended episode raises, and a running one cannot be recorded."""
    cfg = quiet_sim_config()
    env = IntersectionEnv(ScenarioId.RIGHT, cfg, seed=5)
    with pytest.raises(SimulationError):
        env.record()
    while not env.done:
        env.step(EgoCommand.WAIT)
    with pytest.raises(EpisodeTerminatedError):
        env.step(EgoCommand.WAIT)
    with pytest.raises(EpisodeTerminatedError):
        step(env.state, EgoCommand.GO, cfg, env.rng)


def _crossing_state() -> SimState:
    """The ego one step from its goal, with a stopped vehicle standing on the goal."""
    lane = LaneGeometry(lane_id="x", centerline=Polyline(np.array([[11.5, -100.0], [11.5, 100.0]])), width=3.2,
                        speed_limit=20.0)
    path = Polyline(np.array([[0.0, 0.0], [10.0, 0.0]]))
    network = RoadNetwork(scenario=ScenarioId.FORWARD, lanes=[lane], ego_path=path, goal_position=path.end.copy(),
                          frame=GridFrame(origin=(-36.0, -52.0), cell_size=4.0))
    ego = VehicleState(vehicle_id=0, lane_id=EGO_LANE, position=9.9, speed=10.0, length=5.0, width=2.0,
                       desired_speed=20.0)
    blocker = VehicleState(vehicle_id=1, lane_id="x", position=100.0, speed=0.0, length=5.0, width=2.0,
                           desired_speed=20.0)
    return SimState(network=network, traffic=(blocker,), ego=ego, go_issued=True, next_vehicle_id=2)


def test_10_collision_over_goal():
    """Test that a step which both reaches the goal and collides ends in a collision."""
    cfg = SimConfig(depart_probability=0.0)
    state, events = step(_crossing_state(), EgoCommand.GO, cfg, np.random.default_rng(0))
    assert state.ego.position >= state.network.ego_path.length
    assert events.collision
    assert not events.ego_reached_goal
    assert events.outcome == Outcome.COLLISION
    assert state.terminated
    assert step_reward(events) == pytest.approx(-1.01)


def test_11_rewards():
    """Test the per-step reward."""
    assert step_reward(StepEvents()) == pytest.approx(-0.01)
    assert step_reward(StepEvents(ego_reached_goal=True)) == pytest.approx(0.99)
    assert step_reward(StepEvents(collision=True)) == pytest.approx(-1.01)
    assert step_reward(StepEvents(timeout=True)) == pytest.approx(-0.01)
    assert not StepEvents().terminal
    assert StepEvents(timeout=True).outcome == Outcome.TIMEOUT


def test_12_detect_collisions():
    """Test collision detection against overlapping and clear vehicles."""
    state = _crossing_state()
    clear = replace(state, ego=replace(state.ego, position=2.0))
    assert not detect_collisions(clear).collision
    assert not detect_collisions(clear).ego_reached_goal
    moved = replace(state, ego=replace(state.ego, position=11.5))
    assert np.allclose(state.network.ego_path.point_at(11.5), [11.5, 0.0])
    assert detect_collisions(moved).collision
    assert detect_collisions(moved).ego_reached_goal


def test_13_spawn_rate():
    """Test the emission rate per simulated second, and that a lane-second holds an emission at the configured rate."""
    cfg = SimConfig()
    assert cfg.spawn_probability_per_step == pytest.approx(1 - 0.8 ** 0.2)
    network = build_scenario(ScenarioId.FORWARD)
    state = initial_state(network, replace(cfg, warmup_seconds=0.0), np.random.default_rng(0))
    rng = np.random.default_rng(11)
    steps_per_second = int(round(1 / cfg.dt))
    seconds = 20_000
    spawns = 0
    busy_seconds = 0
    for _ in range(seconds):
        spawned = []
        for _ in range(steps_per_second):
            spawned.extend(v.lane_id for v in spawn_traffic(replace(state, traffic=()), cfg, rng).traffic)
        spawns += len(spawned)
        busy_seconds += len(set(spawned))
    lane_seconds = seconds * len(network.lanes)
    assert spawns / lane_seconds == pytest.approx(cfg.spawn_probability_per_step / cfg.dt, abs=0.01)
    assert spawns / lane_seconds == pytest.approx(0.21824, abs=0.01)
    assert busy_seconds / lane_seconds == pytest.approx(cfg.depart_probability, abs=0.01)


def test_14_spawned_vehicles():
    """Test that emitted vehicles enter at the start of their lane, no faster than its speed limit."""
    cfg = SimConfig()
    rng = np.random.default_rng(2)
    for scenario in TASK_ORDER:
        network = build_scenario(scenario)
        state = initial_state(network, replace(cfg, warmup_seconds=0.0), rng)
        for _ in range(50):
            state = spawn_traffic(replace(state, traffic=()), cfg, rng)
            for vehicle in state.traffic:
                lane = network.lane(vehicle.lane_id)
                assert vehicle.position == pytest.approx(cfg.vehicle_length / 2)
                assert 0 < vehicle.speed <= lane.speed_limit
                assert vehicle.desired_speed == vehicle.speed
        ids = [v.vehicle_id for v in state.traffic]
        assert len(ids) == len(set(ids))


def test_15_no_traffic_collisions():
    """Test that traffic never collides with itself or leaves the speed range without driver imperfection."""
    cfg = SimConfig(krauss_sigma=0.0)
    for scenario in TASK_ORDER:
        network = build_scenario(scenario)
        rng = np.random.default_rng(100)
        state = initial_state(network, cfg, rng)
        for _ in range(10_000):
            if state.terminated:
                state = initial_state(network, cfg, rng)
            state, events = step(state, EgoCommand.WAIT, cfg, rng)
            assert not events.collision
            assert traffic_collisions(state) == [], scenario
            for vehicle in state.traffic:
                limit = network.lane(vehicle.lane_id).speed_limit + cfg.idm.max_accel * cfg.dt
                assert 0.0 <= vehicle.speed <= limit, scenario


def test_16_brake_time():
    """Test that accumulated brake time is a whole number of vehicle-steps."""
    cfg = SimConfig()
    record = run_episode(always(EgoCommand.WAIT), ScenarioId.CHALLENGE, cfg, seed=9)
    n = record.total_other_brake_time / cfg.dt
    assert record.total_other_brake_time >= 0
    assert n == pytest.approx(round(n))


def test_17_blocked_entry():
    """Test that a lane whose entry is too close to its last vehicle skips emission."""
    cfg = SimConfig(depart_probability=1.0, warmup_seconds=0.0, speed_deviation=0.0)
    assert cfg.spawn_probability_per_step == 1.0
    network = build_scenario(ScenarioId.FORWARD)
    state = initial_state(network, cfg, np.random.default_rng(0))
    near = VehicleState(vehicle_id=1, lane_id="n0", position=30.0, speed=20.0, length=5.0, width=2.0,
                        desired_speed=20.0)
    after = spawn_traffic(replace(state, traffic=(near,), next_vehicle_id=2), cfg, np.random.default_rng(0))
    assert [v.lane_id for v in after.traffic] == ["n0", "f0"]
    assert after.next_vehicle_id == 3
    # 5m vehicle, 2m gap, 20^2 / (2 * 9) stopping distance and one step of travel
    far = replace(near, position=40.0)
    after = spawn_traffic(replace(state, traffic=(far,), next_vehicle_id=2), cfg, np.random.default_rng(0))
    assert [v.lane_id for v in after.traffic] == ["n0", "n0", "f0"]
    assert [v.vehicle_id for v in after.traffic] == [1, 2, 3]


def test_18_empty_road_elapsed_time():
    """Test the time an ego that goes at once needs to cross an empty road."""
    cfg = SimConfig(depart_probability=0.0)
    for scenario, steps in ((ScenarioId.FORWARD, 23), (ScenarioId.CHALLENGE, 28)):
        record = run_episode(always(EgoCommand.GO), scenario, cfg, seed=0)
        assert record.outcome == Outcome.SUCCESS
        assert record.steps_taken == steps
        assert record.elapsed_time == pytest.approx(steps * 0.2)
        assert record.total_reward == pytest.approx(1.0 - 0.01 * steps)
