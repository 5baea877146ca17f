"""Deterministic multi-lane highway environment with LIDAR-style observations.

The world is a looped road. Lane 0 is the leftmost lane; the five actions
are maintain / accelerate / decelerate / left lane change / right lane
change. Traffic vehicles hold a constant, per-episode sampled speed and
never change lanes. All randomness happens at reset through a seeded
PCG64 generator, so an episode is a pure function of (config, seed,
action sequence).
"""

from dataclasses import dataclass, asdict
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .errors import ConfigError, DomainError, StateError

ACTION_MAINTAIN = 0
ACTION_ACCELERATE = 1
ACTION_DECELERATE = 2
ACTION_LEFT = 3
ACTION_RIGHT = 4
NUM_ACTIONS = 5

LANE_CHANGE_SECONDS = 1.0
MIN_SPAWN_HEADWAY = 20.0     # same-lane center distance at spawn, m
HOST_SPAWN_CLEARANCE = 40.0  # host-lane clear zone at spawn, m
TRAFFIC_SPEED_SPAN = 0.25    # lane base speeds span this fraction above v_min
TRAFFIC_SPEED_JITTER = 1.0   # per-vehicle deviation from its lane base, km/h


@dataclass(frozen=True)
class HighwayConfig:
    """Static description of the road, sensors and episode bounds."""

    lane_count: int = 5
    lane_width: float = 4.0          # m
    road_length: float = 1000.0      # m, looped
    ray_count: int = 24              # rays over 360 degrees
    max_range: float = 100.0         # m
    frame_stack: int = 3
    decision_hz: float = 5.0         # decisions per second
    vel_acc: float = 3.0             # km/h gained per accelerate decision
    vel_dec: float = 3.0             # km/h shed per decelerate decision
    host_speed_bounds: tuple = (40.0, 100.0)  # km/h
    traffic_density: float = 65.0    # vehicles per km of road
    episode_horizon: int = 200       # steps
    seed: int = 0

    @property
    def dt(self) -> float:
        return 1.0 / self.decision_hz

    @property
    def frame_length(self) -> int:
        return 2 * self.ray_count + 1

    @property
    def observation_dim(self) -> int:
        return self.frame_stack * self.frame_length

    @property
    def lane_change_steps(self) -> int:
        return max(1, round(self.decision_hz * LANE_CHANGE_SECONDS))

    def validate(self):
        if self.lane_count < 2:
            raise ConfigError("lane_count must be >= 2")
        if self.lane_width <= 0:
            raise ConfigError("lane_width must be > 0")
        if self.road_length <= 4 * self.max_range:
            raise ConfigError("road_length must exceed 4 * max_range")
        if self.ray_count < 1 or 360 % self.ray_count != 0:
            raise ConfigError("ray_count must divide 360 into whole degrees")
        if self.max_range <= 0:
            raise ConfigError("max_range must be > 0")
        if self.frame_stack < 1:
            raise ConfigError("frame_stack must be >= 1")
        if self.decision_hz <= 0:
            raise ConfigError("decision_hz must be > 0")
        if self.vel_acc <= 0:
            raise ConfigError("vel_acc must be > 0")
        if self.vel_dec <= 0:
            raise ConfigError("vel_dec must be > 0")
        v_min, v_max = self.host_speed_bounds
        if not (0 <= v_min < v_max):
            raise ConfigError("host_speed_bounds must satisfy 0 <= v_min < v_max")
        if self.traffic_density < 0:
            raise ConfigError("traffic_density must be >= 0")
        if self.episode_horizon < 1:
            raise ConfigError("episode_horizon must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["host_speed_bounds"] = list(self.host_speed_bounds)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "HighwayConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown env config key(s): {sorted(unknown)}")
        kwargs = dict(data)
        if "host_speed_bounds" in kwargs:
            bounds = kwargs["host_speed_bounds"]
            if not (isinstance(bounds, (list, tuple)) and len(bounds) == 2):
                raise ConfigError("host_speed_bounds must be a [v_min, v_max] pair")
            kwargs["host_speed_bounds"] = (float(bounds[0]), float(bounds[1]))
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def ray_angles(self):
        """(cos, sin) of ray directions, counterclockwise from heading."""
        angles = 2.0 * np.pi * np.arange(self.ray_count) / self.ray_count
        return np.cos(angles), np.sin(angles)


@dataclass
class HighwayState:
    """Full ground-truth world state for one episode."""

    config: HighwayConfig
    host: np.ndarray          # kernel layout, see _kernels
    traffic_lane: np.ndarray  # (V,) int64
    traffic_pos: np.ndarray   # (V,) float64
    traffic_speed: np.ndarray  # (V,) km/h
    traffic_lat: np.ndarray   # (V,) lane-center lateral positions
    prev_rel: np.ndarray      # (V,) host-relative positions, overtake tracking
    frames: np.ndarray        # (K, frame_length)
    terminated: bool = False
    collided: bool = False
    rng_state: Optional[dict] = None

    @property
    def step_index(self) -> int:
        return int(self.host[K.H_STEP])

    @property
    def host_lane(self) -> int:
        """Nearest lane index (target lane once past mid-maneuver)."""
        if self.host[K.H_PROG] >= 0.5:
            return int(self.host[K.H_TO])
        return int(self.host[K.H_FROM])

    @property
    def host_speed(self) -> float:
        return float(self.host[K.H_SPEED])

    @property
    def host_pos(self) -> float:
        return float(self.host[K.H_POS])

    @property
    def host_lateral(self) -> float:
        return float(K.host_lateral(self.host, self.config.lane_width))

    @property
    def lane_change_progress(self) -> Optional[float]:
        if self.host[K.H_ACTIVE] == 0.0:
            return None
        return float(self.host[K.H_PROG])

    def copy(self) -> "HighwayState":
        return HighwayState(
            config=self.config,
            host=self.host.copy(),
            traffic_lane=self.traffic_lane.copy(),
            traffic_pos=self.traffic_pos.copy(),
            traffic_speed=self.traffic_speed.copy(),
            traffic_lat=self.traffic_lat.copy(),
            prev_rel=self.prev_rel.copy(),
            frames=self.frames.copy(),
            terminated=self.terminated,
            collided=self.collided,
            rng_state=self.rng_state,
        )

    def observation(self) -> np.ndarray:
        """Flattened frame stack, oldest frame first."""
        return self.frames.reshape(-1).copy()


@dataclass(frozen=True)
class StepOutcome:
    observation: np.ndarray
    longitudinal_reward: float
    lateral_reward: float
    terminated: bool
    info: dict


@dataclass(frozen=True)
class Trajectory:
    """Per-episode (observation, action) record plus evaluation metrics."""

    observations: np.ndarray            # (T, n)
    actions: np.ndarray                 # (T,)
    speeds: Optional[np.ndarray] = None
    longitudinal: Optional[np.ndarray] = None
    lateral: Optional[np.ndarray] = None
    collided: bool = False
    lane_changes: int = 0
    overtakes: int = 0

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class DrivingStats:
    """Episode-averaged driving statistics."""

    avg_speed: float
    lane_changes: float
    overtakes: float
    longitudinal: float
    lateral: float

    CSV_HEADER = "avg_speed,lane_changes,overtakes,longitudinal,lateral"

    def csv_row(self) -> str:
        return ",".join(repr(float(v)) for v in (
            self.avg_speed, self.lane_changes, self.overtakes,
            self.longitudinal, self.lateral))


def lidar_scan(state: HighwayState, config: HighwayConfig):
    """Normalized ray distances and relative speeds for the current state."""
    cos_r, sin_r = config.ray_angles()
    dists = np.empty(config.ray_count)
    rels = np.empty(config.ray_count)
    K.ray_scan(state.host_pos, state.host_lateral, state.host_speed,
               state.traffic_pos, state.traffic_lat, state.traffic_speed,
               cos_r, sin_r, config.road_length, config.max_range,
               config.host_speed_bounds[1], dists, rels)
    return dists, rels


def _scan_state(state: HighwayState):
    return lidar_scan(state, state.config)


def env_reset(config: HighwayConfig, seed: int):
    """Place traffic with seeded sampling and return (state, observation).

    The host starts in the median lane at the midpoint of its speed
    bounds. Identical (config, seed) pairs produce bit-identical states.
    """
    config.validate()
    rng = np.random.default_rng(np.random.PCG64(seed))
    v_min, v_max = config.host_speed_bounds
    host = np.zeros(7)
    host[K.H_POS] = 0.0
    host[K.H_SPEED] = 0.5 * (v_min + v_max)
    median = config.lane_count // 2
    host[K.H_FROM] = host[K.H_TO] = float(median)

    count = int(round(config.traffic_density * config.road_length / 1000.0))
    road = config.road_length
    lane_counts = np.bincount(rng.integers(0, config.lane_count, size=count),
                              minlength=config.lane_count)
    # Each lane flows at a constant seeded base speed from the slow end of
    # the host range; vehicles hold a small constant offset from their
    # lane's base. Keeping same-lane speeds nearly uniform prevents
    # unavoidable rear-end hits on the host and traffic ghost overlaps.
    lane_base = rng.uniform(v_min, v_min + TRAFFIC_SPEED_SPAN * (v_max - v_min),
                            size=config.lane_count)
    lanes = np.repeat(np.arange(config.lane_count, dtype=np.int64),
                      lane_counts)
    positions = np.empty(count)
    cursor = 0
    for lane in range(config.lane_count):
        k = int(lane_counts[lane])
        if k == 0:
            continue
        # uniform placement with exact minimum headway: sorted uniforms on
        # the free length, spread apart by the headway
        if lane == median:
            free = road - 2 * HOST_SPAWN_CLEARANCE - k * MIN_SPAWN_HEADWAY
            if free <= 0:
                raise ConfigError(
                    "traffic_density too high to respect spawn headway")
            pts = np.sort(rng.uniform(0.0, free, size=k))
            pts += MIN_SPAWN_HEADWAY * np.arange(k)
            pts += host[K.H_POS] + HOST_SPAWN_CLEARANCE
        else:
            free = road - k * MIN_SPAWN_HEADWAY
            if free <= 0:
                raise ConfigError(
                    "traffic_density too high to respect spawn headway")
            pts = np.sort(rng.uniform(0.0, free, size=k))
            pts += MIN_SPAWN_HEADWAY * np.arange(k)
            pts += rng.uniform(0.0, road)  # random rotation around the loop
        positions[cursor:cursor + k] = pts % road
        cursor += k

    jitter = rng.uniform(-TRAFFIC_SPEED_JITTER, TRAFFIC_SPEED_JITTER,
                         size=count)
    speeds = np.maximum(lane_base[lanes] + jitter, v_min) if count else \
        np.empty(0)
    state = HighwayState(
        config=config,
        host=host,
        traffic_lane=lanes,
        traffic_pos=positions,
        traffic_speed=speeds.astype(np.float64),
        traffic_lat=(lanes + 0.5) * config.lane_width,
        prev_rel=np.empty(count),
        frames=np.zeros((config.frame_stack, config.frame_length)),
    )
    for v in range(count):
        state.prev_rel[v] = K.wrap_signed(
            host[K.H_POS] - positions[v], config.road_length)
    dists, rels = _scan_state(state)
    frame = np.concatenate([dists, rels, [state.host_speed / v_max]])
    state.frames[:] = frame
    state.rng_state = rng.bit_generator.state
    return state, state.observation()


def env_step(state: HighwayState, action: int):
    """Apply one action and return (new state, StepOutcome). Pure."""
    if state.terminated:
        raise StateError("env_step called on a terminated episode")
    action = int(action)
    if not 0 <= action < NUM_ACTIONS:
        raise DomainError(f"action id {action} outside [0, {NUM_ACTIONS - 1}]")
    cfg = state.config
    out = state.copy()
    v_min, v_max = cfg.host_speed_bounds
    lon, lat, terminated, collided, overtakes, completed = K.step_core(
        out.host, out.traffic_pos, out.traffic_speed, out.traffic_lat,
        out.prev_rel, action,
        cfg.lane_count, cfg.lane_width, cfg.road_length, cfg.dt,
        cfg.vel_acc, cfg.vel_dec, v_min, v_max,
        cfg.lane_change_steps, cfg.episode_horizon)
    out.terminated = bool(terminated)
    out.collided = bool(collided)
    if not terminated:
        dists, rels = _scan_state(out)
        K.push_frame(out.frames, dists, rels, out.host_speed / v_max)
    outcome = StepOutcome(
        observation=out.observation(),
        longitudinal_reward=float(lon),
        lateral_reward=float(lat),
        terminated=bool(terminated),
        info={
            "collision": bool(collided),
            "overtakes_delta": int(overtakes),
            "lane_change_completed": bool(completed),
        },
    )
    return out, outcome


def scripted_expert(observation: np.ndarray, state: HighwayState) -> int:
    """Deterministic rule-based expert driving on ground-truth gaps."""
    lc_dir = 0
    if state.host[K.H_ACTIVE] != 0.0:
        lc_dir = 1 if state.host[K.H_TO] > state.host[K.H_FROM] else -1
    return int(K.expert_rule(
        state.host_pos, state.host_speed, state.host_lane, lc_dir,
        state.traffic_pos, state.traffic_lane, state.traffic_speed,
        state.config.lane_count, state.config.road_length,
        K.GAP_OPEN, K.GAP_CLOSE, K.GAP_SAFE))


def run_episode(policy_fn: Callable, config: HighwayConfig, seed: int) -> Trajectory:
    """Roll one episode with a (observation, state) -> action callable."""
    state, obs = env_reset(config, seed)
    horizon = config.episode_horizon
    n = config.observation_dim
    obs_buf = np.empty((horizon, n))
    act_buf = np.empty(horizon, dtype=np.int64)
    spd_buf = np.empty(horizon)
    lon_buf = np.empty(horizon)
    lat_buf = np.empty(horizon)
    lane_changes = 0
    overtakes = 0
    steps = 0
    while not state.terminated:
        action = policy_fn(obs, state)
        obs_buf[steps] = obs
        act_buf[steps] = action
        state, outcome = env_step(state, action)
        spd_buf[steps] = state.host_speed
        lon_buf[steps] = outcome.longitudinal_reward
        lat_buf[steps] = outcome.lateral_reward
        lane_changes += int(outcome.info["lane_change_completed"])
        overtakes += outcome.info["overtakes_delta"]
        obs = outcome.observation
        steps += 1
    return Trajectory(
        observations=obs_buf[:steps].copy(),
        actions=act_buf[:steps].copy(),
        speeds=spd_buf[:steps].copy(),
        longitudinal=lon_buf[:steps].copy(),
        lateral=lat_buf[:steps].copy(),
        collided=state.collided,
        lane_changes=lane_changes,
        overtakes=overtakes,
    )


def run_params_episode(params, mu, inv_sigma, config: HighwayConfig,
                       seed: int) -> Trajectory:
    """Roll one episode with policy weights through the jitted fast path."""
    state, _ = env_reset(config, seed)
    horizon = config.episode_horizon
    n = config.observation_dim
    obs_buf = np.empty((horizon, n))
    act_buf = np.empty(horizon, dtype=np.int64)
    spd_buf = np.empty(horizon)
    lon_buf = np.empty(horizon)
    lat_buf = np.empty(horizon)
    cos_r, sin_r = config.ray_angles()
    kind_flag = 0 if params.kind == "linear" else 1
    w_out = params.w_out if params.w_out is not None else np.zeros((1, 1))
    v_min, v_max = config.host_speed_bounds
    steps, collided, lane_changes, overtakes = K.run_policy_episode(
        kind_flag, params.w_in, w_out, mu, inv_sigma,
        state.host, state.traffic_pos, state.traffic_speed,
        state.traffic_lat, state.prev_rel, state.frames,
        cos_r, sin_r,
        config.lane_count, config.lane_width, config.road_length,
        config.max_range, config.dt, config.vel_acc, config.vel_dec,
        v_min, v_max, config.lane_change_steps, horizon,
        obs_buf, act_buf, spd_buf, lon_buf, lat_buf)
    return Trajectory(
        observations=obs_buf[:steps].copy(),
        actions=act_buf[:steps].copy(),
        speeds=spd_buf[:steps].copy(),
        longitudinal=lon_buf[:steps].copy(),
        lateral=lat_buf[:steps].copy(),
        collided=bool(collided),
        lane_changes=int(lane_changes),
        overtakes=int(overtakes),
    )


def episode_seed(seed: int, index: int) -> int:
    """Stable per-episode sub-seed for evaluation suites."""
    return int(np.random.SeedSequence((seed, index)).generate_state(
        1, dtype=np.uint64)[0])


def trajectory_stats(traj: Trajectory) -> DrivingStats:
    return DrivingStats(
        avg_speed=float(np.mean(traj.speeds)) if len(traj) else 0.0,
        lane_changes=float(traj.lane_changes),
        overtakes=float(traj.overtakes),
        longitudinal=float(np.sum(traj.longitudinal)),
        lateral=float(np.sum(traj.lateral)),
    )


def trajectory_stats_rows(trajectories) -> DrivingStats:
    """Episode-mean statistics over a list of trajectories."""
    rows = np.array([[s.avg_speed, s.lane_changes, s.overtakes,
                      s.longitudinal, s.lateral]
                     for s in map(trajectory_stats, trajectories)])
    return DrivingStats(*[float(v) for v in rows.mean(axis=0)])


def evaluate_policy(policy, config: HighwayConfig, episodes: int,
                    seed: int) -> DrivingStats:
    """Average driving statistics over a fixed-seed episode set.

    ``policy`` is either a ``(params, mu, inv_sigma)`` triple from
    policy-core (fast path) or any ``(observation, state) -> action``
    callable such as :func:`scripted_expert`.
    """
    if episodes < 1:
        raise DomainError("episodes must be >= 1")
    rows = np.empty((episodes, 5))
    for i in range(episodes):
        ep_seed = episode_seed(seed, i)
        if callable(policy):
            traj = run_episode(policy, config, ep_seed)
        else:
            params, mu, inv_sigma = policy
            traj = run_params_episode(params, mu, inv_sigma, config, ep_seed)
        s = trajectory_stats(traj)
        rows[i] = (s.avg_speed, s.lane_changes, s.overtakes,
                   s.longitudinal, s.lateral)
    means = rows.mean(axis=0)
    return DrivingStats(*[float(v) for v in means])
