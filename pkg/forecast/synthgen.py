"""Seedable synthetic interaction scenarios.

Three generators produce ground-truth datasets with known structure:

- traffic weave: two cars side by side must swap lanes, a biased coin decides
  who goes first, giving a clean bimodal future;
- social forces: pedestrians walking to goals with goal attraction and
  exponential pairwise repulsion;
- IDM string: a column of cars following a scripted leader.

Every generator is a pure function of (params, seed).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import ConfigurationError, InputError
from .utils import make_rng

STATE_COLUMNS = ("x", "y", "vx", "vy", "heading")
LABEL_A_FIRST = "A-first"
LABEL_B_FIRST = "B-first"


def wrap_angle(angle: Any) -> Any:
    """Map angles into [-pi, pi)."""
    return (np.asarray(angle) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class Trajectory:
    """States of one agent on the episode's time grid.

    `states` is (T, 5) with columns x, y, vx, vy, heading; heading is NaN for
    agents without one. `start` is the timestep of the first row.
    """

    agent_id: str
    agent_type: str
    states: np.ndarray
    start: int = 0

    @property
    def end(self) -> int:
        """One past the last timestep covered."""
        return self.start + len(self.states)

    def at(self, timestep: int) -> np.ndarray | None:
        """State row at an absolute timestep, None when absent."""
        if self.start <= timestep < self.end:
            return self.states[timestep - self.start]
        return None


@dataclass
class Episode:
    """One generated scene."""

    scene_id: str
    kind: str
    dt: float
    trajectories: dict[str, Trajectory]
    label: str | None = None
    robot_id: str | None = None
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def length(self) -> int:
        """Number of timesteps spanned by the episode."""
        return max((t.end for t in self.trajectories.values()), default=0)

    def agent_types(self) -> dict[str, str]:
        """Agent id to semantic type."""
        return {i: t.agent_type for i, t in self.trajectories.items()}

    def stacked(self) -> dict[str, np.ndarray]:
        """Agent id to a (length, 5) array padded with NaN outside its presence interval."""
        out = {}
        for agent_id, traj in self.trajectories.items():
            full = np.full((self.length, len(STATE_COLUMNS)), np.nan)
            full[traj.start : traj.end] = traj.states
            out[agent_id] = full
        return out


@dataclass(frozen=True)
class Scenario:
    """Everything that determines an episode."""

    seed: int
    kind: str
    params: dict[str, Any]

    def generate(self, index: int = 0) -> Episode:
        """Run the matching generator for the `index`-th episode of this scenario."""
        return generate_episode(self.kind, self.params, self.seed, index)


# Traffic weave


@dataclass
class TrafficWeaveParams:  # pylint: disable=too-many-instance-attributes
    """Two-car lane swap negotiation."""

    dt: float = 0.1
    steps: int = 60
    lane_width: float = 3.5
    speed_a: float = 10.0
    speed_b: float = 10.0
    bias_scale: float = 1.0
    accel: float = 2.0
    maneuver_start: int = 5
    maneuver_steps: int = 15
    merge_start: int = 25
    merge_steps: int = 25
    accel_noise: float = 0.3
    lateral_noise: float = 0.05
    lateral_reversion: float = 1.0
    v_max: float = 15.0

    def validate(self) -> TrafficWeaveParams:
        """Raise InputError on impossible geometry or timing."""
        if self.lane_width <= 0:
            raise InputError(f"Lane width must be positive, got {self.lane_width}")
        if self.dt <= 0 or self.bias_scale <= 0:
            raise InputError("dt and bias_scale must be positive")
        if self.maneuver_start + self.maneuver_steps > self.merge_start:
            raise InputError("Merge must start after the speed maneuver ends")
        if self.merge_start + self.merge_steps > self.steps:
            raise InputError("Merge does not finish within the episode")
        if not (0 <= min(self.speed_a, self.speed_b) and max(self.speed_a, self.speed_b) <= self.v_max):
            raise InputError("Initial speeds must lie in [0, v_max]")
        return self


def weave_first_probability(params: TrafficWeaveParams) -> float:
    """Probability that car A ends up ahead; 0.5 at equal speeds."""
    return float(expit((params.speed_a - params.speed_b) / params.bias_scale))


def gen_traffic_weave(params: TrafficWeaveParams, seed: int, scene_id: str = "weave") -> Episode:
    """Two cars side by side swap lanes; who goes first is a coin biased by their speed difference.

    Car A is the robot and starts in the lower lane, car B the human in the upper
    one. The leader accelerates and the yielder brakes during the maneuver
    window, then both follow a cosine lateral profile into the other lane.
    """
    params.validate()
    rng = make_rng(seed, "traffic_weave", scene_id)
    a_first = bool(rng.random() < weave_first_probability(params))
    label = LABEL_A_FIRST if a_first else LABEL_B_FIRST
    dt, steps, lane = params.dt, params.steps, params.lane_width

    trajectories = {}
    plans = (
        ("A", "robot", 0.0, lane, params.speed_a, a_first),
        ("B", "vehicle", lane, 0.0, params.speed_b, not a_first),
    )
    for agent_id, agent_type, lane_from, lane_to, speed, leads in plans:
        sign = 1.0 if leads else -1.0
        states = np.empty((steps, len(STATE_COLUMNS)))
        x, vx, offset = 0.0, speed, 0.0
        for t in range(steps):
            progress = np.clip((t - params.merge_start) / params.merge_steps, 0.0, 1.0)
            y_ref = lane_from + (lane_to - lane_from) * 0.5 * (1.0 - math.cos(math.pi * progress))
            in_merge = 0.0 < progress < 1.0
            vy_ref = (
                (lane_to - lane_from) * 0.5 * math.pi * math.sin(math.pi * progress) / (params.merge_steps * dt)
                if in_merge
                else 0.0
            )
            vy_noise = -params.lateral_reversion * offset + params.lateral_noise * rng.standard_normal()
            vy = vy_ref + vy_noise
            states[t] = (x, y_ref + offset, vx, vy, math.atan2(vy, vx))

            maneuvering = params.maneuver_start <= t < params.maneuver_start + params.maneuver_steps
            accel = sign * params.accel if maneuvering else 0.0
            accel += params.accel_noise * rng.standard_normal()
            vx = float(np.clip(vx + accel * dt, 0.0, params.v_max))
            x += vx * dt
            offset += vy_noise * dt
        states[:, 4] = wrap_angle(states[:, 4])
        trajectories[agent_id] = Trajectory(agent_id, agent_type, states)

    logging.debug(f"Traffic weave {scene_id}: {label}")
    return Episode(scene_id, "traffic_weave", dt, trajectories, label=label, robot_id="A", params=asdict(params))


def scripted_robot_future(
    last_state: np.ndarray, horizon: int, dt: float, accel: float, v_max: float = 15.0
) -> np.ndarray:
    """(horizon, 5) candidate robot future holding a longitudinal acceleration along the current heading."""
    x, y, vx, vy = (float(v) for v in last_state[:4])
    heading = math.atan2(vy, vx) if vx or vy else 0.0
    speed = math.hypot(vx, vy)
    rows = []
    for _ in range(horizon):
        speed = float(np.clip(speed + accel * dt, 0.0, v_max))
        x += speed * math.cos(heading) * dt
        y += speed * math.sin(heading) * dt
        rows.append((x, y, speed * math.cos(heading), speed * math.sin(heading), heading))
    return np.array(rows)


ROBOT_CANDIDATES = {"accelerate": 2.0, "keep": 0.0, "brake": -2.0}


def robot_candidates(last_state: np.ndarray, horizon: int, dt: float) -> dict[str, np.ndarray]:
    """Named candidate robot futures for conditional prediction."""
    return {name: scripted_robot_future(last_state, horizon, dt, accel) for name, accel in ROBOT_CANDIDATES.items()}


# Social forces


@dataclass
class SocialForceParams:  # pylint: disable=too-many-instance-attributes
    """Goal attraction plus exponential pairwise repulsion."""

    dt: float = 0.4
    substeps: int = 4
    steps: int = 30
    tau: float = 0.5
    repulsion: float = 2.0
    falloff: float = 0.3
    radius: float = 0.4
    desired_speed: float = 1.3
    speed_cap: float = 1.3
    goal_tolerance: float = 0.5
    arena: float = 6.0
    with_robot: bool = True

    def validate(self) -> SocialForceParams:
        """Raise InputError on non-physical settings."""
        if self.dt <= 0 or self.substeps < 1 or self.tau <= 0 or self.falloff <= 0:
            raise InputError("dt, tau and falloff must be positive, substeps >= 1")
        return self


def _random_placements(n: int, params: SocialForceParams, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    starts = np.empty((n, 2))
    for i in range(n):
        for _ in range(1000):
            candidate = rng.uniform(-params.arena, params.arena, size=2)
            if i == 0 or np.min(np.linalg.norm(starts[:i] - candidate, axis=1)) > 4 * params.radius:
                starts[i] = candidate
                break
        else:
            raise InputError(f"Cannot place {n} agents in a {2 * params.arena} m arena")
    # Goals on the far side of the arena produce crossing flows.
    goals = -starts + rng.normal(0.0, 0.5, size=(n, 2))
    return starts, goals


def gen_social_forces(
    n: int,
    params: SocialForceParams,
    seed: int,
    starts: np.ndarray | None = None,
    goals: np.ndarray | None = None,
    scene_id: str = "plaza",
) -> Episode:
    """Forward-Euler social-force pedestrians; agents stop once within the goal tolerance."""
    params.validate()
    if n < 1:
        raise InputError(f"Need at least one agent, got {n}")
    rng = make_rng(seed, "social_forces", scene_id)
    if starts is None or goals is None:
        starts, goals = _random_placements(n, params, rng)
    pos = np.array(starts, dtype=np.float64).reshape(n, 2)
    goals = np.array(goals, dtype=np.float64).reshape(n, 2)
    contact = 2.0 * params.radius
    if n > 1:
        gaps = np.linalg.norm(pos[:, None] - pos[None], axis=-1) + np.eye(n) * 1e9
        if np.min(gaps) < contact:
            raise InputError(f"Initial positions overlap (closer than {contact} m)")

    vel = np.zeros((n, 2))
    arrived = np.linalg.norm(goals - pos, axis=1) < params.goal_tolerance
    h = params.dt / params.substeps
    max_speed = params.speed_cap * params.desired_speed
    frames = np.empty((params.steps, n, 4))
    for t in range(params.steps):
        frames[t, :, :2] = pos
        frames[t, :, 2:] = vel
        for _ in range(params.substeps):
            to_goal = goals - pos
            dist = np.linalg.norm(to_goal, axis=1, keepdims=True)
            direction = to_goal / np.maximum(dist, 1e-9)
            force = (params.desired_speed * direction - vel) / params.tau
            if n > 1:
                diff = pos[:, None] - pos[None]
                d = np.linalg.norm(diff, axis=-1) + np.eye(n)
                push = params.repulsion * np.exp((contact - d) / params.falloff) * (1.0 - np.eye(n))
                force += np.sum(push[..., None] * diff / d[..., None], axis=1)
            vel = vel + h * force
            speed = np.linalg.norm(vel, axis=1, keepdims=True)
            vel = vel * np.minimum(1.0, max_speed / np.maximum(speed, 1e-12))
            vel[arrived] = 0.0
            pos = pos + h * vel
            arrived |= np.linalg.norm(goals - pos, axis=1) < params.goal_tolerance

    trajectories = {}
    for i in range(n):
        agent_type = "robot" if params.with_robot and i == 0 else "pedestrian"
        agent_id = "R" if agent_type == "robot" else f"P{i}"
        states = np.concatenate([frames[:, i], np.full((params.steps, 1), np.nan)], axis=1)
        trajectories[agent_id] = Trajectory(agent_id, agent_type, states)
    robot = "R" if params.with_robot else None
    return Episode(scene_id, "social_forces", params.dt, trajectories, robot_id=robot, params=asdict(params))


# IDM car following


@dataclass
class IdmParams:  # pylint: disable=too-many-instance-attributes
    """Intelligent-driver-model column on one lane."""

    dt: float = 0.5
    substeps: int = 5
    steps: int = 40
    desired_speed: float = 15.0
    headway: float = 1.5
    max_accel: float = 1.0
    comfort_decel: float = 1.5
    jam_distance: float = 2.0
    exponent: float = 4.0
    length: float = 5.0
    leader_speed: float = 10.0
    leader_profile: str = "constant"
    brake_step: int = 10
    brake_decel: float = 4.0
    initial_gap: float = 0.0
    speed_jitter: float = 1.0
    robot_leader: bool = True

    def validate(self) -> IdmParams:
        """Raise InputError on non-physical settings."""
        if self.leader_profile not in ("constant", "hard_brake"):
            raise ConfigurationError(f"Unknown leader profile '{self.leader_profile}'")
        if self.dt <= 0 or self.substeps < 1 or self.max_accel <= 0 or self.comfort_decel <= 0:
            raise InputError("dt, accelerations must be positive, substeps >= 1")
        return self


def idm_acceleration(speed: Any, gap: Any, closing: Any, params: IdmParams) -> Any:
    """IDM law: a [1 - (v/v0)^delta - (s*/s)^2] with s* = s0 + max(0, v T + v dv / (2 sqrt(a b)))."""
    desired_gap = params.jam_distance + np.maximum(
        0.0, speed * params.headway + speed * closing / (2.0 * math.sqrt(params.max_accel * params.comfort_decel))
    )
    return params.max_accel * (1.0 - (speed / params.desired_speed) ** params.exponent - (desired_gap / gap) ** 2)


def equilibrium_gap(speed: float, params: IdmParams) -> float:
    """Bumper-to-bumper gap at which a follower at `speed` behind an equal-speed leader has zero acceleration."""
    if not 0.0 <= speed < params.desired_speed:
        raise InputError(f"No equilibrium at speed {speed} with desired speed {params.desired_speed}")
    low = params.jam_distance + speed * params.headway
    high = low * 1e3 + 1.0
    return float(brentq(lambda s: idm_acceleration(speed, s, 0.0, params), low, high, xtol=1e-13, rtol=1e-15))


def _leader_speed(t: float, cruise: float, params: IdmParams) -> float:
    if params.leader_profile == "hard_brake" and t >= params.brake_step * params.dt:
        return max(0.0, cruise - params.brake_decel * (t - params.brake_step * params.dt))
    return cruise


def gen_idm_string(n: int, params: IdmParams, seed: int, scene_id: str = "string") -> Episode:
    """Leader follows a scripted speed profile; followers integrate the IDM law on sub-steps.

    Parameters under which any two vehicles touch are a ConfigurationError.
    """
    params.validate()
    if n < 2:
        raise InputError(f"An IDM string needs at least 2 vehicles, got {n}")
    rng = make_rng(seed, "idm_string", scene_id)
    v0 = params.leader_speed + params.speed_jitter * rng.standard_normal()
    v0 = float(np.clip(v0, 0.0, 0.9 * params.desired_speed))
    gap = params.initial_gap or equilibrium_gap(v0, params)
    if gap < params.jam_distance:
        raise InputError(f"Initial gap {gap} m is below the jam distance {params.jam_distance} m")
    # Column laid out backwards from the leader at x = 0; order is front to back.
    pos = -np.arange(n) * (gap + params.length)
    vel = np.full(n, v0)

    h = params.dt / params.substeps
    frames = np.empty((params.steps, n, 2))
    closest = math.inf
    for t in range(params.steps):
        frames[t, :, 0] = pos
        frames[t, :, 1] = vel
        for k in range(params.substeps):
            time = t * params.dt + k * h
            lead_v = _leader_speed(time, v0, params)
            lead_next = _leader_speed(time + h, v0, params)
            gaps = pos[:-1] - pos[1:] - params.length
            accel = idm_acceleration(vel[1:], gaps, vel[1:] - vel[:-1], params)
            new_vel = np.empty(n)
            new_vel[0] = lead_next
            new_vel[1:] = np.maximum(0.0, vel[1:] + h * accel)
            pos = pos + h * np.concatenate([[0.5 * (lead_v + lead_next)], new_vel[1:]])
            vel = new_vel
            closest = min(closest, float(np.min(pos[:-1] - pos[1:] - params.length)))
    if closest <= 0:
        raise ConfigurationError(
            f"IDM string {scene_id} collided (minimum gap {closest:.3f} m); check headway and braking"
        )

    trajectories = {}
    for i in range(n):
        agent_type = "robot" if params.robot_leader and i == 0 else "vehicle"
        agent_id = f"V{i}"
        states = np.zeros((params.steps, len(STATE_COLUMNS)))
        states[:, 0] = frames[:, i, 0]
        states[:, 2] = frames[:, i, 1]
        trajectories[agent_id] = Trajectory(agent_id, agent_type, states)
    robot = "V0" if params.robot_leader else None
    return Episode(scene_id, "idm_string", params.dt, trajectories, robot_id=robot, params=asdict(params))


def min_gap(episode: Episode, length: float) -> float:
    """Smallest bumper-to-bumper gap between consecutive vehicles of an IDM episode."""
    xs = np.stack([t.states[:, 0] for t in episode.trajectories.values()])
    return float(np.min(xs[:-1] - xs[1:] - length))


# Dispatch

PARAM_TYPES: dict[str, type] = {
    "traffic_weave": TrafficWeaveParams,
    "social_forces": SocialForceParams,
    "idm_string": IdmParams,
}


def make_params(kind: str, overrides: dict[str, Any]) -> Any:
    """Generator parameters for `kind` with the `agents` key removed and unknown keys refused."""
    if kind not in PARAM_TYPES:
        raise ConfigurationError(f"Unknown scenario kind '{kind}'")
    cls = PARAM_TYPES[kind]
    defaults = {f.name: f.default for f in fields(cls)}
    values = {k: v for k, v in overrides.items() if k != "agents"}
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigurationError(f"Unknown {kind} parameters: {', '.join(unknown)}")
    for key, value in values.items():
        default = defaults[key]
        try:
            if isinstance(default, bool):
                values[key] = str(value).lower() in ("1", "true", "yes", "on")
            elif isinstance(default, (int, float)):
                values[key] = type(default)(value)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"Bad value '{value}' for {kind} parameter '{key}'") from e
    return cls(**values)


def generate_episode(kind: str, overrides: dict[str, Any], seed: int, index: int) -> Episode:
    """Episode `index` of a scenario; the scene id carries the seed and index."""
    params = make_params(kind, overrides)
    scene_id = f"{kind}-{seed}-{index:05d}"
    agents = int(overrides.get("agents", 0))
    if kind == "traffic_weave":
        return gen_traffic_weave(params, seed, scene_id)
    if kind == "social_forces":
        return gen_social_forces(agents or 4, params, seed, scene_id=scene_id)
    return gen_idm_string(agents or 4, params, seed, scene_id)


# Windows


@dataclass
class XRecord:
    """Conditioning side of one window: all agents' histories and the robot's future."""

    scene_id: str
    t0: int
    histories: dict[str, np.ndarray]
    agent_types: dict[str, str]
    robot_id: str | None
    robot_future: np.ndarray | None
    label: str | None = None


@dataclass
class YRecord:
    """Target side of one window: future states of every non-robot agent present throughout."""

    scene_id: str
    t0: int
    futures: dict[str, np.ndarray]


def split_episode(episode: Episode, history: int, horizon: int, stride: int = 1) -> list[tuple[XRecord, YRecord]]:
    """Sliding windows of `history` past steps (ending at t0) and `horizon` future steps."""
    if history < 1 or horizon < 1 or stride < 1:
        raise InputError("history, horizon and stride must be >= 1")
    if episode.length < history + horizon:
        raise InputError(f"Episode of {episode.length} steps is shorter than history {history} + horizon {horizon}")
    stacked = episode.stacked()
    types = episode.agent_types()
    pairs = []
    for t0 in range(history - 1, episode.length - horizon, stride):
        past = slice(t0 - history + 1, t0 + 1)
        future = slice(t0 + 1, t0 + 1 + horizon)
        histories = {i: s[past].copy() for i, s in stacked.items() if not np.all(np.isnan(s[past, 0]))}
        robot_future = None
        if episode.robot_id is not None:
            robot_future = stacked[episode.robot_id][future].copy()
        futures = {
            i: s[future].copy()
            for i, s in stacked.items()
            if i != episode.robot_id and i in histories and not np.any(np.isnan(s[future, 0]))
        }
        x = XRecord(
            episode.scene_id,
            t0,
            histories,
            {i: types[i] for i in histories},
            episode.robot_id,
            robot_future,
            episode.label,
        )
        pairs.append((x, YRecord(episode.scene_id, t0, futures)))
    return pairs
