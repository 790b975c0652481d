"""2D waypoint-track driving simulator.

Deterministic kinematic bicycle over a corridor defined by centerline
waypoints. Produces 13-dim vector observations and a shaped reward:
a positional term decaying with squared distance to the nearest waypoint,
a steering-smoothness penalty, and a flat -1 on crash.

Conventions: headings in radians, math orientation (x right, y up,
positive angles counterclockwise). Positive steering increases heading.
Action index 0 maps to steering -0.8, index 32 to +0.8; UIs label lower
indices "left" because tracks are rendered y-down.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

N_ACTIONS = 33
STEER_MAX = 0.8
STEER_STEP = 0.05  # (2 * STEER_MAX) / (N_ACTIONS - 1)
WHEELBASE = 2.5  # m
DT = 0.1  # s
SPEED_MIN = 32.0 / 3.6  # m/s (32 km/h)
SPEED_MAX = 40.0 / 3.6  # m/s (40 km/h)

# Observation layout: 9 rays, cross-track, heading error, previous
# steering, normalized speed.
RAY_BEARINGS = np.deg2rad(np.arange(-90.0, 90.1, 22.5))
N_RAYS = 9
RAY_RANGE = 12.0  # m
RAY_STEP = 0.4  # m, ray-march resolution
OBS_DIM = 13
OBS_LOW = np.array([0.0] * N_RAYS + [-1.0, -1.0, -1.0, 0.0])
OBS_HIGH = np.ones(OBS_DIM)

TRACK_SCHEMA_VERSION = 1


class ConfigurationError(ValueError):
    """Invalid track or run configuration."""


class SimulatorFault(RuntimeError):
    """Non-finite state or other internal simulator failure."""


class EpisodeStatus(Enum):
    CONTINUE = "continue"
    SUCCESS = "success"
    FAILURE = "failure"


@dataclass(frozen=True)
class RewardConfig:
    """Reward shaping constants (delta/beta for position, xi for smoothness)."""

    delta: float = 0.2
    beta_pos: float = 0.2
    xi: float = 0.5
    history_len: int = 4

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigurationError(f"delta must be > 0, got {self.delta}")
        if self.xi < 0:
            raise ConfigurationError(f"xi must be >= 0, got {self.xi}")
        if self.history_len != 4:
            raise ConfigurationError("history_len is fixed at 4")


@dataclass(frozen=True)
class RewardBreakdown:
    r_pos: float
    r_sm: float
    r_cr: float
    r_total: float


@dataclass(frozen=True)
class VehicleState:
    """Pose plus the per-episode constants (speed is frozen at reset)."""

    position: np.ndarray  # shape (2,)
    heading: float
    speed: float
    steering: float
    step_index: int

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.position))
            and math.isfinite(self.heading)
            and math.isfinite(self.speed)
            and math.isfinite(self.steering)
        )


class ActionHistory:
    """Ring of the last `maxlen` executed steering values (simulator units)."""

    def __init__(self, maxlen: int = 4):
        self._buf: deque[float] = deque(maxlen=maxlen)

    def push(self, steering: float) -> None:
        self._buf.append(float(steering))

    def clear(self) -> None:
        self._buf.clear()

    def values(self) -> list[float]:
        return list(self._buf)

    def __len__(self) -> int:
        return len(self._buf)


class TrackSpec:
    """Waypoint corridor: centerline points, half-width, optional obstacles.

    Consecutive waypoints must be distinct and spaced no wider than the
    corridor half-width so that nearest-waypoint distance is a usable
    stand-in for centerline distance.
    """

    def __init__(
        self,
        waypoints,
        half_width: float,
        obstacles=(),
        closed: bool = False,
        name: str = "track",
    ):
        self.waypoints = np.asarray(waypoints, dtype=np.float64)
        self.half_width = float(half_width)
        self.obstacles = [
            (np.asarray(c, dtype=np.float64), float(r)) for c, r in obstacles
        ]
        self.closed = bool(closed)
        self.name = name
        self._validate()
        self._obs_centers = (
            np.stack([c for c, _ in self.obstacles])
            if self.obstacles
            else np.zeros((0, 2))
        )
        self._obs_radii = np.array([r for _, r in self.obstacles], dtype=np.float64)
        self._wp_sq = np.einsum("ij,ij->i", self.waypoints, self.waypoints)

    def _validate(self) -> None:
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 2:
            raise ConfigurationError("waypoints must be an (N, 2) array")
        if len(self.waypoints) < 2:
            raise ConfigurationError("track needs at least 2 waypoints")
        if not self.half_width > 0:
            raise ConfigurationError("half_width must be > 0")
        seg = np.diff(self.waypoints, axis=0)
        spacing = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(spacing == 0.0):
            raise ConfigurationError("consecutive waypoints must be distinct")
        if np.any(spacing > self.half_width + 1e-9):
            raise ConfigurationError(
                f"waypoint spacing must be <= half_width ({self.half_width}); "
                f"max spacing is {spacing.max():.3f}"
            )
        start = self.waypoints[0]
        for c, r in self.obstacles:
            if np.hypot(*(np.asarray(c) - start)) <= r:
                raise ConfigurationError("obstacle overlaps the start pose")

    def tangent_at(self, index: int) -> np.ndarray:
        """Unit tangent of the centerline at waypoint `index`."""
        n = len(self.waypoints)
        if self.closed:
            nxt = self.waypoints[(index + 1) % n]
            d = nxt - self.waypoints[index]
        elif index < n - 1:
            d = self.waypoints[index + 1] - self.waypoints[index]
        else:
            d = self.waypoints[index] - self.waypoints[index - 1]
        return d / np.hypot(d[0], d[1])

    def start_state(self, speed: float) -> VehicleState:
        t = self.tangent_at(0)
        return VehicleState(
            position=self.waypoints[0].copy(),
            heading=float(math.atan2(t[1], t[0])),
            speed=float(speed),
            steering=0.0,
            step_index=0,
        )

    def contains(self, position) -> bool:
        """Inside the corridor and outside every obstacle."""
        if nearest_waypoint_distance(position, self) > self.half_width:
            return False
        return not self._in_obstacle(np.asarray(position, dtype=np.float64))

    def _in_obstacle(self, position: np.ndarray) -> bool:
        if len(self._obs_centers) == 0:
            return False
        d = np.hypot(*(self._obs_centers - position).T)
        return bool(np.any(d <= self._obs_radii))

    def to_dict(self) -> dict:
        return {
            "schema": "hitldrive-track",
            "v": TRACK_SCHEMA_VERSION,
            "name": self.name,
            "half_width": self.half_width,
            "closed": self.closed,
            "waypoints": [[float(x), float(y)] for x, y in self.waypoints],
            "obstacles": [
                {"center": [float(c[0]), float(c[1])], "radius": r}
                for c, r in self.obstacles
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrackSpec":
        if d.get("schema") != "hitldrive-track":
            raise ConfigurationError("not a track file (missing schema tag)")
        return cls(
            waypoints=d["waypoints"],
            half_width=d["half_width"],
            obstacles=[(o["center"], o["radius"]) for o in d.get("obstacles", [])],
            closed=d.get("closed", False),
            name=d.get("name", "track"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "TrackSpec":
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"track file not found: {p}")
        return cls.from_dict(json.loads(p.read_text()))


def action_to_steering(action_index: int) -> float:
    """Map a discrete action index (0..32) to a steering value in [-0.8, 0.8]."""
    idx = int(action_index)
    if idx != action_index or not 0 <= idx < N_ACTIONS:
        raise ValueError(f"action index must be an integer in [0, 32], got {action_index!r}")
    return -STEER_MAX + idx * STEER_STEP


def steering_to_action(steering: float, *, ties_toward_center: bool = True) -> int:
    """Nearest action index for a continuous steering value (clamped first)."""
    s = min(max(float(steering), -STEER_MAX), STEER_MAX)
    x = (s + STEER_MAX) / STEER_STEP
    lo = math.floor(x)
    hi = min(lo + 1, N_ACTIONS - 1)
    frac = x - lo
    if abs(frac - 0.5) < 1e-12 and ties_toward_center:
        center = (N_ACTIONS - 1) // 2
        return lo if abs(lo - center) <= abs(hi - center) else hi
    return lo if frac < 0.5 else hi


def nearest_waypoint(position, track: TrackSpec) -> tuple[int, float]:
    """Index and distance of the closest waypoint (lowest index wins ties)."""
    if len(track.waypoints) < 2:
        raise ConfigurationError("track needs at least 2 waypoints")
    p = np.asarray(position, dtype=np.float64)
    d = np.hypot(*(track.waypoints - p).T)
    i = int(np.argmin(d))  # argmin returns the first minimum
    return i, float(d[i])


def nearest_waypoint_distance(position, track: TrackSpec) -> float:
    return nearest_waypoint(position, track)[1]


def reward_position(distance: float, cfg: RewardConfig) -> float:
    """exp(-delta * (distance^2 - beta)), clamped to at most 1."""
    return min(math.exp(-cfg.delta * (distance * distance - cfg.beta_pos)), 1.0)


def reward_smoothness(history: ActionHistory, cfg: RewardConfig) -> float:
    """-xi times the population standard deviation of the stored actions."""
    vals = history.values()
    if not vals:
        return 0.0
    return -cfg.xi * float(np.std(np.asarray(vals, dtype=np.float64)))


def total_reward(crashed: bool, r_pos: float, r_sm: float) -> float:
    if crashed:
        return -1.0
    return r_pos + r_sm


def reward_breakdown(crashed: bool, r_pos: float, r_sm: float) -> RewardBreakdown:
    if crashed:
        return RewardBreakdown(r_pos=r_pos, r_sm=r_sm, r_cr=-1.0, r_total=-1.0)
    return RewardBreakdown(r_pos=r_pos, r_sm=r_sm, r_cr=0.0, r_total=r_pos + r_sm)


def episode_status(
    cumulative_reward: float, crashed: bool, success_threshold: float = 1000.0
) -> EpisodeStatus:
    if crashed:
        return EpisodeStatus.FAILURE
    if cumulative_reward >= success_threshold:
        return EpisodeStatus.SUCCESS
    return EpisodeStatus.CONTINUE


def advance_pose(state: VehicleState, steering: float, dt: float = DT) -> VehicleState:
    """Kinematic bicycle update; position advances along the new heading."""
    heading = state.heading + (state.speed / WHEELBASE) * math.tan(steering) * dt
    direction = np.array([math.cos(heading), math.sin(heading)])
    position = state.position + state.speed * dt * direction
    return VehicleState(
        position=position,
        heading=heading,
        speed=state.speed,
        steering=steering,
        step_index=state.step_index + 1,
    )


_RAY_TS = np.arange(RAY_STEP, RAY_RANGE + RAY_STEP / 2, RAY_STEP)


def ray_distances(position, heading: float, track: TrackSpec) -> np.ndarray:
    """Normalized distance to leaving the drivable corridor along 9 bearings.

    Marched at RAY_STEP resolution out to RAY_RANGE; 1.0 means no exit
    found within range.
    """
    p = np.asarray(position, dtype=np.float64)
    angles = heading + RAY_BEARINGS
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (9, 2)
    pts = p[None, None, :] + dirs[:, None, :] * _RAY_TS[None, :, None]
    flat = pts.reshape(-1, 2)
    # squared-distance expansion keeps this one GEMM instead of a 3-d reduce
    d2 = (
        np.einsum("ij,ij->i", flat, flat)[:, None]
        + track._wp_sq[None, :]
        - 2.0 * (flat @ track.waypoints.T)
    )
    outside = d2.min(axis=1) > track.half_width * track.half_width
    if len(track._obs_centers):
        for c, r in zip(track._obs_centers, track._obs_radii):
            rel = flat - c
            outside |= np.einsum("ij,ij->i", rel, rel) <= r * r
    outside = outside.reshape(N_RAYS, len(_RAY_TS))
    any_hit = outside.any(axis=1)
    first = np.where(any_hit, outside.argmax(axis=1), len(_RAY_TS) - 1)
    hit = np.where(any_hit, _RAY_TS[first], RAY_RANGE)
    return np.clip(hit / RAY_RANGE, 0.0, 1.0)


def observe(state: VehicleState, track: TrackSpec) -> np.ndarray:
    """13-dim observation; bit-identical for identical (state, track) pairs."""
    idx, _dist = nearest_waypoint(state.position, track)
    tangent = track.tangent_at(idx)
    rel = state.position - track.waypoints[idx]
    # signed lateral offset: 2-d cross product against the local tangent
    lateral = tangent[0] * rel[1] - tangent[1] * rel[0]
    cross = np.clip(lateral / track.half_width, -1.0, 1.0)
    phi = math.atan2(tangent[1], tangent[0])
    herr = math.remainder(state.heading - phi, 2 * math.pi) / math.pi
    rays = ray_distances(state.position, state.heading, track)
    speed_norm = np.clip((state.speed - SPEED_MIN) / (SPEED_MAX - SPEED_MIN), 0.0, 1.0)
    obs = np.empty(OBS_DIM, dtype=np.float64)
    obs[:N_RAYS] = rays
    obs[9] = cross
    obs[10] = np.clip(herr, -1.0, 1.0)
    obs[11] = state.steering / STEER_MAX
    obs[12] = speed_norm
    return obs


def check_crash(position, track: TrackSpec) -> bool:
    p = np.asarray(position, dtype=np.float64)
    if nearest_waypoint_distance(p, track) > track.half_width:
        return True
    return track._in_obstacle(p)


def step(
    state: VehicleState,
    action_index: int,
    track: TrackSpec,
    cfg: RewardConfig,
    history: ActionHistory,
    dt: float = DT,
) -> tuple[VehicleState, np.ndarray, RewardBreakdown, bool]:
    """One simulator step. Mutates `history` by appending the executed steering.

    Deterministic and free of hidden state beyond the passed-in history.
    """
    if not state.is_finite():
        raise SimulatorFault(f"non-finite vehicle state: {state}")
    steering = action_to_steering(action_index)
    nxt = advance_pose(state, steering, dt)
    history.push(steering)
    dist = nearest_waypoint_distance(nxt.position, track)
    crashed = dist > track.half_width or track._in_obstacle(nxt.position)
    r_pos = reward_position(dist, cfg)
    r_sm = reward_smoothness(history, cfg)
    breakdown = reward_breakdown(crashed, r_pos, r_sm)
    return nxt, observe(nxt, track), breakdown, crashed


class DrivingEnv:
    """Stateful per-episode wrapper around the pure step function.

    Speed is drawn once per reset from the 32-40 km/h band and then frozen.
    Episodes end on crash (failure), on the cumulative-reward success
    threshold, or on the step cap (truncation: terminal for the loop, but
    reported distinctly so stored transitions keep done=False).
    """

    def __init__(
        self,
        track: TrackSpec,
        reward_cfg: RewardConfig | None = None,
        success_threshold: float = 1000.0,
        max_episode_steps: int = 2000,
        dt: float = DT,
    ):
        self.track = track
        self.reward_cfg = reward_cfg or RewardConfig()
        self.success_threshold = float(success_threshold)
        self.max_episode_steps = int(max_episode_steps)
        self.dt = dt
        self.state: VehicleState | None = None
        self.history = ActionHistory(self.reward_cfg.history_len)
        self.cumulative_reward = 0.0
        self.last_obs: np.ndarray | None = None

    def reset(self, rng: np.random.Generator | None = None, speed: float | None = None):
        if speed is None:
            if rng is None:
                speed = (SPEED_MIN + SPEED_MAX) / 2.0
            else:
                speed = float(rng.uniform(SPEED_MIN, SPEED_MAX))
        self.state = self.track.start_state(speed)
        self.history.clear()
        self.cumulative_reward = 0.0
        self.last_obs = observe(self.state, self.track)
        return self.state, self.last_obs

    def step(self, action_index: int):
        if self.state is None:
            raise SimulatorFault("step() before reset()")
        nxt, obs, breakdown, crashed = step(
            self.state, action_index, self.track, self.reward_cfg, self.history, self.dt
        )
        self.state = nxt
        self.last_obs = obs
        self.cumulative_reward += breakdown.r_total
        status = episode_status(self.cumulative_reward, crashed, self.success_threshold)
        truncated = (
            status is EpisodeStatus.CONTINUE and nxt.step_index >= self.max_episode_steps
        )
        return nxt, obs, breakdown, crashed, status, truncated

    def snapshot(self) -> dict:
        """Serializable sim state for exact later replay (EPM oracle mode)."""
        s = self.state
        return {
            "x": float(s.position[0]),
            "y": float(s.position[1]),
            "heading": float(s.heading),
            "speed": float(s.speed),
            "steering": float(s.steering),
            "step_index": int(s.step_index),
            "history": [float(v) for v in self.history.values()],
        }


def state_from_snapshot(snap: dict) -> tuple[VehicleState, ActionHistory]:
    state = VehicleState(
        position=np.array([snap["x"], snap["y"]]),
        heading=snap["heading"],
        speed=snap["speed"],
        steering=snap["steering"],
        step_index=snap["step_index"],
    )
    hist = ActionHistory()
    for v in snap["history"]:
        hist.push(v)
    return state, hist


# ---------------------------------------------------------------------------
# Built-in track generators
# ---------------------------------------------------------------------------

def _resample(points: np.ndarray, spacing: float, closed: bool) -> np.ndarray:
    """Even arc-length resampling so waypoint spacing stays under half_width."""
    pts = np.asarray(points, dtype=np.float64)
    if closed:
        pts = np.vstack([pts, pts[:1]])
    seg = np.diff(pts, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])
    arclen = np.concatenate([[0.0], np.cumsum(seglen)])
    total = arclen[-1]
    n = max(int(math.floor(total / spacing)), 2)
    targets = np.linspace(0.0, total, n + 1)
    if closed:
        targets = targets[:-1]  # last point would duplicate the first
    out = np.empty((len(targets), 2))
    out[:, 0] = np.interp(targets, arclen, pts[:, 0])
    out[:, 1] = np.interp(targets, arclen, pts[:, 1])
    return out


def make_straight(length: float = 200.0, half_width: float = 4.0, seed: int = 0) -> TrackSpec:
    n = max(int(length / 2.0), 2)
    xs = np.linspace(0.0, length, n + 1)
    pts = np.stack([xs, np.zeros_like(xs)], axis=1)
    return TrackSpec(pts, half_width, closed=False, name="straight")


def make_loop(
    radius: float = 30.0,
    half_width: float = 4.0,
    seed: int = 0,
    wobble: float = 0.18,
) -> TrackSpec:
    """Closed loop with mild seeded radius modulation so steering must vary."""
    rng = np.random.default_rng(seed)
    theta = np.linspace(0.0, 2 * math.pi, 400, endpoint=False)
    r = np.full_like(theta, radius)
    if wobble > 0:
        for k in (2, 3):
            amp = wobble * radius * rng.uniform(0.3, 1.0) / k
            phase = rng.uniform(0, 2 * math.pi)
            r = r + amp * np.sin(k * theta + phase)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    pts = pts - pts[0]  # start at origin
    wps = _resample(pts, spacing=2.0, closed=True)
    return TrackSpec(wps, half_width, closed=True, name="loop")


def make_s_curve(
    length: float = 200.0,
    amplitude: float = 10.0,
    wavelength: float = 70.0,
    half_width: float = 4.0,
    seed: int = 0,
) -> TrackSpec:
    xs = np.linspace(0.0, length, 600)
    ys = amplitude * np.sin(2 * math.pi * xs / wavelength)
    wps = _resample(np.stack([xs, ys], axis=1), spacing=2.0, closed=False)
    return TrackSpec(wps, half_width, closed=False, name="s-curve")


def make_coastal_like(
    length: float = 260.0,
    half_width: float = 3.5,
    seed: int = 7,
) -> TrackSpec:
    """Held-out test track: smooth seeded random curvature, narrower corridor."""
    rng = np.random.default_rng(seed)
    n = int(length / 2.0)
    curv = np.zeros(n)
    target = 0.0
    for i in range(1, n):
        if i % 12 == 0:
            target = rng.uniform(-0.028, 0.028)
        curv[i] = 0.9 * curv[i - 1] + 0.1 * target
    heading = np.cumsum(curv * 2.0)
    pts = np.zeros((n, 2))
    for i in range(1, n):
        pts[i] = pts[i - 1] + 2.0 * np.array(
            [math.cos(heading[i - 1]), math.sin(heading[i - 1])]
        )
    wps = _resample(pts, spacing=1.75, closed=False)
    return TrackSpec(wps, half_width, closed=False, name="coastal-like")


GENERATORS = {
    "straight": make_straight,
    "loop": make_loop,
    "s-curve": make_s_curve,
    "coastal-like": make_coastal_like,
}


def make_track(generator: str, seed: int = 0, **kwargs) -> TrackSpec:
    if generator not in GENERATORS:
        raise ConfigurationError(
            f"unknown track generator {generator!r}; choose from {sorted(GENERATORS)}"
        )
    return GENERATORS[generator](seed=seed, **kwargs)
