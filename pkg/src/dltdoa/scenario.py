"""Deployment geometry, user trajectories, obstacles and synthetic IMU data."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import GRAVITY, TICK_S

IMU_RATE_HZ = 16
LAB_WIDTH_M = 9.0
LAB_DEPTH_M = 6.0
ANCHOR_HEIGHT_M = 2.7
DEFAULT_SPEED_MPS = 1.0


class OutOfSpanError(ValueError):
    """Requested time lies outside the trajectory's time span."""


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate rectangle {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def contains(self, x: float, y: float, tol: float = 1e-9) -> bool:
        return (self.x0 - tol <= x <= self.x1 + tol) and (self.y0 - tol <= y <= self.y1 + tol)

    def contains_rect(self, other: "Rect") -> bool:
        return self.contains(other.x0, other.y0) and self.contains(other.x1, other.y1)


@dataclass(frozen=True)
class Anchor:
    id: int
    position: tuple[float, float, float]
    is_initiator: bool = False

    def __post_init__(self):
        if len(self.position) != 3 or not all(math.isfinite(v) for v in self.position):
            raise ValueError(f"anchor {self.id}: position must be 3 finite values")


@dataclass(frozen=True)
class Cluster:
    """Anchors of one DL-TDOA cluster. The initiator is always ``anchors[0]``."""

    anchors: tuple[Anchor, ...]
    region: Rect

    def __post_init__(self):
        if len(self.anchors) < 3:
            raise ValueError("a cluster needs at least 3 anchors for 2-D localization")
        ids = [a.id for a in self.anchors]
        if len(set(ids)) != len(ids):
            raise ValueError("anchor ids must be unique")
        if sum(a.is_initiator for a in self.anchors) != 1:
            raise ValueError("exactly one anchor must be the initiator")
        if not self.anchors[0].is_initiator:
            raise ValueError("the initiator must be the first anchor")

    @property
    def size(self) -> int:
        return len(self.anchors)

    @property
    def initiator(self) -> Anchor:
        return self.anchors[0]

    @property
    def ids(self) -> list[int]:
        return [a.id for a in self.anchors]

    @property
    def positions(self) -> np.ndarray:
        """(M, 3) anchor coordinates in cluster order."""
        return np.array([a.position for a in self.anchors], dtype=float)

    def index_of(self, anchor_id: int) -> int:
        for i, a in enumerate(self.anchors):
            if a.id == anchor_id:
                return i
        raise KeyError(anchor_id)

    def by_id(self, anchor_id: int) -> Anchor:
        return self.anchors[self.index_of(anchor_id)]


def build_default_lab() -> Cluster:
    """9 m x 6 m lab with 7 ceiling anchors at 2.7 m.

    Layout: the centre anchor (id 1) is the initiator, then the four corners
    inset by 0.5 m and the midpoints of the two long walls.
    """
    h = ANCHOR_HEIGHT_M
    xy = [
        (4.5, 3.0),
        (0.5, 0.5),
        (8.5, 0.5),
        (8.5, 5.5),
        (0.5, 5.5),
        (4.5, 0.5),
        (4.5, 5.5),
    ]
    anchors = tuple(Anchor(i + 1, (x, y, h), is_initiator=(i == 0)) for i, (x, y) in enumerate(xy))
    return Cluster(anchors, Rect(0.0, 0.0, LAB_WIDTH_M, LAB_DEPTH_M))


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear walk; ``waypoints`` rows are (t [s], x [m], y [m])."""

    waypoints: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[1] != 3 or len(w) < 1:
            raise ValueError("waypoints must be an (N, 3) array of (t, x, y)")
        if len(w) > 1 and np.any(np.diff(w[:, 0]) <= 0):
            raise ValueError("waypoint times must be strictly increasing")
        if not np.all(np.isfinite(w)):
            raise ValueError("waypoints must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "waypoints", w)

    @property
    def t_start(self) -> float:
        return float(self.waypoints[0, 0])

    @property
    def t_end(self) -> float:
        return float(self.waypoints[-1, 0])

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def positions_at(self, times: np.ndarray) -> np.ndarray:
        """Vectorised interpolation; times are clamped to the span."""
        t = np.asarray(times, dtype=float)
        w = self.waypoints
        return np.stack([np.interp(t, w[:, 0], w[:, 1]), np.interp(t, w[:, 0], w[:, 2])], axis=-1)

    def velocities_at(self, times: np.ndarray) -> np.ndarray:
        """Velocity of the segment containing each time (right-continuous, zero outside)."""
        t = np.asarray(times, dtype=float)
        w = self.waypoints
        out = np.zeros(t.shape + (2,))
        if len(w) < 2:
            return out
        seg_v = np.diff(w[:, 1:], axis=0) / np.diff(w[:, 0])[:, None]
        idx = np.searchsorted(w[:, 0], t, side="right") - 1
        inside = (idx >= 0) & (idx < len(seg_v))
        out[inside] = seg_v[idx[inside]]
        return out

    def inside(self, region: Rect) -> bool:
        return all(region.contains(x, y) for _, x, y in self.waypoints)

    @classmethod
    def from_path(
        cls,
        points: Sequence[tuple[float, float]],
        speed: float = DEFAULT_SPEED_MPS,
        t0: float = 0.0,
        pauses: dict[int, float] | None = None,
    ) -> "Trajectory":
        """Walk through ``points`` at constant ``speed``.

        ``pauses`` maps a point index to a dwell time spent standing there.
        """
        if speed <= 0:
            raise ValueError("speed must be positive")
        pauses = pauses or {}
        rows = [(t0, *points[0])]
        if pauses.get(0):
            rows.append((t0 + pauses[0], *points[0]))
        for i in range(1, len(points)):
            t_prev, x0, y0 = rows[-1]
            x1, y1 = points[i]
            d = math.hypot(x1 - x0, y1 - y0)
            if d == 0:
                continue
            rows.append((t_prev + d / speed, x1, y1))
            if pauses.get(i):
                rows.append((rows[-1][0] + pauses[i], x1, y1))
        return cls(np.array(rows))

    def truncated(self, t_end: float) -> "Trajectory":
        w = self.waypoints
        keep = w[w[:, 0] < t_end]
        last = np.array([[t_end, *self.positions_at(np.array(t_end))]])
        return Trajectory(np.vstack([keep, last]))


def sample_position(traj: Trajectory, t: float) -> np.ndarray:
    """Linear interpolation of the user position at time ``t``."""
    eps = 1e-9
    if t < traj.t_start - eps or t > traj.t_end + eps:
        raise OutOfSpanError(f"t={t} outside [{traj.t_start}, {traj.t_end}]")
    return traj.positions_at(np.array(t))


@dataclass(frozen=True)
class Obstacle:
    footprint: Rect
    kind: str = "permanent"  # "temporary" | "permanent"
    t0: float = 0.0
    t1: float = math.inf

    def __post_init__(self):
        if self.kind not in ("temporary", "permanent"):
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        if not self.t0 < self.t1:
            raise ValueError("obstacle interval must satisfy t0 < t1")

    def active(self, t: float) -> bool:
        return self.t0 <= t <= self.t1


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    accel: np.ndarray
    gyro: np.ndarray


@dataclass(frozen=True)
class ImuConfig:
    accel_noise: float = 0.05  # m/s^2, per axis
    accel_bias: float = 0.02  # m/s^2, constant on every axis
    gyro_noise: float = 0.005  # rad/s
    gait_amplitude: float = 1.0  # m/s^2 vertical bounce at 1 m/s
    sway_amplitude: float = 1.0  # m/s^2 fore-aft surge at 1 m/s, a quarter step behind the bounce
    step_rate_hz: float = 2.0


@dataclass(frozen=True)
class ImuStream:
    """Columnar 16 Hz IMU stream; indexing yields :class:`ImuSample`."""

    timestamps: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamps)

    def __getitem__(self, i: int) -> ImuSample:
        return ImuSample(float(self.timestamps[i]), self.accel[i], self.gyro[i])

    def __iter__(self) -> Iterator[ImuSample]:
        for i in range(len(self)):
            yield self[i]

    def window(self, end_index: int, n: int = IMU_RATE_HZ) -> "ImuStream":
        """The ``n`` samples ending at (and including) ``end_index``."""
        lo = max(0, end_index + 1 - n)
        s = slice(lo, end_index + 1)
        return ImuStream(self.timestamps[s], self.accel[s], self.gyro[s])


def imu_timestamps(t_start: float, duration: float) -> np.ndarray:
    n = int(math.ceil(round(duration * IMU_RATE_HZ, 9)))
    return t_start + np.arange(n) * TICK_S


def synthesize_imu(traj: Trajectory, seed: int, config: ImuConfig = ImuConfig()) -> ImuStream:
    """16 Hz accelerometer/gyro stream for a trajectory, in the world frame.

    Acceleration is the second difference of the interpolated position plus
    gravity, a gait component proportional to walking speed (a vertical
    bounce and a fore-aft surge along the direction of travel, a quarter step
    apart), constant bias and white noise. Gyro z is the heading rate.
    """
    rng = np.random.default_rng(seed)
    t = imu_timestamps(traj.t_start, traj.duration)
    dt = TICK_S
    p_prev = traj.positions_at(t - dt)
    p_now = traj.positions_at(t)
    p_next = traj.positions_at(t + dt)
    n = len(t)

    accel = np.zeros((n, 3))
    accel[:, :2] = (p_next - 2.0 * p_now + p_prev) / dt**2
    accel[:, 2] = GRAVITY
    vel = traj.velocities_at(t)
    speed = np.linalg.norm(vel, axis=1)
    phase = 2.0 * np.pi * config.step_rate_hz * t
    accel[:, 2] += config.gait_amplitude * (speed / DEFAULT_SPEED_MPS) * np.sin(phase)
    accel[:, :2] += config.sway_amplitude / DEFAULT_SPEED_MPS * vel * np.cos(phase)[:, None]
    accel += config.accel_bias
    accel += rng.normal(0.0, config.accel_noise, size=(n, 3)) if config.accel_noise > 0 else 0.0

    step = p_next - p_now
    moving = np.linalg.norm(step, axis=1) > 1e-9
    heading = np.zeros(n)
    last = 0.0
    for i in range(n):
        if moving[i]:
            last = math.atan2(step[i, 1], step[i, 0])
        heading[i] = last
    # the first moving heading is the reference, not a turn
    if moving.any():
        heading[: int(np.argmax(moving))] = heading[int(np.argmax(moving))]
    gyro = np.zeros((n, 3))
    dh = np.diff(heading, prepend=heading[:1])
    gyro[:, 2] = (dh + np.pi) % (2.0 * np.pi) - np.pi
    gyro[:, 2] /= dt
    if config.gyro_noise > 0:
        gyro += rng.normal(0.0, config.gyro_noise, size=(n, 3))
    return ImuStream(t, accel, gyro)


@dataclass(frozen=True)
class Scenario:
    cluster: Cluster
    trajectory: Trajectory
    obstacles: tuple[Obstacle, ...] = ()
    seed: int = 0
    duration_s: float | None = None
    name: str = "custom"
    imu: ImuConfig = field(default_factory=ImuConfig)

    def __post_init__(self):
        region = self.cluster.region
        if not self.trajectory.inside(region):
            raise ValueError("trajectory leaves the cluster region")
        for ob in self.obstacles:
            if not region.contains_rect(ob.footprint):
                raise ValueError("obstacle footprint outside the cluster region")
        if self.duration_s is not None and self.duration_s > self.trajectory.duration + 1e-9:
            raise ValueError("duration_s exceeds the trajectory span")

    @property
    def duration(self) -> float:
        return self.trajectory.duration if self.duration_s is None else self.duration_s

    def fingerprint(self) -> str:
        """Stable identity used to refuse comparisons across different scenarios."""
        import hashlib

        blob = json.dumps(scenario_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _rect_from(obj) -> Rect:
    if isinstance(obj, dict):
        return Rect(obj["x0"], obj["y0"], obj["x1"], obj["y1"])
    obj = list(obj)
    if len(obj) == 2:
        return Rect(0.0, 0.0, float(obj[0]), float(obj[1]))
    return Rect(*map(float, obj))


def scenario_from_dict(cfg: dict) -> Scenario:
    """Build a scenario from the JSON config layout.

    Keys: ``region`` ([w, h] or [x0, y0, x1, y1]), optional ``anchors``
    (list of {id, position, initiator}), ``waypoints`` ([[t, x, y], ...]) or
    ``path`` + ``speed``, ``obstacles`` (list of {footprint, kind, active}),
    ``seed`` and ``duration_s``.
    """
    if "preset" in cfg:
        base = preset(cfg["preset"], **cfg.get("preset_args", {}))
        return Scenario(
            base.cluster, base.trajectory, base.obstacles,
            seed=int(cfg.get("seed", base.seed)),
            duration_s=cfg.get("duration_s", base.duration_s), name=base.name,
        )
    default = build_default_lab()
    region = _rect_from(cfg["region"]) if "region" in cfg else default.region
    if cfg.get("anchors"):
        anchors = tuple(
            Anchor(int(a["id"]), tuple(map(float, a["position"])), bool(a.get("initiator", False)))
            for a in cfg["anchors"]
        )
        anchors = tuple(sorted(anchors, key=lambda a: not a.is_initiator))
        cluster = Cluster(anchors, region)
    else:
        cluster = Cluster(default.anchors, region)
    if "waypoints" in cfg:
        traj = Trajectory(np.array(cfg["waypoints"], dtype=float))
    else:
        pauses = {int(k): float(v) for k, v in cfg.get("pauses", {}).items()}
        traj = Trajectory.from_path(
            [tuple(p) for p in cfg["path"]], speed=cfg.get("speed", DEFAULT_SPEED_MPS), pauses=pauses
        )
    obstacles = []
    for ob in cfg.get("obstacles", []):
        t0, t1 = ob.get("active", [0.0, None])
        obstacles.append(
            Obstacle(_rect_from(ob["footprint"]), ob.get("kind", "permanent"),
                     float(t0), math.inf if t1 is None else float(t1))
        )
    return Scenario(
        cluster, traj, tuple(obstacles), seed=int(cfg.get("seed", 0)),
        duration_s=cfg.get("duration_s"), name=cfg.get("name", "custom"),
    )


def scenario_to_dict(sc: Scenario) -> dict:
    r = sc.cluster.region
    return {
        "name": sc.name,
        "region": [r.x0, r.y0, r.x1, r.y1],
        "anchors": [
            {"id": a.id, "position": list(a.position), "initiator": a.is_initiator}
            for a in sc.cluster.anchors
        ],
        "waypoints": sc.trajectory.waypoints.tolist(),
        "obstacles": [
            {
                "footprint": [o.footprint.x0, o.footprint.y0, o.footprint.x1, o.footprint.y1],
                "kind": o.kind,
                "active": [o.t0, None if math.isinf(o.t1) else o.t1],
            }
            for o in sc.obstacles
        ],
        "seed": sc.seed,
        "duration_s": sc.duration_s,
    }


def load_scenario(path: str | Path) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


def _repeat_loop(loop: list[tuple[float, float]], duration: float, speed: float) -> list:
    perimeter = sum(math.dist(loop[i], loop[i + 1]) for i in range(len(loop) - 1))
    laps = int(math.ceil(duration * speed / perimeter)) + 1
    pts = [loop[0]]
    for _ in range(laps):
        pts.extend(loop[1:])
    return pts


def los_walk(duration_s: float = 300.0, seed: int = 7) -> Scenario:
    """Obstacle-free walk looping around the lab."""
    loop = [(1.0, 1.0), (8.0, 1.0), (8.0, 5.0), (4.5, 3.5), (1.0, 5.0), (1.0, 1.0)]
    traj = Trajectory.from_path(_repeat_loop(loop, duration_s, DEFAULT_SPEED_MPS))
    return Scenario(build_default_lab(), traj.truncated(duration_s), (), seed, duration_s, "los_walk")


def nlos_walk(duration_s: float = 300.0, seed: int = 11) -> Scenario:
    """Loop through two storage aisles.

    Each aisle runs between a pair of shelving rows near the long walls. Inside
    an aisle five to seven anchors are shadowed; only the anchors in line with
    the aisle ends stay visible. The cross-walks along the short walls see
    three or four anchors blocked by the shelf ends.
    """
    cluster = build_default_lab()
    obstacles = tuple(
        Obstacle(Rect(2.5, y0, 6.5, y0 + 0.2), "permanent") for y0 in (0.6, 1.3, 4.5, 5.2)
    )
    loop = [(1.0, 1.05), (8.0, 1.05), (8.0, 4.95), (1.0, 4.95), (1.0, 1.05)]
    traj = Trajectory.from_path(_repeat_loop(loop, duration_s, DEFAULT_SPEED_MPS))
    return Scenario(cluster, traj.truncated(duration_s), obstacles, seed, duration_s, "nlos_walk")


def stationary_walk(walk_s: float = 30.0, stand_s: float = 60.0, seed: int = 3) -> Scenario:
    """Walk, stand still for ``stand_s`` seconds, then walk again."""
    speed = DEFAULT_SPEED_MPS
    first = [(1.0, 1.0), (8.0, 1.0), (8.0, 5.0), (1.0, 5.0), (1.0, 1.0)]
    pts = _repeat_loop(first, walk_s, speed)
    head = Trajectory.from_path(pts).truncated(walk_s)
    stop = head.waypoints[-1, 1:]
    tail = Trajectory.from_path(
        [tuple(stop)] + [(8.0, 5.0), (1.0, 5.0), (1.0, 1.0), (8.0, 1.0)] * 2,
        t0=walk_s + stand_s,
    ).truncated(2 * walk_s + stand_s)
    w = np.vstack([head.waypoints, tail.waypoints])
    return Scenario(build_default_lab(), Trajectory(w), (), seed, 2 * walk_s + stand_s, "stationary_walk")


PRESETS = {"los_walk": los_walk, "nlos_walk": nlos_walk, "stationary_walk": stationary_walk}


def preset(name: str, **kwargs) -> Scenario:
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown scenario preset {name!r}; choose from {sorted(PRESETS)}") from None


def random_walk(
    rng: np.random.Generator,
    region: Rect,
    duration: float,
    speed_range: tuple[float, float] = (0.6, 1.4),
    margin: float = 0.5,
    pause_prob: float = 0.15,
) -> Trajectory:
    """Random piecewise-linear walk used to generate predictor training data."""
    x = rng.uniform(region.x0 + margin, region.x1 - margin)
    y = rng.uniform(region.y0 + margin, region.y1 - margin)
    rows = [(0.0, x, y)]
    while rows[-1][0] < duration:
        t, x, y = rows[-1]
        if rng.random() < pause_prob:
            rows.append((t + rng.uniform(0.5, 4.0), x, y))
            continue
        nx = rng.uniform(region.x0 + margin, region.x1 - margin)
        ny = rng.uniform(region.y0 + margin, region.y1 - margin)
        d = math.hypot(nx - x, ny - y)
        if d < 0.3:
            continue
        rows.append((t + d / rng.uniform(*speed_range), nx, ny))
    return Trajectory(np.array(rows)).truncated(duration)
