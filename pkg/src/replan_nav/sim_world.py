"""Ground-truth 2D world: unicycle robot, pillar maps, SFM/RSM obstacles, ray sensing.

The field is the square ``[0, L] x [0, L]``. Time advances in integer control
ticks of ``DT`` seconds so that ``sim_time`` stays an exact multiple of ``DT``.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, ScenarioInfeasible

DT = 0.1
ROBOT_RADIUS = 1.0
V_MAX = 1.0
OMEGA_MAX = 1.0

PILLAR_SIDES = {9: 1.5, 16: 1.0, 25: 0.5}

# social force model
SFM_TAU = 0.5
SFM_A = 2.0
SFM_B = 0.5

RSM_HORIZON = 3.0
WAYPOINT_REACHED = 0.5

SCAN_RAYS = 180
SCAN_MAX_RANGE = 10.0


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


class ObstacleKind(IntEnum):
    SFM = 0
    RSM = 1
    STATIC = 2


@dataclass(frozen=True)
class ObstacleState:
    position: tuple[float, float]
    velocity: tuple[float, float]
    radius: float
    kind: ObstacleKind
    waypoint: tuple[float, float]
    desired_speed: float


@dataclass(frozen=True)
class PrebuiltMap:
    """Known static geometry: the field square and the axis-aligned pillars."""

    field_size: float
    pillar_centers: np.ndarray = field(compare=False)
    pillar_side: float
    pillar_count: int

    @classmethod
    def pillar_grid(cls, pillar_count: int, field_size: float = 20.0) -> "PrebuiltMap":
        if pillar_count not in PILLAR_SIDES:
            raise ConfigError(f"pillar count must be one of {sorted(PILLAR_SIDES)}, got {pillar_count}")
        n = int(round(math.sqrt(pillar_count)))
        spacing = field_size / (n + 1)
        ticks = spacing * np.arange(1, n + 1)
        xs, ys = np.meshgrid(ticks, ticks, indexing="ij")
        centers = np.stack([xs.ravel(), ys.ravel()], axis=1)
        return cls(field_size, centers, PILLAR_SIDES[pillar_count], pillar_count)

    @classmethod
    def empty(cls, field_size: float = 20.0) -> "PrebuiltMap":
        return cls(field_size, np.zeros((0, 2)), 0.0, 0)

    @property
    def field_half_extent(self) -> float:
        return 0.5 * self.field_size

    @property
    def boxes(self) -> np.ndarray:
        """Pillars as ``(K, 4)`` rows of ``xmin, ymin, xmax, ymax``."""
        h = 0.5 * self.pillar_side
        c = self.pillar_centers
        return np.concatenate([c - h, c + h], axis=1)

    def corridor_width(self) -> float:
        if self.pillar_count == 0:
            return self.field_size
        n = int(round(math.sqrt(self.pillar_count)))
        return self.field_size / (n + 1) - self.pillar_side

    @cached_property
    def _lattice_ticks(self) -> np.ndarray | None:
        """Shared x/y center coordinates when the pillars fill a square lattice."""
        ticks = np.unique(self.pillar_centers[:, 0])
        full = len(ticks) ** 2 == self.pillar_count and np.array_equal(ticks, np.unique(self.pillar_centers[:, 1]))
        return ticks if full else None

    def distance_to_pillars(self, points: np.ndarray) -> np.ndarray:
        """Euclidean distance from each point to the nearest pillar (0 inside)."""
        points = np.atleast_2d(points)
        if self.pillar_count == 0:
            return np.full(len(points), np.inf)
        ticks = self._lattice_ticks
        if ticks is not None:
            # full square lattice: the nearest column and the nearest row give the nearest box
            h = 0.5 * self.pillar_side
            dx = np.maximum(np.abs(points[:, 0, None] - ticks[None]) - h, 0.0).min(axis=1)
            dy = np.maximum(np.abs(points[:, 1, None] - ticks[None]) - h, 0.0).min(axis=1)
            return np.hypot(dx, dy)
        b = self.boxes
        dx = np.maximum(np.maximum(b[None, :, 0] - points[:, None, 0], points[:, None, 0] - b[None, :, 2]), 0.0)
        dy = np.maximum(np.maximum(b[None, :, 1] - points[:, None, 1], points[:, None, 1] - b[None, :, 3]), 0.0)
        return np.hypot(dx, dy).min(axis=1)

    def distance_to_boundary(self, points: np.ndarray) -> np.ndarray:
        """Distance from each point to the field boundary, negative outside."""
        points = np.atleast_2d(points)
        L = self.field_size
        return np.minimum.reduce([points[:, 0], points[:, 1], L - points[:, 0], L - points[:, 1]])


@dataclass
class WorldState:
    robot: Pose2D
    v: float
    omega: float
    obstacles: tuple[ObstacleState, ...]
    map: PrebuiltMap
    goal: tuple[float, float]
    tick: int
    rng: np.random.Generator

    @property
    def sim_time(self) -> float:
        return self.tick * DT

    def obstacle_arrays(self):
        """Struct-of-arrays view: positions, velocities, radii, kinds, waypoints, speeds."""
        obs = self.obstacles
        if not obs:
            z2 = np.zeros((0, 2))
            z = np.zeros(0)
            return z2, z2, z, np.zeros(0, dtype=int), z2, z
        return (
            np.array([o.position for o in obs], dtype=float),
            np.array([o.velocity for o in obs], dtype=float),
            np.array([o.radius for o in obs], dtype=float),
            np.array([int(o.kind) for o in obs], dtype=int),
            np.array([o.waypoint for o in obs], dtype=float),
            np.array([o.desired_speed for o in obs], dtype=float),
        )

    def same_as(self, other: "WorldState") -> bool:
        """Exact equality including the generator state."""
        return (
            self.robot == other.robot
            and self.v == other.v
            and self.omega == other.omega
            and self.obstacles == other.obstacles
            and self.map == other.map
            and np.array_equal(self.map.pillar_centers, other.map.pillar_centers)
            and self.goal == other.goal
            and self.tick == other.tick
            and self.rng.bit_generator.state == other.rng.bit_generator.state
        )


@dataclass(frozen=True)
class Scan:
    points: np.ndarray  # (ray_count, 2) world-frame
    ranges: np.ndarray  # (ray_count,)
    ray_count: int
    max_range: float = SCAN_MAX_RANGE

    @property
    def hit_mask(self) -> np.ndarray:
        return self.ranges < self.max_range


@dataclass
class ScenarioConfig:
    map_kind: int = 16
    seed: int = 0
    n_obstacles: int = 10
    static_prob: float = 0.3
    field_size_m: float = 20.0

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- robot

def integrate_unicycle(pose: Pose2D, v: float, omega: float, dt: float) -> Pose2D:
    """Exact constant-command unicycle arc over ``dt``."""
    th = pose.theta
    if abs(omega) < 1e-9:
        x = pose.x + v * dt * math.cos(th)
        y = pose.y + v * dt * math.sin(th)
    else:
        th1 = th + omega * dt
        r = v / omega
        x = pose.x + r * (math.sin(th1) - math.sin(th))
        y = pose.y - r * (math.cos(th1) - math.cos(th))
    return Pose2D(x, y, wrap_angle(th + omega * dt))


def clamp_command(v: float, omega: float) -> tuple[float, float]:
    return float(np.clip(v, -V_MAX, V_MAX)), float(np.clip(omega, -OMEGA_MAX, OMEGA_MAX))


def step_robot(state: WorldState, cmd: tuple[float, float]) -> WorldState:
    v, omega = clamp_command(*cmd)
    pose = integrate_unicycle(state.robot, v, omega, DT)
    return replace(state, robot=pose, v=v, omega=omega, tick=state.tick + 1)


# --------------------------------------------------------------------------- obstacles

def _unit(vecs: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(vecs, axis=-1, keepdims=True)
    return np.divide(vecs, n, out=np.zeros_like(vecs), where=n > 1e-12)


def sfm_forces(pos, vel, radii, waypoints, speeds, robot_xy) -> np.ndarray:
    """Goal attraction plus exponential repulsion from the robot and every other obstacle."""
    desired = speeds[:, None] * _unit(waypoints - pos)
    force = (desired - vel) / SFM_TAU

    diff = pos - robot_xy[None, :]
    d = np.linalg.norm(diff, axis=1)
    mag = SFM_A * np.exp((radii + ROBOT_RADIUS - d) / SFM_B)
    force += mag[:, None] * _unit(diff)

    n = len(pos)
    if n > 1:
        diff = pos[:, None, :] - pos[None, :, :]
        d = np.linalg.norm(diff, axis=2)
        mag = SFM_A * np.exp((radii[:, None] + radii[None, :] - d) / SFM_B)
        np.fill_diagonal(mag, 0.0)
        force += np.einsum("ij,ijk->ik", mag, _unit(diff))
    return force


def rsm_blocked(pos: np.ndarray, vel: np.ndarray, radius: float, robot_xy: np.ndarray, robot_vel: np.ndarray) -> bool:
    """Constant-velocity point-mass rollout of obstacle and robot over ``RSM_HORIZON``."""
    steps = int(round(RSM_HORIZON / DT))
    t = DT * np.arange(0, steps + 1)[:, None]
    gap = (pos + vel * t) - (robot_xy + robot_vel * t)
    return bool((np.linalg.norm(gap, axis=1) < radius + ROBOT_RADIUS).any())


def step_obstacles(state: WorldState) -> WorldState:
    if not state.obstacles:
        return state
    rng = copy.deepcopy(state.rng)
    pos, vel, radii, kinds, wps, speeds = state.obstacle_arrays()
    robot_xy = state.robot.xy
    robot_vel = state.v * np.array([math.cos(state.robot.theta), math.sin(state.robot.theta)])

    new_vel = vel.copy()
    sfm = kinds == ObstacleKind.SFM
    if sfm.any():
        f = sfm_forces(pos, vel, radii, wps, speeds, robot_xy)
        nv = vel[sfm] + DT * f[sfm]
        sp = np.linalg.norm(nv, axis=1)
        scale = np.minimum(1.0, np.divide(speeds[sfm], sp, out=np.ones_like(sp), where=sp > 0))
        new_vel[sfm] = nv * scale[:, None]
    for i in np.flatnonzero(kinds == ObstacleKind.RSM):
        intended = speeds[i] * _unit(wps[i] - pos[i])
        if rsm_blocked(pos[i], intended, radii[i], robot_xy, robot_vel):
            new_vel[i] = 0.0
        else:
            new_vel[i] = intended
    new_vel[kinds == ObstacleKind.STATIC] = 0.0
    new_pos = pos + DT * new_vel

    L = state.map.field_size
    out = []
    for i, o in enumerate(state.obstacles):
        if o.kind == ObstacleKind.STATIC:
            out.append(o)
            continue
        wp = o.waypoint
        if math.dist(new_pos[i], wp) < WAYPOINT_REACHED:
            r = o.radius
            wp = (float(rng.uniform(r, L - r)), float(rng.uniform(r, L - r)))
        out.append(replace(
            o,
            position=(float(new_pos[i, 0]), float(new_pos[i, 1])),
            velocity=(float(new_vel[i, 0]), float(new_vel[i, 1])),
            waypoint=wp,
        ))
    return replace(state, obstacles=tuple(out), rng=rng)


def step_world(state: WorldState, cmd: tuple[float, float]) -> WorldState:
    """One control tick: obstacles react to the pre-tick robot, then the robot moves."""
    return step_robot(step_obstacles(state), cmd)


# --------------------------------------------------------------------------- sensing

def ray_cast(origin: np.ndarray, angles: np.ndarray, world_map: PrebuiltMap,
             circles: np.ndarray, radii: np.ndarray, max_range: float) -> np.ndarray:
    """First-hit distance along each ray against discs, pillar boxes and the field wall."""
    d = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    t_best = np.full(len(angles), max_range)

    if len(circles):
        f = origin[None, :] - circles  # (C, 2)
        b = d @ f.T  # (R, C)
        cc = (f * f).sum(axis=1) - radii**2
        disc = b * b - cc[None, :]
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = -b - sq
        t2 = -b + sq
        t = np.where(t1 >= 0, t1, np.where(t2 >= 0, 0.0, np.inf))
        t = np.where(ok, t, np.inf)
        t_best = np.minimum(t_best, t.min(axis=1))

    if world_map.pillar_count:
        boxes = world_map.boxes
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d  # inf where a component is 0
            tx1 = (boxes[None, :, 0] - origin[0]) * inv[:, 0:1]
            tx2 = (boxes[None, :, 2] - origin[0]) * inv[:, 0:1]
            ty1 = (boxes[None, :, 1] - origin[1]) * inv[:, 1:2]
            ty2 = (boxes[None, :, 3] - origin[1]) * inv[:, 1:2]
        # 0 * inf gives nan for rays parallel to a slab through the origin line
        tx1, tx2, ty1, ty2 = (np.nan_to_num(a, nan=-np.inf) for a in (tx1, tx2, ty1, ty2))
        tmin = np.maximum(np.minimum(tx1, tx2), np.minimum(ty1, ty2))
        tmax = np.minimum(np.maximum(tx1, tx2), np.maximum(ty1, ty2))
        hit = (tmax >= np.maximum(tmin, 0.0)) & np.isfinite(tmax)
        t = np.where(hit, np.maximum(tmin, 0.0), np.inf)
        t_best = np.minimum(t_best, t.min(axis=1))

    L = world_map.field_size
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(d[:, 0] > 0, (L - origin[0]) / d[:, 0], np.where(d[:, 0] < 0, -origin[0] / d[:, 0], np.inf))
        ty = np.where(d[:, 1] > 0, (L - origin[1]) / d[:, 1], np.where(d[:, 1] < 0, -origin[1] / d[:, 1], np.inf))
    t_best = np.minimum(t_best, np.maximum(np.minimum(tx, ty), 0.0))
    return t_best


def scan_angles(theta: float, ray_count: int = SCAN_RAYS) -> np.ndarray:
    """Ray 0 points along the robot heading; rays are spaced evenly over 360 degrees."""
    return theta + 2.0 * math.pi * np.arange(ray_count) / ray_count


def sense(state: WorldState, ray_count: int = SCAN_RAYS, max_range: float = SCAN_MAX_RANGE) -> Scan:
    pos, _, radii, _, _, _ = state.obstacle_arrays()
    origin = state.robot.xy
    angles = scan_angles(state.robot.theta, ray_count)
    ranges = ray_cast(origin, angles, state.map, pos, radii, max_range)
    pts = origin[None, :] + ranges[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return Scan(pts, ranges, ray_count, max_range)


# --------------------------------------------------------------------------- collision

def check_collision(state: WorldState) -> bool:
    p = state.robot.xy
    if state.map.distance_to_boundary(p)[0] < ROBOT_RADIUS:
        return True
    if state.map.distance_to_pillars(p)[0] < ROBOT_RADIUS:
        return True
    if state.obstacles:
        pos, _, radii, _, _, _ = state.obstacle_arrays()
        if (np.linalg.norm(pos - p, axis=1) < radii + ROBOT_RADIUS).any():
            return True
    return False


# --------------------------------------------------------------------------- scenarios

START_CLEARANCE = ROBOT_RADIUS + 0.25  # keeps the start/goal cell free on the costmap
OBSTACLE_MARGIN = 1.0
MAX_PLACEMENT_TRIES = 1000


def _corner_zone(corner: int, L: float) -> tuple[float, float, float, float]:
    inset, size = 2.0, 2.0
    lo = inset
    hi = L - inset - size
    x0 = lo if corner in (0, 2) else hi
    y0 = lo if corner in (0, 1) else hi
    return x0, x0 + size, y0, y0 + size


def _sample_in_zone(rng, zone, world_map: PrebuiltMap) -> tuple[float, float]:
    for _ in range(MAX_PLACEMENT_TRIES):
        p = (float(rng.uniform(zone[0], zone[1])), float(rng.uniform(zone[2], zone[3])))
        if world_map.distance_to_pillars(np.array(p))[0] >= START_CLEARANCE:
            return p
    raise ScenarioInfeasible("could not place start/goal outside pillars")


def spawn_scenario(map_kind: int, seed: int, config: ScenarioConfig | None = None) -> WorldState:
    cfg = config or ScenarioConfig(map_kind=map_kind, seed=seed)
    L = cfg.field_size_m
    world_map = PrebuiltMap.pillar_grid(map_kind, L)
    rng = np.random.default_rng(seed)

    c_start, c_goal = rng.choice(4, size=2, replace=False)
    start = _sample_in_zone(rng, _corner_zone(int(c_start), L), world_map)
    goal = _sample_in_zone(rng, _corner_zone(int(c_goal), L), world_map)
    theta = math.atan2(goal[1] - start[1], goal[0] - start[0])

    obstacles = []
    tries = 0
    while len(obstacles) < cfg.n_obstacles:
        if rng.random() < cfg.static_prob:
            kind = ObstacleKind.STATIC
        else:
            kind = ObstacleKind.SFM if rng.random() < 0.5 else ObstacleKind.RSM
        r = float(rng.uniform(0.2, 0.4))
        speed = float(rng.uniform(0.3, 1.0))
        while True:
            tries += 1
            if tries > MAX_PLACEMENT_TRIES:
                raise ScenarioInfeasible("rejection sampling exhausted while placing obstacles")
            p = (float(rng.uniform(r, L - r)), float(rng.uniform(r, L - r)))
            if math.dist(p, start) > ROBOT_RADIUS + r + OBSTACLE_MARGIN and \
                    math.dist(p, goal) > ROBOT_RADIUS + r + OBSTACLE_MARGIN:
                break
        wp = (float(rng.uniform(r, L - r)), float(rng.uniform(r, L - r)))
        if kind == ObstacleKind.STATIC:
            vel = (0.0, 0.0)
        else:
            u = _unit(np.subtract(wp, p)[None, :])[0] * speed
            vel = (float(u[0]), float(u[1]))
        obstacles.append(ObstacleState(p, vel, r, kind, wp, speed))

    return WorldState(
        robot=Pose2D(start[0], start[1], wrap_angle(theta)),
        v=0.0,
        omega=0.0,
        obstacles=tuple(obstacles),
        map=world_map,
        goal=goal,
        tick=0,
        rng=rng,
    )
