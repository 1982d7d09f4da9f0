"""Replanning-timing POMDP over the hierarchical global/local planning stack.

A decision step is either one control tick (no replan) or the replanning
delay followed by one tick on the fresh path. The global planner sees the
world as it was when the request was made; the local planner keeps tracking
the old path until delivery.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum

import numpy as np

from .errors import InitialPlanFailed, NoPath, StepAfterDone
from .global_plan import Costmap, ReferencePath, build_costmap, make_global_planner, plan_dijkstra
from .local_plan import LocalPlannerConfig, make_local_planner
from .sim_world import (DT, ScenarioConfig, WorldState, check_collision, sense, spawn_scenario,
                        step_world)

log = logging.getLogger(__name__)


class Action(IntEnum):
    NO_REPLAN = 0
    REPLAN = 1


@dataclass
class EnvConfig:
    dt: float = DT
    delay: float = 1.0
    goal_tolerance: float = 0.5
    time_limit: float = 100.0
    sgt_alpha: float = 4.0
    sgt_beta: float = 8.0
    speed_max: float = 1.0
    n_scan: int = 20
    n_path: int = 5
    n_traj: int = 5
    traj_interval: float = 1.0

    def __post_init__(self):
        if self.delay < self.dt:
            raise ValueError("replanning delay must be at least one control interval")
        if not 0 < self.sgt_alpha < self.sgt_beta:
            raise ValueError("need 0 < sgt_alpha < sgt_beta")

    @property
    def delay_ticks(self) -> int:
        # floor(delay / dt) with a guard against 1.0 / 0.1 = 9.999...
        return int(math.floor(self.delay / self.dt + 1e-9))

    @property
    def limit_ticks(self) -> int:
        return int(round(self.time_limit / self.dt))

    @property
    def obs_dim(self) -> int:
        return 2 * (self.n_scan + self.n_path + self.n_traj + 1)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    elapsed: float
    replanned: bool
    positions: np.ndarray = field(repr=False)  # robot xy after each tick of this step
    ticks: int = 0


def sgt_score(success: bool, actual_time: float, optimal_time: float, alpha: float, beta: float) -> float:
    """Success-weighted normalized goal time of one episode."""
    if not success:
        return 0.0
    clipped = min(max(actual_time, alpha * optimal_time), beta * optimal_time)
    return optimal_time / clipped


# --------------------------------------------------------------------------- observation

def to_robot_frame(points: np.ndarray, x: float, y: float, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    d = np.atleast_2d(points) - np.array([x, y])
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)


def downsample_scan(ranges: np.ndarray, n_sectors: int) -> np.ndarray:
    """Closest return in each of ``n_sectors`` equal sectors, as robot-frame points."""
    ray_count = len(ranges)
    per = ray_count // n_sectors
    r = ranges[: per * n_sectors].reshape(n_sectors, per)
    k = np.argmin(r, axis=1)
    idx = np.arange(n_sectors) * per + k
    ang = 2.0 * math.pi * idx / ray_count
    rr = ranges[idx]
    return np.stack([rr * np.cos(ang), rr * np.sin(ang)], axis=1)


def nearest_on_path(waypoints: np.ndarray, xy: np.ndarray) -> tuple[int, float]:
    """Segment index and parameter of the closest point on the polyline."""
    if len(waypoints) == 1:
        return 0, 0.0
    a, b = waypoints[:-1], waypoints[1:]
    ab = b - a
    den = (ab * ab).sum(axis=1)
    t = np.divide(((xy - a) * ab).sum(axis=1), den, out=np.zeros(len(a)), where=den > 0)
    t = np.clip(t, 0.0, 1.0)
    d = np.linalg.norm(a + t[:, None] * ab - xy, axis=1)
    i = int(np.argmin(d))
    return i, float(t[i])


def downsample_path(waypoints: np.ndarray, xy: np.ndarray, n: int) -> np.ndarray:
    """``n`` points at uniform arc length from the nearest path point to the path end."""
    if len(waypoints) == 1:
        return np.repeat(waypoints, n, axis=0)
    i, t = nearest_on_path(waypoints, xy)
    start = waypoints[i] + t * (waypoints[i + 1] - waypoints[i])
    rest = np.vstack([start[None], waypoints[i + 1:]])
    seg = np.linalg.norm(np.diff(rest, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        return np.repeat(start[None], n, axis=0)
    s = np.linspace(0.0, total, n)
    return np.stack([np.interp(s, cum, rest[:, 0]), np.interp(s, cum, rest[:, 1])], axis=1)


def build_observation(x: float, y: float, theta: float, scan_ranges: np.ndarray, path: np.ndarray,
                      traj: np.ndarray, goal, cfg: EnvConfig) -> np.ndarray:
    """Flatten ``[scan, path, past trajectory, goal]`` in the robot frame."""
    xy = np.array([x, y])
    scan_pts = downsample_scan(scan_ranges, cfg.n_scan)
    path_pts = to_robot_frame(downsample_path(path, xy, cfg.n_path), x, y, theta)
    traj_pts = to_robot_frame(traj, x, y, theta)
    goal_rel = to_robot_frame(np.asarray(goal, dtype=float), x, y, theta)
    return np.concatenate([scan_pts.ravel(), path_pts.ravel(), traj_pts.ravel(), goal_rel.ravel()])


# --------------------------------------------------------------------------- environment

class ReplanEnv:
    """One episode at a time; ``reset`` starts a fresh seeded scenario."""

    def __init__(self, map_kind: int = 16, global_planner: str = "dijkstra", local_planner: str = "dwa",
                 config: EnvConfig | None = None, local_config: LocalPlannerConfig | None = None,
                 scenario: ScenarioConfig | None = None):
        self.map_kind = map_kind
        self.global_planner_name = global_planner
        self.local_planner_name = local_planner
        self.cfg = config or EnvConfig()
        self.gp = make_global_planner(global_planner)
        self.lp = make_local_planner(local_planner, local_config)
        self.scenario = scenario
        self.trace: list[dict] | None = None
        self.world: WorldState | None = None

    # ----------------------------------------------------------------- lifecycle
    def reset(self, seed: int, record_trace: bool = False) -> np.ndarray:
        sc = None
        if self.scenario is not None:
            sc = ScenarioConfig(**{**asdict(self.scenario), "map_kind": self.map_kind, "seed": seed})
        self.seed = seed
        self.world = spawn_scenario(self.map_kind, seed, sc)
        self.gp.prepare(self.world.map, seed)
        self.lp.reset(seed)
        self._refresh_sensing()

        start = self.world.robot.xy
        try:
            self.l_path = plan_dijkstra(self.costmap, start, self.world.goal).length()
            self.path = self.gp.plan(self.costmap, start, self.world.goal, self.world.sim_time)
        except NoPath as e:
            log.warning("seed %d: initial plan failed (%s)", seed, e)
            raise InitialPlanFailed(str(e)) from e

        self.history = [start.copy()]
        self.traveled = 0.0
        self.n_replans = 0
        self.n_plan_failures = 0
        self.terminated = self.truncated = False
        self.success = self.collision = False
        self.reward_total = 0.0
        self.trace = [] if record_trace else None
        return self.observe()

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated

    @property
    def optimal_time(self) -> float:
        return self.l_path / self.cfg.speed_max

    @property
    def sim_time(self) -> float:
        return self.world.sim_time

    def goal_distance(self) -> float:
        return float(math.dist(self.world.robot.xy, self.world.goal))

    # ----------------------------------------------------------------- internals
    def _refresh_sensing(self) -> None:
        self.scan = sense(self.world)
        self.costmap: Costmap = build_costmap(self.world.map, self.scan)

    def _tick(self, path: ReferencePath, action: Action, replan_marker: bool) -> None:
        w = self.world
        cmd = self.lp.command(path, w.robot, w.v, w.omega, self.costmap)
        prev = w.robot.xy
        self.world = step_world(w, (cmd.v, cmd.omega))
        now = self.world.robot.xy
        self.traveled += float(np.linalg.norm(now - prev))
        self.history.append(now)
        self._refresh_sensing()

        reward = 0.0
        if check_collision(self.world):
            self.terminated = self.collision = True
        elif self.goal_distance() <= self.cfg.goal_tolerance:
            self.terminated = self.success = True
            reward = sgt_score(True, self.sim_time, self.optimal_time, self.cfg.sgt_alpha, self.cfg.sgt_beta)
        elif self.world.tick >= self.cfg.limit_ticks:
            self.truncated = True
        self.reward_total += reward
        if self.trace is not None:
            self.trace.append(self._record(action, replan_marker, reward))

    def _record(self, action: Action, replan_marker: bool, reward: float) -> dict:
        w = self.world
        return {
            "sim_time": w.sim_time,
            "robot_x": w.robot.x,
            "robot_y": w.robot.y,
            "robot_theta": w.robot.theta,
            "v": w.v,
            "omega": w.omega,
            "obstacles": [list(o.position) for o in w.obstacles],
            "replanned": int(replan_marker),
            "action": int(action),
            "reward": reward,
            "terminated": self.terminated,
            "truncated": self.truncated,
        }

    # ----------------------------------------------------------------- POMDP
    def step(self, action: Action | int) -> StepResult:
        if self.world is None or self.done:
            raise StepAfterDone("episode is finished; call reset()")
        action = Action(int(action))
        tick0 = self.world.tick
        n_hist = len(self.history)

        if action == Action.NO_REPLAN:
            self._tick(self.path, action, False)
        else:
            self.n_replans += 1
            # planner input is frozen at the request instant
            try:
                new_path = self.gp.plan(self.costmap, self.world.robot.xy, self.world.goal, self.sim_time)
            except NoPath:
                self.n_plan_failures += 1
                new_path = None
            for k in range(self.cfg.delay_ticks):
                self._tick(self.path, action, k == 0)
                if self.done:
                    break
            if not self.done:
                if new_path is not None:
                    self.path = new_path
                self._tick(self.path, action, False)

        ticks = self.world.tick - tick0
        return StepResult(
            observation=self.observe(),
            reward=self._last_reward(),
            terminated=self.terminated,
            truncated=self.truncated,
            elapsed=ticks * self.cfg.dt,
            replanned=action == Action.REPLAN,
            positions=np.array(self.history[n_hist:]),
            ticks=ticks,
        )

    def _last_reward(self) -> float:
        if self.success:
            return sgt_score(True, self.sim_time, self.optimal_time, self.cfg.sgt_alpha, self.cfg.sgt_beta)
        return 0.0

    def trajectory_points(self) -> np.ndarray:
        per = int(round(self.cfg.traj_interval / self.cfg.dt))
        last = len(self.history) - 1
        idx = [max(0, last - per * k) for k in range(1, self.cfg.n_traj + 1)]
        return np.array([self.history[i] for i in idx])

    def observe(self) -> np.ndarray:
        r = self.world.robot
        return build_observation(r.x, r.y, r.theta, self.scan.ranges, self.path.waypoints,
                                 self.trajectory_points(), self.world.goal, self.cfg)
