"""Local planners: dynamic window approach and sampling-based MPC.

Both map (reference path, robot state, costmap) to a velocity command once per
control tick. Rollouts use the exact unicycle arc at ``DT`` resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .global_plan import Costmap, ReferencePath
from .sim_world import DT, OMEGA_MAX, ROBOT_RADIUS, V_MAX, Pose2D, wrap_angle

V_MIN = 0.0  # forward-only driving


@dataclass(frozen=True)
class ControlCommand:
    v: float
    omega: float


@dataclass
class LocalPlannerConfig:
    accel_limit: float = 2.0
    ang_accel_limit: float = 2.0
    dwa_horizon: float = 2.0
    mpc_horizon: float = 3.0
    dwa_v_samples: int = 11
    dwa_omega_samples: int = 21
    mpc_rollouts: int = 64
    mpc_segments: int = 3
    mpc_std_v: float = 0.3
    mpc_std_omega: float = 0.5
    mpc_collision_penalty: float = 1e3
    w_track: float = 1.0
    w_clear: float = 1.0
    w_speed: float = 0.3
    w_progress: float = 1.0
    w_heading: float = 0.5
    nose_offset: float = 0.5
    clearance_cap: float = 1.0
    lookahead_margin: float = 1.0

    def __post_init__(self):
        if self.dwa_v_samples < 2 or self.dwa_omega_samples < 2:
            raise ConfigError("DWA needs at least two samples per axis")
        for k in ("accel_limit", "ang_accel_limit", "dwa_horizon", "mpc_horizon", "mpc_rollouts"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive")


# --------------------------------------------------------------------------- geometry

def _seg_dist(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to each segment, shape ``(P, S)``."""
    abx, aby = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    den = abx * abx + aby * aby
    den = np.where(den > 0, den, np.inf)
    px = points[:, 0, None] - a[None, :, 0]
    py = points[:, 1, None] - a[None, :, 1]
    t = np.clip((px * abx + py * aby) / den, 0.0, 1.0)
    return np.hypot(px - t * abx, py - t * aby)


def path_window(path: ReferencePath, xy: np.ndarray, lookahead: float) -> tuple[np.ndarray, np.ndarray]:
    """Segments of the path starting at the one nearest to ``xy`` and covering ``lookahead`` meters."""
    w = path.waypoints
    if len(w) == 1:
        return w[:1], w[:1]
    a, b = w[:-1], w[1:]
    i0 = int(np.argmin(_seg_dist(xy[None], a, b)[0]))
    seg_len = np.linalg.norm(b - a, axis=1)
    cum = np.cumsum(seg_len[i0:])
    i1 = i0 + int(np.searchsorted(cum, lookahead)) + 1
    return a[i0:i1], b[i0:i1]


def remaining_along(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Arc length left to the end of the window after projecting each point onto it."""
    ab = b - a
    seg = np.linalg.norm(ab, axis=1)
    den = np.where(seg > 0, seg * seg, 1.0)
    t = np.clip(((points[:, None, :] - a[None]) * ab[None]).sum(axis=2) / den, 0.0, 1.0)
    d = np.linalg.norm(a[None] + t[..., None] * ab[None] - points[:, None, :], axis=2)
    i = np.argmin(d, axis=1)
    after = np.concatenate([np.cumsum(seg[::-1])[::-1][1:], [0.0]])
    return after[i] + (1.0 - t[np.arange(len(points)), i]) * seg[i]


def rollout_constant(pose: Pose2D, v: np.ndarray, omega: np.ndarray, steps: int,
                     with_heading: bool = False):
    """Positions after ``k = 1..steps`` ticks of constant commands, shape ``(C, steps, 2)``."""
    v = np.asarray(v, dtype=float)[:, None]
    om = np.asarray(omega, dtype=float)[:, None]
    t = DT * np.arange(1, steps + 1)[None, :]
    th0 = pose.theta
    straight = np.abs(om) < 1e-9
    safe = np.where(straight, 1.0, om)
    th = th0 + om * t
    x_arc = pose.x + v / safe * (np.sin(th) - math.sin(th0))
    y_arc = pose.y - v / safe * (np.cos(th) - math.cos(th0))
    x_lin = pose.x + v * t * math.cos(th0)
    y_lin = pose.y + v * t * math.sin(th0)
    x = np.where(straight, x_lin, x_arc)
    y = np.where(straight, y_lin, y_arc)
    pts = np.stack([x, y], axis=-1)
    if with_heading:
        return pts, np.broadcast_to(th, x.shape)
    return pts


def nose_points(pts: np.ndarray, heading: np.ndarray, offset: float) -> np.ndarray:
    return pts + offset * np.stack([np.cos(heading), np.sin(heading)], axis=-1)


def _grid_hits(occ: np.ndarray, costmap: Costmap, xy: np.ndarray, points: np.ndarray) -> np.ndarray:
    cells = costmap.cell_of(points)
    ok = costmap.in_bounds(cells)
    hit = np.ones(len(points), dtype=bool)
    hit[ok] = occ[cells[ok, 0], cells[ok, 1]]
    c0 = costmap.cell_of(xy[None])[0]
    if costmap.in_bounds(c0[None])[0] and occ[c0[0], c0[1]] and hit.any():
        # already inside: only moves deeper into occupied space count
        depth = ndimage.distance_transform_edt(occ)
        d = np.full(len(points), np.inf)
        d[ok] = depth[cells[ok, 0], cells[ok, 1]]
        hit &= d > depth[c0[0], c0[1]] + 1e-9
    return hit


def collision_mask(costmap: Costmap, xy: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Per-point collision flags.

    With the pre-built map attached, pillars and walls are tested exactly against
    the robot disc and only the sensed layer goes through the lattice. Cell-center
    occupancy is too coarse near known geometry: it both lets the disc graze a
    pillar and blocks motions that clear it. If the robot already overlaps a
    forbidden region, only moves that go deeper are flagged.
    """
    m = costmap.world_map
    if m is None or costmap.sensed is None:
        return _grid_hits(costmap.occupancy, costmap, xy, points)
    hit = _grid_hits(costmap.sensed, costmap, xy, points)
    d = np.minimum(m.distance_to_pillars(points), m.distance_to_boundary(points))
    here = min(m.distance_to_pillars(xy[None])[0], m.distance_to_boundary(xy[None])[0])
    return hit | (d < min(ROBOT_RADIUS, here - 1e-9))


def heading_error(path: ReferencePath, pose: Pose2D, lookahead: float) -> float:
    a, b = path_window(path, pose.xy, lookahead)
    target = b[-1]
    if np.allclose(target, pose.xy):
        return 0.0
    return wrap_angle(math.atan2(target[1] - pose.y, target[0] - pose.x) - pose.theta)


# --------------------------------------------------------------------------- DWA

def dynamic_window(v: float, omega: float, cfg: LocalPlannerConfig) -> tuple[np.ndarray, np.ndarray]:
    dv = cfg.accel_limit * DT
    dw = cfg.ang_accel_limit * DT
    v_lo, v_hi = max(V_MIN, v - dv), min(V_MAX, v + dv)
    w_lo, w_hi = max(-OMEGA_MAX, omega - dw), min(OMEGA_MAX, omega + dw)
    if v_lo > v_hi:  # current speed outside the absolute limits
        v_lo = v_hi = float(np.clip(v, V_MIN, V_MAX))
    if w_lo > w_hi:
        w_lo = w_hi = float(np.clip(omega, -OMEGA_MAX, OMEGA_MAX))
    return np.linspace(v_lo, v_hi, cfg.dwa_v_samples), np.linspace(w_lo, w_hi, cfg.dwa_omega_samples)


def dwa_scores(path: ReferencePath, pose: Pose2D, v: float, omega: float, costmap: Costmap,
               cfg: LocalPlannerConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score of every ``(v, omega)`` pair in the window; colliding rollouts score ``-inf``."""
    vs, ws = dynamic_window(v, omega, cfg)
    V, W = np.meshgrid(vs, ws, indexing="ij")
    V, W = V.ravel(), W.ravel()
    steps = int(round(cfg.dwa_horizon / DT))
    pts, th = rollout_constant(pose, V, W, steps, with_heading=True)
    flat = pts.reshape(-1, 2)
    a, b = path_window(path, pose.xy, cfg.dwa_horizon * V_MAX + cfg.lookahead_margin)
    # the nose retracts near the path end so the center itself can reach it
    left = remaining_along(pose.xy[None], a, b)[0] if np.array_equal(b[-1], path.waypoints[-1]) else np.inf
    nose = nose_points(pts, th, min(cfg.nose_offset, 0.5 * left))
    track = _seg_dist(nose.reshape(-1, 2), a, b).min(axis=1).reshape(len(V), steps).mean(axis=1)
    progress = remaining_along(nose[:, -1, :], a, b)
    d = carrot(path, pose.xy, cfg.lookahead_margin) - pts[:, -1, :]
    align = np.abs(np.angle(np.exp(1j * (np.arctan2(d[:, 1], d[:, 0]) - th[:, -1])))) / math.pi
    align *= np.minimum(np.linalg.norm(d, axis=1) / cfg.lookahead_margin, 1.0)  # fades out at the goal
    hit = collision_mask(costmap, pose.xy, flat).reshape(len(V), steps).any(axis=1)
    clear = costmap.sample_field(costmap.clearance, flat, 0.0).reshape(len(V), steps).min(axis=1)
    clear = np.minimum(clear, cfg.clearance_cap)
    score = (-cfg.w_track * track - cfg.w_progress * progress - cfg.w_heading * align
             + cfg.w_clear * clear + cfg.w_speed * V)
    score = np.where(hit, -np.inf, score)
    return V, W, score


def select_best(V: np.ndarray, W: np.ndarray, score: np.ndarray) -> int:
    """Argmax of score; ties go to higher v, then lower |omega|."""
    order = np.lexsort((np.abs(W), -V, -score))
    return int(order[0])


def carrot(path: ReferencePath, xy: np.ndarray, ahead: float) -> np.ndarray:
    """Point ``ahead`` meters along the path past the projection of ``xy``."""
    w = path.waypoints
    if len(w) == 1:
        return w[0]
    a, b = w[:-1], w[1:]
    seg = np.linalg.norm(b - a, axis=1)
    i = int(np.argmin(_seg_dist(xy[None], a, b)[0]))
    rest = np.concatenate([[0.0], np.cumsum(seg)])
    s0 = rest[i] + seg[i] - remaining_along(xy[None], a[i:i + 1], b[i:i + 1])[0]
    s = min(s0 + ahead, rest[-1])
    return np.array([np.interp(s, rest, w[:, 0]), np.interp(s, rest, w[:, 1])])


RECOVERY_HEADINGS = 72
RECOVERY_PROBE = (0.1, 0.2, 0.3, 0.4, 0.5)


def recovery_command(path: ReferencePath, pose: Pose2D, costmap: Costmap, cfg: LocalPlannerConfig) -> ControlCommand:
    """Stop and turn toward the admissible heading nearest the carrot direction.

    A heading is admissible when a short straight probe along it is collision
    free. With none admissible the robot turns toward the carrot.
    """
    goal = carrot(path, pose.xy, cfg.lookahead_margin)
    d = goal - pose.xy
    want = math.atan2(d[1], d[0]) if np.hypot(*d) > 1e-9 else pose.theta
    off = np.linspace(-math.pi, math.pi, RECOVERY_HEADINGS, endpoint=False)
    heads = pose.theta + off
    r = np.asarray(RECOVERY_PROBE)
    probe = pose.xy + r[None, :, None] * np.stack([np.cos(heads), np.sin(heads)], axis=1)[:, None, :]
    ok = ~collision_mask(costmap, pose.xy, probe.reshape(-1, 2)).reshape(len(heads), -1).any(axis=1)
    err = np.abs([wrap_angle(h - want) for h in heads])
    turn = wrap_angle(want - pose.theta)
    if ok.any():
        k = int(np.argmin(np.where(ok, err, np.inf)))
        turn = wrap_angle(heads[k] - pose.theta)
    omega = float(np.clip(turn / DT, -OMEGA_MAX, OMEGA_MAX))
    return ControlCommand(0.0, omega)


def dwa_command(path: ReferencePath, pose: Pose2D, v: float, omega: float, costmap: Costmap,
                cfg: LocalPlannerConfig | None = None) -> ControlCommand:
    """Best window sample.

    A stopped robot that would stay stopped, or one with no admissible forward
    motion, turns in place instead (see ``recovery_command``).
    """
    cfg = cfg or LocalPlannerConfig()
    V, W, score = dwa_scores(path, pose, v, omega, costmap, cfg)
    if not np.isfinite(score[V > 0]).any():
        return recovery_command(path, pose, costmap, cfg)
    k = select_best(V, W, score)
    if V[k] == 0.0 and abs(v) < 1e-9:
        return recovery_command(path, pose, costmap, cfg)
    return ControlCommand(float(V[k]), float(W[k]))


class DWAPlanner:
    name = "dwa"

    def __init__(self, cfg: LocalPlannerConfig | None = None):
        self.cfg = cfg or LocalPlannerConfig()

    def reset(self, seed: int) -> None:
        pass

    def command(self, path: ReferencePath, pose: Pose2D, v: float, omega: float, costmap: Costmap) -> ControlCommand:
        return dwa_command(path, pose, v, omega, costmap, self.cfg)


# --------------------------------------------------------------------------- MPC

def rollout_sequences(pose: Pose2D, seqs: np.ndarray, ticks_per_segment: int) -> np.ndarray:
    """Piecewise-constant rollouts; ``seqs`` is ``(R, S, 2)`` of (v, omega). Returns ``(R, S*T, 2)``."""
    cmds = np.repeat(seqs, ticks_per_segment, axis=1)
    R, K, _ = cmds.shape
    x = np.full(R, pose.x)
    y = np.full(R, pose.y)
    th = np.full(R, pose.theta)
    out = np.empty((R, K, 2))
    for k in range(K):
        v, om = cmds[:, k, 0], cmds[:, k, 1]
        straight = np.abs(om) < 1e-9
        safe = np.where(straight, 1.0, om)
        th1 = th + om * DT
        x = np.where(straight, x + v * DT * np.cos(th), x + v / safe * (np.sin(th1) - np.sin(th)))
        y = np.where(straight, y + v * DT * np.sin(th), y - v / safe * (np.cos(th1) - np.cos(th)))
        th = th1
        out[:, k, 0] = x
        out[:, k, 1] = y
    return out


class MPCPlanner:
    """Sampling MPC warm-started on its previous best sequence.

    Sample 0 is always the previous solution itself, so the returned sequence
    never costs more than the incumbent under the current costmap.
    """

    name = "mpc"

    def __init__(self, cfg: LocalPlannerConfig | None = None, seed: int = 0):
        self.cfg = cfg or LocalPlannerConfig()
        self.reset(seed)

    def reset(self, seed: int) -> None:
        self.rng = np.random.default_rng([seed, 2])
        # nominal guess before any solution exists: cruise straight ahead
        self.prev = np.tile([V_MAX, 0.0], (self.cfg.mpc_segments, 1))
        self.last_cost = float("nan")

    @property
    def ticks_per_segment(self) -> int:
        return int(round(self.cfg.mpc_horizon / self.cfg.mpc_segments / DT))

    def costs(self, path: ReferencePath, pose: Pose2D, costmap: Costmap, seqs: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        pts = rollout_sequences(pose, seqs, self.ticks_per_segment)
        R, K, _ = pts.shape
        flat = pts.reshape(-1, 2)
        a, b = path_window(path, pose.xy, cfg.mpc_horizon * V_MAX + cfg.lookahead_margin)
        track = _seg_dist(flat, a, b).min(axis=1).reshape(R, K).mean(axis=1)
        terminal = remaining_along(pts[:, -1, :], a, b)
        hits = collision_mask(costmap, pose.xy, flat).reshape(R, K).sum(axis=1)
        return cfg.w_track * track + terminal + cfg.mpc_collision_penalty * hits

    def sample(self) -> np.ndarray:
        cfg = self.cfg
        n = cfg.mpc_rollouts
        noise = self.rng.normal(size=(n, cfg.mpc_segments, 2)) * np.array([cfg.mpc_std_v, cfg.mpc_std_omega])
        noise[0] = 0.0
        seqs = self.prev[None] + noise
        seqs[..., 0] = np.clip(seqs[..., 0], V_MIN, V_MAX)
        seqs[..., 1] = np.clip(seqs[..., 1], -OMEGA_MAX, OMEGA_MAX)
        return seqs

    def command(self, path: ReferencePath, pose: Pose2D, v: float, omega: float, costmap: Costmap) -> ControlCommand:
        seqs = self.sample()
        c = self.costs(path, pose, costmap, seqs)
        k = int(np.argmin(c))
        self.prev = seqs[k].copy()
        self.last_cost = float(c[k])
        return ControlCommand(float(seqs[k, 0, 0]), float(seqs[k, 0, 1]))


def mpc_command(path: ReferencePath, pose: Pose2D, v: float, omega: float, costmap: Costmap,
                cfg: LocalPlannerConfig | None = None, seed: int = 0) -> ControlCommand:
    """Single-shot MPC call from a cold start."""
    return MPCPlanner(cfg, seed).command(path, pose, v, omega, costmap)


LOCAL_PLANNERS = {"dwa": DWAPlanner, "mpc": MPCPlanner}


def make_local_planner(name: str, cfg: LocalPlannerConfig | None = None):
    try:
        return LOCAL_PLANNERS[name](cfg)
    except KeyError:
        raise ConfigError(f"unknown local planner {name!r}; choose from {sorted(LOCAL_PLANNERS)}") from None
