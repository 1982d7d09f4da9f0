"""Rule-based replanning policies: none, distance, stuck, time, time-with-patience."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .replan_env import Action, StepResult
from .sim_world import DT

EPS = 1e-9


@dataclass
class StrategyConfig:
    d_rep: float = 1.0
    dt_stuck: float = 3.0
    dt_rep: float = 1.0
    d_patience: float = 3.0
    stuck_epsilon: float = 0.05

    def __post_init__(self):
        for k, v in vars(self).items():
            if v <= 0:
                raise ConfigError(f"strategy parameter {k} must be positive")


@dataclass
class StrategyState:
    dist_since_replan: float = 0.0
    ticks_since_replan: int = 0
    stationary_window: deque = field(default_factory=deque)

    @property
    def time_since_replan(self) -> float:
        return self.ticks_since_replan * DT

    def clear(self, xy=None) -> None:
        self.dist_since_replan = 0.0
        self.ticks_since_replan = 0
        self.stationary_window.clear()
        if xy is not None:
            self.stationary_window.append(np.asarray(xy, dtype=float))


def window_len(cfg: StrategyConfig) -> int:
    """Positions needed to span ``dt_stuck`` seconds, both ends included."""
    return int(round(cfg.dt_stuck / DT)) + 1


def max_spread(points) -> float:
    p = np.asarray(points)
    d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=2)
    return float(d.max())


def is_stuck(state: StrategyState, cfg: StrategyConfig) -> bool:
    w = state.stationary_window
    return len(w) >= window_len(cfg) and max_spread(w) < cfg.stuck_epsilon


def decide(kind: str, state: StrategyState, goal_distance: float, cfg: StrategyConfig) -> Action:
    if kind == "none":
        return Action.NO_REPLAN
    if kind == "distance":
        fire = state.dist_since_replan >= cfg.d_rep - EPS
    elif kind == "stuck":
        fire = is_stuck(state, cfg)
    elif kind == "time":
        fire = state.time_since_replan >= cfg.dt_rep - EPS
    elif kind == "time_patience":
        if goal_distance > cfg.d_patience:
            fire = state.time_since_replan >= cfg.dt_rep - EPS
        else:
            fire = is_stuck(state, cfg)
    else:
        raise ConfigError(f"unknown strategy {kind!r}")
    return Action.REPLAN if fire else Action.NO_REPLAN


STRATEGIES = ("none", "distance", "stuck", "time", "time_patience")


class RuleStrategy:
    """Stateful wrapper feeding per-tick positions into a ``StrategyState``.

    Counters restart once a replanning step has delivered its path.
    """

    def __init__(self, kind: str, cfg: StrategyConfig | None = None):
        if kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {kind!r}; choose from {STRATEGIES}")
        self.kind = kind
        self.cfg = cfg or StrategyConfig()
        self.state = StrategyState()

    def reset(self, env) -> None:
        self.state = StrategyState()
        self.state.stationary_window = deque(maxlen=window_len(self.cfg))
        self.state.clear(env.world.robot.xy)
        self._last_xy = np.asarray(env.world.robot.xy, dtype=float)

    def act(self, obs, env) -> Action:
        return decide(self.kind, self.state, env.goal_distance(), self.cfg)

    def observe(self, result: StepResult) -> None:
        s = self.state
        if result.replanned:
            if len(result.positions):
                self._last_xy = result.positions[-1]
            s.clear(self._last_xy)
            return
        for p in result.positions:
            s.dist_since_replan += math.dist(p, self._last_xy)
            s.ticks_since_replan += 1
            s.stationary_window.append(p)
            self._last_xy = p
