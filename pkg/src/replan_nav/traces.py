"""Episode traces as JSON lines: a header, one record per tick, a footer.

Floats go through ``json`` with shortest round-trip repr, so a replay can be
compared bit for bit.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import TraceMismatch
from .replan_env import Action, EnvConfig, ReplanEnv

TRACE_VERSION = 1
COMPARED_KEYS = ("sim_time", "robot_x", "robot_y", "robot_theta", "v", "omega", "obstacles", "replanned", "action")


def header_record(env: ReplanEnv, strategy: str) -> dict:
    r = env.world.robot
    return {
        "type": "header",
        "version": TRACE_VERSION,
        "map_kind": env.map_kind,
        "global_planner": env.global_planner_name,
        "local_planner": env.local_planner_name,
        "strategy": strategy,
        "seed": env.seed,
        "env_config": asdict(env.cfg),
        "start": [r.x, r.y, r.theta],
        "goal": list(env.world.goal),
        "l_path": env.l_path,
    }


def footer_record(env: ReplanEnv, actions: list[int]) -> dict:
    return {
        "type": "footer",
        "actions": actions,
        "success": env.success,
        "collision": env.collision,
        "truncated": env.truncated,
        "sim_time": env.sim_time,
        "traveled": env.traveled,
        "n_replans": env.n_replans,
    }


def write_trace(path, header: dict, ticks: list[dict], footer: dict) -> None:
    with open(path, "w") as fh:
        for rec in [header, *({"type": "tick", **t} for t in ticks), footer]:
            fh.write(json.dumps(rec) + "\n")


def read_trace(path) -> tuple[dict, list[dict], dict]:
    lines = [json.loads(s) for s in Path(path).read_text().splitlines() if s.strip()]
    if not lines or lines[0].get("type") != "header" or lines[-1].get("type") != "footer":
        raise TraceMismatch(f"{path}: missing header or footer record")
    ticks = [r for r in lines[1:-1] if r.get("type") == "tick"]
    return lines[0], ticks, lines[-1]


def traveled_length(header: dict, ticks: list[dict]) -> float:
    """Path length recomputed from the recorded positions."""
    pts = np.array([header["start"][:2]] + [[t["robot_x"], t["robot_y"]] for t in ticks])
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def replay(path) -> tuple[dict, list[dict], dict]:
    """Re-simulate a trace from its seed and recorded actions; raise ``TraceMismatch`` on divergence."""
    header, ticks, footer = read_trace(path)
    env = ReplanEnv(header["map_kind"], header["global_planner"], header["local_planner"],
                    EnvConfig(**header["env_config"]))
    env.reset(header["seed"], record_trace=True)
    for a in footer["actions"]:
        if env.done:
            raise TraceMismatch(f"{path}: episode ended before the recorded actions ran out")
        env.step(Action(a))
    fresh = json.loads(json.dumps(env.trace))  # same float round trip as the file
    if len(fresh) != len(ticks):
        raise TraceMismatch(f"{path}: {len(ticks)} recorded ticks, replay produced {len(fresh)}")
    for k, (old, new) in enumerate(zip(ticks, fresh)):
        for key in COMPARED_KEYS:
            if old[key] != new[key]:
                raise TraceMismatch(f"{path}: tick {k} field {key!r} differs: {old[key]!r} vs {new[key]!r}")
    return header, ticks, footer


def plot_data(header: dict, ticks: list[dict], interval: float = 0.5) -> dict:
    """Resampled robot and obstacle paths plus one marker per replanning step."""
    dt = header["env_config"]["dt"]
    every = max(1, int(round(interval / dt)))
    keep = [t for i, t in enumerate(ticks) if (i + 1) % every == 0 or i == len(ticks) - 1]
    n_obs = len(ticks[0]["obstacles"]) if ticks else 0
    return {
        "seed": header["seed"],
        "map_kind": header["map_kind"],
        "goal": header["goal"],
        "interval": every * dt,
        "time": [t["sim_time"] for t in keep],
        "robot": [[t["robot_x"], t["robot_y"]] for t in keep],
        "obstacles": [[t["obstacles"][j] for t in keep] for j in range(n_obs)],
        "replan_markers": [{"time": t["sim_time"], "x": t["robot_x"], "y": t["robot_y"]}
                           for t in ticks if t["replanned"]],
    }
