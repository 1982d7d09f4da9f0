"""Seeded trial batteries and the SR / CR / SGT / SPL / NR metrics."""
from __future__ import annotations

import csv
import logging
import multiprocessing as mp
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InitialPlanFailed, ReplanNavError
from .replan_env import EnvConfig, ReplanEnv, sgt_score
from .strategies import STRATEGIES, RuleStrategy
from .traces import footer_record, header_record, write_trace

log = logging.getLogger(__name__)


@dataclass
class EpisodeResult:
    seed: int
    success: bool
    collision: bool
    timeout: bool
    AT: float
    OT: float
    AL: float
    OL: float
    NR: int
    plan_failures: int = 0

    def __post_init__(self):
        if self.success + self.collision + self.timeout != 1:
            raise ValueError("exactly one outcome must hold")


def make_policy(strategy: str, weights=None):
    if strategy == "drl":
        if weights is None:
            raise ConfigError("strategy 'drl' needs a weights file")
        from .drl import DRLPolicy, load_weights
        return DRLPolicy(load_weights(weights))
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES + ('drl',)}")
    return RuleStrategy(strategy)


def run_episode(env: ReplanEnv, policy, seed: int, trace_path=None, strategy_name: str = "") -> EpisodeResult:
    obs = env.reset(seed, record_trace=trace_path is not None)
    header = header_record(env, strategy_name) if trace_path is not None else None
    policy.reset(env)
    actions = []
    while not env.done:
        a = policy.act(obs, env)
        actions.append(int(a))
        res = env.step(a)
        policy.observe(res)
        obs = res.observation
    if trace_path is not None:
        write_trace(trace_path, header, env.trace, footer_record(env, actions))
    return EpisodeResult(
        seed=seed, success=env.success, collision=env.collision,
        timeout=not (env.success or env.collision),
        AT=env.sim_time, OT=env.optimal_time, AL=env.traveled, OL=env.l_path,
        NR=env.n_replans, plan_failures=env.n_plan_failures,
    )


# --------------------------------------------------------------------------- metrics

def compute_spl(results: list[EpisodeResult]) -> float:
    """Mean of ``1_suc * OL / max(AL, OL)``."""
    if not results:
        raise ValueError("no results")
    return float(np.mean([r.success * r.OL / max(r.AL, r.OL) for r in results]))


def compute_spl_literal(results: list[EpisodeResult]) -> float:
    """Variant with AL in the numerator; kept for comparison only."""
    if not results:
        raise ValueError("no results")
    return float(np.mean([r.success * r.AL / max(r.AL, r.OL) for r in results]))


def compute_sgt(results: list[EpisodeResult], alpha: float = 4.0, beta: float = 8.0) -> float:
    if not results:
        raise ValueError("no results")
    return float(np.mean([sgt_score(r.success, r.AT, r.OT, alpha, beta) for r in results]))


def compute_time_ratio(results: list[EpisodeResult]) -> float:
    """Unclipped ``1_suc * OT / AT``, reported next to the clipped score."""
    if not results:
        raise ValueError("no results")
    return float(np.mean([r.success * r.OT / r.AT if r.AT > 0 else 0.0 for r in results]))


@dataclass
class BenchReport:
    map_kind: int
    global_planner: str
    local_planner: str
    strategy: str
    results: list[EpisodeResult] = field(repr=False)
    aborted: list[int] = field(default_factory=list)
    alpha: float = 4.0
    beta: float = 8.0

    @property
    def n(self) -> int:
        return len(self.results)

    @property
    def SR(self) -> float:
        return 100.0 * sum(r.success for r in self.results) / self.n

    @property
    def CR(self) -> float:
        return 100.0 * sum(r.collision for r in self.results) / self.n

    @property
    def TR(self) -> float:
        return 100.0 * sum(r.timeout for r in self.results) / self.n

    @property
    def SGT(self) -> float:
        return compute_sgt(self.results, self.alpha, self.beta)

    @property
    def time_ratio(self) -> float:
        return compute_time_ratio(self.results)

    @property
    def SPL(self) -> float:
        return compute_spl(self.results)

    @property
    def SPL_literal(self) -> float:
        return compute_spl_literal(self.results)

    @property
    def NR(self) -> int:
        return sum(r.NR for r in self.results)

    def row(self) -> dict:
        return {"map": self.map_kind, "gp": self.global_planner, "lp": self.local_planner,
                "strategy": self.strategy, "SR": self.SR, "CR": self.CR, "SGT": self.SGT,
                "SPL": self.SPL, "NR": self.NR, "SPL_literal": self.SPL_literal, "time_ratio": self.time_ratio,
                "trials": self.n, "aborted": len(self.aborted)}


CSV_FIELDS = ("map", "gp", "lp", "strategy", "SR", "CR", "SGT", "SPL", "NR", "SPL_literal", "time_ratio", "trials",
              "aborted")


def write_report_csv(reports: list[BenchReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def write_episodes_csv(report: BenchReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(EpisodeResult.__dataclass_fields__))
        w.writeheader()
        for r in report.results:
            w.writerow(asdict(r))


def format_table(reports: list[BenchReport]) -> str:
    head = f"{'map':>4} {'gp':<9} {'lp':<4} {'strategy':<14} {'SR':>6} {'CR':>6} {'SGT':>6} {'SPL':>6} {'NR':>6}"
    lines = [head, "-" * len(head)]
    for r in reports:
        nr = "-" if r.strategy == "none" else str(r.NR)
        lines.append(f"{r.map_kind:>4} {r.global_planner:<9} {r.local_planner:<4} {r.strategy:<14} "
                     f"{r.SR:6.1f} {r.CR:6.1f} {r.SGT:6.3f} {r.SPL:6.3f} {nr:>6}")
    return "\n".join(lines)


# --------------------------------------------------------------------------- batteries

def _episode_job(args):
    map_kind, gp, lp, strategy, weights, seed, trace_dir, env_cfg = args
    env = ReplanEnv(map_kind, gp, lp, EnvConfig(**env_cfg))
    policy = make_policy(strategy, weights)
    path = None if trace_dir is None else Path(trace_dir) / f"trace_{strategy}_{seed:05d}.jsonl"
    try:
        return seed, run_episode(env, policy, seed, path, strategy), None
    except InitialPlanFailed as e:
        return seed, None, str(e)


def run_battery(map_kind: int = 16, global_planner: str = "dijkstra", local_planner: str = "dwa",
                strategy: str = "none", n_trials: int = 100, base_seed: int = 0, jobs: int = 1,
                weights=None, trace_dir=None, env_config: EnvConfig | None = None) -> BenchReport:
    """Seeds ``base_seed .. base_seed + n_trials - 1``; the same list for every strategy."""
    env_config = env_config or EnvConfig()
    make_policy(strategy, weights)  # fail fast on bad configuration
    if trace_dir is not None:
        Path(trace_dir).mkdir(parents=True, exist_ok=True)
    jobs_args = [(map_kind, global_planner, local_planner, strategy, weights, s, trace_dir, asdict(env_config))
                 for s in range(base_seed, base_seed + n_trials)]
    if jobs > 1:
        with mp.get_context("spawn").Pool(jobs) as pool:
            out = pool.map(_episode_job, jobs_args, chunksize=1)
    else:
        out = [_episode_job(a) for a in jobs_args]
    out.sort(key=lambda t: t[0])
    results = [r for _, r, _ in out if r is not None]
    aborted = [s for s, r, _ in out if r is None]
    for s, _, msg in out:
        if msg is not None:
            log.warning("seed %d aborted: %s", s, msg)
    if not results:
        raise ReplanNavError("every episode of the battery aborted")
    return BenchReport(map_kind, global_planner, local_planner, strategy, results, aborted,
                       env_config.sgt_alpha, env_config.sgt_beta)
