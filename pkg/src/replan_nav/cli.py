"""``replan-nav`` command line: train, eval, battery, replay.

Every option can also come from a JSON config file (``--config``) under the
same name with dashes turned into underscores; flags override the file.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 trace verification mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

from .bench import format_table, run_battery, write_episodes_csv, write_report_csv
from .drl import DQNTrainer, PriorityMode, TrainerConfig, save_weights
from .errors import ConfigError, ReplanNavError, TraceMismatch
from .global_plan import GLOBAL_PLANNERS
from .local_plan import LOCAL_PLANNERS
from .replan_env import EnvConfig, ReplanEnv
from .strategies import STRATEGIES
from .traces import plot_data, replay

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_MISMATCH = 0, 1, 2, 3

COMMON_DEFAULTS = {"map": 16, "gp": "dijkstra", "lp": "dwa", "seed": 0, "delay": 1.0, "time_limit": 100.0}
COMMAND_DEFAULTS = {
    "train": {"out": "runs/train", **{f.name: f.default for f in fields(TrainerConfig) if f.name != "seed"}},
    "eval": {"strategy": "time", "weights": None, "trials": 100, "out": None, "jobs": 1},
    "battery": {"strategy": "none,distance,stuck,time,time_patience", "weights": None, "trials": 100,
                "out": "runs/battery", "jobs": 1, "traces": True},
    "replay": {"plot": None, "interval": 0.5},
}
TRAINER_KEYS = {f.name for f in fields(TrainerConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with option values; flags override it")
    p.add_argument("--map", type=int, choices=(9, 16, 25), default=None, help="pillar count")
    p.add_argument("--gp", choices=sorted(GLOBAL_PLANNERS), default=None, help="global planner")
    p.add_argument("--lp", choices=sorted(LOCAL_PLANNERS), default=None, help="local planner")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--delay", type=float, default=None, help="replanning delay in seconds")
    p.add_argument("--time-limit", type=float, default=None, help="episode time limit in seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="replan-nav", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a DQN replanning policy")
    _common(t)
    t.add_argument("--out", default=None, help="output directory")
    t.add_argument("--steps", dest="total_steps", type=int, default=None, help="decision steps")
    t.add_argument("--priority-mode", choices=[m.value for m in PriorityMode], default=None)
    for f in fields(TrainerConfig):
        if f.name in ("seed", "total_steps", "priority_mode"):
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            t.add_argument(flag, type=_parse_bool, default=None)
        else:
            t.add_argument(flag, type=type(f.default), default=None)

    for name, desc in (("eval", "evaluate one strategy"), ("battery", "run a trial battery over strategies")):
        b = sub.add_parser(name, help=desc)
        _common(b)
        b.add_argument("--strategy", default=None,
                       help="strategy name" + (" or comma-separated list" if name == "battery" else ""))
        b.add_argument("--weights", default=None, help="network file for strategy drl")
        b.add_argument("--trials", type=int, default=None)
        b.add_argument("--out", default=None, help="output directory")
        b.add_argument("--jobs", type=int, default=None, help="parallel episodes")
        if name == "battery":
            b.add_argument("--traces", type=_parse_bool, default=None, help="write per-episode traces")

    r = sub.add_parser("replay", help="re-simulate a trace and verify it")
    r.add_argument("trace", help="trace file (.jsonl)")
    r.add_argument("--config", help="JSON file with option values")
    r.add_argument("--plot", default=None, help="write plot data (JSON) here")
    r.add_argument("--interval", type=float, default=None, help="plot resampling interval in seconds")
    return parser


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def effective_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cmd = args.command
    cfg = {} if cmd == "replay" else dict(COMMON_DEFAULTS)
    cfg.update(COMMAND_DEFAULTS[cmd])
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        loaded.pop("command", None)
        unknown = set(loaded) - set(cfg) - set(flags)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    cfg["command"] = cmd
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    cmd = cfg["command"]
    if cmd == "replay":
        return
    if cfg["map"] not in (9, 16, 25):
        raise ConfigError("map must be 9, 16 or 25")
    if cfg["gp"] not in GLOBAL_PLANNERS or cfg["lp"] not in LOCAL_PLANNERS:
        raise ConfigError("unknown planner name")
    if cmd in ("eval", "battery"):
        names = [s.strip() for s in str(cfg["strategy"]).split(",") if s.strip()]
        if cmd == "eval" and len(names) != 1:
            raise ConfigError("eval takes exactly one strategy")
        for s in names:
            if s not in STRATEGIES + ("drl",):
                raise ConfigError(f"unknown strategy {s!r}")
        if "drl" in names and not cfg.get("weights"):
            raise ConfigError("strategy drl needs --weights")
        if cfg.get("weights") and not Path(cfg["weights"]).is_file():
            raise ConfigError(f"weights file not found: {cfg['weights']}")
        if cfg["trials"] < 1 or cfg["jobs"] < 1:
            raise ConfigError("trials and jobs must be positive")


def _env_config(cfg: dict) -> EnvConfig:
    try:
        return EnvConfig(delay=cfg["delay"], time_limit=cfg["time_limit"])
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _print_header(cfg: dict) -> None:
    print("# effective config: " + json.dumps(cfg, sort_keys=True), flush=True)


# --------------------------------------------------------------------------- commands

def cmd_train(cfg: dict) -> int:
    trainer_cfg = TrainerConfig.from_dict({k: cfg[k] for k in TRAINER_KEYS if k in cfg})
    out = Path(cfg["out"])
    created = not out.exists()
    try:
        out.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=".partial-", dir=out))
    except OSError as e:
        print(f"error: cannot write to {out}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    ok = False
    try:
        env = ReplanEnv(cfg["map"], cfg["gp"], cfg["lp"], _env_config(cfg))
        trainer = DQNTrainer(env, trainer_cfg)
        (stage / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
        ckpt = stage / "checkpoints"
        ckpt.mkdir()
        trainer.train(stage / "train_log.csv", ckpt, progress=lambda s: print(s, flush=True))
        save_weights(trainer.net, stage / "weights.bin")
        for item in stage.iterdir():
            dest = out / item.name
            if dest.is_dir():
                shutil.rmtree(dest)
            item.replace(dest)
        ok = True
    finally:
        shutil.rmtree(stage, ignore_errors=True)
        if not ok and created:
            shutil.rmtree(out, ignore_errors=True)
    print(f"wrote {out / 'weights.bin'} and {out / 'train_log.csv'} ({trainer.episode} episodes)")
    return EXIT_OK


def _strategies(cfg: dict) -> list[str]:
    return [s.strip() for s in str(cfg["strategy"]).split(",") if s.strip()]


def cmd_eval(cfg: dict) -> int:
    (strategy,) = _strategies(cfg)
    trace_dir = None
    if cfg.get("out"):
        trace_dir = Path(cfg["out"]) / "traces"
    rep = run_battery(cfg["map"], cfg["gp"], cfg["lp"], strategy, cfg["trials"], cfg["seed"], cfg["jobs"],
                      cfg.get("weights"), trace_dir, _env_config(cfg))
    for r in rep.results:
        outcome = "success" if r.success else "collision" if r.collision else "timeout"
        print(f"seed {r.seed:5d} {outcome:<9} AT {r.AT:6.1f}s AL {r.AL:6.2f}m OL {r.OL:6.2f}m NR {r.NR}")
    print(format_table([rep]))
    if rep.aborted:
        print(f"aborted seeds (no initial path): {rep.aborted}")
    if cfg.get("out"):
        write_report_csv([rep], Path(cfg["out"]) / "report.csv")
    return EXIT_OK


def cmd_battery(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for s in _strategies(cfg):
        trace_dir = out / "traces" if cfg["traces"] else None
        rep = run_battery(cfg["map"], cfg["gp"], cfg["lp"], s, cfg["trials"], cfg["seed"], cfg["jobs"],
                          cfg.get("weights"), trace_dir, _env_config(cfg))
        write_episodes_csv(rep, out / f"episodes_{s}.csv")
        if rep.aborted:
            print(f"{s}: {len(rep.aborted)} episodes aborted (no initial path): {rep.aborted}")
        print(f"{s}: SR {rep.SR:.1f} CR {rep.CR:.1f} SGT {rep.SGT:.3f} SPL {rep.SPL:.3f} NR {rep.NR}", flush=True)
        reports.append(rep)
    write_report_csv(reports, out / "report.csv")
    table = format_table(reports)
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_replay(cfg: dict) -> int:
    header, ticks, footer = replay(cfg["trace"])
    print(f"verified {cfg['trace']}: {len(ticks)} ticks, {len(footer['actions'])} decisions, "
          f"{footer['n_replans']} replans")
    if cfg.get("plot"):
        data = plot_data(header, ticks, cfg["interval"])
        Path(cfg["plot"]).write_text(json.dumps(data))
        print(f"wrote {cfg['plot']} ({len(data['replan_markers'])} replan markers)")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "battery": cmd_battery, "replay": cmd_replay}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = effective_config(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    _print_header(cfg)
    try:
        return COMMANDS[cfg["command"]](cfg)
    except TraceMismatch as e:
        print(f"TRACE_MISMATCH: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReplanNavError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
