"""Command-line experiment runner.

Every subcommand writes its CSV artifacts and a ``manifest.json`` (full config,
config digest, seed, library versions) into a fresh timestamped directory
under ``--out``.  Exit codes: 0 success, 2 configuration or usage error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .config import ConfigError, ScenarioConfig, load_config
from .date import (FULL_LOCAL, FULL_OFFLOAD, ConstantSplit, Trained, _rng, baseline_calibrate,
                   evaluate_policy, run_reservation_loop, run_virtualedge, sample_reservation,
                   stage_breakdown, sweep_vehicles, train_policy)
from .marl import PolicyPair

log = logging.getLogger("vecoffload")

CHECKPOINT_FORMAT = "vecoffload-checkpoint"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

TRAJECTORY_FIELDS = ["window", "phase", "x_uplink", "x_downlink", "x_compute", "lambda",
                     "l_h", "usage", "mean_latency", "grad_uplink", "grad_downlink",
                     "grad_compute"]


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# artifacts


def write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


class RunDir:
    def __init__(self, base: Path, command: str, cfg: ScenarioConfig, argv):
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path(base) / f"{command}-{stamp}-seed{cfg.seed}"
        k = 1
        while path.exists():
            k += 1
            path = Path(base) / f"{command}-{stamp}-seed{cfg.seed}-{k}"
        path.mkdir(parents=True)
        self.path = path
        self.command = command
        self.cfg = cfg
        self.argv = list(argv)
        self.artifacts: list[str] = []
        self.extra: dict = {}

    def csv(self, name: str, fields, rows) -> Path:
        p = self.path / name
        write_csv(p, fields, rows)
        self.artifacts.append(name)
        return p

    def json(self, name: str, obj) -> Path:
        p = self.path / name
        p.write_text(json.dumps(obj, sort_keys=True))
        self.artifacts.append(name)
        return p

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "seed": self.cfg.seed,
            "config_digest": self.cfg.digest(),
            "config": self.cfg.to_dict(),
            "versions": {"vecoffload": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__,
                         "pyyaml": yaml.__version__},
            "artifacts": self.artifacts,
            **self.extra,
        }
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def save_checkpoint(path: Path, policy: PolicyPair, cfg: ScenarioConfig) -> None:
    path.write_text(json.dumps({"format": CHECKPOINT_FORMAT, "config": cfg.to_dict(),
                                "policy": policy.to_dict()}, sort_keys=True))


def load_checkpoint(path, cfg: ScenarioConfig) -> PolicyPair:
    if path is None:
        raise UsageError("this subcommand needs --checkpoint (written by `train`)")
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint.json"
    if not p.exists():
        raise UsageError(f"checkpoint not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: not a checkpoint ({exc})") from exc
    if d.get("format") != CHECKPOINT_FORMAT:
        raise UsageError(f"{p}: not a checkpoint")
    return PolicyPair.from_dict(d["policy"], cfg.ppo)


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args, cfg, run: RunDir) -> None:
    def progress(row):
        log.info("epoch %d  mean latency %.1f ms  mean split %.3f", row["epoch"],
                 row["mean_latency_ms"], row["mean_action"])

    result = train_policy(cfg, progress=progress)
    fields = ["epoch", "mean_latency_ms", "mean_reward", "mean_action", "clip_fraction",
              "mean_ratio", "value_loss", "exploration_std"]
    run.csv("training_curve.csv", fields, result.curve)
    save_checkpoint(run.path / "checkpoint.json", result.policy, cfg)
    run.artifacts.append("checkpoint.json")


def _stage_rows(label: str, stages) -> list:
    return [{"policy": label, "stage": k, "mean_ms": v} for k, v in stage_breakdown(stages).items()]


def _trajectory(run: RunDir, name: str, traj) -> None:
    run.csv(f"{name}_trajectory.csv", TRAJECTORY_FIELDS, traj.rows)


def _summary(traj, last: int = 20) -> dict:
    return {"usage": traj.converged_usage(last), "l_h": traj.converged_latency(last)}


def cmd_reserve(args, cfg, run: RunDir) -> None:
    policy = load_checkpoint(args.checkpoint, cfg)
    traj = run_reservation_loop(Trained(policy), cfg)
    _trajectory(run, "date", traj)
    stages = _stage_rows("date", traj.stages)
    bars = [{"scheme": "date", **_summary(traj)}]
    if args.compare:
        ve = run_virtualedge(cfg)
        _trajectory(run, "virtualedge", ve)
        stages += _stage_rows("virtualedge", ve.stages)
        bars.append({"scheme": "virtualedge", **_summary(ve)})
        cal = baseline_calibrate(FULL_OFFLOAD, cfg)
        bars.append({"scheme": "baseline", "usage": cal.usage, "l_h": cal.max_l_h})
    run.csv("stage_breakdown.csv", ["policy", "stage", "mean_ms"], stages)
    run.csv("usage_latency_bars.csv", ["scheme", "usage", "l_h"], bars)


def cmd_virtualedge(args, cfg, run: RunDir) -> None:
    traj = run_virtualedge(cfg)
    _trajectory(run, "virtualedge", traj)
    run.csv("stage_breakdown.csv", ["policy", "stage", "mean_ms"],
            _stage_rows("virtualedge", traj.stages))


def cmd_baseline(args, cfg, run: RunDir) -> None:
    cal = baseline_calibrate(FULL_OFFLOAD, cfg)
    run.csv("calibration.csv", ["x_uplink", "x_downlink", "x_compute", "max_l_h", "feasible"],
            cal.evaluations)
    x = cal.reservation
    run.csv("baseline_reservation.csv", ["x_uplink", "x_downlink", "x_compute", "usage"],
            [{"x_uplink": x[0], "x_downlink": x[1], "x_compute": x[2], "usage": cal.usage}])


def _policies(args, cfg):
    chosen = []
    for spec in args.policy:
        if spec == "trained":
            chosen.append(("trained", Trained(load_checkpoint(args.checkpoint, cfg))))
        elif spec == "full_offload":
            chosen.append(("full_offload", FULL_OFFLOAD))
        elif spec == "full_local":
            chosen.append(("full_local", FULL_LOCAL))
        elif spec.startswith("static:"):
            try:
                a = float(spec.split(":", 1)[1])
            except ValueError as exc:
                raise UsageError(f"bad policy {spec!r}") from exc
            if not 0 <= a <= 1:
                raise UsageError(f"static split must lie in [0, 1], got {a}")
            chosen.append((f"static_{a:g}", ConstantSplit(a)))
        else:
            raise UsageError(f"unknown policy {spec!r}")
    return chosen


def cmd_evaluate(args, cfg, run: RunDir) -> None:
    if not args.policy:
        args.policy = ["full_offload", "static:0.5", "full_local"]
        if args.checkpoint:
            args.policy.insert(0, "trained")
    rng = _rng(cfg.seed, 11)
    reservations = [sample_reservation(rng, cfg.train.reservation_low)
                    for _ in range(cfg.train.eval_reservations)]
    samples, summary, stages = [], [], []
    for name, decide in _policies(args, cfg):
        out = evaluate_policy(decide, cfg, reservations, cfg.seed)
        lat = np.asarray(out["latencies"], dtype=float)
        samples += [{"policy": name, "latency_ms": v} for v in lat]
        summary.append({"policy": name, "mean_ms": float(lat.mean()),
                        "p50_ms": float(np.percentile(lat, 50)),
                        "p95_ms": float(np.percentile(lat, 95)), "max_ms": float(lat.max()),
                        "count": int(lat.size)})
        stages += _stage_rows(name, out["stages"])
    run.csv("latency_samples.csv", ["policy", "latency_ms"], samples)
    run.csv("latency_summary.csv", ["policy", "mean_ms", "p50_ms", "p95_ms", "max_ms", "count"],
            summary)
    run.csv("stage_breakdown.csv", ["policy", "stage", "mean_ms"], stages)
    run.csv("eval_reservations.csv", ["x_uplink", "x_downlink", "x_compute"],
            [dict(zip(("x_uplink", "x_downlink", "x_compute"), r)) for r in reservations])


def cmd_sweep(args, cfg, run: RunDir) -> None:
    rows = sweep_vehicles(Trained(load_checkpoint(args.checkpoint, cfg)), cfg)
    run.csv("vehicle_sweep.csv", list(rows[0]), rows)


COMMANDS = {
    "train": cmd_train,
    "reserve": cmd_reserve,
    "baseline": cmd_baseline,
    "virtualedge": cmd_virtualedge,
    "evaluate": cmd_evaluate,
    "sweep-vehicles": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML scenario file")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--out", default="runs", help="base directory for run outputs")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set env.n_vehicles=6")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vecoffload", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the shared offloading policy")
    r = sub.add_parser("reserve", parents=[common],
                       help="run the reservation controller with a trained policy")
    r.add_argument("--checkpoint", help="checkpoint.json or a train run directory")
    r.add_argument("--compare", action="store_true",
                   help="also run VirtualEdge and Baseline on the same seed")
    sub.add_parser("baseline", parents=[common], help="calibrate full-offload reservations")
    sub.add_parser("virtualedge", parents=[common],
                   help="reservation controller with full offloading")
    e = sub.add_parser("evaluate", parents=[common],
                       help="latency of split policies under random reservations")
    e.add_argument("--checkpoint")
    e.add_argument("--policy", action="append", default=[],
                   help="trained | full_offload | full_local | static:<a> (repeatable)")
    s = sub.add_parser("sweep-vehicles", parents=[common],
                       help="usage of DATE, VirtualEdge and Baseline per fleet size")
    s.add_argument("--checkpoint")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        run = RunDir(Path(args.out), args.command, cfg, argv)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](args, cfg, run)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        run.extra["error"] = str(exc)
        run.finish()
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        log.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        run.extra["error"] = str(exc)
        run.finish()
        return EXIT_RUNTIME
    run.finish()
    print(run.path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
