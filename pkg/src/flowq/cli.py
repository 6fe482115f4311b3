"""Command-line entry point.

Subcommands: train (curriculum training), eval (greedy rollouts from fixed
start points), run (deployment replay over a telemetry file), vision
(streak detection and patch extraction on a PGM image). Settings resolve
as built-in defaults, then --config JSON, then explicit flags; every run
prints its fully resolved configuration. Exit codes: 0 success, 2 bad
usage or configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dqn, runtime, training, vision
from .simulator import PhaseConfig, SynthDistConfig, write_trace_csv
from .training import EVAL_START_FLOWS, EVAL_START_TEMPS, Trainer, TrainHyper

TRAIN_DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/train",
    "phases": 4,
    "episodes": None,  # per-phase list; None keeps curriculum defaults
    "gamma": 0.99,
    "tau": 0.005,
    "lam": 10,
    "batch": 512,
    "learning_rate": 1e-4,
    "episode_length": 100,
    "replay_capacity": 100_000,
    "learn_start": 1000,
    "update_every": 1,
    "alpha": 1.0,
    "sigma": 0.1,
    "tracking_divisor": 4.0,
    "eta": 30,
}

EVAL_DEFAULTS = {
    "checkpoint": None,
    "start_flow": 100.0,
    "start_temp": 210.0,
    "rho": 1.0,
    "seed": 0,
    "steps": 100,
    "grid": False,
    "out_dir": "runs/eval",
}

RUN_DEFAULTS = {
    "checkpoint": None,
    "input": "-",
    "output": "-",
    "gcode": False,
    "window": 20,
    "settle_seconds": 6.0,
    "lam": 10,
    "initial_flow": 100.0,
    "max_decisions": None,
}

VISION_DEFAULTS = {
    "image": None,
    "radius": vision.DEFAULT_SWEEP_RADIUS,
    "h": vision.DEFAULT_HALF_HEIGHT,
    "equalize": True,
    "out_patch": None,
    "out_meta": None,
}


class ConfigError(Exception):
    pass


def _resolve(defaults: dict, config_path, cli_values: dict) -> dict:
    resolved = dict(defaults)
    if config_path is not None:
        try:
            with open(config_path) as fp:
                doc = json.load(fp)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in doc.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            resolved[key] = value
    for key, value in cli_values.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _print_config(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, "config": resolved}, sort_keys=True))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowq",
        description="Simulator-trained flow/temperature setpoint control.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the curriculum trainer")
    p_train.add_argument("--config", help="JSON file with option overrides")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--out-dir", dest="out_dir")
    p_train.add_argument("--phases", type=int, help="number of curriculum phases to run")
    p_train.add_argument("--episodes", help="comma-separated per-phase episode budgets")
    p_train.add_argument("--batch", type=int)
    p_train.add_argument("--learning-rate", dest="learning_rate", type=float)
    p_train.add_argument("--episode-length", dest="episode_length", type=int)
    p_train.add_argument("--learn-start", dest="learn_start", type=int)
    p_train.add_argument("--replay-capacity", dest="replay_capacity", type=int)
    p_train.add_argument("--update-every", dest="update_every", type=int)
    p_train.add_argument("--gamma", type=float)
    p_train.add_argument("--tau", type=float)
    p_train.add_argument("--lam", type=int)
    p_train.add_argument("--alpha", type=float)
    p_train.add_argument("--sigma", type=float)
    p_train.add_argument("--tracking-divisor", dest="tracking_divisor", type=float)
    p_train.add_argument("--eta", type=int)

    p_eval = sub.add_parser("eval", help="greedy rollouts from fixed start points")
    p_eval.add_argument("--config")
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--start-flow", dest="start_flow", type=float)
    p_eval.add_argument("--start-temp", dest="start_temp", type=float)
    p_eval.add_argument("--rho", type=float)
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--steps", type=int)
    p_eval.add_argument("--grid", action="store_const", const=True, default=None,
                        help="evaluate the full start-point grid")
    p_eval.add_argument("--out-dir", dest="out_dir")

    p_run = sub.add_parser("run", help="replay a telemetry file through the policy")
    p_run.add_argument("--config")
    p_run.add_argument("--checkpoint")
    p_run.add_argument("--input", help="telemetry NDJSON file, or - for stdin")
    p_run.add_argument("--output", help="command log file, or - for stdout")
    p_run.add_argument("--gcode", action="store_const", const=True, default=None,
                       help="emit M221/M104 lines instead of JSON")
    p_run.add_argument("--window", type=int)
    p_run.add_argument("--settle-seconds", dest="settle_seconds", type=float)
    p_run.add_argument("--lam", type=int)
    p_run.add_argument("--initial-flow", dest="initial_flow", type=float)
    p_run.add_argument("--max-decisions", dest="max_decisions", type=int)

    p_vision = sub.add_parser("vision", help="detect the extrusion streak in a PGM image")
    p_vision.add_argument("--config")
    p_vision.add_argument("--image")
    p_vision.add_argument("--radius", type=float)
    p_vision.add_argument("--h", type=float)
    p_vision.add_argument("--no-equalize", dest="equalize", action="store_const",
                          const=False, default=None)
    p_vision.add_argument("--out-patch", dest="out_patch")
    p_vision.add_argument("--out-meta", dest="out_meta")

    return parser


def _cli_values(args: argparse.Namespace, defaults: dict) -> dict:
    return {k: getattr(args, k) for k in defaults if hasattr(args, k)}


def _cmd_train(cfg: dict) -> int:
    curriculum = training.default_curriculum()
    if cfg["episodes"] is not None:
        budgets = cfg["episodes"]
        if isinstance(budgets, str):
            budgets = [int(x) for x in budgets.split(",")]
        if len(budgets) != len(curriculum):
            raise ConfigError(f"need {len(curriculum)} episode budgets, got {len(budgets)}")
        curriculum = [
            PhaseConfig(p.a, p.b, p.rot_deg, p.rho, int(n))
            for p, n in zip(curriculum, budgets)
        ]
    phases = cfg["phases"]
    if not (1 <= phases <= len(curriculum)):
        raise ConfigError(f"phases must lie in 1..{len(curriculum)}")
    curriculum = curriculum[:phases]
    hyper = TrainHyper(
        gamma=cfg["gamma"],
        tau=cfg["tau"],
        lam=cfg["lam"],
        batch=cfg["batch"],
        learning_rate=cfg["learning_rate"],
        episode_length=cfg["episode_length"],
        replay_capacity=cfg["replay_capacity"],
        learn_start=cfg["learn_start"],
        update_every=cfg["update_every"],
    )
    os.makedirs(cfg["out_dir"], exist_ok=True)
    trainer = Trainer(
        curriculum,
        hyper,
        SynthDistConfig(alpha=cfg["alpha"], sigma=cfg["sigma"]),
        tracking_divisor=cfg["tracking_divisor"],
        eta=cfg["eta"],
        seed=cfg["seed"],
        out_dir=cfg["out_dir"],
    )
    log = trainer.run()
    print(json.dumps({"episodes": len(log.rows), "out_dir": cfg["out_dir"]}))
    return 0


def _require_checkpoint(cfg: dict):
    path = cfg["checkpoint"]
    if path is None:
        raise ConfigError("--checkpoint is required")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return dqn.load_policy(path)


def _cmd_eval(cfg: dict) -> int:
    net = _require_checkpoint(cfg)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    starts = (
        [(q, u) for q in EVAL_START_FLOWS for u in EVAL_START_TEMPS]
        if cfg["grid"]
        else [(cfg["start_flow"], cfg["start_temp"])]
    )
    summary = []
    for i, (q0, u0) in enumerate(starts):
        res = training.evaluate(
            net, q0, u0, steps=cfg["steps"], rho=cfg["rho"], seed=cfg["seed"] * 1000 + i
        )
        name = f"traj_q{q0:g}_u{u0:g}.csv"
        write_trace_csv(os.path.join(cfg["out_dir"], name), res.rows)
        summary.append(
            {
                "start_flow": q0,
                "start_temp": u0,
                "converged": bool(res.converged),
                "final_flow": res.final_q,
                "final_temp": res.final_u,
                "trajectory": name,
            }
        )
    converged = sum(1 for row in summary if row["converged"])
    doc = {"converged": converged, "total": len(summary), "runs": summary}
    with open(os.path.join(cfg["out_dir"], "summary.json"), "w") as fp:
        json.dump(doc, fp, indent=2, sort_keys=True)
        fp.write("\n")
    for row in summary:
        verdict = "converged" if row["converged"] else "diverged"
        print(
            f"start q={row['start_flow']:g}% u={row['start_temp']:g}C -> "
            f"{verdict} (final q={row['final_flow']:g}%, u={row['final_temp']:.1f}C)"
        )
    print(f"{converged}/{len(summary)} converged")
    return 0


def _cmd_run(cfg: dict) -> int:
    net = _require_checkpoint(cfg)
    rt_cfg = runtime.RuntimeConfig(
        window=cfg["window"],
        settle_seconds=cfg["settle_seconds"],
        lam=cfg["lam"],
        initial_flow=cfg["initial_flow"],
        mode="replay",
        max_decisions=cfg["max_decisions"],
    )
    in_fp = sys.stdin if cfg["input"] == "-" else open(cfg["input"])
    out_fp = sys.stdout if cfg["output"] == "-" else open(cfg["output"], "w")
    try:
        def sink(cmd):
            line = cmd.to_gcode() if cfg["gcode"] else cmd.to_json()
            out_fp.write(line + "\n")

        log = runtime.run_session(runtime.read_telemetry(in_fp), sink, net, rt_cfg)
    finally:
        if in_fp is not sys.stdin:
            in_fp.close()
        if out_fp is not sys.stdout:
            out_fp.close()
    print(
        f"session: {log.decisions} decisions, {len(log.commands)} commands, "
        f"final flow {log.final_flow:g}%",
        file=sys.stderr,
    )
    return 0


def _cmd_vision(cfg: dict) -> int:
    if cfg["image"] is None:
        raise ConfigError("--image is required")
    if not os.path.exists(cfg["image"]):
        raise ConfigError(f"image not found: {cfg['image']}")
    grid = vision.read_pgm(cfg["image"])
    if cfg["equalize"]:
        grid = vision.equalize(grid)
    center = ((grid.width - 1) / 2.0, (grid.height - 1) / 2.0)
    angle, seg, mean = vision.sweep_max_intensity(grid, center, cfg["radius"])
    rect = vision.rect_vertices(seg, cfg["h"])
    patch = vision.extract_patch(grid, rect)
    result = {
        "angle": angle,
        "mean_intensity": mean,
        "radius": cfg["radius"],
        "h": cfg["h"],
        "patch_size": [patch.width, patch.height],
    }
    if cfg["out_patch"] is not None:
        vision.write_pgm(cfg["out_patch"], patch)
        result["patch"] = cfg["out_patch"]
    if cfg["out_meta"] is not None:
        with open(cfg["out_meta"], "w") as fp:
            json.dump({"angle": angle, "h": cfg["h"], "radius": cfg["radius"]}, fp, sort_keys=True)
            fp.write("\n")
        result["meta"] = cfg["out_meta"]
    print(json.dumps(result, sort_keys=True))
    return 0


_DEFAULTS = {
    "train": TRAIN_DEFAULTS,
    "eval": EVAL_DEFAULTS,
    "run": RUN_DEFAULTS,
    "vision": VISION_DEFAULTS,
}

_HANDLERS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "run": _cmd_run,
    "vision": _cmd_vision,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    defaults = _DEFAULTS[args.command]
    try:
        resolved = _resolve(defaults, getattr(args, "config", None), _cli_values(args, defaults))
        _print_config(args.command, resolved)
        return _HANDLERS[args.command](resolved)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure, distinct from usage errors
        print(f"failure: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
