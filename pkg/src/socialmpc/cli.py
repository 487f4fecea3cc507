"""``socialmpc`` command-line entry point.

Subcommands: gen-data, train, predict, plan, simulate, evaluate.  Every run
prints the resolved configuration and root seed first.  Primary outputs are
deterministic for a given seed; wall-clock data goes to ``run_meta.json``.
Exit codes: 0 ok, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from socialmpc.core import (Config, ConfigError, SchemaError, dump_config, load_config, load_frames,
                            validate_config)

log = logging.getLogger("socialmpc")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad paths or flag combinations detected before any work starts."""


# --------------------------------------------------------------------------- #
# helpers

def _resolve_config(args) -> Config:
    cfg = load_config(args.config) if args.config else validate_config()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "lr", None) is not None:
        overrides["lr"] = args.lr
    if overrides:
        cfg = validate_config({**cfg.to_dict(), **overrides})
    print(f"# seed = {cfg.seed}")
    print("# resolved config")
    print(dump_config(cfg), end="")
    sys.stdout.flush()
    return cfg


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _write_meta(out: Path, command: str, started: float, extra: dict | None = None) -> None:
    meta = {
        "command": command,
        "finished_utc": datetime.now(timezone.utc).isoformat(),
        "wall_clock_s": time.perf_counter() - started,
        **(extra or {}),
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load_model(checkpoint: str | None, cfg: Config):
    from socialmpc.model import SociallyAwareModel, ZeroInteractionModel

    if checkpoint is None:
        log.info("no checkpoint given: using the zero-interaction (physics-only) model")
        return ZeroInteractionModel(cfg.N)
    return SociallyAwareModel.load(_require(checkpoint, "checkpoint"))


def _scenarios(args, cfg: Config):
    from socialmpc.sim import Scenario, load_scenario

    base = [load_scenario(_require(p, "scenario file")) for p in args.scenario] if args.scenario else [Scenario()]
    if args.vc:
        base = [s.replace(vc_ratio=v) for s in base for v in args.vc]
    return [s.replace(seed=cfg.seed) for s in base]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------- #
# subcommands

def cmd_gen_data(args) -> int:
    from socialmpc.sim import generate_dataset

    cfg = _resolve_config(args)
    family = _scenarios(args, cfg)
    started = time.perf_counter()
    out = Path(args.out)
    if out.suffix == "":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "frames.jsonl"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    frames = generate_dataset(family, args.episodes, out, T_h=cfg.T_h, N=cfg.N, seed=cfg.seed)
    print(f"wrote {len(frames)} frames to {out}")
    _write_meta(out.parent, "gen-data", started, {"frames": len(frames)})
    return EXIT_OK


def cmd_train(args) -> int:
    from socialmpc import training

    cfg = _resolve_config(args)
    data = load_frames(_require(args.data, "dataset"), cfg.T_h, cfg.N)
    out = _out_dir(args)
    resume = _require(args.resume, "resume checkpoint") if args.resume else None
    started = time.perf_counter()

    def progress(step, loss):
        if step % 10 == 0:
            log.info("step %d loss %.4f", step, loss)

    _, report = training.train(data, cfg, steps=args.steps, out_dir=out, resume=resume, progress=progress)
    print(f"trained {len(report.steps)} steps; final loss {report.loss_total[-1]:.6f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    _write_meta(out, "train", started)
    return EXIT_OK


def cmd_predict(args) -> int:
    from socialmpc import training

    cfg = _resolve_config(args)
    frames = load_frames(_require(args.data, "dataset"), cfg.T_h, cfg.N)
    if not frames:
        raise UsageError("dataset has no frames")
    model = _load_model(args.checkpoint, cfg)
    out = _out_dir(args)
    started = time.perf_counter()
    preds, cvs, batches = [], [], []
    with open(out / "predictions.jsonl", "w") as fh:
        for i in range(0, len(frames), cfg.batch_size):
            b = training.prepare_batch(frames[i:i + cfg.batch_size], cfg.v_floor)
            p = training.predict_positions(model, b, cfg.dt)
            preds.append(p)
            cvs.append(training.constant_velocity_positions(b, cfg.dt))
            batches.append(b)
            for f, traj in zip(b.frames, p):
                sv = {str(j): traj[:, j].round(6).tolist() for j in range(1, traj.shape[1]) if f.present[j]}
                fh.write(json.dumps({"frame_id": f.frame_id, "positions": sv}, separators=(",", ":")) + "\n")
    merged = training._merge(batches)
    rows = {
        "model": training.displacement_errors(np.concatenate(preds), merged, cfg.dt),
        "constant_velocity": training.displacement_errors(np.concatenate(cvs), merged, cfg.dt),
    }
    cols = [c for c in rows["model"] if c.startswith("ADE@")] + ["FDE"]
    if args.csv or not args.json:
        with open(out / "prediction_errors.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method"] + cols)
            for name, r in rows.items():
                w.writerow([name] + [repr(float(r[c])) for c in cols])
    if args.json or not args.csv:
        (out / "prediction_errors.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    print("method             " + " ".join(f"{c:>8}" for c in cols))
    for name, r in rows.items():
        print(f"{name:<18} " + " ".join(f"{r[c]:8.3f}" for c in cols))
    _write_meta(out, "predict", started, {"frames": len(frames)})
    return EXIT_OK


def cmd_plan(args) -> int:
    from socialmpc.planner import plan

    cfg = _resolve_config(args)
    frames = load_frames(_require(args.data, "dataset"), cfg.T_h, cfg.N)
    if not 0 <= args.frame < len(frames):
        raise UsageError(f"frame index {args.frame} out of range (dataset has {len(frames)} frames)")
    frame = frames[args.frame]
    model = _load_model(args.checkpoint, cfg)
    out = _out_dir(args)
    started = time.perf_counter()
    ego = frame.history[0, -1]
    y_des = ego[1] if args.target_y is None else args.target_y
    res = plan(frame, model, cfg, (ego[0], args.v_des, y_des, 0.0))
    (out / "plan.json").write_text(res.dumps() + "\n")
    print(f"frame {frame.frame_id}: status {res.status}, source {res.source}, objective {res.objective:.6f}")
    print(f"first control: a = {res.u_ego[0, 0]:.4f} m/s^2, delta = {res.u_ego[0, 1]:.5f} rad")
    _write_meta(out, "plan", started)
    return EXIT_OK if not res.degraded else EXIT_RUNTIME


def cmd_simulate(args) -> int:
    from socialmpc.sim import run_episode

    cfg = _resolve_config(args)
    family = _scenarios(args, cfg)
    model = _load_model(args.checkpoint, cfg) if args.planner == "mpcformer" else None
    out = _out_dir(args)
    started = time.perf_counter()
    index = []
    for e in range(args.episodes):
        scn = family[e % len(family)].replace(seed=cfg.seed + e // len(family))
        lg = run_episode(scn, args.planner, model=model, cfg=cfg)
        name = f"{args.planner}_ep{e:03d}"
        lg.write(out / f"{name}.jsonl")
        index.append({"episode": e, "log": f"{name}.jsonl", "outcome": lg.outcome,
                      "seed": scn.seed, "vc_ratio": scn.vc_ratio})
        print(f"episode {e}: vc {scn.vc_ratio} seed {scn.seed} -> {lg.outcome} after {lg.duration:.1f} s")
    (out / f"{args.planner}_index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    _write_meta(out, "simulate", started, {"planner": args.planner})
    return EXIT_OK


def _collect_logs(paths: list[str]):
    from socialmpc.sim import EpisodeLog

    files: list[Path] = []
    for p in paths:
        p = _require(p, "log path")
        files += sorted(p.glob("*.jsonl")) if p.is_dir() else [p]
    if not files:
        raise UsageError("no episode logs found")
    return [EpisodeLog.read(f) for f in files]


def cmd_evaluate(args) -> int:
    from socialmpc.metrics import episode_moes

    cfg = _resolve_config(args)
    logs = _collect_logs(args.logs)
    out = _out_dir(args)
    started = time.perf_counter()
    by_planner: dict[str, list] = {}
    for lg in logs:
        by_planner.setdefault(lg.planner, []).append(lg)
    want_json = args.json or not args.csv
    want_csv = args.csv or not args.json
    summary = {}
    for name, group in sorted(by_planner.items()):
        rep = episode_moes(group, cfg)
        summary[name] = rep
        if want_json:
            rep.write_json(out / f"eval_{name}.json")
        if want_csv:
            rep.write_csv(out, prefix=f"eval_{name}")
        print(f"{name}: {rep.n_episodes} episodes, success {rep.success_pct:.1f}%, "
              f"failure {rep.failure_pct:.1f}%, collision {rep.collision_pct:.1f}%")
    if len(by_planner) > 1:
        _paired_table(by_planner, out, want_json, want_csv)
    _write_meta(out, "evaluate", started, {"logs": len(logs)})
    return EXIT_OK


def _paired_table(by_planner: dict, out: Path, want_json: bool, want_csv: bool) -> None:
    """Outcomes side by side for episodes sharing (vc_ratio, seed)."""
    names = sorted(by_planner)
    keyed = {n: {(lg.scenario["vc_ratio"], lg.scenario["seed"]): lg.outcome for lg in by_planner[n]}
             for n in names}
    keys = sorted(set.intersection(*(set(k) for k in keyed.values())))
    rows = [{"vc_ratio": vc, "seed": sd, **{n: keyed[n][(vc, sd)] for n in names}} for vc, sd in keys]
    if want_csv:
        with open(out / "paired_outcomes.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["vc_ratio", "seed"] + names)
            for r in rows:
                w.writerow([r["vc_ratio"], r["seed"]] + [r[n] for n in names])
    if want_json:
        (out / "paired_outcomes.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    print(f"paired table over {len(rows)} shared (vc_ratio, seed) cells")


# --------------------------------------------------------------------------- #
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="socialmpc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--out", default=".", help="output directory (or frame file for gen-data)")

    def scenario_flags(p):
        p.add_argument("--scenario", action="append", help="scenario TOML file (repeatable)")
        p.add_argument("--vc", type=float, action="append", help="v/c ratio override (repeatable)")
        p.add_argument("--episodes", type=int, default=1)

    p = sub.add_parser("gen-data", help="generate synthetic training frames")
    common(p)
    scenario_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the interaction model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict surrounding-vehicle trajectories and score them")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--json", action="store_true")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plan", help="one planning call on a stored frame")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--v-des", type=float, default=25.0)
    p.add_argument("--target-y", type=float)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="closed-loop episodes")
    common(p)
    scenario_flags(p)
    p.add_argument("--planner", choices=("mpcformer", "pas"), default="pas")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="aggregate episode logs")
    common(p)
    p.add_argument("logs", nargs="+", help="episode log files or directories")
    p.add_argument("--json", action="store_true")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
