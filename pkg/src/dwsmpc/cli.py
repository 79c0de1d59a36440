"""``dwsmpc`` command line: data generation, training, evaluation and MPC simulation.

Every subcommand accepts ``--config FILE`` (JSON whose keys are flag names with
dashes replaced by underscores); explicit flags override the file.  Each
artifact-producing run writes ``manifest.json`` beside its outputs.
Exit codes: 0 success, 2 usage error (bad flag, malformed config, missing
input), 1 runtime failure; errors are printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import autodiff as A
from . import bench as B
from . import datagen
from . import diffusion as D
from . import mpc
from . import scene as S
from . import slot_encoder as SE
from .arm import ArmSpec
from .rng import derive_seed

ENVS = ("table", "shelf", "drawer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def tool_version() -> str:
    try:
        return version("dwsmpc")
    except PackageNotFoundError:
        return "unknown"


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------
DEFAULTS = {
    "seed": 0, "out": "out", "env": list(ENVS), "workers": os.cpu_count() or 1,
    "count": 10, "scenes": 5, "problems": 30, "epochs": 5, "max_steps": None,
    "data": None, "variant": "slots", "slots": None, "train_steps": 2500, "width": 64, "max_records": 2000,
    "batch_size": 64, "models": None, "method": ["diffusion+ocp", "ocp_cold"], "steps": 10, "ocp_iters": 20,
    "batch": 10, "steps_grid": [3, 5, 8, 10, 15, 20], "iters_grid": [1, 5, 10, 15, 20], "episodes": 20,
    "sigma": 1.0, "duration": 2.0, "path": None,
}


def resolve(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    cfg = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed config {path}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError(f"malformed config {path}: top level must be an object")
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "command", "func")}
    merged = {**DEFAULTS, **cfg, **flags}
    for e in merged["env"]:
        if e not in ENVS:
            raise UsageError(f"unknown environment {e!r}; choose from {list(ENVS)}")
    return merged


def config_hash(cfg: dict) -> str:
    """Hash of the settings that determine results (output location and worker count excluded)."""
    core = {k: v for k, v in cfg.items() if k not in ("out", "workers")}
    return hashlib.sha256(json.dumps(core, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_manifest(out: Path, command: str, cfg: dict, started: float, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "tool_version": tool_version(),
        "timestamps": {"start": started, "end": time.time()},
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing input: {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"missing input: {what} {p}")
    return p


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_gen_scenes(cfg, out: Path):
    for name in cfg["env"]:
        env = S.environment(name)
        lines = [S.sample_scene(env, derive_seed(cfg["seed"], k)).to_json() for k in range(cfg["count"])]
        (out / f"scenes_{name}.jsonl").write_text("\n".join(lines) + "\n")
    return {"files": [f"scenes_{n}.jsonl" for n in cfg["env"]]}


def cmd_gen_data(cfg, out: Path):
    spec, params = ArmSpec(), datagen.DatagenParams()
    summary = {}
    for name in cfg["env"]:
        records, report = datagen.generate(S.environment(name), spec, cfg["scenes"], cfg["problems"], params,
                                           cfg["seed"], cfg["workers"])
        datagen.write_dataset(out / f"{name}.jsonl", datagen.make_header(spec, params.T, name, params.dt), records)
        summary[name] = report.summary()
    (out / "report.json").write_text(json.dumps(summary, indent=1))
    return {"params": params.to_dict(), "report": summary}


def cmd_train_slots(cfg, out: Path):
    envs = [S.environment(n) for n in cfg["env"]]
    images = SE.render_dataset(envs, cfg["count"], derive_seed(cfg["seed"], 100))
    val = SE.render_dataset(envs, max(8, cfg["count"] // 40), derive_seed(cfg["seed"], 200))
    sc, tc = SE.SlotConfig(), SE.TrainConfig(epochs=cfg["epochs"], max_steps=cfg["max_steps"])
    model, hist = SE.train(images, sc, tc, cfg["seed"], val, out, log=_log)
    SE.save(model, out / "slots.dwsw", {"val_mse": hist["val"][-1]})
    return {"val_mse": hist["val"], "steps": len(hist["loss"])}


def cmd_train_diffusion(cfg, out: Path):
    spec = ArmSpec()
    data = _need(cfg["data"], "dataset (--data)")
    slot_model = SE.load(_need(cfg["slots"], "slot-encoder weights (--slots)")) if cfg["variant"] == "slots" else None
    header, records = datagen.read_dataset(data, spec)
    records = records[: cfg["max_records"]]
    enc = D.Encoders(spec, slot_model)
    x0, conds = D.prepare_training_set(records, enc, cfg["variant"], spec)
    mc = D.DenoiserConfig(T=header["T"], n=spec.n, width=cfg["width"], token_dim=enc.token_dim(cfg["variant"]),
                          variant=cfg["variant"])
    tc = D.DiffusionTrainConfig(steps=cfg["train_steps"], batch_size=cfg["batch_size"])
    trained, hist = D.train(x0, conds, spec, mc, tc, cfg["seed"], log=_log)
    env = header.get("env") or "env"
    D.save(trained, B.model_path(out, env, cfg["variant"]), {"env": env})
    return {"records": len(records), "final_loss": float(np.mean(hist["loss"][-100:])), "seconds": hist["seconds"]}


def _methods(cfg) -> list[B.MethodSpec]:
    return [B.MethodSpec(tag, cfg["variant"], cfg["steps"], cfg["ocp_iters"], cfg["batch"]) for tag in cfg["method"]]


def _bank(cfg, methods) -> B.ModelBank | None:
    if not any(m.learned for m in methods):
        return None
    models = _need(cfg["models"], "model directory (--models)")
    bank = B.load_models(models, cfg["env"], sorted({m.variant for m in methods}), ArmSpec(), cfg["slots"])
    for m in methods:
        for env in cfg["env"]:
            if m.learned and (env, m.variant) not in bank.models:
                raise UsageError(f"missing model weights: {B.model_path(models, env, m.variant)}")
        if m.learned and m.variant == "slots" and bank.encoders.slot_model is None:
            raise UsageError(f"missing slot-encoder weights: {cfg['slots']}")
    return bank


def cmd_eval(cfg, out: Path):
    try:
        methods = _methods(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    bank = _bank(cfg, methods)
    problems = B.problem_suite(cfg["env"], cfg["scenes"], cfg["problems"], derive_seed(cfg["seed"], 1000))
    results = {}
    for m in methods:
        row, _ = B.evaluate(m, problems, bank, cfg["seed"], workers=cfg["workers"],
                            csv_path=out / f"rows_{m.tag}.csv", log=_log)
        results[m.name] = asdict(row)
        _log(f"{m.name}: success {row.success_rate:.3f}")
    (out / "metrics.json").write_text(json.dumps(results, indent=1))
    return {"metrics": results}


def cmd_sweep(cfg, out: Path):
    m = B.MethodSpec("diffusion+ocp", cfg["variant"], batch=cfg["batch"])
    bank = _bank(cfg, [m])
    problems = B.problem_suite(cfg["env"], cfg["scenes"], cfg["problems"], derive_seed(cfg["seed"], 1000))
    grid = B.sweep_heatmap(problems, bank, cfg["steps_grid"], cfg["iters_grid"], cfg["variant"], cfg["seed"],
                           cfg["batch"], workers=cfg["workers"], log=_log)
    B.write_metrics(out / "heatmap.csv", grid)
    return {"cells": len(grid)}


def cmd_mpc_sim(cfg, out: Path):
    runs = []
    for k in range(cfg["episodes"] + 1):
        sigma = 0.0 if k == 0 else cfg["sigma"]
        spec, scene, x0, ecfg, _ = mpc.removal_scenario(noise_sigma=sigma, duration=cfg["duration"])
        log = mpc.run_episode(spec, scene, x0, ecfg, mpc.RRTWarmStart(spec), seed=derive_seed(cfg["seed"], k))
        s = log.summary(budget=1.0 / ecfg.replan_hz)
        runs.append({"episode": k, "noise_sigma": sigma, **s})
        (out / f"episode_{k:03d}.csv").write_text(log.to_csv())
        _log(f"episode {k}: success {s['success']} hard collisions {s['hard_collision_ticks']}")
    (out / "summary.json").write_text(json.dumps({"episodes": runs}, indent=1, default=float))
    return {"episodes": len(runs), "hard_collisions": sum(r["hard_collision_ticks"] for r in runs)}


def cmd_inspect(cfg, out: Path | None):
    path = _need(cfg["path"], "file to inspect")
    if path.suffix == ".jsonl":
        header, records = datagen.read_dataset(path)
        report = {"kind": "dataset", "header": header, "records": len(records)}
        if records:
            report["stats"] = datagen.dataset_stats(records, ArmSpec())
    else:
        try:
            state, meta = A.load_weights(path)
        except A.WeightFormatError as exc:
            raise UsageError(f"not a dataset or weight file: {exc}") from exc
        report = {"kind": "weights", "meta": meta, "tensors": len(state),
                  "parameters": int(sum(v.size for v in state.values()))}
    print(json.dumps(report, indent=1, sort_keys=True, default=str))
    return None


COMMANDS = {
    "gen-scenes": (cmd_gen_scenes, "sample obstacle scenes per environment (one JSON scene per line)"),
    "gen-data": (cmd_gen_data, "generate the expert trajectory dataset"),
    "train-slots": (cmd_train_slots, "train the slot-attention scene encoder"),
    "train-diffusion": (cmd_train_diffusion, "train a trajectory denoiser on one environment's dataset"),
    "eval": (cmd_eval, "evaluate planning methods on the seeded problem suite"),
    "sweep": (cmd_sweep, "diffusion steps x OCP iterations heatmap"),
    "mpc-sim": (cmd_mpc_sim, "closed-loop obstacle-removal MPC episodes"),
    "inspect": (cmd_inspect, "summarize a dataset (.jsonl) or a weight file"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dwsmpc", description="Diffusion warm-started MPC for a planar arm.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (func, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON config; keys are flag names with underscores")
        p.add_argument("--seed", type=int, help="master seed (default 0)")
        if name == "inspect":
            p.add_argument("path", nargs="?", help="dataset .jsonl or weight file")
            continue
        p.add_argument("--out", help="output directory (default ./out)")
        p.add_argument("--env", action="append", help="environment, repeatable: table, shelf, drawer (default all)")
        p.add_argument("--workers", type=int, help="parallel worker processes (default: available cores)")
        if name in ("gen-scenes", "train-slots"):
            p.add_argument("--count", type=int, help="scenes to sample / images to render")
        if name in ("gen-data", "eval", "sweep"):
            p.add_argument("--scenes", type=int, help="scenes per environment")
            p.add_argument("--problems", type=int, help="problems per scene")
        if name == "train-slots":
            p.add_argument("--epochs", type=int, help="training epochs")
            p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
        if name in ("train-diffusion", "eval", "sweep"):
            p.add_argument("--variant", choices=D.VARIANTS, help="scene conditioning variant (default slots)")
            p.add_argument("--slots", help="slot-encoder weights, needed by the slots variant")
        if name == "train-diffusion":
            p.add_argument("--data", help="expert dataset .jsonl of one environment")
            p.add_argument("--train-steps", type=int, help="optimizer steps (default 2500)")
            p.add_argument("--width", type=int, help="denoiser width (default 64)")
            p.add_argument("--max-records", type=int, help="use at most this many records (default 2000)")
            p.add_argument("--batch-size", type=int, help="training batch size (default 64)")
        if name in ("eval", "sweep"):
            p.add_argument("--models", help="directory with {env}_{variant}.dwsw denoisers")
            p.add_argument("--batch", type=int, help="diffusion samples per problem (default 10)")
        if name == "eval":
            p.add_argument("--method", action="append", choices=B.TAGS, help="method to evaluate, repeatable")
            p.add_argument("--steps", type=int, help="diffusion sampling steps (default 10)")
            p.add_argument("--ocp-iters", type=int, help="OCP iteration budget (default 20)")
        if name == "sweep":
            p.add_argument("--steps-grid", type=int, nargs="+", help="diffusion steps to sweep")
            p.add_argument("--iters-grid", type=int, nargs="+", help="OCP iteration budgets to sweep")
        if name == "mpc-sim":
            p.add_argument("--episodes", type=int, help="noisy episodes after the noise-free one (default 20)")
            p.add_argument("--sigma", type=float, help="actuation noise per joint in N·m (default 1.0)")
            p.add_argument("--duration", type=float, help="episode length in seconds (default 2.0)")
    return ap


def main(argv=None) -> int:
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
        out = None
        if args.command != "inspect":
            out = Path(cfg["out"])
            out.mkdir(parents=True, exist_ok=True)
        extra = args.func(cfg, out)
        if out is not None:
            write_manifest(out, args.command, cfg, started, extra)
        return 0
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except (B.MissingWeightsError, FileNotFoundError, datagen.DatasetError, A.WeightFormatError) as exc:
        print(json.dumps({"error": "input", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure becomes an error object
        print(json.dumps({"error": "runtime", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
