"""Command-line pipeline: collect, prepare, train, hpo, eval, control, replay.

Every subcommand takes the same global flags (``--config`` YAML file,
``--seed``, ``--out`` output directory) plus its own input paths, and writes
plain CSV/JSON artifacts under the output directory. All outputs are
deterministic for a given config and seed; nothing records wall-clock time.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import (SeriesLog, add_velocity_states, downsample, fit_scaler,
                   make_sequences, split_windows)
from .errors import ConfigError
from .nmpc import NmpcController
from .rnn.checkpoint import load_checkpoint, save_checkpoint
from .rnn.model import init_model, rollout
from .rnn.train import train, train_teacher_forced
from .runtime import (EvalReport, PiController, TrajectoryLog, collect_log,
                      compute_rmse, eval_long_prediction, reference_from_recipe,
                      replay_run, run_closed_loop)


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_collect(args, cfg: dict) -> int:
    """Excite the plant and store the raw dataset."""
    out = _out_dir(args)
    params = cfgmod.plant_from_config(cfg)
    _, u_cmd = cfgmod.excitation_from_config(cfg, seed=args.seed)
    log = collect_log(params, u_cmd, seed=args.seed,
                      source_id=f"collect-seed{args.seed}")
    log.save_csv(str(out / "dataset.csv"))
    _write_json(out / "collect.json", {
        "command": "collect", "seed": args.seed,
        "config_digest": cfgmod.config_digest(cfg),
        "excitation": cfg["excitation"], "n_samples": len(log),
        "rate": log.rate,
    })
    print(f"collected {len(log)} samples at {log.rate:g} Hz -> {out / 'dataset.csv'}")
    return 0


def cmd_prepare(args, cfg: dict) -> int:
    """Downsample, scale and describe the windowing for a raw dataset."""
    out = _out_dir(args)
    d = cfg["data"]
    log = SeriesLog.load_csv(args.dataset)
    log = downsample(log, d["rate"])
    if d["states"] == "full":
        log = add_velocity_states(log, cutoff=d["velocity_cutoff"])
    elif d["states"] != "positions":
        raise ConfigError(f"unknown data.states {d['states']!r}")
    scaler = fit_scaler(log, u_range=tuple(d["u_range"]))
    scaled = scaler.scale_log(log)
    scaled.save_binary(str(out / "scaled.bin"))
    _write_json(out / "scaler.json", scaler.to_dict())
    _write_json(out / "prepare.json", {
        "command": "prepare", "seed": args.seed,
        "config_digest": cfgmod.config_digest(cfg),
        "rate": d["rate"], "states": d["states"], "n_samples": len(scaled),
        "n_w": d["n_w"], "n_p": d["n_p"], "stride": d["stride"],
        "train_fraction": d["train_fraction"],
    })
    print(f"prepared {len(scaled)} samples at {d['rate']:g} Hz -> {out}")
    return 0


def _load_bundle(bundle: str):
    """Rebuild (scaled log, scaler, window params) from a prepare directory."""
    bdir = Path(bundle)
    scaled = SeriesLog.load_binary(str(bdir / "scaled.bin"))
    with open(bdir / "scaler.json") as fh:
        from .data import Scaler
        scaler = Scaler.from_dict(json.load(fh))
    with open(bdir / "prepare.json") as fh:
        prep = json.load(fh)
    return scaled, scaler, prep


def _windows_from_bundle(bundle: str):
    scaled, scaler, prep = _load_bundle(bundle)
    ds = make_sequences(scaled, prep["n_w"], prep["n_p"], stride=prep["stride"])
    tr, va = split_windows(ds, prep["train_fraction"])
    return scaled, scaler, prep, tr, va


def cmd_train(args, cfg: dict) -> int:
    """Fit a network on a prepared bundle and store the checkpoint."""
    out = _out_dir(args)
    scaled, scaler, prep, tr, va = _windows_from_bundle(args.bundle)
    arch = cfgmod.arch_from_config(cfg, tr.state_dim, tr.input_dim)
    model = init_model(arch, seed=args.seed, scaler=scaler)
    spec = cfgmod.train_spec_from_config(cfg, seed=args.seed)
    scheme = cfg["train"]["scheme"]
    if scheme == "selfloop":
        history = train(model, tr, va, spec)
    elif scheme == "teacher":
        history = train_teacher_forced(model, (scaled.x, scaled.u),
                                       prep["n_w"], prep["n_p"], spec)
    else:
        raise ConfigError(f"unknown train.scheme {scheme!r}")
    model.meta.update({"scheme": scheme, "seed": args.seed,
                       "config_digest": cfgmod.config_digest(cfg)})
    save_checkpoint(model, out / "checkpoint", history=history)
    print(f"trained {scheme} {arch.cell} hidden={arch.hidden_dim} "
          f"best_val={model.meta['best_val']:.6f} "
          f"(epoch {model.meta['best_epoch']}) -> {out / 'checkpoint'}")
    return 0


def cmd_hpo(args, cfg: dict) -> int:
    """Random search with early stopping over a prepared bundle."""
    from .hpo import run_hpo_rnn
    out = _out_dir(args)
    _, _, _, tr, va = _windows_from_bundle(args.bundle)
    space = cfgmod.search_space_from_config(cfg)
    asha = cfgmod.asha_from_config(cfg)
    model, best, trials, _ = run_hpo_rnn(
        space, asha, cfg["model"]["cell"], tr, va, seed=args.seed,
        out_dir=out)
    done = sum(1 for t in trials if t.status == "completed")
    print(f"hpo finished: {len(trials)} trials ({done} completed), best trial "
          f"{best.trial_id} val={best.best_loss:.6f} config={best.config.to_dict()}")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    """Self-loop prediction report for a checkpoint on a held-out dataset."""
    out = _out_dir(args)
    model, _ = load_checkpoint(args.checkpoint)
    d = cfg["data"]
    log = SeriesLog.load_csv(args.dataset)
    if abs(log.rate - d["rate"]) > 1e-9:
        log = downsample(log, d["rate"])
    if d["states"] == "full":
        log = add_velocity_states(log, cutoff=d["velocity_cutoff"])
    report = eval_long_prediction(model, log, warmup=cfg["eval"]["warmup"])
    report.save(str(out / "report.json"))
    scaler = model.scaler
    xs = scaler.scale_x(log.x)
    us = scaler.scale_u(log.u)
    n_w = report.details["n_warm"]
    pred = rollout(model, xs, us, n_w=n_w, n_p=len(log) - n_w - 1)
    pred_phys = scaler.unscale_x(pred)
    names = ",".join(f"meas_{n}" for n in log.x_names) + "," \
        + ",".join(f"pred_{n}" for n in log.x_names)
    with open(out / "curves.csv", "w") as fh:
        fh.write("t," + names + "\n")
        for i in range(pred_phys.shape[0]):
            row = [log.t[n_w + 1 + i], *log.x[n_w + 1 + i], *pred_phys[i]]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    print(f"eval rmse [deg]: {np.round(np.asarray(report.rmse), 4).tolist()} "
          f"(mean {report.mean_rmse:.4f}) -> {out}")
    return 0


def cmd_control(args, cfg: dict) -> int:
    """Closed-loop tracking run; NMPC from a checkpoint or the PI baseline."""
    out = _out_dir(args)
    params = cfgmod.plant_from_config(cfg)
    if args.controller == "nmpc":
        if args.checkpoint is None:
            raise ConfigError("control with nmpc needs --checkpoint")
        recipe = cfgmod.reference_recipe_from_config(cfg, seed=args.seed)
        model, _ = load_checkpoint(args.checkpoint)
        spec = cfgmod.ocp_from_config(cfg, model.scaler)
        controller = NmpcController(model, spec)
        extra = {"reference": recipe, "checkpoint": str(args.checkpoint),
                 "config_digest": cfgmod.config_digest(cfg)}
    else:
        recipe = cfgmod.reference_recipe_from_config(
            cfg, seed=args.seed, rate=1.0 / params.sim_dt)
        controller = PiController(params.n_joints, kp=cfg["control"]["pi_kp"],
                                  ki=cfg["control"]["pi_ki"],
                                  u_mean=cfg["ocp"]["u_mean_bar"],
                                  p_range=params.pressure_range,
                                  rate=1.0 / params.sim_dt)
        extra = {"reference": recipe,
                 "config_digest": cfgmod.config_digest(cfg)}
    reference = reference_from_recipe(recipe)
    log = run_closed_loop(
        params, controller, reference, warmup=cfg["control"]["warmup"],
        seed=args.seed,
        excitation_amplitude=cfg["control"]["excitation_amplitude"],
        extra_meta=extra)
    log.save(str(out / "trajectory.csv"))
    rmse = compute_rmse(log)
    report = EvalReport(
        rmse=[float(v) for v in rmse], mean_rmse=float(np.mean(rmse)),
        channel_names=[f"q{j}" for j in range(params.n_joints)],
        details={"protocol": "closed_loop", "controller": args.controller,
                 "log_digest": log.digest()})
    report.save(str(out / "report.json"))
    print(f"{args.controller} tracking rmse [deg]: "
          f"{np.round(rmse, 4).tolist()} (mean {report.mean_rmse:.4f}) -> {out}")
    return 0


def cmd_replay(args, cfg: dict) -> int:
    """Reproduce a logged run from its sidecar metadata and compare digests."""
    del cfg
    out = _out_dir(args)
    original = TrajectoryLog.load(args.log)
    reproduced = replay_run(original.meta)
    reproduced.save(str(out / "replayed.csv"))
    d0, d1 = original.digest(), reproduced.digest()
    match = d0 == d1
    _write_json(out / "replay.json", {
        "command": "replay", "source": str(args.log),
        "original_digest": d0, "replayed_digest": d1, "match": match,
    })
    print(f"replay {'matches' if match else 'DIFFERS FROM'} the original "
          f"({d0[:16]}.. vs {d1[:16]}..)")
    return 0 if match else 2


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, metavar="FILE",
                        help="YAML config; defaults are used when omitted")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs/out", metavar="DIR")

    parser = argparse.ArgumentParser(
        prog="softmpc",
        description="Learning-based NMPC pipeline on a pneumatic-joint "
                    "surrogate plant")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("collect", parents=[common],
                   help="excite the plant and record a dataset")

    p = sub.add_parser("prepare", parents=[common],
                       help="downsample, scale and window a dataset")
    p.add_argument("--dataset", required=True, help="CSV from collect")

    p = sub.add_parser("train", parents=[common],
                       help="fit a network on a prepared bundle")
    p.add_argument("--bundle", required=True, help="directory from prepare")

    p = sub.add_parser("hpo", parents=[common],
                       help="hyperparameter search on a prepared bundle")
    p.add_argument("--bundle", required=True, help="directory from prepare")

    p = sub.add_parser("eval", parents=[common],
                       help="self-loop prediction report on held-out data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="CSV from collect")

    p = sub.add_parser("control", parents=[common],
                       help="closed-loop tracking run")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--controller", choices=("nmpc", "pi"), default="nmpc")

    p = sub.add_parser("replay", parents=[common],
                       help="reproduce a run from its log metadata")
    p.add_argument("--log", required=True, help="trajectory CSV path")
    return parser


_COMMANDS = {
    "collect": cmd_collect,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "hpo": cmd_hpo,
    "eval": cmd_eval,
    "control": cmd_control,
    "replay": cmd_replay,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
