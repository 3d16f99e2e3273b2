"""Run configuration: documented defaults, YAML loading, strict validation.

One YAML file drives every CLI subcommand. A user file only needs the keys it
wants to change; everything else comes from :data:`DEFAULTS`. Unknown keys
are rejected (a typo must not silently fall back to a default) and every
value is type-checked against the defaults table. The ``*_from_config``
builders turn sections into the package's dataclasses.

Key naming follows the dataclasses one-to-one (``plant`` -> PlantParams with
``bouc_wen`` nested, ``model`` -> RnnArch, ``train`` -> TrainSpec, ``ocp`` ->
OcpSpec). Pressure entries under ``ocp`` are physical (bar) and are converted
through the trained model's scaler at load time.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np
import yaml

from .data import gen_ramp_excitation, gen_step_excitation
from .errors import ConfigError
from .hpo import AshaConfig, FloatRange, IntRange, SearchSpace
from .nmpc import OcpSpec, spec_from_physical
from .plant import BoucWenParams, PlantParams
from .rnn.model import RnnArch
from .rnn.train import TrainSpec

DEFAULTS: dict = {
    "plant": {
        "n_joints": 5,
        "pressure_tau": 0.040,        # bellows lag [s]
        "torque_gain": 0.55,          # N*m per bar differential
        "joint_stiffness": 1.0,       # N*m/rad
        "joint_damping": 0.15,        # N*m*s/rad
        "inertia": 0.01,              # kg*m^2
        "coulomb": 0.01,              # N*m
        "coulomb_eps": 0.01,          # rad/s
        "coupling_gain": 0.05,        # N*m/rad toward chain neighbours
        "gravity_torque": 0.0,        # N*m
        "angle_limit": 0.3490658503988659,   # rad (20 deg)
        "softstop_stiffness": 50.0,   # N*m/rad
        "pressure_range": 0.7,        # bar
        "encoder_quantum": 0.1,       # deg
        "noise_std": 0.3,             # deg, gaussian before quantization
        "sim_dt": 0.001,              # s
        "bouc_wen": {"a": 1.0, "beta": 10.0, "gamma": 5.0, "alpha": 0.5},
    },
    "excitation": {
        "kind": "steps",              # "steps" or "ramps"
        "hold": 2.0,                  # plateau length [s]
        "ramp": 4.0,                  # ramp length [s] (ramps only)
        "duration": 1440.0,           # total length [s]
        "p_max": 0.7,                 # command amplitude [bar]
    },
    "data": {
        "rate": 5.0,                  # downsample target [Hz]
        "states": "positions",        # "positions" or "full" (adds velocities)
        "velocity_cutoff": 5.0,       # low-pass for velocity estimation [Hz]
        "u_range": [0.0, 0.7],        # known command range pinned into the scaler
        "n_w": 10,                    # warm-up steps per window
        "n_p": 20,                    # self-loop prediction steps per window
        "stride": 2,                  # window start spacing [samples]
        "train_fraction": 0.8,        # contiguous head of the log that trains
    },
    "model": {
        "cell": "gru",                # "gru" or "lstm"
        "hidden_dim": 32,
        "num_layers": 1,
        "dropout": 0.0,               # between stacked layers only
    },
    "train": {
        "scheme": "selfloop",         # "selfloop" or "teacher" (baseline)
        "epochs": 200,
        "batch_size": 32,
        "lr": 0.0015,
        "lr_factor": 0.5,
        "lr_patience": 8,
        "min_lr": 1.0e-6,
    },
    "hpo": {
        "budget": 16,                 # total trials
        "max_epochs": 30,
        "grace": 10,                  # epochs before any stopping decision
        "eta": 2.0,                   # halving factor
        "max_workers": 4,
        "space": {                    # [low, high] per sampled dimension
            "hidden_dim": [16, 96],
            "num_layers": [1, 3],
            "batch_size": [16, 128],
            "dropout": [0.0, 0.4],
            "lr": [1.0e-4, 1.0e-2],   # sampled log-uniform
        },
    },
    "ocp": {
        "horizon": 4,                 # prediction steps T
        "q_s": 5.0,                   # stage tracking weight
        "q_d": 0.0,                   # state-increment damping weight
        "q_t": 10.0,                  # terminal tracking weight
        "r_d": 4.0,                   # input-increment weight
        "r_m": 5.0,                   # stiffness (mean-pressure) weight
        "u_min_bar": 0.0,             # physical input bounds [bar]
        "u_max_bar": 0.7,
        "u_mean_bar": 0.35,           # stiffness target [bar]
        "x_max": 1.0,                 # scaled state bound (penalty)
        "control_rate": 5.0,          # controller rate [Hz]
        "max_iters": 50,              # solver iteration budget per cycle
        "tol": 1.0e-6,                # projected-gradient stationarity tol
    },
    "control": {
        "warmup": 50.0,               # hidden-state warm-up span [s]
        "excitation_amplitude": 0.08,  # warm-up ramp amplitude [bar]
        "pi_kp": 0.08,                # PI baseline gains (bar per deg, per deg*s)
        "pi_ki": 0.15,
    },
    "reference": {
        "kind": "ramp_hold",          # or "constant" (value/n_cycles)
        "duration": 60.0,             # [s]
        "margin": 0.85,               # fraction of the joint range used
        "ramp_range": [1.0, 3.0],     # per-segment ramp length bounds [s]
        "hold_range": [0.5, 2.0],     # per-segment hold length bounds [s]
        "value": 0.0,                 # constant kind: setpoint [deg]
    },
    "eval": {
        "warmup": 50.0,               # protocol warm-up [s]
        "horizon": 4,                 # ablation probe depth [steps]
        "n_probes": 20,               # ablation probe count
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        ref = base[key]
        if isinstance(ref, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted!r} must be a mapping")
            out[key] = _merge(ref, value, dotted)
            continue
        out[key] = _check_scalar(dotted, value, ref)
    return out


def _check_scalar(dotted: str, value, ref):
    if isinstance(ref, bool) or isinstance(value, bool):
        if type(value) is not bool or type(ref) is not bool:
            raise ConfigError(f"{dotted!r} has the wrong type")
        return value
    if isinstance(ref, (int, float)):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted!r} must be a number")
        if isinstance(ref, int) and isinstance(value, float):
            if value != int(value):
                raise ConfigError(f"{dotted!r} must be an integer")
            return int(value)
        return type(ref)(value) if isinstance(ref, float) else value
    if isinstance(ref, str):
        if not isinstance(value, str):
            raise ConfigError(f"{dotted!r} must be a string")
        return value
    if isinstance(ref, list):
        if not isinstance(value, list) or len(value) != len(ref):
            raise ConfigError(f"{dotted!r} must be a list of {len(ref)} entries")
        return [_check_scalar(f"{dotted}[{i}]", v, r)
                for i, (v, r) in enumerate(zip(value, ref))]
    raise ConfigError(f"{dotted!r} has an unsupported type")  # pragma: no cover


def load_config(path: str | Path | None = None) -> dict:
    """Read a YAML config file and merge it over the defaults."""
    if path is None:
        return default_config()
    text = Path(path).read_text()
    try:
        loaded = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"unreadable config file {path}: {exc}") from exc
    if loaded is None:
        return default_config()
    if not isinstance(loaded, dict):
        raise ConfigError("config file must contain a mapping at top level")
    return _merge(DEFAULTS, loaded, "")


def config_digest(cfg: dict) -> str:
    """Canonical hash of a config tree, for run metadata."""
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# section builders
# ---------------------------------------------------------------------------

def plant_from_config(cfg: dict) -> PlantParams:
    section = dict(cfg["plant"])
    bw = BoucWenParams(**section.pop("bouc_wen"))
    return PlantParams(bouc_wen=bw, **section)


def excitation_from_config(cfg: dict, seed: int, rate: float = 1000.0
                           ) -> tuple[np.ndarray, np.ndarray]:
    exc = cfg["excitation"]
    n_joints = cfg["plant"]["n_joints"]
    if exc["kind"] == "steps":
        return gen_step_excitation(n_joints, hold=exc["hold"],
                                   duration=exc["duration"], p_max=exc["p_max"],
                                   seed=seed, rate=rate)
    if exc["kind"] == "ramps":
        return gen_ramp_excitation(n_joints, ramp=exc["ramp"], hold=exc["hold"],
                                   duration=exc["duration"], p_max=exc["p_max"],
                                   seed=seed, rate=rate)
    raise ConfigError(f"unknown excitation kind {exc['kind']!r}")


def arch_from_config(cfg: dict, state_dim: int, input_dim: int) -> RnnArch:
    m = cfg["model"]
    return RnnArch(cell=m["cell"], state_dim=state_dim, input_dim=input_dim,
                   hidden_dim=m["hidden_dim"], num_layers=m["num_layers"],
                   dropout=m["dropout"])


def train_spec_from_config(cfg: dict, seed: int) -> TrainSpec:
    t = cfg["train"]
    return TrainSpec(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                     lr_factor=t["lr_factor"], lr_patience=t["lr_patience"],
                     min_lr=t["min_lr"], seed=seed)


def search_space_from_config(cfg: dict) -> SearchSpace:
    s = cfg["hpo"]["space"]
    return SearchSpace(hidden_dim=IntRange(*s["hidden_dim"]),
                       num_layers=IntRange(*s["num_layers"]),
                       batch_size=IntRange(*s["batch_size"]),
                       dropout=FloatRange(*s["dropout"]),
                       lr=FloatRange(s["lr"][0], s["lr"][1], log=True))


def asha_from_config(cfg: dict) -> AshaConfig:
    h = cfg["hpo"]
    return AshaConfig(grace=h["grace"], max_epochs=h["max_epochs"],
                      eta=h["eta"], max_workers=h["max_workers"],
                      budget=h["budget"])


def ocp_from_config(cfg: dict, scaler) -> OcpSpec:
    o = dict(cfg["ocp"])
    u_min, u_max, u_mean = (o.pop("u_min_bar"), o.pop("u_max_bar"),
                            o.pop("u_mean_bar"))
    return spec_from_physical(scaler, u_min, u_max, u_mean, **o)


def reference_recipe_from_config(cfg: dict, seed: int,
                                 rate: float | None = None) -> dict:
    """Serializable recipe consumed by the runtime's reference builder.

    ``rate`` is the controller's sampling rate and defaults to the
    receding-horizon controller's; the PI baseline passes the plant rate.
    """
    r = cfg["reference"]
    n_joints = cfg["plant"]["n_joints"]
    rate = cfg["ocp"]["control_rate"] if rate is None else rate
    if r["kind"] == "ramp_hold":
        return {"kind": "ramp_hold", "n_joints": n_joints,
                "duration": r["duration"], "seed": seed, "rate": rate,
                "angle_limit": np.degrees(cfg["plant"]["angle_limit"]),
                "margin": r["margin"],
                "ramp_range": tuple(r["ramp_range"]),
                "hold_range": tuple(r["hold_range"])}
    if r["kind"] == "constant":
        return {"kind": "constant", "value": r["value"],
                "n_cycles": int(round(r["duration"] * rate)),
                "n_joints": n_joints}
    raise ConfigError(f"unknown reference kind {r['kind']!r}")
