"""Learning-based nonlinear MPC toolkit for antagonistic pneumatic soft robots.

The package splits into plant simulation (:mod:`softmpc.plant`), dataset
generation and conditioning (:mod:`softmpc.data`), from-scratch recurrent
models with hand-derived gradients (:mod:`softmpc.rnn`), hyperparameter
search (:mod:`softmpc.hpo`), the receding-horizon controller
(:mod:`softmpc.nmpc`) and the closed-loop experiment harness with its CLI
(:mod:`softmpc.runtime`, :mod:`softmpc.cli`, :mod:`softmpc.config`).
"""

from .plant import BoucWenParams, PlantParams, plant_init, plant_measure, plant_step
from .data import (Scaler, SeriesLog, WindowedDataset, add_velocity_states,
                   downsample, estimate_velocity, fit_scaler,
                   gen_ramp_excitation, gen_step_excitation, make_sequences,
                   split_windows)
from .rnn import (RnnArch, RnnModel, Hidden, init_model, load_checkpoint,
                  rollout, save_checkpoint)
from .rnn.train import TrainSpec, train, train_teacher_forced
from .hpo import (AshaConfig, SearchSpace, TrialConfig, run_hpo, run_hpo_rnn,
                  sample_config)
from .nmpc import (FrozenRnnDynamics, NmpcController, OcpSpec, ocp_cost,
                   ocp_gradient, ocp_solve, spec_from_physical)
from .runtime import (EvalReport, PiController, TrajectoryLog, collect_log,
                      compute_rmse, eval_horizon_ablation,
                      eval_long_prediction, gen_reference,
                      reference_from_recipe, replay_run, run_closed_loop)
from .config import default_config, load_config

__version__ = "0.1.0"

__all__ = [
    "BoucWenParams", "PlantParams", "plant_init", "plant_measure", "plant_step",
    "Scaler", "SeriesLog", "WindowedDataset", "add_velocity_states",
    "downsample", "estimate_velocity", "fit_scaler", "gen_ramp_excitation",
    "gen_step_excitation", "make_sequences", "split_windows",
    "RnnArch", "RnnModel", "Hidden", "init_model", "load_checkpoint",
    "rollout", "save_checkpoint",
    "TrainSpec", "train", "train_teacher_forced",
    "AshaConfig", "SearchSpace", "TrialConfig", "run_hpo", "run_hpo_rnn",
    "sample_config",
    "FrozenRnnDynamics", "NmpcController", "OcpSpec", "ocp_cost",
    "ocp_gradient", "ocp_solve", "spec_from_physical",
    "EvalReport", "PiController", "TrajectoryLog", "collect_log",
    "compute_rmse", "eval_horizon_ablation", "eval_long_prediction",
    "gen_reference", "reference_from_recipe", "replay_run", "run_closed_loop",
    "default_config", "load_config",
    "__version__",
]
