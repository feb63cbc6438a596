"""Knowledge-based neural ODE models of quadrotor dynamics and MPC built on them."""

from .control import MpcConfig, MpcSolution, Reference, closed_loop_simulate, mpc_solve
from .dynamics import (
    DragParams,
    DragPlant,
    GimbalLockError,
    KnodeMpcError,
    NominalModel,
    NumericalError,
    QuadParams,
    hover_state,
    nominal_derivative,
)
from .evaluation import RefSpec, dtw_distance, gen_reference, prediction_experiment, tracking_experiment
from .integrators import rk4_step, rk45_simulate
from .models import (
    GpCorrectedModel,
    HybridModel,
    Mlp,
    gp_fit,
    init_mlp,
    load_model,
    save_model,
    translational_mask,
    velocity_features,
)
from .trajectory import Trajectory
from .training import TrainConfig, gp_training_set, knode_loss, make_hybrid, one_step_predict, train_knode

__all__ = [
    "DragParams", "DragPlant", "GimbalLockError", "GpCorrectedModel", "HybridModel", "KnodeMpcError",
    "Mlp", "MpcConfig", "MpcSolution", "NominalModel", "NumericalError", "QuadParams", "RefSpec",
    "Reference", "TrainConfig", "Trajectory", "closed_loop_simulate", "dtw_distance", "gen_reference",
    "gp_fit", "gp_training_set", "hover_state", "init_mlp", "knode_loss", "load_model", "make_hybrid",
    "mpc_solve", "nominal_derivative", "one_step_predict", "prediction_experiment", "rk4_step",
    "rk45_simulate", "save_model", "tracking_experiment", "train_knode", "translational_mask",
    "velocity_features",
]
