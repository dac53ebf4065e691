"""Phantom-parallel and tensor-parallel FFN training on a deterministic
simulated rank group, with exact FLOP, communication-time and energy cost
models."""

from .collectives import (Collective, CollectiveCost, CommCostModel,
                          CommRecord, Communicator, Direction, comm_time,
                          default_model_path, fit_comm_model, default_comm_model,
                          load_comm_model, load_measurements, save_comm_model)
from .core import (Activation, FlopCounter, activation_grad, apply_activation,
                   gemm, substream, uniform_init)
from .checkpoint import load_model, save_model
from .energy import (CostReport, EnergyRates, alpha_seconds, build_cost_report,
                     comm_time_iteration, energy_per_iteration,
                     flops_pp_iteration, flops_tp_iteration, pp_schedule_beta,
                     records_bytes, total_energy, tp_schedule_beta)
from .errors import (ConfigurationError, FitError, OracleError,
                     PhantomsimError, ProtocolError, SequencingError,
                     TrainingError)
from .phantom import (LayerTape, PhantomGradients, PhantomLayer, PhantomModel,
                      init_phantom_model, pp_backward_layer,
                      pp_exchange_error_phantoms, pp_forward_layer,
                      pp_model_size, pp_output_delta, pp_param_grads, valid_k)
from .reference import (DenseFFN, dense_backward, dense_forward, dense_loss,
                        dense_train, effective_bias, effective_weight,
                        finite_diff_grad, init_dense_ffn, phantom_dense_twin,
                        relative_error)
from .tensor_parallel import (TPGradients, TPLayer, TPModel, init_tp_model,
                              tp_backward_layer, tp_forward_layer,
                              tp_model_size)
from .training import (AdamState, Dataset, IterationOutput, TrainConfig,
                       TrainResult, adam_step, gen_dataset, mse_loss_sharded,
                       pp_iteration, sgd_step, teacher_targets, tp_iteration,
                       train)

__version__ = "0.1.0"

__all__ = [
    "Activation", "AdamState", "Collective", "CollectiveCost", "CommCostModel",
    "CommRecord", "Communicator", "ConfigurationError", "CostReport",
    "Dataset", "DenseFFN", "Direction", "EnergyRates", "FitError",
    "FlopCounter", "IterationOutput", "LayerTape", "OracleError",
    "PhantomGradients", "PhantomLayer", "PhantomModel", "PhantomsimError",
    "ProtocolError", "SequencingError", "TPGradients", "TPLayer", "TPModel",
    "TrainConfig", "TrainResult", "TrainingError", "activation_grad",
    "adam_step", "alpha_seconds", "apply_activation", "build_cost_report",
    "comm_time", "comm_time_iteration", "default_model_path", "dense_backward",
    "dense_forward", "dense_loss", "dense_train", "effective_bias",
    "effective_weight", "energy_per_iteration", "finite_diff_grad",
    "fit_comm_model", "flops_pp_iteration", "flops_tp_iteration",
    "default_comm_model", "gemm", "gen_dataset", "init_dense_ffn",
    "init_phantom_model", "init_tp_model", "load_comm_model", "load_measurements",
    "load_model", "mse_loss_sharded", "phantom_dense_twin", "pp_backward_layer",
    "pp_exchange_error_phantoms", "pp_forward_layer", "pp_iteration",
    "pp_model_size", "pp_output_delta", "pp_param_grads", "pp_schedule_beta",
    "records_bytes", "relative_error", "save_comm_model", "save_model",
    "sgd_step", "substream", "teacher_targets", "total_energy",
    "tp_backward_layer", "tp_forward_layer", "tp_iteration", "tp_model_size",
    "tp_schedule_beta", "train", "uniform_init", "valid_k",
]
