"""Synthetic data, sharded loss, optimizers and the fixed-loss /
fixed-epoch training loops for both sharded modes.

The training loop is the per-rank program handed to the communicator: all
cross-rank traffic inside an iteration is the per-layer collective
schedule plus one scalar all-reduce of the loss (excluded from the
communication-time accounting by default since it is O(1) per iteration).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .collectives import CommCostModel, Communicator, Direction, default_comm_model
from .core import Activation, FlopCounter, activation_grad, substream
from .energy import CostReport, EnergyRates, build_cost_report
from .errors import ConfigurationError, TrainingError
from .phantom import (init_phantom_model, pp_backward_layer,
                      pp_exchange_error_phantoms, pp_forward_layer,
                      pp_output_delta, pp_param_grads, valid_k)
from .tensor_parallel import (init_tp_model, tp_backward_layer,
                              tp_forward_layer)


@dataclass
class Dataset:
    """Teacher-generated samples: targets are relu(teacher @ relu(inputs))
    column-wise, with one fixed teacher matrix for the whole set."""

    inputs: np.ndarray    # (n, N)
    targets: np.ndarray   # (n, N)
    teacher: np.ndarray   # (n, n)
    seed: int

    @property
    def sample_count(self) -> int:
        return self.inputs.shape[1]


def teacher_targets(teacher: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """relu(teacher @ relu(inputs)), applied column-wise."""
    return np.maximum(teacher @ np.maximum(inputs, 0.0), 0.0)


def gen_dataset(n: int, samples: int, seed: int) -> Dataset:
    """Standard-normal teacher matrix and inputs from the seeded stream;
    targets computed exactly as defined. Bit-identical for a fixed seed."""
    if n < 1 or samples < 1:
        raise ConfigurationError("n and samples must be >= 1")
    rng = substream(seed, "dataset")
    teacher = rng.standard_normal((n, n))
    inputs = rng.standard_normal((n, samples))
    return Dataset(inputs, teacher_targets(teacher, inputs), teacher, seed)


def mse_loss_sharded(y_out: np.ndarray, y_true: np.ndarray, comm: Communicator,
                     rank: int, reduction: str = "sum") -> tuple[float, float]:
    """Half squared error of this rank's shard plus the all-reduced global
    sum. The 1/2 makes the output gradient exactly (y_out - y_true); mean
    reduction divides by batch."""
    if y_out.shape != y_true.shape:
        raise ConfigurationError("loss operands must share one shape")
    diff = y_out - y_true
    local = 0.5 * float(np.sum(diff * diff))
    if reduction == "mean":
        local /= y_out.shape[1]
    total = comm.all_reduce(rank, np.array([[local]]), direction=Direction.LOSS)
    return local, float(total[0, 0])


def sgd_step(params, grads, lr: float, names=None) -> None:
    """In-place theta <- theta - lr * grad for every parameter array."""
    if lr <= 0:
        raise ConfigurationError("learning rate must be positive")
    for i, (theta, grad) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(grad)):
            label = names[i] if names else f"parameter {i}"
            raise TrainingError(f"non-finite gradient for {label} (shape {grad.shape})")
        theta -= lr * grad


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8, names=None) -> None:
    """Standard Adam update with bias correction, in place."""
    state.t += 1
    b1, b2 = betas
    for i, (theta, grad) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(grad)):
            label = names[i] if names else f"parameter {i}"
            raise TrainingError(f"non-finite gradient for {label} (shape {grad.shape})")
        state.m[i] = b1 * state.m[i] + (1 - b1) * grad
        state.v[i] = b2 * state.v[i] + (1 - b2) * grad * grad
        m_hat = state.m[i] / (1 - b1 ** state.t)
        v_hat = state.v[i] / (1 - b2 ** state.t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainConfig:
    mode: str                      # "pp" | "tp"
    n: int
    p: int
    layers: int
    k: int = 0                     # phantom width, pp mode only
    batch: int = 0                 # 0 = full batch
    lr: float = 0.01
    optimizer: str = "sgd"         # "sgd" | "adam"
    target_loss: float | None = None
    max_epochs: int = 100
    seed: int = 0
    loss_reduction: str = "sum"    # "sum" | "mean"
    activation: Activation = Activation.RELU
    scheduler: str = "lockstep"    # "lockstep" | "threads"
    include_loss_comm_in_beta: bool = False

    def validate(self) -> None:
        if self.mode not in ("pp", "tp"):
            raise ConfigurationError(f"mode must be pp or tp, got {self.mode!r}")
        if self.n < 1 or self.p < 1 or self.layers < 1:
            raise ConfigurationError("n, p and layers must be >= 1")
        if self.n % self.p != 0:
            raise ConfigurationError(f"n={self.n} not divisible by p={self.p}")
        if self.mode == "pp":
            if self.p < 2:
                raise ConfigurationError("pp mode needs p >= 2")
            comm_bound, _ = valid_k(self.n, self.p)
            if not 1 <= self.k < comm_bound:
                raise ConfigurationError(
                    f"k={self.k} outside valid_k range [1, {comm_bound}) for "
                    f"n={self.n}, p={self.p}")
        if self.batch < 0:
            raise ConfigurationError("batch must be >= 0 (0 = full batch)")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.target_loss is not None and self.target_loss <= 0:
            raise ConfigurationError("target_loss must be positive")
        if self.max_epochs < 0:
            raise ConfigurationError("max_epochs must be >= 0")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigurationError("loss_reduction must be sum or mean")
        if self.scheduler not in ("lockstep", "threads"):
            raise ConfigurationError("scheduler must be lockstep or threads")


@dataclass
class TrainResult:
    epochs_run: int
    iterations_run: int
    converged: bool
    final_loss: float
    loss_history: list[float]
    cost: CostReport


# ----------------------------------------------------------------------
# one distributed iteration per mode (forward, loss, backward, grads)


@dataclass
class IterationOutput:
    y_out: np.ndarray
    local_loss: float
    global_loss: float
    grads: list            # per layer: PhantomGradients | TPGradients
    deltas: list           # per layer: (n/p, batch) error
    tape: list


def pp_iteration(comm: Communicator, rank: int, layers, activations, x_shard,
                 y_shard, reduction: str = "sum",
                 counter: FlopCounter | None = None) -> IterationOutput:
    """One phantom-parallel forward/backward pass on one rank.

    Per layer: one all-gather forward and one reduce-scatter backward, the
    latter shared between the parameter gradients and the error recurrence.
    """
    tape = []
    out = x_shard
    for l, layer in enumerate(layers):
        out = pp_forward_layer(layer, out, comm, rank, tape,
                               activation=activations[l], layer_index=l, counter=counter)
    local, global_loss = mse_loss_sharded(out, y_shard, comm, rank, reduction)
    delta = pp_output_delta(out, y_shard, tape[-1].preact, activations[-1], counter)
    if reduction == "mean":
        delta = delta / x_shard.shape[1]
        if counter is not None:
            counter.add(delta.size)
    count = len(layers)
    grads = [None] * count
    deltas = [None] * count
    for l in range(count - 1, -1, -1):
        deltas[l] = delta
        received = pp_exchange_error_phantoms(layers[l], delta, comm, rank,
                                              layer_index=l, counter=counter)
        tape[l].phantom_grad = received
        grads[l] = pp_param_grads(layers[l], delta, tape[l], received, counter=counter)
        if l > 0:
            delta = pp_backward_layer(layers[l], delta, tape[l - 1].preact,
                                      activations[l - 1], comm, rank, layer_index=l,
                                      received=received, counter=counter)
    return IterationOutput(out, local, global_loss, grads, deltas, tape)


def tp_iteration(comm: Communicator, rank: int, layers, activations, x_shard,
                 y_shard, reduction: str = "sum",
                 counter: FlopCounter | None = None) -> IterationOutput:
    """One tensor-parallel forward/backward pass on one rank."""
    tape = []
    out = x_shard
    for l, layer in enumerate(layers):
        out = tp_forward_layer(layer, out, comm, rank, tape,
                               activation=activations[l], layer_index=l, counter=counter)
    local, global_loss = mse_loss_sharded(out, y_shard, comm, rank, reduction)
    delta = pp_output_delta(out, y_shard, tape[-1].preact, activations[-1], counter)
    if reduction == "mean":
        delta = delta / x_shard.shape[1]
        if counter is not None:
            counter.add(delta.size)
    count = len(layers)
    grads = [None] * count
    deltas = [None] * count
    for l in range(count - 1, -1, -1):
        deltas[l] = delta
        input_grad_shard, grads[l] = tp_backward_layer(layers[l], delta, tape[l],
                                                       comm, rank, layer_index=l,
                                                       counter=counter)
        if l > 0:
            sig = activation_grad(tape[l - 1].preact, activations[l - 1], counter)
            delta = input_grad_shard * sig
            if counter is not None:
                counter.add(delta.size)
    return IterationOutput(out, local, global_loss, grads, deltas, tape)


# ----------------------------------------------------------------------
# the training loop


def _pp_param_lists(layers, grads):
    params, gradients, names = [], [], []
    for l, (layer, grad) in enumerate(zip(layers, grads)):
        params += [layer.local, layer.compressor]
        gradients += [grad.local, grad.compressor]
        names += [f"layer{l}.local", f"layer{l}.compressor"]
        for i in sorted(layer.decompressors):
            params.append(layer.decompressors[i])
            gradients.append(grad.decompressors[i])
            names.append(f"layer{l}.decompressor[{i}]")
        params.append(layer.bias)
        gradients.append(grad.bias)
        names.append(f"layer{l}.bias")
    return params, gradients, names


def _tp_param_lists(layers, grads):
    params, gradients, names = [], [], []
    for l, (layer, grad) in enumerate(zip(layers, grads)):
        params += [layer.weight, layer.bias]
        gradients += [grad.weight, grad.bias]
        names += [f"layer{l}.weight", f"layer{l}.bias"]
    return params, gradients, names


def _rank_train_loop(comm: Communicator, rank: int, config: TrainConfig, model,
                     x_shard: np.ndarray, y_shard: np.ndarray, batch: int,
                     iters_per_epoch: int):
    layers = model.rank_layers[rank]
    activations = model.activations
    iterate = pp_iteration if config.mode == "pp" else tp_iteration
    lists = _pp_param_lists if config.mode == "pp" else _tp_param_lists
    adam_state = None
    history: list[float] = []
    converged = False
    for epoch in range(config.max_epochs):
        epoch_losses = []
        for it in range(iters_per_epoch):
            sl = slice(it * batch, (it + 1) * batch)
            out = iterate(comm, rank, layers, activations, x_shard[:, sl],
                          y_shard[:, sl], config.loss_reduction)
            if not math.isfinite(out.global_loss):
                raise TrainingError(
                    f"loss diverged to {out.global_loss} at epoch {epoch}")
            params, grads, names = lists(layers, out.grads)
            if config.optimizer == "adam":
                if adam_state is None:
                    adam_state = AdamState(m=[np.zeros_like(g) for g in grads],
                                           v=[np.zeros_like(g) for g in grads])
                adam_step(params, grads, adam_state, config.lr, names=names)
            else:
                sgd_step(params, grads, config.lr, names=names)
            epoch_losses.append(out.global_loss)
        epoch_loss = float(np.mean(epoch_losses))
        history.append(epoch_loss)
        if config.target_loss is not None and epoch_loss <= config.target_loss:
            converged = True
            break
    return history, converged


def train(config: TrainConfig, data: Dataset,
          comm_model: CommCostModel | None = None,
          rates: EnergyRates | None = None) -> TrainResult:
    """Run the configured training loop and return loss and cost accounting.

    One epoch is one pass over the dataset; with full batch (the default)
    epoch and iteration coincide. Stops when the epoch loss reaches the
    target, else runs max_epochs and flags the result as not converged.
    Per-iteration compute seconds come from the closed-form FLOP counts and
    communication seconds from the recorded collectives of one iteration.
    """
    config.validate()
    comm_model = comm_model or default_comm_model()
    rates = rates or EnergyRates()
    if data.inputs.shape[0] != config.n:
        raise ConfigurationError(
            f"dataset width {data.inputs.shape[0]} does not match n={config.n}")
    samples = data.sample_count
    batch = config.batch or samples
    if batch > samples or samples % batch != 0:
        raise ConfigurationError(
            f"batch={batch} must divide the sample count {samples}")
    iters_per_epoch = samples // batch

    if config.mode == "pp":
        model = init_phantom_model(config.n, config.p, config.k, config.layers,
                                   config.activation, config.seed)
    else:
        model = init_tp_model(config.n, config.p, config.layers,
                              config.activation, config.seed)
    s = config.n // config.p
    comm = Communicator(config.p, mode=config.scheduler)

    if config.max_epochs == 0:
        history: list[float] = []
        converged = False
    else:
        def worker(comm_, rank):
            return _rank_train_loop(
                comm_, rank, config, model,
                data.inputs[rank * s:(rank + 1) * s],
                data.targets[rank * s:(rank + 1) * s],
                batch, iters_per_epoch)

        outputs = comm.run(worker)
        history, converged = outputs[0]

    epochs_run = len(history)
    iterations_run = epochs_run * iters_per_epoch
    records_per_iter = (2 * config.layers + 1 if config.mode == "pp"
                        else 4 * config.layers + 1)
    first_iter = comm.records[:records_per_iter] if iterations_run else None
    cost = build_cost_report(
        config.mode, config.n, config.p, config.k, config.layers, batch,
        iterations_run, rates, comm_model,
        iteration_records=first_iter,
        include_loss=config.include_loss_comm_in_beta,
        total_records=comm.records)
    final_loss = history[-1] if history else float("inf")
    return TrainResult(
        epochs_run=epochs_run,
        iterations_run=iterations_run,
        converged=converged,
        final_loss=final_loss,
        loss_history=history,
        cost=cost,
    )
