"""Baseline tensor-parallel FFN with row-block (output-sharded) weights.

The sharded model is an exact reparameterization of the dense one:
concatenating the p row blocks of a layer reconstructs the full n x n
weight. Each layer of every iteration runs the full four-collective
schedule (broadcast + all-gather forward, all-reduce + reduce-scatter
backward) so the communication cost matches the canonical per-layer
accounting even where a data-flow-minimal implementation could skip one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collectives import Communicator, Direction
from .core import (Activation, FlopCounter, apply_activation, gemm,
                   substream, uniform_init)
from .errors import ConfigurationError, SequencingError


@dataclass
class TPLayer:
    """One rank's row block of one layer."""

    weight: np.ndarray  # (n/p, n)
    bias: np.ndarray    # (n/p,)

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ConfigurationError("weight must be 2-d")
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError(
                f"bias shape {self.bias.shape} does not match weight rows")


@dataclass
class TPLayerTape:
    y_full: np.ndarray  # gathered full-width input, (n, batch)
    preact: np.ndarray  # (n/p, batch)


@dataclass
class TPGradients:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class TPModel:
    n: int
    p: int
    activations: list[Activation]
    rank_layers: list[list[TPLayer]]
    seed: int = 0

    @property
    def layer_count(self) -> int:
        return len(self.activations)

    @property
    def shard_width(self) -> int:
        return self.n // self.p


def full_layer_weight(n: int, layer: int, seed: int) -> np.ndarray:
    """The full n x n weight of one layer, independent of p.

    Sharded models take row blocks of this matrix, so any two world sizes
    (and the dense reference) start from identical effective weights.
    """
    return uniform_init(substream(seed, "tp", layer, "weight"), n, n, n, n)


def init_tp_model(n: int, p: int, layers: int,
                  activation: Activation | list[Activation] = Activation.RELU,
                  seed: int = 0) -> TPModel:
    if p < 1:
        raise ConfigurationError("p must be >= 1")
    if n % p != 0:
        raise ConfigurationError(f"n={n} not divisible by p={p}")
    acts = list(activation) if isinstance(activation, (list, tuple)) else [activation] * layers
    if len(acts) != layers:
        raise ConfigurationError("need one activation per layer")
    s = n // p
    rank_layers = [[] for _ in range(p)]
    for l in range(layers):
        full = full_layer_weight(n, l, seed)
        for j in range(p):
            rank_layers[j].append(TPLayer(full[j * s:(j + 1) * s].copy(), np.zeros(s)))
    return TPModel(n, p, acts, rank_layers, seed)


def tp_forward_layer(layer: TPLayer, y_prev_shard: np.ndarray, comm: Communicator,
                     rank: int, tape: list[TPLayerTape] | None = None, *,
                     activation: Activation = Activation.RELU, layer_index: int = 0,
                     counter: FlopCounter | None = None) -> np.ndarray:
    """Assemble the full-width input, then apply this rank's row block.

    One all-gather of the (n/p) x batch shards assembles the input; the
    scheduled per-layer broadcast then distributes rank 0's assembled copy
    (identical content, kept for cost parity with the per-layer collective
    schedule). Returns sigma(bias + weight @ y_full), an (n/p) x batch shard.
    """
    y_prev_shard = np.asarray(y_prev_shard, dtype=np.float64)
    s, n = layer.weight.shape
    if y_prev_shard.ndim != 2 or y_prev_shard.shape[0] != s:
        raise ConfigurationError(
            f"layer input must be (n/p, batch) = ({s}, *), got {y_prev_shard.shape}")
    gathered = comm.all_gather(rank, y_prev_shard,
                               direction=Direction.FORWARD, layer=layer_index)
    y_full = comm.broadcast(rank, 0, gathered if rank == 0 else None,
                            direction=Direction.FORWARD, layer=layer_index)
    z = gemm(layer.weight, y_full, counter=counter)
    preact = z + layer.bias[:, None]
    if counter is not None:
        counter.add(preact.size)
    out = apply_activation(preact, activation, counter)
    if tape is not None:
        tape.append(TPLayerTape(y_full=y_full, preact=preact))
    return out


def tp_backward_layer(layer: TPLayer, delta_shard: np.ndarray,
                      tape_entry: TPLayerTape, comm: Communicator, rank: int, *,
                      layer_index: int = 0,
                      counter: FlopCounter | None = None) -> tuple[np.ndarray, TPGradients]:
    """Gradients of one layer plus this rank's shard of the input gradient.

    The full-width input-gradient contribution weight^T @ delta is summed
    across ranks with one all-reduce; the scheduled per-layer
    reduce-scatter delivers the same rank-ordered sums shard-wise. Returns
    (input gradient shard, gradients); the activation derivative of the
    previous layer is applied by the caller, which holds that tape entry.
    """
    if tape_entry is None:
        raise SequencingError("backward requires the layer's forward tape entry")
    s, n = layer.weight.shape
    p = comm.world_size
    grad_w = gemm(delta_shard, tape_entry.y_full, transpose_b=True, counter=counter)
    grad_b = delta_shard.sum(axis=1)
    if counter is not None:
        counter.add(delta_shard.size)
    grad_full = gemm(layer.weight, delta_shard, transpose_a=True, counter=counter)
    summed = comm.all_reduce(rank, grad_full,
                             direction=Direction.BACKWARD, layer=layer_index)
    scattered = comm.reduce_scatter(rank, grad_full,
                                    direction=Direction.BACKWARD, layer=layer_index)
    # both carry the same ascending-rank sums; the extracted shard is used
    shard = summed[rank * s:(rank + 1) * s].copy()
    del scattered
    return shard, TPGradients(grad_w, grad_b)


def tp_model_size(n: int, layers: int) -> int:
    """Parameter count layers * n^2, independent of p (biases excluded)."""
    return layers * n * n
