"""Phantom-parallel layers.

Each rank keeps a square local block, one compressor that squeezes its
activation shard to k ghost neurons, and one decompressor per peer that
expands the k-wide blocks received from that peer. Cross-rank traffic per
layer is one all-gather of the k-wide phantom blocks on the way forward
and one reduce-scatter of their gradients on the way back; activations
stay sharded at width n/p on every rank throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collectives import Communicator, Direction
from .core import (Activation, FlopCounter, activation_grad, apply_activation,
                   gemm, substream, uniform_init)
from .errors import ConfigurationError, SequencingError


@dataclass
class PhantomLayer:
    """One rank's shard of one layer."""

    local: np.ndarray                      # (n/p, n/p)
    compressor: np.ndarray                 # (k, n/p)
    decompressors: dict[int, np.ndarray]   # source rank -> (n/p, k)
    bias: np.ndarray                       # (n/p,)

    def __post_init__(self):
        s = self.local.shape[0]
        if self.local.shape != (s, s):
            raise ConfigurationError(f"local block must be square, got {self.local.shape}")
        k = self.compressor.shape[0]
        if not 1 <= k <= s:
            raise ConfigurationError(f"need 1 <= k <= n/p, got k={k}, n/p={s}")
        if self.compressor.shape != (k, s):
            raise ConfigurationError(f"compressor must be (k, n/p), got {self.compressor.shape}")
        for i, dec in self.decompressors.items():
            if dec.shape != (s, k):
                raise ConfigurationError(
                    f"decompressor for rank {i} must be (n/p, k), got {dec.shape}")
        if self.bias.shape != (s,):
            raise ConfigurationError(f"bias must be (n/p,), got {self.bias.shape}")

    @property
    def shard_width(self) -> int:
        return self.local.shape[0]

    @property
    def k(self) -> int:
        return self.compressor.shape[0]


@dataclass
class LayerTape:
    """Per-layer forward state one rank must keep for its backward pass."""

    inputs: np.ndarray                 # y_{l-1} shard, (n/p, batch)
    preact: np.ndarray                 # bias + z, (n/p, batch)
    phantoms: dict[int, np.ndarray]    # source rank -> (k, batch), own block included
    phantom_grad: np.ndarray | None = None  # summed peer gradients for the own block


@dataclass
class PhantomGradients:
    """Gradients for one layer's parameters on one rank."""

    bias: np.ndarray
    local: np.ndarray
    compressor: np.ndarray
    decompressors: dict[int, np.ndarray]


@dataclass
class PhantomModel:
    """All ranks' shards of a phantom-parallel FFN.

    Every layer shares the same width n, world size p and phantom width k.
    rank_layers[j][l] is rank j's shard of layer l; in a simulated run each
    rank task only touches its own row.
    """

    n: int
    p: int
    k: int
    activations: list[Activation]
    rank_layers: list[list[PhantomLayer]]
    seed: int = 0

    @property
    def layer_count(self) -> int:
        return len(self.activations)

    @property
    def shard_width(self) -> int:
        return self.n // self.p


def init_phantom_model(n: int, p: int, k: int, layers: int,
                       activation: Activation | list[Activation] = Activation.RELU,
                       seed: int = 0) -> PhantomModel:
    """Seeded model with uniform [-s, s] weights (s from fan-in/fan-out)
    and zero biases.

    Every matrix draws from its own (seed, layer, rank, name) substream, so
    initialization does not depend on scheduler mode and reproduces for a
    fixed layout regardless of call order.
    """
    if p < 1:
        raise ConfigurationError("p must be >= 1")
    if n % p != 0:
        raise ConfigurationError(f"n={n} not divisible by p={p}")
    s = n // p
    if not 1 <= k <= s:
        raise ConfigurationError(f"need 1 <= k <= n/p, got k={k}, n/p={s}")
    acts = list(activation) if isinstance(activation, (list, tuple)) else [activation] * layers
    if len(acts) != layers:
        raise ConfigurationError("need one activation per layer")
    rank_layers = []
    for j in range(p):
        own = []
        for l in range(layers):
            local = uniform_init(substream(seed, "pp", l, j, "local"), s, s, s, s)
            comp = uniform_init(substream(seed, "pp", l, j, "compressor"), k, s, s, k)
            decs = {i: uniform_init(substream(seed, "pp", l, j, "decompressor", i), s, k, k, s)
                    for i in range(p) if i != j}
            own.append(PhantomLayer(local, comp, decs, np.zeros(s)))
        rank_layers.append(own)
    return PhantomModel(n, p, k, acts, rank_layers, seed)


def pp_forward_layer(layer: PhantomLayer, y_prev: np.ndarray, comm: Communicator,
                     rank: int, tape: list[LayerTape] | None = None, *,
                     activation: Activation = Activation.RELU, layer_index: int = 0,
                     counter: FlopCounter | None = None) -> np.ndarray:
    """One forward step: compress, gather, decompress, update.

    Computes sigma(bias + local @ y_prev + sum_i decompressor_i @ g_i) where
    g_i is peer i's compressed block, exchanged with a single all-gather of
    k x batch elements. Appends the inputs, preactivation and all phantom
    blocks to the tape.
    """
    y_prev = np.asarray(y_prev, dtype=np.float64)
    s = layer.shard_width
    if y_prev.ndim != 2 or y_prev.shape[0] != s:
        raise ConfigurationError(
            f"layer input must be (n/p, batch) = ({s}, *), got {y_prev.shape}")
    k = layer.k
    z = gemm(layer.local, y_prev, counter=counter)
    own = gemm(layer.compressor, y_prev, counter=counter)
    gathered = comm.all_gather(rank, own, direction=Direction.FORWARD, layer=layer_index)
    phantoms = {i: gathered[i * k:(i + 1) * k] for i in range(comm.world_size)}
    for i in sorted(layer.decompressors):
        z += gemm(layer.decompressors[i], phantoms[i], counter=counter)
        if counter is not None:
            counter.add(z.size)  # accumulation
    preact = z + layer.bias[:, None]
    if counter is not None:
        counter.add(preact.size)  # bias add
    out = apply_activation(preact, activation, counter)
    if tape is not None:
        tape.append(LayerTape(inputs=y_prev, preact=preact, phantoms=phantoms))
    return out


def pp_output_delta(y_out: np.ndarray, y_true: np.ndarray, preact: np.ndarray,
                    act: Activation, counter: FlopCounter | None = None) -> np.ndarray:
    """Local output error for the half-squared loss:
    (y_out - y_true) * sigma'(preact)."""
    if y_out.shape != y_true.shape or y_out.shape != preact.shape:
        raise ConfigurationError("output delta operands must share one shape")
    diff = y_out - y_true
    if counter is not None:
        counter.add(diff.size)
    sig = activation_grad(preact, act, counter)
    out = diff * sig
    if counter is not None:
        counter.add(out.size)
    return out


def pp_exchange_error_phantoms(layer: PhantomLayer, delta: np.ndarray,
                               comm: Communicator, rank: int, *,
                               layer_index: int = 0,
                               counter: FlopCounter | None = None) -> np.ndarray:
    """Adjoint of the forward phantom exchange for one layer.

    For every peer i the rank computes decompressor_i^T @ delta (the
    gradient of the loss through the block it decompressed from i) and
    places it in slot i of a p*k x batch buffer; the rank's own slot stays
    zero because a rank never messages itself. One reduce-scatter then
    delivers sum-over-peers of slot j to rank j: the gradient of the loss
    with respect to the phantom block this rank produced in the forward
    pass.
    """
    p = comm.world_size
    k = layer.k
    b = delta.shape[1]
    contributions = np.zeros((p * k, b))
    for i in sorted(layer.decompressors):
        contributions[i * k:(i + 1) * k] = gemm(layer.decompressors[i], delta,
                                                transpose_a=True, counter=counter)
    return comm.reduce_scatter(rank, contributions,
                               direction=Direction.BACKWARD, layer=layer_index)


def pp_backward_layer(layer_next: PhantomLayer, delta_next: np.ndarray,
                      preact: np.ndarray, act: Activation, comm: Communicator,
                      rank: int, *, layer_index: int = 0,
                      received: np.ndarray | None = None,
                      counter: FlopCounter | None = None) -> np.ndarray:
    """Error recurrence from layer l+1 down to layer l:

        delta_l = (local^T @ delta_next + compressor^T @ received) * sigma'(preact_l)

    where ``received`` is the reduce-scattered peer gradient sum for this
    rank's phantom block of layer l+1. When ``received`` is None the
    exchange is performed here (one reduce-scatter); pass a precomputed
    value to share a single exchange between this recurrence and
    pp_param_grads.
    """
    if received is None:
        received = pp_exchange_error_phantoms(layer_next, delta_next, comm, rank,
                                              layer_index=layer_index, counter=counter)
    back = gemm(layer_next.local, delta_next, transpose_a=True, counter=counter)
    back = back + gemm(layer_next.compressor, received, transpose_a=True, counter=counter)
    if counter is not None:
        counter.add(back.size)  # sum of the two terms
    sig = activation_grad(preact, act, counter)
    out = back * sig
    if counter is not None:
        counter.add(out.size)
    return out


def pp_param_grads(layer: PhantomLayer, delta: np.ndarray, tape_entry: LayerTape,
                   received_phantom_grads: np.ndarray, *,
                   counter: FlopCounter | None = None) -> PhantomGradients:
    """Exact parameter gradients for one layer on one rank.

    bias: batch row-sum of delta. local: delta @ inputs^T. compressor:
    received phantom grads @ inputs^T. decompressors[i]: delta @ g_i^T,
    stored in the decompressor's own (n/p, k) shape.
    """
    if tape_entry is None:
        raise SequencingError("backward requires the layer's forward tape entry")
    if delta.shape != tape_entry.preact.shape:
        raise ConfigurationError(
            f"delta shape {delta.shape} does not match tape {tape_entry.preact.shape}")
    grad_bias = delta.sum(axis=1)
    if counter is not None:
        counter.add(delta.size)  # batch reduction
    grad_local = gemm(delta, tape_entry.inputs, transpose_b=True, counter=counter)
    grad_comp = gemm(received_phantom_grads, tape_entry.inputs, transpose_b=True, counter=counter)
    grad_decs = {}
    for i in sorted(layer.decompressors):
        try:
            phantom = tape_entry.phantoms[i]
        except KeyError:
            raise SequencingError(f"tape holds no phantom block from rank {i}") from None
        grad_decs[i] = gemm(delta, phantom, transpose_b=True, counter=counter)
    if grad_local.shape != layer.local.shape or grad_comp.shape != layer.compressor.shape:
        raise ConfigurationError("gradient shapes do not match layer shapes")
    return PhantomGradients(grad_bias, grad_local, grad_comp, grad_decs)


def pp_model_size(n: int, p: int, k: int, layers: int) -> int:
    """Parameter count layers * (n^2/p + p*k*n): per layer, p local blocks
    of (n/p)^2, p compressors of k*(n/p) and p*(p-1) decompressors of
    (n/p)*k. Biases are excluded, consistent with tp_model_size."""
    if p < 2:
        raise ConfigurationError("p must be >= 2")
    if n % p != 0:
        raise ConfigurationError(f"n={n} not divisible by p={p}")
    if not 1 <= k <= n // p:
        raise ConfigurationError(f"need 1 <= k <= n/p, got k={k}")
    return layers * (n * n // p + p * k * n)


def valid_k(n: int, p: int) -> tuple[int, float]:
    """Strict upper bounds on the phantom width k.

    Returns (comm_bound, compute_bound): k < comm_bound = n/p keeps the
    per-iteration communication below the tensor-parallel baseline;
    k < compute_bound = (n/p)(1 - 1/p) keeps the FLOP count below it.
    compute_bound < comm_bound always.
    """
    if p < 2:
        raise ConfigurationError("p must be >= 2")
    if n % p != 0:
        raise ConfigurationError(f"n={n} not divisible by p={p}")
    s = n // p
    return s, s * (p - 1) / p
