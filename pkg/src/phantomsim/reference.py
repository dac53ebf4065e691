"""Single-process dense reference model and numerical differentiation
oracles.

The dense path shares no code with the sharded forward/backward
implementations, so agreement between the two is meaningful evidence:
a phantom model equals a dense model on its effective weights (diagonal
blocks from the local matrices, off-diagonal blocks from the
decompressor @ compressor products), and a tensor-parallel model equals
the dense model on its concatenated row blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Activation
from .errors import ConfigurationError, OracleError
from .phantom import PhantomModel
from .tensor_parallel import full_layer_weight


@dataclass
class DenseFFN:
    """Unsharded FFN with square layers of uniform width."""

    weights: list[np.ndarray]   # (n, n) each
    biases: list[np.ndarray]    # (n,) each
    activations: list[Activation]

    @property
    def n(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_count(self) -> int:
        return len(self.weights)


@dataclass
class DenseTapeEntry:
    inputs: np.ndarray
    preact: np.ndarray


def init_dense_ffn(n: int, layers: int,
                   activation: Activation | list[Activation] = Activation.RELU,
                   seed: int = 0) -> DenseFFN:
    """Dense model drawn from the same per-layer streams the sharded
    tensor-parallel init uses, so both start from identical weights."""
    acts = list(activation) if isinstance(activation, (list, tuple)) else [activation] * layers
    weights = [full_layer_weight(n, l, seed) for l in range(layers)]
    biases = [np.zeros(n) for _ in range(layers)]
    return DenseFFN(weights, biases, acts)


def dense_forward(model: DenseFFN, x: np.ndarray,
                  preact_offsets: dict[int, np.ndarray] | None = None
                  ) -> tuple[np.ndarray, list[DenseTapeEntry]]:
    """Forward pass sigma(bias + W @ y) per layer, returning the output and
    the tape of (inputs, preactivation) entries.

    ``preact_offsets`` adds a fixed matrix to the named layers'
    preactivations; differentiating the loss against such an offset at zero
    gives the error with respect to that preactivation.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != model.n:
        raise ConfigurationError(f"input must be ({model.n}, batch), got {x.shape}")
    tape: list[DenseTapeEntry] = []
    y = x
    for l in range(model.layer_count):
        preact = model.weights[l] @ y + model.biases[l][:, None]
        if preact_offsets and l in preact_offsets:
            preact = preact + preact_offsets[l]
        tape.append(DenseTapeEntry(inputs=y, preact=preact))
        y = model.activations[l].apply(preact)
    return y, tape


def dense_backward(model: DenseFFN, tape: list[DenseTapeEntry],
                   delta_out: np.ndarray
                   ) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Standard backprop from the output error delta_out = dLoss/dz_last.

    Returns (weight grads, bias grads, per-layer deltas)."""
    L = model.layer_count
    grads_w = [None] * L
    grads_b = [None] * L
    deltas = [None] * L
    delta = delta_out
    for l in range(L - 1, -1, -1):
        deltas[l] = delta
        grads_w[l] = delta @ tape[l].inputs.T
        grads_b[l] = delta.sum(axis=1)
        if l > 0:
            delta = (model.weights[l].T @ delta) * model.activations[l - 1].grad(tape[l - 1].preact)
    return grads_w, grads_b, deltas


def dense_loss(model: DenseFFN, x: np.ndarray, y_true: np.ndarray,
               reduction: str = "sum",
               preact_offsets: dict[int, np.ndarray] | None = None) -> float:
    """Half squared error of the dense model, optionally divided by batch."""
    y, _ = dense_forward(model, x, preact_offsets)
    loss = 0.5 * float(np.sum((y - y_true) ** 2))
    if reduction == "mean":
        loss /= x.shape[1]
    return loss


def dense_train(model: DenseFFN, x: np.ndarray, y_true: np.ndarray, lr: float,
                epochs: int, reduction: str = "sum") -> list[float]:
    """Plain full-batch gradient descent on the dense model, in place.

    Returns the per-epoch loss history (loss of the state each update was
    computed from), mirroring the sharded training loop's bookkeeping.
    """
    history = []
    batch = x.shape[1]
    for _ in range(epochs):
        y, tape = dense_forward(model, x)
        diff = y - y_true
        loss = 0.5 * float(np.sum(diff * diff))
        if reduction == "mean":
            loss /= batch
        history.append(loss)
        delta = diff * model.activations[-1].grad(tape[-1].preact)
        if reduction == "mean":
            delta = delta / batch
        grads_w, grads_b, _ = dense_backward(model, tape, delta)
        for l in range(model.layer_count):
            model.weights[l] -= lr * grads_w[l]
            model.biases[l] -= lr * grads_b[l]
    return history


# ----------------------------------------------------------------------
# phantom model equivalents


def effective_weight(model: PhantomModel, layer_index: int) -> np.ndarray:
    """The dense n x n matrix a phantom layer implicitly applies: diagonal
    blocks are the local matrices, block (row j, col i) is
    decompressor_{i->j} @ compressor_i, a product of rank <= k."""
    if not 0 <= layer_index < model.layer_count:
        raise ConfigurationError(f"layer {layer_index} out of range")
    s = model.shard_width
    weight = np.zeros((model.n, model.n))
    for j in range(model.p):
        layer = model.rank_layers[j][layer_index]
        weight[j * s:(j + 1) * s, j * s:(j + 1) * s] = layer.local
        for i, dec in layer.decompressors.items():
            comp = model.rank_layers[i][layer_index].compressor
            weight[j * s:(j + 1) * s, i * s:(i + 1) * s] = dec @ comp
    return weight


def effective_bias(model: PhantomModel, layer_index: int) -> np.ndarray:
    s = model.shard_width
    bias = np.zeros(model.n)
    for j in range(model.p):
        bias[j * s:(j + 1) * s] = model.rank_layers[j][layer_index].bias
    return bias


def phantom_dense_twin(model: PhantomModel) -> DenseFFN:
    """Dense model computing exactly the same function as the phantom one."""
    weights = [effective_weight(model, l) for l in range(model.layer_count)]
    biases = [effective_bias(model, l) for l in range(model.layer_count)]
    return DenseFFN(weights, biases, list(model.activations))


# ----------------------------------------------------------------------
# numerical differentiation


def finite_diff_grad(loss_fn, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(theta + h e_i) - f(theta - h e_i)) / 2h."""
    if h <= 0:
        raise ConfigurationError("finite difference step must be positive")
    theta = np.asarray(theta, dtype=np.float64).ravel()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        f_up = float(loss_fn(up))
        f_down = float(loss_fn(down))
        if not (np.isfinite(f_up) and np.isfinite(f_down)):
            raise OracleError(f"non-finite loss while perturbing coordinate {i}")
        grad[i] = (f_up - f_down) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    """max over entries of |a - b| / max(1e-8, |a|, |b|); the floor avoids
    division blowup at true zeros."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
