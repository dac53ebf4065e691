"""Gradient verification suite.

Checks every distributed gradient (bias, local, compressor, decompressor,
and the per-layer errors) against central finite differences of the global
loss. The differentiated loss is evaluated through the dense effective-
weight twin, which follows a completely separate code path from the
sharded implementation; the suite first asserts that the distributed and
dense losses agree, then differences the dense path.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .collectives import Communicator
from .core import Activation, substream
from .errors import ConfigurationError
from .phantom import init_phantom_model
from .reference import (dense_forward, dense_loss, finite_diff_grad,
                        phantom_dense_twin, relative_error)
from .training import pp_iteration

KINDS = ("bias", "local", "compressor", "decompressor", "delta")


@dataclass
class GradCheckResult:
    """Max relative error per matrix kind over the whole suite."""

    max_errors: dict[str, float]
    seeds: list[int]
    redraws: int
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_errors.values())

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def _draw_instance(n, p, k, layers, activation, seed, batch):
    """Model plus data; ReLU instances are re-drawn until every
    pre-activation magnitude clears 1e-3, keeping finite differences away
    from the kink."""
    redraw = 0
    while True:
        model = init_phantom_model(n, p, k, layers, activation, seed + 1000 * redraw)
        rng = substream(seed, "gradcheck", redraw)
        x = rng.standard_normal((n, batch))
        y = rng.standard_normal((n, batch))
        if activation is Activation.IDENTITY:
            return model, x, y, redraw
        _, tape = dense_forward(phantom_dense_twin(model), x)
        if min(np.min(np.abs(entry.preact)) for entry in tape) >= 1e-3:
            return model, x, y, redraw
        redraw += 1
        if redraw > 200:
            raise ConfigurationError("could not draw a kink-free instance")


def check_gradients(n: int, p: int, k: int, layers: int,
                    activation: Activation = Activation.RELU,
                    seeds=range(20), batch: int = 2, h: float = 1e-5,
                    tolerance: float | None = None, scheduler: str = "lockstep",
                    inject: str | None = None) -> GradCheckResult:
    """Finite-difference check of all distributed gradients.

    ``inject`` corrupts the named gradient kind before comparison (a test
    hook to prove the check detects errors). Default tolerances: 1e-6 for
    identity, 1e-5 for relu (kinks limit difference quality).
    """
    if n > 64:
        raise ConfigurationError("gradient checks are meant for n <= 64")
    if inject is not None and inject not in KINDS:
        raise ConfigurationError(f"inject must be one of {KINDS}")
    if tolerance is None:
        tolerance = 1e-6 if activation is Activation.IDENTITY else 1e-5
    s = n // p
    max_errors = {kind: 0.0 for kind in KINDS}
    total_redraws = 0
    seeds = list(seeds)
    for seed in seeds:
        model, x, y, redraws = _draw_instance(n, p, k, layers, activation, seed, batch)
        total_redraws += redraws
        comm = Communicator(p, mode=scheduler)
        outs = comm.run(lambda c, r: pp_iteration(
            c, r, model.rank_layers[r], model.activations,
            x[r * s:(r + 1) * s], y[r * s:(r + 1) * s]))
        twin = phantom_dense_twin(model)
        base = dense_loss(twin, x, y)
        if abs(outs[0].global_loss - base) > 1e-9 * max(1.0, abs(base)):
            raise ConfigurationError(
                "distributed and dense losses disagree; forward paths diverged")

        def loss_with(rank, layer, name, theta, src=None):
            patched = copy.deepcopy(model)
            lay = patched.rank_layers[rank][layer]
            if name == "local":
                lay.local[:] = theta.reshape(lay.local.shape)
            elif name == "compressor":
                lay.compressor[:] = theta.reshape(lay.compressor.shape)
            elif name == "bias":
                lay.bias[:] = theta
            else:
                lay.decompressors[src][:] = theta.reshape(lay.decompressors[src].shape)
            return dense_loss(phantom_dense_twin(patched), x, y)

        def polluted(kind, grad):
            if inject == kind:
                return grad + 1.0
            return grad

        for r in range(p):
            for l in range(layers):
                layer = model.rank_layers[r][l]
                grads = outs[r].grads[l]
                for kind, arr, grad in (("local", layer.local, grads.local),
                                        ("compressor", layer.compressor, grads.compressor),
                                        ("bias", layer.bias, grads.bias)):
                    fd = finite_diff_grad(
                        lambda t, r=r, l=l, kind=kind: loss_with(r, l, kind, t),
                        arr.ravel(), h)
                    err = relative_error(polluted(kind, grad).ravel(), fd)
                    max_errors[kind] = max(max_errors[kind], err)
                for i in sorted(layer.decompressors):
                    fd = finite_diff_grad(
                        lambda t, r=r, l=l, i=i: loss_with(r, l, "decompressor", t, i),
                        layer.decompressors[i].ravel(), h)
                    err = relative_error(polluted("decompressor", grads.decompressors[i]).ravel(), fd)
                    max_errors["decompressor"] = max(max_errors["decompressor"], err)

        # per-layer errors dLoss/d(preact): difference the dense loss against
        # an additive preactivation offset at zero
        for l in range(layers):
            distributed = np.concatenate([outs[r].deltas[l] for r in range(p)], axis=0)
            zeros = np.zeros((n, x.shape[1]))

            def loss_with_offset(theta, l=l):
                return dense_loss(twin, x, y, preact_offsets={l: theta.reshape(zeros.shape)})

            fd = finite_diff_grad(loss_with_offset, zeros.ravel(), h)
            err = relative_error(polluted("delta", distributed).ravel(), fd)
            max_errors["delta"] = max(max_errors["delta"], err)
    return GradCheckResult(max_errors, seeds, total_redraws, tolerance)
