"""Exact FLOP accounting, modeled communication seconds, and the
busy/idle energy model.

Energy per iteration is busy_watts * alpha + idle_watts * beta per device,
where alpha is one rank's compute seconds (FLOPs / device rate, ranks are
symmetric) and beta is the modeled time its interconnect collectives take.
All phantom-vs-tensor comparisons are rate invariant because both sides
share the same divisor, and fleet totals just scale by p.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

from .collectives import Collective, CommCostModel, Direction, comm_time
from .errors import ConfigurationError


@dataclass(frozen=True)
class EnergyRates:
    """Device power rates and compute throughput.

    busy_watts is drawn while computing, idle_watts while blocked on the
    interconnect; busy must exceed idle. device_flops converts FLOP counts
    into compute seconds.
    """

    busy_watts: float = 560.0
    idle_watts: float = 90.0
    device_flops: float = 1e12

    def __post_init__(self):
        if not self.busy_watts > self.idle_watts > 0:
            raise ConfigurationError("need busy_watts > idle_watts > 0")
        if self.device_flops <= 0:
            raise ConfigurationError("device_flops must be positive")


@dataclass
class CostReport:
    """Per-iteration and whole-run modeled costs of one training run."""

    mode: str
    flops_per_iteration_rank: int
    flops_per_iteration_total: int
    alpha_s: float
    beta_s: float
    e_per_iteration_j: float
    nu: int
    energy_total_j: float
    bytes_communicated: int


def _validate_shape(n: int, p: int, layers: int, batch: int) -> None:
    if p < 1 or n < 1 or layers < 1 or batch < 1:
        raise ConfigurationError("n, p, layers and batch must be positive")
    if n % p != 0:
        raise ConfigurationError(f"n={n} not divisible by p={p}")


def flops_pp_iteration(n: int, p: int, k: int, layers: int, batch: int) -> int:
    """Exact FLOPs of one phantom-parallel iteration, summed over ranks.

    With s = n/p and b = batch, each rank performs per layer:

      forward   2*s*s*b (local) + 2*k*s*b (compress) + 2*(p-1)*k*s*b
                (decompress) + (p-1)*s*b (accumulate) + 2*s*b (bias+act)
      backward  2*(p-1)*k*s*b (error compression) + s*b (bias grad)
                + 2*s*s*b (local grad) + 2*k*s*b (compressor grad)
                + 2*(p-1)*k*s*b (decompressor grads)

    plus the error recurrence 2*s*s*b + 2*k*s*b + 3*s*b for each of the
    layers-1 transitions and the output error 3*s*b once. The scalar loss
    evaluation and the optimizer update are monitoring/update work outside
    the iteration model and are not counted (counts assume sum reduction;
    mean reduction adds one s*b rescale of the output error).
    """
    _validate_shape(n, p, layers, batch)
    s = n // p
    if not 1 <= k <= s:
        raise ConfigurationError(f"need 1 <= k <= n/p, got k={k}")
    b = batch
    forward = layers * b * (2 * s * s + 2 * k * s + 2 * (p - 1) * k * s + (p - 1) * s + 2 * s)
    backward = layers * b * (2 * (p - 1) * k * s + s + 2 * s * s + 2 * k * s + 2 * (p - 1) * k * s)
    recurrence = (layers - 1) * b * (2 * s * s + 2 * k * s + 3 * s)
    output_delta = 3 * s * b
    return p * (forward + backward + recurrence + output_delta)


def flops_tp_iteration(n: int, p: int, layers: int, batch: int) -> int:
    """Exact FLOPs of one tensor-parallel iteration, summed over ranks.

    With s = n/p and b = batch, each rank performs per layer 2*s*n*b + 2*s*b
    forward (row-block product, bias, activation) and 2*s*n*b + s*b +
    2*n*s*b backward (weight grad, bias grad, input-grad contribution),
    plus 2*s*b per recurrence transition and the output error 3*s*b once.
    The total is independent of p.
    """
    _validate_shape(n, p, layers, batch)
    s = n // p
    b = batch
    forward = layers * b * (2 * s * n + 2 * s)
    backward = layers * b * (2 * s * n + s + 2 * n * s)
    recurrence = (layers - 1) * b * 2 * s
    output_delta = 3 * s * b
    return p * (forward + backward + recurrence + output_delta)


def alpha_seconds(flops_total: int, p: int, rates: EnergyRates) -> float:
    """One rank's compute seconds for a count summed over p symmetric ranks."""
    if p < 1:
        raise ConfigurationError("p must be >= 1")
    return flops_total / p / rates.device_flops


def comm_time_iteration(records, model: CommCostModel, p: int, *,
                        include_loss: bool = False) -> float:
    """Modeled communication seconds of one iteration's record stream.

    Sums comm_time over the records, converted microseconds to seconds.
    Records tagged as the scalar loss reduction are excluded unless
    ``include_loss`` is set. An empty stream yields zero with a warning.
    """
    records = list(records)
    if not records:
        warnings.warn("comm_time_iteration called with no records", stacklevel=2)
        return 0.0
    total_us = 0.0
    for record in records:
        if record.direction is Direction.LOSS and not include_loss:
            continue
        total_us += comm_time(model, record.collective, record.message_size, p)
    return total_us * 1e-6


def pp_schedule_beta(k: int, p: int, layers: int, batch: int,
                     model: CommCostModel, *, include_loss: bool = False) -> float:
    """Analytic per-iteration communication seconds of the phantom schedule:
    one all-gather and one reduce-scatter of k*batch elements per layer."""
    m = k * batch
    per_layer = (comm_time(model, Collective.ALL_GATHER, m, p)
                 + comm_time(model, Collective.REDUCE_SCATTER, m, p))
    total_us = layers * per_layer
    if include_loss:
        total_us += comm_time(model, Collective.ALL_REDUCE, 1, p)
    return total_us * 1e-6


def tp_schedule_beta(n: int, p: int, layers: int, batch: int,
                     model: CommCostModel, *, include_loss: bool = False) -> float:
    """Analytic per-iteration communication seconds of the tensor-parallel
    schedule: broadcast (n*batch) + all-gather (n/p*batch) forward,
    all-reduce (n*batch) + reduce-scatter (n/p*batch) backward, per layer."""
    _validate_shape(n, p, layers, batch)
    s = n // p
    per_layer = (comm_time(model, Collective.BROADCAST, n * batch, p)
                 + comm_time(model, Collective.ALL_GATHER, s * batch, p)
                 + comm_time(model, Collective.ALL_REDUCE, n * batch, p)
                 + comm_time(model, Collective.REDUCE_SCATTER, s * batch, p))
    total_us = layers * per_layer
    if include_loss:
        total_us += comm_time(model, Collective.ALL_REDUCE, 1, p)
    return total_us * 1e-6


def energy_per_iteration(rates: EnergyRates, alpha_s: float, beta_s: float) -> float:
    """Joules per device per iteration: busy_watts * alpha + idle_watts * beta."""
    if alpha_s < 0 or beta_s < 0:
        raise ConfigurationError("alpha and beta must be nonnegative")
    return rates.busy_watts * alpha_s + rates.idle_watts * beta_s


def total_energy(e_per_iteration: float, nu: int) -> float:
    """Whole-run energy nu * e for nu iterations to the target loss."""
    if nu < 0:
        raise ConfigurationError("nu must be >= 0")
    return nu * e_per_iteration


def records_bytes(records) -> int:
    """Per-rank message payload bytes summed over a record stream
    (doubles, 8 bytes per element)."""
    return 8 * sum(r.message_size for r in records)


def build_cost_report(mode: str, n: int, p: int, k: int, layers: int, batch: int,
                      nu: int, rates: EnergyRates, model: CommCostModel, *,
                      iteration_records=None, include_loss: bool = False,
                      total_records=None) -> CostReport:
    """Assemble a CostReport from closed-form FLOPs and either one
    iteration's records or, when none ran, the analytic schedule."""
    if mode == "pp":
        flops_total = flops_pp_iteration(n, p, k, layers, batch)
    elif mode == "tp":
        flops_total = flops_tp_iteration(n, p, layers, batch)
    else:
        raise ConfigurationError(f"unknown mode {mode!r}")
    alpha = alpha_seconds(flops_total, p, rates)
    if iteration_records:
        beta = comm_time_iteration(iteration_records, model, p, include_loss=include_loss)
    elif mode == "pp":
        beta = pp_schedule_beta(k, p, layers, batch, model, include_loss=include_loss)
    else:
        beta = tp_schedule_beta(n, p, layers, batch, model, include_loss=include_loss)
    e_iter = energy_per_iteration(rates, alpha, beta)
    return CostReport(
        mode=mode,
        flops_per_iteration_rank=flops_total // p,
        flops_per_iteration_total=flops_total,
        alpha_s=alpha,
        beta_s=beta,
        e_per_iteration_j=e_iter,
        nu=nu,
        energy_total_j=total_energy(e_iter, nu),
        bytes_communicated=records_bytes(total_records) if total_records is not None else 0,
    )


def cost_report_text(report: CostReport) -> str:
    """Key-value serialization of a CostReport."""
    lines = ["[cost_report]"]
    for name in ("mode", "flops_per_iteration_rank", "flops_per_iteration_total",
                 "alpha_s", "beta_s", "e_per_iteration_j", "nu",
                 "energy_total_j", "bytes_communicated"):
        value = getattr(report, name)
        lines.append(f"{name} = {value!r}" if isinstance(value, float) else f"{name} = {value}")
    return "\n".join(lines) + "\n"


def cost_report_csv(report: CostReport) -> str:
    """Single-row delimited serialization of a CostReport."""
    names = ["mode", "flops_per_iteration_rank", "flops_per_iteration_total",
             "alpha_s", "beta_s", "e_per_iteration_j", "nu",
             "energy_total_j", "bytes_communicated"]
    values = [repr(getattr(report, n)) if isinstance(getattr(report, n), float)
              else str(getattr(report, n)) for n in names]
    return ",".join(names) + "\n" + ",".join(values) + "\n"
