"""Why compressing cross-rank traffic saves energy per iteration.

Per-iteration energy is modeled as busy_watts * alpha + idle_watts * beta,
with alpha the compute seconds (exact FLOP counts over a device rate) and
beta the modeled collective time c1*log2(p) + c2*m per collective. The
phantom schedule moves k*batch elements per layer instead of n*batch, and
computes n^2/p + p*k*n multiply-accumulates per layer instead of n^2, so
both terms shrink whenever k is small enough.

Run:  python demos/03_cost_and_energy_model.py
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from phantomsim import (EnergyRates, energy_per_iteration, flops_pp_iteration,
                        flops_tp_iteration, default_comm_model, pp_model_size,
                        pp_schedule_beta, tp_model_size, tp_schedule_beta,
                        valid_k)

model = default_comm_model()
rates = EnergyRates(busy_watts=560.0, idle_watts=90.0, device_flops=1e12)

# === the k bounds: below compute_bound both alpha and beta shrink

n, layers, batch = 4096, 2, 8
print(f"width n={n}, {layers} layers, batch {batch}")
print(f"{'p':>4} {'comm_bound':>11} {'compute_bound':>14}")
for p in (2, 4, 8, 16):
    comm_bound, compute_bound = valid_k(n, p)
    print(f"{p:>4} {comm_bound:>11} {compute_bound:>14.0f}")

# === per-iteration costs across k at p=8

p = 8
flops_tp = flops_tp_iteration(n, p, layers, batch)
beta_tp = tp_schedule_beta(n, p, layers, batch, model)
e_tp = energy_per_iteration(rates, flops_tp / p / rates.device_flops, beta_tp)
print(f"\nbaseline tensor-parallel at p={p}: {flops_tp/1e9:.2f} GFLOP, "
      f"beta {beta_tp*1e3:.2f} ms, e {e_tp:.4f} J")
print(f"{'k':>6} {'GFLOP':>8} {'beta ms':>9} {'e J':>9} {'e ratio':>8}")
for k in (4, 16, 64, 256, 448):
    flops_pp = flops_pp_iteration(n, p, k, layers, batch)
    beta_pp = pp_schedule_beta(k, p, layers, batch, model)
    e_pp = energy_per_iteration(rates, flops_pp / p / rates.device_flops, beta_pp)
    print(f"{k:>6} {flops_pp/1e9:>8.2f} {beta_pp*1e3:>9.3f} {e_pp:>9.4f} {e_pp/e_tp:>8.3f}")

# === parameter counts behind the published wide-model table

print("\nmodel sizes at n=16384, 2 layers (millions of parameters):")
print(f"  tensor parallel, any p: {tp_model_size(16384, 2)/1e6:>6.0f}")
for p_, k_ in ((8, 16), (16, 6), (32, 4), (64, 2), (256, 4)):
    size = pp_model_size(16384, p_, k_, 2)
    print(f"  phantom p={p_:>3}, k={k_:>2}:     {size/1e6:>6.0f}")
