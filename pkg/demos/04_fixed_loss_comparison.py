"""Train both modes to one target loss and compare modeled energy.

The comparison protocol: pick a target as 1.05x the loss a dense reference
reaches after 200 epochs, then train the tensor-parallel baseline and the
phantom model on the same dataset, seed and learning rate until each hits
the target. Total energy is iterations x per-iteration energy, so the
smaller phantom model wins if it converges in comparable epoch counts.

Run:  python demos/04_fixed_loss_comparison.py   (about 15 seconds)
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from phantomsim import (Activation, TrainConfig, dense_train, gen_dataset,
                        init_dense_ffn, pp_model_size, tp_model_size, train)

n, p, k, layers = 256, 4, 8, 2
samples, lr, seed = 256, 1e-4, 0

data = gen_dataset(n, samples, seed)
dense = init_dense_ffn(n, layers, Activation.RELU, seed)
history = dense_train(dense, data.inputs, data.targets, lr, 200, reduction="mean")
target = 1.05 * history[-1]
print(f"dense reference: epoch-0 loss {history[0]:.1f}, epoch-199 loss {history[-1]:.1f}")
print(f"shared target loss: {target:.1f}\n")

shared = dict(n=n, p=p, layers=layers, lr=lr, target_loss=target,
              max_epochs=1000, seed=seed, loss_reduction="mean")
results = {
    "tp": train(TrainConfig(mode="tp", **shared), data),
    "pp": train(TrainConfig(mode="pp", k=k, **shared), data),
}

sizes = {"tp": tp_model_size(n, layers), "pp": pp_model_size(n, p, k, layers)}
print(f"{'mode':>4} {'params':>9} {'epochs':>7} {'final loss':>11} "
      f"{'e/iter J':>9} {'total J':>9}")
for mode in ("tp", "pp"):
    res = results[mode]
    print(f"{mode:>4} {sizes[mode]:>9} {res.epochs_run:>7} {res.final_loss:>11.2f} "
          f"{res.cost.e_per_iteration_j:>9.4f} {res.cost.energy_total_j:>9.2f}")

ratio = results["pp"].cost.energy_total_j / results["tp"].cost.energy_total_j
print(f"\nphantom / tensor energy ratio: {ratio:.2f}")
print("the same experiment is available as: "
      "phantomsim compare --n 256 --p 4 --k 8 --layers 2 ...")
