"""Command line harness.

Subcommands:

    train      run one sharded training experiment, write manifest,
               loss history and cost report
    gradcheck  finite-difference verification of all distributed gradients
    costmodel  FLOP / communication / energy tables over a config grid
    fit-comm   fit collective timing constants from measurements
    compare    train both modes to one target loss and compare energy

Every run writes a manifest sufficient to reproduce it bit for bit:
the fully resolved configuration plus a content hash of the cost-model
file. Exit codes: 0 success, 1 usage or configuration error,
2 verification failure, 3 runtime or training failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import sys
from pathlib import Path

from . import __version__
from .collectives import (default_model_path, fit_comm_model,
                          load_comm_model, load_measurements, save_comm_model)
from .core import Activation
from .checkpoint import save_model
from .energy import (EnergyRates, cost_report_csv, cost_report_text,
                     energy_per_iteration, flops_pp_iteration,
                     flops_tp_iteration, pp_schedule_beta, tp_schedule_beta,
                     alpha_seconds)
from .errors import (ConfigurationError, FitError, PhantomsimError,
                     ProtocolError, TrainingError)
from .phantom import init_phantom_model, pp_model_size, valid_k
from .tensor_parallel import init_tp_model, tp_model_size
from .training import TrainConfig, TrainResult, gen_dataset, train
from .verification import KINDS, check_gradients

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage problems; this project reserves 2 for
    verification failures, so usage errors exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def git_blob_hash(path: Path) -> str:
    """Content hash in git blob form: sha1("blob <len>\\0" + bytes)."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def _load_config_section(path: str | None, section: str) -> dict[str, str]:
    if not path:
        return {}
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"config file not found: {path}")
    if not parser.has_section(section):
        return {}
    return dict(parser.items(section))


def _resolve(args, file_values: dict[str, str], key: str, cast, default=None):
    """Command-line flags win over config-file values, which win over
    defaults."""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in file_values:
        raw = file_values[key]
        try:
            if cast is bool:
                return raw.strip().lower() in ("1", "true", "yes", "on")
            return cast(raw)
        except ValueError:
            raise ConfigurationError(f"config key {key!r}: cannot parse {raw!r}") from None
    return default


def _parse_rates(text: str) -> EnergyRates:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigurationError("--rates expects busy_watts,idle_watts,device_flops")
    try:
        return EnergyRates(float(parts[0]), float(parts[1]), float(parts[2]))
    except ValueError:
        raise ConfigurationError(f"--rates: cannot parse {text!r}") from None


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigurationError(f"cannot parse integer list {text!r}") from None


def _float_repr(x: float) -> str:
    return repr(float(x))


def write_manifest(path: Path, command: str, resolved: dict, comm_model_file: Path) -> None:
    lines = ["[manifest]",
             f"command = {command}",
             f"package_version = {__version__}",
             f"comm_model_file = {comm_model_file}",
             f"comm_model_hash = {git_blob_hash(comm_model_file)}"]
    for key in sorted(resolved):
        value = resolved[key]
        if isinstance(value, float):
            value = _float_repr(value)
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_loss_history(path: Path, result: TrainResult, iters_per_epoch: int) -> None:
    cost = result.cost
    alpha_epoch = cost.alpha_s * iters_per_epoch
    beta_epoch = cost.beta_s * iters_per_epoch
    e_epoch = cost.e_per_iteration_j * iters_per_epoch
    rows = ["epoch,global_loss,alpha_s,beta_s,energy_j"]
    for epoch, loss in enumerate(result.loss_history):
        rows.append(",".join([str(epoch), _float_repr(loss), _float_repr(alpha_epoch),
                              _float_repr(beta_epoch), _float_repr(e_epoch)]))
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def _train_config_from(args) -> tuple[TrainConfig, int, Path]:
    file_values = _load_config_section(args.config, "train")
    mode = _resolve(args, file_values, "mode", str)
    if mode is None:
        raise ConfigurationError("missing required key: mode")
    n = _resolve(args, file_values, "n", int)
    p = _resolve(args, file_values, "p", int)
    layers = _resolve(args, file_values, "layers", int)
    for key, value in (("n", n), ("p", p), ("layers", layers)):
        if value is None:
            raise ConfigurationError(f"missing required key: {key}")
    k = _resolve(args, file_values, "k", int, 0)
    if mode == "pp":
        comm_bound, _ = valid_k(n, p)
        if not 1 <= k < comm_bound:
            raise ConfigurationError(
                f"key k: k={k} violates valid_k(n={n}, p={p}) = [1, {comm_bound})")
    config = TrainConfig(
        mode=mode, n=n, p=p, layers=layers, k=k,
        batch=_resolve(args, file_values, "batch", int, 0),
        lr=_resolve(args, file_values, "lr", float, 0.01),
        optimizer=_resolve(args, file_values, "optimizer", str, "sgd"),
        target_loss=_resolve(args, file_values, "target-loss", float, None),
        max_epochs=_resolve(args, file_values, "max-epochs", int, 100),
        seed=_resolve(args, file_values, "seed", int, 0),
        loss_reduction=_resolve(args, file_values, "loss-reduction", str, "sum"),
        activation=Activation(_resolve(args, file_values, "activation", str, "relu")),
        scheduler="threads" if _resolve(args, file_values, "threads", bool, False) else "lockstep",
        include_loss_comm_in_beta=_resolve(args, file_values, "beta-includes-loss", bool, False),
    )
    config.validate()
    samples = _resolve(args, file_values, "samples", int, config.batch or 32)
    comm_model_file = Path(_resolve(args, file_values, "comm-model", str,
                                    str(default_model_path())))
    return config, samples, comm_model_file


def _resolved_dict(config: TrainConfig, samples: int, rates: EnergyRates) -> dict:
    return {
        "mode": config.mode, "n": config.n, "p": config.p, "k": config.k,
        "layers": config.layers, "batch": config.batch or samples,
        "samples": samples, "lr": config.lr, "optimizer": config.optimizer,
        "target_loss": "" if config.target_loss is None else config.target_loss,
        "max_epochs": config.max_epochs, "seed": config.seed,
        "loss_reduction": config.loss_reduction,
        "activation": config.activation.value, "scheduler": config.scheduler,
        "beta_includes_loss": config.include_loss_comm_in_beta,
        "busy_watts": rates.busy_watts, "idle_watts": rates.idle_watts,
        "device_flops": rates.device_flops,
    }


def cmd_train(args) -> int:
    config, samples, comm_model_file = _train_config_from(args)
    rates = _parse_rates(args.rates) if args.rates else EnergyRates()
    comm_model = load_comm_model(comm_model_file)
    out_dir = Path(args.out or "runs/train")
    out_dir.mkdir(parents=True, exist_ok=True)
    data = gen_dataset(config.n, samples, config.seed)
    result = train(config, data, comm_model, rates)
    write_manifest(out_dir / "manifest.ini", "train",
                   _resolved_dict(config, samples, rates), comm_model_file)
    batch = config.batch or samples
    _write_loss_history(out_dir / "loss_history.csv", result, samples // batch)
    (out_dir / "cost_report.ini").write_text(cost_report_text(result.cost), encoding="utf-8")
    (out_dir / "cost_report.csv").write_text(cost_report_csv(result.cost), encoding="utf-8")
    if args.save_model:
        if config.mode == "pp":
            model = init_phantom_model(config.n, config.p, config.k, config.layers,
                                       config.activation, config.seed)
        else:
            model = init_tp_model(config.n, config.p, config.layers,
                                  config.activation, config.seed)
        save_model(args.save_model, model)
    status = "converged" if result.converged else "not-converged"
    print(f"{config.mode} n={config.n} p={config.p} k={config.k} "
          f"epochs={result.epochs_run} final_loss={result.final_loss:.6g} {status}")
    print(f"wrote {out_dir}/manifest.ini, loss_history.csv, cost_report.ini")
    if config.target_loss is not None and not result.converged:
        print("warning: target loss not reached", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    file_values = _load_config_section(args.config, "gradcheck")
    n = _resolve(args, file_values, "n", int, 8)
    p = _resolve(args, file_values, "p", int, 2)
    k = _resolve(args, file_values, "k", int, 2)
    layers = _resolve(args, file_values, "layers", int, 2)
    seed = _resolve(args, file_values, "seed", int, 0)
    seeds_count = _resolve(args, file_values, "seeds", int, 5)
    activation = Activation(_resolve(args, file_values, "activation", str, "relu"))
    scheduler = "threads" if _resolve(args, file_values, "threads", bool, False) else "lockstep"
    result = check_gradients(n, p, k, layers, activation,
                             seeds=range(seed, seed + seeds_count),
                             scheduler=scheduler, inject=args.inject)
    report_lines = [f"max relative error {kind:13s} {result.max_errors[kind]:.3e}"
                    for kind in KINDS]
    report_lines.append(f"tolerance {result.tolerance:.0e}, redraws {result.redraws}")
    print("\n".join(report_lines))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        comm_model_file = Path(_resolve(args, file_values, "comm-model", str,
                                        str(default_model_path())))
        resolved = {"n": n, "p": p, "k": k, "layers": layers, "seed": seed,
                    "seeds": seeds_count, "activation": activation.value,
                    "scheduler": scheduler, "inject": args.inject or ""}
        write_manifest(out_dir / "manifest.ini", "gradcheck", resolved, comm_model_file)
        status = "PASS" if result.passed else "FAIL"
        (out_dir / "gradcheck.txt").write_text(
            "\n".join(report_lines) + f"\ngradcheck {status}\n", encoding="utf-8")
    if result.passed:
        print("gradcheck PASS")
        return EXIT_OK
    failing = [kind for kind in KINDS if result.max_errors[kind] > result.tolerance]
    print(f"gradcheck FAIL: {', '.join(failing)} above tolerance", file=sys.stderr)
    return EXIT_VERIFY


def cmd_costmodel(args) -> int:
    file_values = _load_config_section(args.config, "costmodel")
    ns = _parse_int_list(_resolve(args, file_values, "n", str, "256,1024"))
    ps_ = _parse_int_list(_resolve(args, file_values, "p", str, "2,4,8"))
    ks = _parse_int_list(_resolve(args, file_values, "k", str, "4,16"))
    layer_grid = _parse_int_list(_resolve(args, file_values, "layers", str, "2"))
    batch = _resolve(args, file_values, "batch", int, 1)
    rates = _parse_rates(args.rates) if args.rates else EnergyRates()
    comm_model_file = Path(_resolve(args, file_values, "comm-model", str,
                                    str(default_model_path())))
    comm_model = load_comm_model(comm_model_file)
    header = ("n,p,k,layers,batch,flops_pp,flops_tp,beta_pp_s,beta_tp_s,"
              "e_pp_j,e_tp_j,alpha_dominates,beta_dominates,energy_dominates,"
              "k_below_compute_bound,k_below_comm_bound,skip_reason")
    blank = "," * 11
    rows = []
    for n in ns:
        for p in ps_:
            for k in ks:
                for layers in layer_grid:
                    key = (n, p, k, layers)
                    if n % p != 0:
                        rows.append((key, f"{n},{p},{k},{layers},{batch}{blank},n not divisible by p"))
                        continue
                    comm_bound, compute_bound = valid_k(n, p)
                    if not 1 <= k <= comm_bound:
                        rows.append((key, f"{n},{p},{k},{layers},{batch}{blank},k outside [1, n/p]"))
                        continue
                    fpp = flops_pp_iteration(n, p, k, layers, batch)
                    ftp = flops_tp_iteration(n, p, layers, batch)
                    bpp = pp_schedule_beta(k, p, layers, batch, comm_model)
                    btp = tp_schedule_beta(n, p, layers, batch, comm_model)
                    epp = energy_per_iteration(rates, alpha_seconds(fpp, p, rates), bpp)
                    etp = energy_per_iteration(rates, alpha_seconds(ftp, p, rates), btp)
                    rows.append((key, ",".join(map(str, [
                        n, p, k, layers, batch, fpp, ftp,
                        _float_repr(bpp), _float_repr(btp),
                        _float_repr(epp), _float_repr(etp),
                        fpp < ftp, bpp < btp, epp < etp,
                        k < compute_bound, k < comm_bound, ""]))))
    rows.sort(key=lambda item: item[0])
    table = header + "\n" + "\n".join(text for _, text in rows) + "\n"
    print(table, end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "costmodel.csv").write_text(table, encoding="utf-8")
        resolved = {"n": ",".join(map(str, ns)), "p": ",".join(map(str, ps_)),
                    "k": ",".join(map(str, ks)),
                    "layers": ",".join(map(str, layer_grid)), "batch": batch,
                    "busy_watts": rates.busy_watts, "idle_watts": rates.idle_watts,
                    "device_flops": rates.device_flops}
        write_manifest(out_dir / "manifest.ini", "costmodel", resolved, comm_model_file)
    return EXIT_OK


def cmd_fit_comm(args) -> int:
    samples = load_measurements(args.measurements)
    model = fit_comm_model(samples)
    out_dir = Path(args.out or "runs/fit_comm")
    out_dir.mkdir(parents=True, exist_ok=True)
    out_file = out_dir / "comm_model.ini"
    save_comm_model(model, out_file)
    write_manifest(out_dir / "manifest.ini", "fit-comm",
                   {"measurements": args.measurements,
                    "measurements_hash": git_blob_hash(Path(args.measurements)),
                    "samples": len(samples)},
                   out_file)
    for kind, cost in model.costs.items():
        rmse = model.rmse_log2_us.get(kind, float("nan"))
        print(f"{kind.value:15s} c1={cost.c1:.6g} c2={cost.c2:.6g} "
              f"c3={cost.c3:.3g} rmse_log2_us={rmse:.3f}")
    print(f"wrote {out_file}")
    return EXIT_OK


def cmd_compare(args) -> int:
    file_values = _load_config_section(args.config, "compare")
    n = _resolve(args, file_values, "n", int)
    p = _resolve(args, file_values, "p", int)
    k = _resolve(args, file_values, "k", int)
    layers = _resolve(args, file_values, "layers", int)
    target = _resolve(args, file_values, "target-loss", float)
    for key, value in (("n", n), ("p", p), ("k", k), ("layers", layers),
                       ("target-loss", target)):
        if value is None:
            raise ConfigurationError(f"missing required key: {key}")
    seed = _resolve(args, file_values, "seed", int, 0)
    samples = _resolve(args, file_values, "samples", int, 32)
    batch = _resolve(args, file_values, "batch", int, 0)
    lr = _resolve(args, file_values, "lr", float, 0.01)
    max_epochs = _resolve(args, file_values, "max-epochs", int, 1000)
    reduction = _resolve(args, file_values, "loss-reduction", str, "sum")
    optimizer = _resolve(args, file_values, "optimizer", str, "sgd")
    activation = Activation(_resolve(args, file_values, "activation", str, "relu"))
    scheduler = "threads" if _resolve(args, file_values, "threads", bool, False) else "lockstep"
    rates = _parse_rates(args.rates) if args.rates else EnergyRates()
    comm_model_file = Path(_resolve(args, file_values, "comm-model", str,
                                    str(default_model_path())))
    comm_model = load_comm_model(comm_model_file)
    data = gen_dataset(n, samples, seed)

    def run(mode: str) -> tuple[TrainConfig, TrainResult]:
        config = TrainConfig(mode=mode, n=n, p=p, layers=layers,
                             k=k if mode == "pp" else 0, batch=batch, lr=lr,
                             optimizer=optimizer, target_loss=target,
                             max_epochs=max_epochs, seed=seed,
                             loss_reduction=reduction, activation=activation,
                             scheduler=scheduler)
        return config, train(config, data, comm_model, rates)

    results = dict(pp=run("pp"), tp=run("tp"))
    header = ("mode,p,k,model_size,converged,epochs,final_loss,"
              "e_per_iteration_j,energy_total_j")
    lines = [header]
    for mode in sorted(results):  # stable (mode, p, k) order
        config, result = results[mode]
        size = (pp_model_size(n, p, k, layers) if mode == "pp"
                else tp_model_size(n, layers))
        lines.append(",".join(map(str, [
            mode, p, config.k, size, result.converged, result.epochs_run,
            _float_repr(result.final_loss),
            _float_repr(result.cost.e_per_iteration_j),
            _float_repr(result.cost.energy_total_j)])))
    both_converged = all(res.converged for _, res in results.values())
    if both_converged:
        ratio = (results["pp"][1].cost.energy_total_j
                 / results["tp"][1].cost.energy_total_j)
        lines.append(f"# energy_ratio_pp_over_tp = {_float_repr(ratio)}")
    else:
        lines.append("# not all runs converged; energy ratio omitted")
    table = "\n".join(lines) + "\n"
    print(table, end="")
    out_dir = Path(args.out or "runs/compare")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "comparison.csv").write_text(table, encoding="utf-8")
    resolved = {"n": n, "p": p, "k": k, "layers": layers, "target_loss": target,
                "seed": seed, "samples": samples, "batch": batch or samples,
                "lr": lr, "max_epochs": max_epochs, "loss_reduction": reduction,
                "optimizer": optimizer, "activation": activation.value,
                "scheduler": scheduler, "busy_watts": rates.busy_watts,
                "idle_watts": rates.idle_watts, "device_flops": rates.device_flops}
    write_manifest(out_dir / "manifest.ini", "compare", resolved, comm_model_file)
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="phantomsim",
                     description="Sharded FFN training simulator with energy cost models")
    parser.add_argument("--version", action="version", version=f"phantomsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p_):
        p_.add_argument("--config", help="INI config file; flags override its values")
        p_.add_argument("--out", help="output directory")
        p_.add_argument("--seed", type=int)
        p_.add_argument("--comm-model", dest="comm_model",
                        help="cost-model file (default: packaged constants)")
        p_.add_argument("--rates", help="busy_watts,idle_watts,device_flops")
        p_.add_argument("--threads", action="store_const", const=True, default=None,
                        help="run one concurrent task per rank instead of lockstep")

    t = sub.add_parser("train", help="run one training experiment")
    add_common(t)
    t.add_argument("--mode", choices=("pp", "tp"))
    t.add_argument("--n", type=int)
    t.add_argument("--p", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--samples", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=("sgd", "adam"))
    t.add_argument("--target-loss", dest="target_loss", type=float)
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--loss-reduction", dest="loss_reduction", choices=("sum", "mean"))
    t.add_argument("--activation", choices=("relu", "identity"))
    t.add_argument("--save-model", dest="save_model", help="write a checkpoint here")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    add_common(g)
    g.add_argument("--n", type=int)
    g.add_argument("--p", type=int)
    g.add_argument("--k", type=int)
    g.add_argument("--layers", type=int)
    g.add_argument("--seeds", type=int, help="number of seeded instances")
    g.add_argument("--activation", choices=("relu", "identity"))
    g.add_argument("--inject", choices=KINDS,
                   help="testing hook: corrupt one gradient kind, check must fail")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("costmodel", help="cost tables over a config grid")
    add_common(c)
    c.add_argument("--n", help="comma list of widths")
    c.add_argument("--p", help="comma list of world sizes")
    c.add_argument("--k", help="comma list of phantom widths")
    c.add_argument("--layers", help="comma list of depths")
    c.add_argument("--batch", type=int)
    c.set_defaults(func=cmd_costmodel)

    f = sub.add_parser("fit-comm", help="fit collective timing constants")
    add_common(f)
    f.add_argument("--measurements", required=True,
                   help="CSV with header collective,m,p,time_us")
    f.set_defaults(func=cmd_fit_comm)

    m = sub.add_parser("compare", help="fixed-loss energy comparison of both modes")
    add_common(m)
    m.add_argument("--n", type=int)
    m.add_argument("--p", type=int)
    m.add_argument("--k", type=int)
    m.add_argument("--layers", type=int)
    m.add_argument("--batch", type=int)
    m.add_argument("--samples", type=int)
    m.add_argument("--lr", type=float)
    m.add_argument("--optimizer", choices=("sgd", "adam"))
    m.add_argument("--target-loss", dest="target_loss", type=float)
    m.add_argument("--max-epochs", dest="max_epochs", type=int)
    m.add_argument("--loss-reduction", dest="loss_reduction", choices=("sum", "mean"))
    m.add_argument("--activation", choices=("relu", "identity"))
    m.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ProtocolError, FitError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except PhantomsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
