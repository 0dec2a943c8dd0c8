"""Command-line interface.

Subcommands map one-to-one onto the experiment harness and the federation
runners. Exit codes: 0 success, 2 config error, 3 data error, 4 protocol
error, 5 calibration error.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import experiments, federation, synth
from .config import load_config, with_updates
from .data import (
    HEART_SCHEMA,
    encoded_width,
    integrate,
    load_csv,
    read_canonical,
    write_canonical,
)
from .errors import ConfigError, DpflError
from .nn import serialize_params

_KNOWN_SITES = ("cleveland", "hungarian", "switzerland", "va")


def _infer_site(path: str) -> str:
    name = Path(path).name.lower()
    for site in _KNOWN_SITES:
        if site in name:
            return site
    return Path(path).stem


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse float list {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse int list {text!r}") from None


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--data", help="canonical dataset CSV (overrides config)")
    parser.add_argument("--dataset", choices=("cleveland", "uci", "integrated"))
    parser.add_argument("--seed", type=int, help="single seed (overrides seed list)")
    parser.add_argument("--out", help="output CSV path")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--optimizer", choices=("sgd", "adam"))
    parser.add_argument("--mode", choices=("centralized", "federated"))
    parser.add_argument("--clients", type=int)
    parser.add_argument("--model", choices=("mlp", "logreg"))
    dp = parser.add_mutually_exclusive_group()
    dp.add_argument("--target-epsilon", type=float)
    dp.add_argument("--noise-multiplier", type=float)
    dp.add_argument("--no-dp", action="store_true")
    parser.add_argument("--delta", type=float)
    parser.add_argument("--clip-norm", type=float)
    parser.add_argument("--sampling", choices=("poisson", "fixed"))


def _config_from_args(args) -> "experiments.ExperimentConfig":
    overrides = {}
    mapping = {
        "data": "data_path",
        "dataset": "dataset",
        "out": "out",
        "epochs": "epochs",
        "batch_size": "batch_size",
        "lr": "lr",
        "optimizer": "optimizer",
        "mode": "mode",
        "clients": "clients",
        "model": "model",
        "delta": "delta",
        "clip_norm": "clip_norm",
        "sampling": "sampling",
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    if getattr(args, "no_dp", False):
        overrides["dp"] = "no-dp"
    elif getattr(args, "target_epsilon", None) is not None:
        overrides["dp"] = "target"
        overrides["target_epsilon"] = args.target_epsilon
    elif getattr(args, "noise_multiplier", None) is not None:
        overrides["dp"] = "sigma"
        overrides["noise_multiplier"] = args.noise_multiplier
    return load_config(getattr(args, "config", None), overrides)


def _cmd_prepare_data(args) -> int:
    if args.dataset == "cleveland" and len(args.input) != 1:
        raise ConfigError("cleveland expects exactly one input file")
    tables = [
        load_csv(path, HEART_SCHEMA, source_tag=_infer_site(path))
        for path in args.input
    ]
    table = tables[0] if len(tables) == 1 else integrate(tables)
    write_canonical(table, args.out)
    print(f"wrote {table.n_rows} rows to {args.out}")
    return 0


def _emit_and_report(cfg, rows) -> int:
    if cfg.out:
        experiments.emit_csv(rows, cfg.out)
        print(f"wrote {len(rows)} trajectory rows to {cfg.out}")
    finals = [r for r in rows if r.epoch == max(x.epoch for x in rows)]
    if finals:
        mean_acc = float(np.mean([r.test_acc for r in finals]))
        print(f"final test accuracy (mean over seeds): {mean_acc:.4f}")
    return 0


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    rows = experiments.run_training(cfg)
    return _emit_and_report(cfg, rows)


def _cmd_sweep_epsilon(args) -> int:
    cfg = _config_from_args(args)
    groups = experiments.sweep_epsilon(cfg, _float_list(args.targets))
    rows = [row for rows in groups.values() for row in rows]
    for target in sorted(groups):
        finals = [r for r in groups[target] if r.epoch == cfg.epochs]
        acc = float(np.mean([r.test_acc for r in finals]))
        print(f"target epsilon {target:g}: final accuracy {acc:.4f}")
    return _emit_and_report(cfg, rows)


def _cmd_sweep_epochs(args) -> int:
    cfg = _config_from_args(args)
    counts = _int_list(args.epoch_counts)
    groups = experiments.sweep_epochs(cfg, counts)
    rows = [row for rows in groups.values() for row in rows]
    for count in counts:
        finals = [r for r in groups[count] if r.epoch == count]
        acc = float(np.mean([r.test_acc for r in finals]))
        print(f"{count} epochs: final accuracy {acc:.4f}")
    if cfg.out:
        experiments.emit_csv(rows, cfg.out)
        print(f"wrote {len(rows)} trajectory rows to {cfg.out}")
    return 0


def _cmd_compare_optimizers(args) -> int:
    cfg = _config_from_args(args)
    groups = experiments.compare_optimizers(cfg)
    rows = [row for rows in groups.values() for row in rows]
    for opt, opt_rows in groups.items():
        finals = [r for r in opt_rows if r.epoch == cfg.epochs]
        acc = float(np.mean([r.test_acc for r in finals]))
        print(f"{opt}: final accuracy {acc:.4f}")
    return _emit_and_report(cfg, rows)


def _cmd_grid_search(args) -> int:
    cfg = _config_from_args(args)
    best, cells = experiments.grid_search(cfg)
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8") as fh:
            fh.write("lr,batch_size,dropout,mean_val_accuracy\n")
            for c in cells:
                fh.write(
                    f"{c.lr:.6g},{c.batch_size},{c.dropout:.6g},"
                    f"{c.mean_val_accuracy:.6g}\n"
                )
        print(f"wrote {len(cells)} grid cells to {cfg.out}")
    print(
        f"best cell: lr={best.lr:g} batch={best.batch_size} "
        f"dropout={best.dropout:g} val_acc={best.mean_val_accuracy:.4f}"
    )
    return 0


def _cmd_kfold(args) -> int:
    cfg = _config_from_args(args)
    result = experiments.kfold_eval(cfg, args.k)
    for i, acc in enumerate(result["fold_accuracies"]):
        print(f"fold {i}: accuracy {acc:.4f}")
    print(f"mean {result['mean']:.4f} std {result['std']:.4f}")
    return 0


def _cmd_baseline_logreg(args) -> int:
    cfg = _config_from_args(args)
    report = experiments.run_logreg_baseline(cfg)
    print(
        f"DP logistic regression at target epsilon {report['target_epsilon']:g}: "
        f"test accuracy {report['mean_test_accuracy']:.4f} "
        f"(spent epsilon {report['spent_epsilon']:.4f})"
    )
    print(
        f"published baseline reference at epsilon 1.0: "
        f"{report['reference_accuracy']:.2f}"
    )
    if cfg.out:
        experiments.emit_csv(report["rows"], cfg.out)
    return 0


def _hyper_from_args(args) -> federation.Hyperparams:
    hidden = tuple(_int_list(args.hidden)) if args.model == "mlp" else ()
    width = encoded_width(HEART_SCHEMA)
    if args.no_dp:
        dp_mode = "off"
    elif args.noise_multiplier is not None:
        dp_mode = "sigma"
    else:
        dp_mode = "target"
    return federation.Hyperparams(
        layer_sizes=[width, *hidden, 1],
        rounds=args.rounds,
        local_epochs=args.local_epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        optimizer=args.optimizer,
        sampling=args.sampling,
        dropout=args.dropout if args.model == "mlp" else 0.0,
        dp_mode=dp_mode,
        target_epsilon=args.target_epsilon if args.target_epsilon is not None else 1.0,
        delta=args.delta,
        clip_norm=args.clip_norm,
        noise_multiplier=args.noise_multiplier if args.noise_multiplier is not None else 0.0,
    )


def _add_federation_args(parser) -> None:
    parser.add_argument("--rounds", type=int, default=25)
    parser.add_argument("--local-epochs", type=int, default=1)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--lr", type=float, default=0.001)
    parser.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    parser.add_argument("--sampling", choices=("poisson", "fixed"), default="poisson")
    parser.add_argument("--dropout", type=float, default=0.2)
    parser.add_argument("--model", choices=("mlp", "logreg"), default="mlp")
    parser.add_argument("--hidden", default="128,64,32,16")
    dp = parser.add_mutually_exclusive_group()
    dp.add_argument("--target-epsilon", type=float)
    dp.add_argument("--noise-multiplier", type=float)
    dp.add_argument("--no-dp", action="store_true")
    parser.add_argument("--delta", type=float, default=1e-5)
    parser.add_argument("--clip-norm", type=float, default=1.0)


def _cmd_fl_server(args) -> int:
    hyper = _hyper_from_args(args)
    result = federation.run_server(
        args.listen, args.clients, args.rounds, args.seed, hyper
    )
    if args.out:
        Path(args.out).write_bytes(serialize_params(result.params))
        print(f"wrote final weights to {args.out}")
    aggregations = sum(1 for e in result.metrics_log if e["phase"] == "aggregate")
    print(f"completed {aggregations} rounds with {args.clients} clients")
    return 0


def _cmd_fl_client(args) -> int:
    shard = read_canonical(args.shard)
    report = federation.run_client(
        args.connect, shard, args.client_id, args.train_seed
    )
    print(
        f"client {report['client_id']} sent {report['updates_sent']} updates"
    )
    return 0


def _cmd_simulate(args) -> int:
    cfg = with_updates(_config_from_args(args), mode="federated")
    rows = experiments.run_training(cfg)
    return _emit_and_report(cfg, rows)


def _cmd_synth_data(args) -> int:
    paths = synth.generate_all(args.out_dir, args.seed, args.signal)
    for site, path in sorted(paths.items()):
        print(f"{site}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpfl",
        description="differentially private federated learning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build a canonical dataset CSV")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--dataset", required=True,
                   choices=("cleveland", "uci", "integrated"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_prepare_data)

    for name, func, extra in (
        ("train", _cmd_train, None),
        ("sweep-epsilon", _cmd_sweep_epsilon, "targets"),
        ("sweep-epochs", _cmd_sweep_epochs, "epoch_counts"),
        ("compare-optimizers", _cmd_compare_optimizers, None),
        ("grid-search", _cmd_grid_search, None),
        ("baseline-logreg", _cmd_baseline_logreg, None),
        ("simulate", _cmd_simulate, None),
    ):
        p = sub.add_parser(name)
        _add_config_args(p)
        if extra == "targets":
            p.add_argument("--targets", default="0.5,1,3,5,10")
        elif extra == "epoch_counts":
            p.add_argument("--epoch-counts", default="10,25,50")
        p.set_defaults(func=func)

    p = sub.add_parser("kfold", help="k-fold cross-validation")
    _add_config_args(p)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=_cmd_kfold)

    p = sub.add_parser("fl-server", help="run the federation server")
    p.add_argument("--listen", required=True, help="host:port")
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--seed", type=int, default=1, help="global model init seed")
    p.add_argument("--out", help="final weights file")
    _add_federation_args(p)
    p.set_defaults(func=_cmd_fl_server)

    p = sub.add_parser("fl-client", help="run one federation client")
    p.add_argument("--connect", required=True, help="host:port")
    p.add_argument("--shard", required=True, help="canonical shard CSV")
    p.add_argument("--client-id", required=True)
    p.add_argument("--train-seed", type=int, required=True)
    p.set_defaults(func=_cmd_fl_client)

    p = sub.add_parser("synth-data", help="generate synthetic site files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--signal", type=float, default=1.0)
    p.set_defaults(func=_cmd_synth_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DpflError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
