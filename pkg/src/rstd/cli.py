"""Command-line surface: train, sweep, make-noisy, report.

Artifacts written by ``train``:

* ``<out>/<csv>``: rows ``epoch,repetition,train_loss,test_accuracy`` per
  epoch and repetition, closed by a summary row
  ``summary,all,,<mean accuracy>``.
* ``<out>/checkpoint.rstd``: final repetition's parameters/running stats.
* ``<out>/permutation_rep<r>_<layer>.rspm``: the shuffle of every
  randomly-shuffled layer in every repetition.

``sweep`` trains the decomposed and shuffled-decomposed variant at every
requested rank and appends ``kind,ranks,r_c,shuffled,mean_accuracy,
std_accuracy`` rows as points finish; a failing point aborts the sweep with
the partial CSV flushed.  All artifacts are reproducible from (config, seed)
alone.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import data as data_mod
from .checkpoint import save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .nn import build_table1_network
from .shuffle import mix_seed, save_permutation
from .tdmodel import KIND_TR, KIND_TT, KIND_TT_MATRIX
from .trainer import train

_RANK_LIST_LEN = {KIND_TT: 3, KIND_TR: 4, KIND_TT_MATRIX: 1}


def _dtype(precision: str):
    return np.float64 if precision == "f64" else np.float32


def load_datasets(cfg: ExperimentConfig, dtype):
    """Load, optionally subset (first-k-per-class), then optionally corrupt."""
    train_ds, test_ds = data_mod.load_cifar10(cfg.dataset.resolved_path(), dtype=dtype)
    if cfg.dataset.train_per_class is not None:
        train_ds = data_mod.subset_per_class(train_ds, cfg.dataset.train_per_class)
    if cfg.dataset.test_per_class is not None:
        test_ds = data_mod.subset_per_class(test_ds, cfg.dataset.test_per_class)
    if cfg.dataset.noise_dev > 0:
        seed = cfg.dataset.noise_seed
        train_ds = data_mod.add_awgn(train_ds, cfg.dataset.noise_dev, seed)
        test_ds = data_mod.add_awgn(test_ds, cfg.dataset.noise_dev, mix_seed(seed, 1))
    return train_ds, test_ds


def network_factory(cfg: ExperimentConfig, dtype):
    compression = cfg.compression_map()

    def factory(seed: int):
        return build_table1_network(channels=cfg.model.channels,
                                    compression=compression,
                                    seed=seed, dtype=dtype)

    return factory


def run_experiment(cfg: ExperimentConfig):
    """Train per config; returns (report, final network, all built networks)."""
    dtype = _dtype(cfg.precision)
    train_ds, test_ds = load_datasets(cfg, dtype)
    built = []
    base_factory = network_factory(cfg, dtype)

    def factory(seed):
        net = base_factory(seed)
        built.append(net)
        return net

    report = train(factory, train_ds, test_ds, cfg.training)
    return report, built[-1], built


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    return repr(float(value))


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out_dir = args.out or cfg.output.directory
    os.makedirs(out_dir, exist_ok=True)
    report, final_net, built = run_experiment(cfg)

    rows = []
    for rep, (losses, accs) in enumerate(zip(report.train_loss, report.test_accuracy)):
        for epoch, (loss, acc) in enumerate(zip(losses, accs)):
            rows.append([epoch, rep, _fmt(loss), _fmt(acc)])
    rows.append(["summary", "all", "", _fmt(report.mean_accuracy)])
    csv_path = os.path.join(out_dir, cfg.output.csv)
    _write_csv(csv_path, ["epoch", "repetition", "train_loss", "test_accuracy"], rows)

    save_checkpoint(os.path.join(out_dir, "checkpoint.rstd"), final_net)
    for rep, net in enumerate(built):
        for layer_name, perm in net.permutations().items():
            save_permutation(
                os.path.join(out_dir, f"permutation_rep{rep}_{layer_name}.rspm"), perm
            )

    print(f"mean accuracy {report.mean_accuracy:.4f} "
          f"(std {report.std_accuracy:.4f} over {len(report.final_accuracies)} "
          f"repetitions), compression ratio {report.compression_ratio:.6g}")
    print(f"artifacts in {out_dir}")
    return 0


def sweep_point_config(cfg: ExperimentConfig, rank: int, shuffled: bool) -> ExperimentConfig:
    """Config variant with every compression entry set to the given uniform
    rank and shuffled flag."""
    if not cfg.model.compression:
        raise ConfigError("model.compression: sweep needs at least one "
                          "compression entry to use as the template")
    entries = tuple(
        dataclasses.replace(e, ranks=(rank,) * _RANK_LIST_LEN[e.kind],
                            shuffled=shuffled)
        for e in cfg.model.compression
    )
    return dataclasses.replace(
        cfg, model=dataclasses.replace(cfg.model, compression=entries)
    )


def _run_sweep_point(payload):
    cfg, rank, shuffled = payload
    report, _, _ = run_experiment(cfg)
    kind = "+".join(sorted({e.kind for e in cfg.model.compression}))
    ranks = "x".join(str(r) for r in cfg.model.compression[0].ranks)
    return [kind, ranks, _fmt(report.compression_ratio), str(shuffled).lower(),
            _fmt(report.mean_accuracy), _fmt(report.std_accuracy)]


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    ranks = [int(r) for r in args.ranks.split(",") if r.strip()]
    if not ranks:
        print("error: --ranks must list at least one rank", file=sys.stderr)
        return 2
    out_dir = args.out or cfg.output.directory
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, cfg.output.csv)

    points = [(sweep_point_config(cfg, rank, shuffled), rank, shuffled)
              for rank in ranks for shuffled in (False, True)]

    header = ["kind", "ranks", "r_c", "shuffled", "mean_accuracy", "std_accuracy"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        fh.flush()
        try:
            if args.workers > 1:
                with concurrent.futures.ProcessPoolExecutor(args.workers) as pool:
                    for row in pool.map(_run_sweep_point, points):
                        writer.writerow(row)
                        fh.flush()
            else:
                for payload in points:
                    writer.writerow(_run_sweep_point(payload))
                    fh.flush()
        except Exception as exc:  # abort, keep the partial CSV
            print(f"sweep aborted: {exc}", file=sys.stderr)
            print(f"partial results kept in {csv_path}", file=sys.stderr)
            return 1
    print(f"sweep results in {csv_path}")
    return 0


def cmd_make_noisy(args) -> int:
    cfg = _load_cfg(args)
    if args.dev < 0:
        print("error: --dev must be >= 0", file=sys.stderr)
        return 2
    out_dir = args.out or cfg.output.directory
    os.makedirs(out_dir, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.dataset.noise_seed
    dtype = _dtype(cfg.precision)

    train_ds, test_ds = data_mod.load_cifar10(cfg.dataset.resolved_path(), dtype=dtype)
    noisy_train = data_mod.add_awgn(train_ds, args.dev, seed)
    noisy_test = data_mod.add_awgn(test_ds, args.dev, mix_seed(seed, 1))
    data_mod.save_cifar10(noisy_train, noisy_test, out_dir)

    sidecar = {
        "dev": args.dev,
        "seed_train": seed,
        "seed_test": mix_seed(seed, 1),
        "source": cfg.dataset.resolved_path(),
        "note": "stored pixels are clamped to [0, 255] bytes; the in-memory "
                "pipeline keeps the noise unclipped, so stored and in-memory "
                "variants differ at the clamp tails",
    }
    with open(os.path.join(out_dir, "awgn.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"noisy dataset (dev={args.dev}) written to {out_dir}")
    return 0


def cmd_report(args) -> int:
    for path in args.csv:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            print(f"{path}: empty")
            continue
        header = rows[0]
        print(f"== {path}")
        if header[:2] == ["epoch", "repetition"]:
            finals = {}
            for row in rows[1:]:
                if row[0] == "summary":
                    print(f"  mean accuracy {row[3]}")
                else:
                    finals[row[1]] = row[3]
            for rep, acc in sorted(finals.items()):
                print(f"  repetition {rep}: final accuracy {acc}")
        else:
            for row in rows[1:]:
                print("  " + ", ".join(f"{k}={v}" for k, v in zip(header, row)))
    return 0


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None and hasattr(args, "ranks"):
        cfg = dataclasses.replace(
            cfg, training=dataclasses.replace(cfg.training, seed=args.seed)
        )
    elif args.seed is not None:
        cfg = dataclasses.replace(
            cfg, training=dataclasses.replace(cfg.training, seed=args.seed)
        )
    if args.precision is not None:
        cfg = dataclasses.replace(cfg, precision=args.precision)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rstd",
        description="Train and sweep tensor-decomposition-compressed CNNs "
                    "(optionally with randomly shuffled kernels) on CIFAR-10.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel workers for independent sweep points")
        p.add_argument("--precision", choices=("f32", "f64"),
                       help="floating-point class (overrides config)")

    p_train = sub.add_parser("train", help="run one training experiment")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="train TD and RsTD variants over ranks")
    common(p_sweep)
    p_sweep.add_argument("--ranks", required=True,
                         help="comma-separated rank list, e.g. 1,2,4,8")
    p_sweep.set_defaults(func=cmd_sweep)

    p_noise = sub.add_parser("make-noisy", help="write a fixed AWGN dataset variant")
    common(p_noise)
    p_noise.add_argument("--dev", type=float, required=True,
                         help="noise standard deviation on the [0,1] pixel scale")
    p_noise.set_defaults(func=cmd_make_noisy)

    p_report = sub.add_parser("report", help="re-render CSV summaries")
    p_report.add_argument("csv", nargs="+", help="metrics CSV file(s)")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
