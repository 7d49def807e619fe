"""Command-line front end: train / eval / diagnose / export-logits.

Every run is reproducible: all defaults are resolved up front, written
to the run directory as config.json before any work starts, and all
randomness flows from the single --seed value.  Exit codes: 0 ok,
2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import data as D
from . import losses, network, runtime, serialize, train
from .tensor import ContractError, ShapeError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULT_THRESHOLDS = [0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99, 1.01]


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _load_json(path, what: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{what} {path} is not valid JSON: {exc}") from exc


def parse_data_spec(spec: str, seed: int):
    """'synthetic:M,per_class,size' or 'cifar100:DIR' -> (train, test)."""
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        try:
            m, per_class, size = (int(v) for v in rest.split(","))
        except ValueError as exc:
            raise CliError(EXIT_CONFIG,
                           f"--data synthetic wants M,per_class,size, got {rest!r}") from exc
        train_set = D.synth_dataset(m, per_class, size, seed=seed, split="train")
        test_set = D.synth_dataset(m, max(per_class // 2, 1), size, seed=seed + 1, split="test")
        return train_set, test_set
    if kind == "cifar100":
        train_path = os.path.join(rest, "train.bin")
        test_path = os.path.join(rest, "test.bin")
        try:
            return (D.load_cifar_binary(train_path, split="train"),
                    D.load_cifar_binary(test_path, split="test"))
        except OSError as exc:
            raise CliError(EXIT_DATA, str(exc)) from exc
    raise CliError(EXIT_CONFIG, f"--data must be synthetic:... or cifar100:..., got {spec!r}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file mirroring the flags; flags override it")
    p.add_argument("--arch", help="architecture JSON path")
    p.add_argument("--data", help="synthetic:M,per_class,size or cifar100:DIR")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="run directory")


_TRAIN_FIELDS = {
    "mode": str, "alpha": float, "beta_begin": float, "beta_end": float, "tau": float,
    "epochs": int, "batch_size": int, "lr": float,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiexit",
                                     description="multi-exit network training and inference")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a network, writing a run directory")
    _add_common(p_train)
    p_train.add_argument("--mode", choices=train.MODES)
    p_train.add_argument("--alpha", type=float)
    p_train.add_argument("--beta-begin", dest="beta_begin", type=float)
    p_train.add_argument("--beta-end", dest="beta_end", type=float)
    p_train.add_argument("--tau", type=float)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--verbose", action="store_true")

    for name, help_text in (("eval", "evaluate a checkpoint"),
                            ("diagnose", "agreement and exclusivity diagnostics"),
                            ("export-logits", "dump per-sample logits in the binary tensor format")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--ckpt", required=True)
        if name == "eval":
            p.add_argument("--policy", choices=["confidence", "fixed", "ensemble"])
            p.add_argument("--threshold", type=float)
            p.add_argument("--exit", dest="exit_index", type=int)
            p.add_argument("--split", choices=["train", "test"], default="test")
        if name == "export-logits":
            p.add_argument("--split", choices=["train", "test"], default="test")
    return parser


def resolve_run_spec(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags into one flat dict."""
    spec = {
        "command": args.command,
        "arch": None,
        "data": "synthetic:4,100,16",
        "seed": 0,
        "threads": 1,
        "out": None,
        "mode": "msd",
        "alpha": losses.LossConfig.alpha,
        "beta_begin": losses.LossConfig.beta_begin,
        "beta_end": losses.LossConfig.beta_end,
        "tau": None,
        "epochs": 30,
        "batch_size": 32,
        "lr": 0.05,
    }
    if getattr(args, "config", None):
        file_cfg = _load_json(args.config, "config file")
        unknown = set(file_cfg) - set(spec)
        if unknown:
            raise CliError(EXIT_CONFIG, f"unknown config file fields: {sorted(unknown)}")
        spec.update(file_cfg)
    for key in spec:
        if key == "command":
            continue
        val = getattr(args, key, None)
        if val is not None:
            spec[key] = val
    if args.command == "train" and spec["threads"] != 1:
        raise CliError(EXIT_CONFIG, "training is single-threaded; --threads applies to eval only")
    return spec


def _train_config(spec: dict) -> train.TrainConfig:
    loss = losses.LossConfig(alpha=spec["alpha"], beta_begin=spec["beta_begin"],
                             beta_end=spec["beta_end"], tau=spec["tau"])
    try:
        return train.TrainConfig(
            epochs=spec["epochs"], batch_size=spec["batch_size"], lr=spec["lr"],
            loss=loss, seed=spec["seed"], mode=spec["mode"],
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def _build_net(spec: dict, train_set: D.Dataset):
    if spec["arch"] is None:
        raise CliError(EXIT_CONFIG, "--arch is required (field: arch)")
    arch = _load_json(spec["arch"], "architecture")
    hw = train_set.image_shape[1:]
    try:
        return network.build_from_config(arch, seed=spec["seed"], input_hw=hw)
    except network.ValidationError as exc:
        raise CliError(EXIT_CONFIG, f"invalid architecture: {exc}") from exc


def cmd_train(args: argparse.Namespace) -> int:
    spec = resolve_run_spec(args)
    if spec["out"] is None:
        raise CliError(EXIT_CONFIG, "--out is required (field: out)")
    train_set, test_set = parse_data_spec(spec["data"], spec["seed"])
    if len(train_set) == 0:
        raise CliError(EXIT_DATA, "training dataset is empty")
    net = _build_net(spec, train_set)
    config = _train_config(spec)
    try:
        config = config.resolved(train_set.num_classes)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc

    os.makedirs(spec["out"], exist_ok=True)
    spec["tau"] = config.loss.tau
    spec["alpha"], spec["beta_begin"], spec["beta_end"] = (
        config.loss.alpha, config.loss.beta_begin, config.loss.beta_end)
    with open(os.path.join(spec["out"], "config.json"), "w") as fh:
        json.dump(spec, fh, indent=2, sort_keys=True)

    log_rows: list = []
    try:
        report = train.fit(net, train_set, test_set, config, out_dir=spec["out"],
                           log_rows=log_rows, quiet=not getattr(args, "verbose", False))
    except train.TrainingDiverged as exc:
        _write_log(spec["out"], log_rows)
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_log(spec["out"], log_rows)
    with open(os.path.join(spec["out"], "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(f"trained {config.epochs} epochs; report in {spec['out']}/report.json")
    return EXIT_OK


def _write_log(out_dir: str, rows: list) -> None:
    with open(os.path.join(out_dir, "log.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("step", "epoch") + losses.LossBreakdown.CSV_FIELDS)
        writer.writerows(rows)


def _load_ckpt(spec: dict):
    try:
        return train.load_checkpoint(spec["ckpt"])
    except (OSError, serialize.FormatError) as exc:
        raise CliError(EXIT_DATA, f"cannot load checkpoint {spec['ckpt']}: {exc}") from exc


def _eval_inputs(args: argparse.Namespace):
    spec = resolve_run_spec(args)
    spec["ckpt"] = args.ckpt
    net, _, _, meta = _load_ckpt(spec)
    if spec["arch"] is not None:
        arch = _load_json(spec["arch"], "architecture")
        want = network.arch_digest(arch)
        have = meta.get("arch_digest", network.arch_digest(meta["arch"]))
        if want != have:
            raise CliError(EXIT_CONFIG,
                           f"architecture mismatch: --arch digest {want}, checkpoint digest {have}")
    train_set, test_set = parse_data_spec(spec["data"], spec["seed"])
    ds = train_set if getattr(args, "split", "test") == "train" else test_set
    aug = D.AugmentConfig.for_dataset(train_set)
    return spec, net, ds, aug


def cmd_eval(args: argparse.Namespace) -> int:
    spec, net, ds, aug = _eval_inputs(args)
    policy = None
    if getattr(args, "policy", None):
        kind = {"confidence": "confidence_threshold", "fixed": "fixed_exit",
                "ensemble": "full_ensemble"}[args.policy]
        policy = runtime.ExitPolicy(
            kind=kind,
            threshold=args.threshold if args.threshold is not None else 0.5,
            exit_index=args.exit_index if args.exit_index is not None else 1)
    report = runtime.build_report(net, ds, aug, policy=policy,
                                  thresholds=DEFAULT_THRESHOLDS, threads=spec["threads"])
    print(report.format_table())
    print("\nbudget curve (threshold -> mean MACs, accuracy):")
    for thr, (cost, acc) in zip(DEFAULT_THRESHOLDS, report.budget):
        print(f"  {thr:>5.2f} -> {cost / 1e6:>10.3f}M  {acc:.4f}")
    if policy is not None:
        print(f"\npolicy {policy.kind}: {json.dumps(report.policy, sort_keys=True)}")
    if spec["out"]:
        os.makedirs(spec["out"], exist_ok=True)
        with open(os.path.join(spec["out"], "eval_report.json"), "w") as fh:
            fh.write(report.to_json())
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    spec, net, ds, aug = _eval_inputs(args)
    report = runtime.build_report(net, ds, aug, with_agreement=True, threads=spec["threads"])
    n = net.num_classifiers
    full = report.per_exit_macs[-1]
    print(report.format_table())
    print(f"\nexclusive-correct fraction (classifier 1 right, all later wrong,"
          f" over classifier-1-correct samples): {report.exclusivity:.4f}")
    print("\npairwise agreement:")
    for i in range(n):
        print("  " + " ".join(f"{report.agreement[i][j]:.3f}" for j in range(n)))
    print("\nper-exit MAC share of full network:")
    for k in range(n):
        print(f"  exit {k + 1}: {report.per_exit_macs[k] / full:.3f}")
    if spec["out"]:
        os.makedirs(spec["out"], exist_ok=True)
        with open(os.path.join(spec["out"], "diagnose_report.json"), "w") as fh:
            fh.write(report.to_json())
    return EXIT_OK


def cmd_export_logits(args: argparse.Namespace) -> int:
    spec, net, ds, aug = _eval_inputs(args)
    if spec["out"] is None:
        raise CliError(EXIT_CONFIG, "--out is required (field: out)")
    os.makedirs(spec["out"], exist_ok=True)
    n = net.num_classifiers
    per_classifier = [[] for _ in range(n)]
    from .tensor import Tensor

    for start in range(0, len(ds), 256):
        x = Tensor(D.eval_transform(ds.images[start : start + 256], aug))
        for k, (logits, _) in enumerate(net.forward_all(x)):
            per_classifier[k].append(logits.data)
    path = os.path.join(spec["out"], "logits.exft")
    with open(path, "wb") as fh:
        for k in range(n):
            serialize.write_tensor(fh, np.concatenate(per_classifier[k], axis=0))
    print(f"wrote {n} logit tensors ({len(ds)} samples each) to {path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "train": cmd_train,
        "eval": cmd_eval,
        "diagnose": cmd_diagnose,
        "export-logits": cmd_export_logits,
    }[args.command]
    try:
        return handler(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (network.ValidationError, ShapeError, ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
