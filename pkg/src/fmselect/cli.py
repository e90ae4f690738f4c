"""Command-line entry point: ``fmselect {train,select,evaluate,ablate,sweep}``.

Exit codes: 0 success, 2 configuration/usage error, 3 data or checkpoint
error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import eval_suite as ev
from .data_io import DataConsistencyError, DataFormatError, load_registry, resolve_dataset
from .fm_module import FeatureMask
from .trainer import (
    Ablation,
    CheckpointError,
    ConfigError,
    DivergenceError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("fmselect")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

DEFAULT_KS = "10,25,50,100,250,500"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in items if t not in ev.CLASSIFIERS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown classifier(s) {bad}; choose from {ev.CLASSIFIERS}")
    return items


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--registry", default=os.environ.get("FMSELECT_REGISTRY", "datasets.json"),
                        help="dataset registry JSON (default: $FMSELECT_REGISTRY or ./datasets.json)")
    common.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")
    common.add_argument("--subset", type=int, help="seeded subsample of the training split")
    common.add_argument("--split-seed", type=int, default=0,
                        help="seed for the 80/20 split when a dataset has no test file")
    common.add_argument("--jobs", type=int, default=1, help="parallel seed workers")

    tc = argparse.ArgumentParser(add_help=False)
    tc.add_argument("--epochs", type=int)
    tc.add_argument("--steps", type=int, help="fixed optimizer-step budget (overrides --epochs)")
    tc.add_argument("--batch-size", type=int)
    tc.add_argument("--lr", type=float, dest="learning_rate")
    tc.add_argument("--optimizer", choices=("adam", "sgd"))
    tc.add_argument("--mode", choices=("supervised", "unsupervised"))
    tc.add_argument("--init", choices=("uniform", "normal", "ones", "xavier"), dest="init_scheme")
    tc.add_argument("--e-width", type=int)
    tc.add_argument("--dtype", choices=("float32", "float64"))
    tc.add_argument("--no-ba", action="store_true", help="ablate batch-wise attenuation")
    tc.add_argument("--no-fmn", action="store_true", help="ablate mask normalization")

    p = argparse.ArgumentParser(prog="fmselect", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common, tc], help="train FM-module + network, write checkpoint and mask")
    t.add_argument("--dataset", required=True)
    t.add_argument("--seed", type=int)

    s = sub.add_parser("select", parents=[common], help="top-K features from a checkpoint or mask file")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--mask")
    s.add_argument("--k", type=int, required=True)

    e = sub.add_parser("evaluate", parents=[common], help="score a checkpoint's mask against RSF and RawF")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--k", type=_int_list, default=[50])
    e.add_argument("--classifier", type=_str_list, default=["rf"])
    e.add_argument("--seeds", type=_int_list, help="classifier/RSF seeds (default: checkpoint seed)")
    e.add_argument("--dataset", help="override the dataset recorded in the checkpoint")

    a = sub.add_parser("ablate", parents=[common, tc], help="2x2 ablation over BA and FMN")
    a.add_argument("--dataset", required=True)
    a.add_argument("--k", type=int, default=50)
    a.add_argument("--classifier", choices=ev.CLASSIFIERS, default="rf")
    a.add_argument("--seeds", type=_int_list, default=[1, 2, 3, 4, 5])

    w = sub.add_parser("sweep", parents=[common, tc], help="train per seed and score a list of K values")
    w.add_argument("--dataset", required=True)
    w.add_argument("--k", type=_int_list, default=_int_list(DEFAULT_KS))
    w.add_argument("--classifier", type=_str_list, default=["rf"])
    w.add_argument("--seeds", type=_int_list, default=[1, 2, 3, 4, 5])
    return p


def effective_config(args) -> TrainConfig:
    """Built-in defaults, then the --config file, then explicit flags."""
    base: dict = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}", EXIT_CONFIG) from None
    try:
        cfg = TrainConfig.from_dict(base)
    except (ConfigError, TypeError) as e:
        raise CliError(str(e), EXIT_CONFIG) from None
    overrides = {}
    for key in ("epochs", "steps", "batch_size", "learning_rate", "optimizer", "mode",
                "init_scheme", "e_width", "dtype", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "no_ba", False) or getattr(args, "no_fmn", False):
        overrides["ablation"] = Ablation(
            use_batch_attenuation=cfg.ablation.use_batch_attenuation and not args.no_ba,
            use_mask_normalization=cfg.ablation.use_mask_normalization and not args.no_fmn)
    cfg = replace(cfg, **overrides)
    try:
        cfg.validate()
    except ConfigError as e:
        raise CliError(str(e), EXIT_CONFIG) from None
    return cfg


def _resolve(args, name: str, registry_path: str | None = None, subset=None, split_seed=None):
    reg_path = registry_path or args.registry
    registry = load_registry(reg_path)
    if name not in registry:
        raise CliError(f"dataset {name!r} not in registry {reg_path} "
                       f"(known: {', '.join(sorted(registry)) or 'none'})", EXIT_CONFIG)
    split = resolve_dataset(registry, name, seed=args.split_seed if split_seed is None else split_seed,
                            subset=args.subset if subset is None else subset)
    return split


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _write_reports(args, stem: str, reports, extra: dict) -> list[Path]:
    out = Path(args.out)
    written = []
    if args.format == "csv":
        written.append(_write(out / f"{stem}.csv", ev.reports_to_csv(reports)))
    else:
        written.append(_write(out / f"{stem}.json", ev.reports_to_json(reports, extra)))
    written.append(_write(out / f"{stem}.config.json", json.dumps(extra, indent=2, sort_keys=True) + "\n"))
    return written


def cmd_train(args) -> Path:
    cfg = effective_config(args)
    split = _resolve(args, args.dataset)
    log.info("training %s on %s (%d rows, %s)", cfg.mode, args.dataset, split.train.n_rows, split.protocol)
    model = train(split.train, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.dataset}-{cfg.mode}-s{cfg.seed}"
    extra = {"dataset": args.dataset, "registry": str(Path(args.registry).resolve()),
             "subset": args.subset, "split_seed": args.split_seed, "protocol": split.protocol}
    ckpt = save_checkpoint(model, out / f"{stem}.fmv1", extra)
    _write(out / f"{stem}.mask.json", model.final_mask.to_json() + "\n")
    print(f"mode: {cfg.mode}")
    print(f"final loss: {model.loss_history[-1]:.6f}")
    print(f"top-10 features: {[int(i) for i in model.final_mask.ranking[:10]]}")
    print(f"checkpoint: {ckpt}")
    return ckpt


def _load_mask(args) -> FeatureMask:
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        return model.final_mask
    try:
        return FeatureMask.from_json(Path(args.mask).read_text())
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot read mask {args.mask}: {e}", EXIT_DATA) from None


def cmd_select(args) -> Path:
    mask = _load_mask(args)
    if not 1 <= args.k <= mask.dims:
        raise CliError(f"--k {args.k} outside [1, {mask.dims}]", EXIT_CONFIG)
    sel = ev.select_top_k(mask, args.k)
    stem = Path(args.checkpoint or args.mask).name.split(".")[0]
    path = _write(Path(args.out) / f"{stem}.top{args.k}.json", sel.to_json() + "\n")
    print(" ".join(str(int(i)) for i in sel.selected))
    return path


def cmd_evaluate(args) -> list[Path]:
    model, meta = load_checkpoint(args.checkpoint)
    name = args.dataset or meta.get("dataset")
    if not name:
        raise CliError("checkpoint does not record a dataset; pass --dataset", EXIT_CONFIG)
    d = model.final_mask.dims
    bad = [k for k in args.k if not 1 <= k <= d]
    if bad:
        raise CliError(f"--k values {bad} outside [1, {d}]", EXIT_CONFIG)
    split = _resolve(args, name, subset=meta.get("subset") if args.subset is None else args.subset,
                     split_seed=meta.get("split_seed", args.split_seed))
    if split.train.n_features != d:
        raise CliError(f"dataset has {split.train.n_features} features, mask has {d}", EXIT_DATA)
    seeds = args.seeds or [model.config.seed]
    extra = {"config": model.config.to_dict(), "dataset": name, "ks": args.k,
             "classifiers": args.classifier, "seeds": seeds, "protocol": split.protocol,
             "checkpoint_mode": model.config.mode}
    digest = ev.config_digest(extra)
    extra["config_digest"] = digest
    reports = ev.evaluate_mask(split, model.final_mask, args.k, args.classifier, seeds, name, digest)
    for r in reports:
        print(f"{r.method:5} {r.classifier:4} k={r.k:<4} {r.mean:.4f} (+- {r.std:.4f})")
    stem = Path(args.checkpoint).name.split(".")[0] + ".eval"
    return _write_reports(args, stem, reports, extra)


def cmd_ablate(args) -> list[Path]:
    cfg = effective_config(args)
    split = _resolve(args, args.dataset)
    reports = ev.run_ablation(split, cfg, args.k, args.classifier, args.seeds, args.dataset)
    table = ev.ablation_table(reports)
    print(table, end="")
    extra = {"config": cfg.to_dict(), "dataset": args.dataset, "k": args.k,
             "classifier": args.classifier, "seeds": args.seeds, "protocol": split.protocol}
    extra["config_digest"] = ev.config_digest(extra)
    stem = f"{args.dataset}-ablation"
    paths = _write_reports(args, stem, reports, extra)
    paths.append(_write(Path(args.out) / f"{stem}.txt", table))
    return paths


def cmd_sweep(args) -> list[Path]:
    cfg = effective_config(args)
    split = _resolve(args, args.dataset)
    d = split.train.n_features
    bad = [k for k in args.k if not 1 <= k <= d]
    if bad:
        raise CliError(f"--k values {bad} outside [1, {d}]", EXIT_CONFIG)
    reports = ev.run_experiment(split, cfg, args.k, args.classifier, args.seeds, args.dataset, args.jobs)
    for r in reports:
        print(f"{r.method:5} {r.classifier:4} k={r.k:<4} {r.mean:.4f} (+- {r.std:.4f})")
    extra = {"config": cfg.to_dict(), "dataset": args.dataset, "ks": args.k,
             "classifiers": args.classifier, "seeds": args.seeds, "protocol": split.protocol,
             "config_digest": reports[0].config_digest}
    return _write_reports(args, f"{args.dataset}-{cfg.mode}-sweep", reports, extra)


COMMANDS = {"train": cmd_train, "select": cmd_select, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "sweep": cmd_sweep}


def _setup_log(out: str) -> None:
    # timestamps live only in this sidecar file, never in reports
    Path(out).mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(Path(out) / "fmselect.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_log(args.out)
        log.info("command: %s", " ".join(sys.argv[1:] if argv is None else argv))
        COMMANDS[args.command](args)
        return 0
    except CliError as e:
        print(f"fmselect: error: {e}", file=sys.stderr)
        if e.code == EXIT_CONFIG:
            parser.print_usage(sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"fmselect: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, DataConsistencyError, CheckpointError, OSError) as e:
        print(f"fmselect: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"fmselect: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
