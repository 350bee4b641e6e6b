"""Command-line entry points: pretrain, finetune, evaluate, render, report.

Config precedence is flags > --config file > defaults; SELFIE_SEED supplies
the default seed list. Multi-seed finetuning runs sequentially unless
--parallel launches one subprocess per seed.
"""

from __future__ import annotations

import argparse
import glob
import os
import subprocess
import sys

from .checkpoint import load_checkpoint, restore_store
from .config import ExperimentConfig
from .data import (Dataset, make_synthetic_jigsaw, read_cifar10_binary,
                   read_imgt, subset_split)
from .errors import CheckpointError, ConfigError, DataFormatError, TrainingDiverged
from .model import init_classifier, init_pretrain_model
from .render import render_jigsaw
from .report import append_result, mean_std, read_results, write_report
from .rng import RngStream
from .train import (append_metrics, evaluate_classifier, format_metrics_row,
                    prime_batch_norm, run_finetune, run_pretrain)

CLI_ERRORS = (ConfigError, DataFormatError, CheckpointError, TrainingDiverged,
              OSError, ValueError)


def parse_seeds(raw: str) -> list[int]:
    try:
        seeds = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {raw!r}; expected e.g. 0,1,2") from None
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(train, test) for the configured dataset source."""
    name = cfg.dataset
    if name == "synthetic":
        train = make_synthetic_jigsaw(cfg.synthetic_n, cfg.image_size, cfg.image_size,
                                      cfg.channels, cfg.classes, seed=cfg.data_seed,
                                      cell=cfg.ps)
        test = make_synthetic_jigsaw(max(cfg.synthetic_n // 5, 100), cfg.image_size,
                                     cfg.image_size, cfg.channels, cfg.classes,
                                     seed=cfg.data_seed + 1, cell=cfg.ps)
        test.split = "test"
        return train, test
    if name.endswith(".imgt"):
        train = read_imgt(name, "train", cfg.classes)
        test_path = name[:-len(".imgt")] + ".test.imgt"
        test = read_imgt(test_path, "test", cfg.classes) \
            if os.path.exists(test_path) else train
        return train, test
    if os.path.isdir(name):
        return read_cifar10_binary(name)
    raise ConfigError(f"dataset {name!r} is neither 'synthetic', an .imgt file, "
                      "nor a CIFAR-10 directory")


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides: dict = {}
    for flag, key in (("dataset", "dataset"), ("fraction", "fraction"),
                      ("steps", "steps"), ("lr_max", "lr_max"), ("p", "p"),
                      ("ps", "ps"), ("out", "out")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        overrides[key.strip()] = raw.strip()
    return cfg.apply(overrides)


def add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--dataset", help="'synthetic', an .imgt file, or a CIFAR-10 dir")
    p.add_argument("--fraction", type=float, help="labeled fraction for finetuning")
    p.add_argument("--seeds", default=os.environ.get("SELFIE_SEED", "0"),
                   help="comma-separated seed list (default: SELFIE_SEED or 0)")
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--lr-max", dest="lr_max", type=float, help="peak learning rate")
    p.add_argument("--p", type=float, help="fraction of patches kept visible")
    p.add_argument("--ps", type=int, help="patch size in pixels")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def seed_dir(cfg: ExperimentConfig, phase: str, seed: int) -> str:
    return os.path.join(cfg.out, f"{phase}_s{seed}")


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    for seed in parse_seeds(args.seeds):
        run_cfg = cfg.apply({"seed": seed})
        train, _ = load_datasets(run_cfg)
        out = seed_dir(run_cfg, "pretrain", seed)
        path = run_pretrain(train, run_cfg, out, resume=args.resume)
        print(f"pretrain seed {seed}: checkpoint {path}")
    return 0


def _finetune_one(cfg: ExperimentConfig, init: str, seed: int) -> float:
    run_cfg = cfg.apply({"seed": seed})
    train, test = load_datasets(run_cfg)
    if run_cfg.fraction < 1.0:
        train = subset_split(train, run_cfg.fraction, run_cfg.subset_seed)
    out = seed_dir(run_cfg, "finetune", seed)
    _, accuracy = run_finetune(train, test, run_cfg, init, out)
    kind = "random" if init == "random" else "pretrained"
    append_result(os.path.join(out, "results.csv"), run_cfg.dataset,
                  run_cfg.fraction, kind, seed, accuracy)
    print(f"finetune seed {seed} init {kind}: test accuracy {accuracy:.4f}")
    return accuracy


def cmd_finetune(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    seeds = parse_seeds(args.seeds)
    if args.parallel and len(seeds) > 1:
        procs = []
        for seed in seeds:
            argv = [sys.executable, "-m", "selfie.cli"] + _strip_parallel(sys.argv[1:])
            argv += ["--seeds", str(seed)]
            procs.append((seed, subprocess.Popen(argv)))
        failed = [s for s, proc in procs if proc.wait() != 0]
        if failed:
            print(f"error: seeds {failed} failed", file=sys.stderr)
            return 1
        accs = _collect_results(cfg, seeds)
    else:
        accs = [_finetune_one(cfg, args.init, seed) for seed in seeds]
    if len(accs) > 1:
        mean, std = mean_std(accs)
        print(f"summary over {len(accs)} seeds: {mean:.4f} ± {std:.4f}")
    return 0


def _strip_parallel(argv: list[str]) -> list[str]:
    out, skip = [], False
    for arg in argv:
        if skip:
            skip = False
            continue
        if arg == "--parallel":
            continue
        if arg == "--seeds":
            skip = True
            continue
        if arg.startswith("--seeds="):
            continue
        out.append(arg)
    return out


def _collect_results(cfg: ExperimentConfig, seeds: list[int]) -> list[float]:
    accs = []
    for seed in seeds:
        path = os.path.join(seed_dir(cfg, "finetune", seed), "results.csv")
        rows = read_results([path])
        accs.append(rows[-1]["accuracy"])
    return accs


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    seed = parse_seeds(args.seeds)[0]
    run_cfg = cfg.apply({"seed": seed})
    train, test = load_datasets(run_cfg)
    ccfg = run_cfg.classifier_config()
    store = init_classifier(ccfg, RngStream.from_seed(seed).child("init"))
    if args.init != "random":
        manifest = load_checkpoint(args.init)
        restore_store(manifest, store)
    else:
        sample = train.images[:min(run_cfg.batch_size, len(train))]
        prime_batch_norm(store, ccfg, sample,
                         RngStream.from_seed(seed).child("prime"))
    loss, accuracy = evaluate_classifier(store, ccfg, test, run_cfg.batch_size,
                                         run_cfg.eval_examples)
    os.makedirs(run_cfg.out, exist_ok=True)
    append_metrics(os.path.join(run_cfg.out, "evaluate_metrics.csv"),
                   [format_metrics_row(0, "test", loss, accuracy, 0.0, seed)])
    print(f"evaluate: loss {loss:.6f}, accuracy {accuracy:.4f}")
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    seed = parse_seeds(args.seeds)[0]
    run_cfg = cfg.apply({"seed": seed})
    train, _ = load_datasets(run_cfg)
    store = init_pretrain_model(run_cfg.model_config(),
                                RngStream.from_seed(seed).child("init"))
    manifest = load_checkpoint(args.init, expect_digest=None)
    restore_store(manifest, store)
    images = train.images[:args.count]
    paths, accuracy = render_jigsaw(store, run_cfg, images,
                                    os.path.join(run_cfg.out, "render"),
                                    tag=f"step{manifest.step}")
    print(f"rendered {len(paths)} frames (pretext accuracy {accuracy:.3f}) "
          f"to {os.path.dirname(paths[0])}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    results = sorted(glob.glob(os.path.join(cfg.out, "**", "results.csv"),
                               recursive=True))
    metrics = sorted(glob.glob(os.path.join(cfg.out, "**", "*_metrics.csv"),
                               recursive=True))
    if not results:
        print(f"warning: no results.csv under {cfg.out}", file=sys.stderr)
        return 0
    written, warnings = write_report(os.path.join(cfg.out, "report"), results, metrics)
    for w in warnings:
        print(w, file=sys.stderr)
    with open(written[0], encoding="utf-8") as f:
        print(f.read(), end="")
    print("wrote: " + ", ".join(written))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="selfie",
        description="Masked-patch contrastive pretraining and finetuning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    add_common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised finetuning")
    add_common(p)
    p.add_argument("--init", default="random",
                   help="'random' or a pretrain checkpoint path")
    p.add_argument("--parallel", action="store_true",
                   help="one subprocess per seed")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a classifier on the test split")
    add_common(p)
    p.add_argument("--init", default="random",
                   help="'random' or a classifier checkpoint path")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("render", help="jigsaw visualization from a checkpoint")
    add_common(p)
    p.add_argument("--init", required=True, help="pretrain checkpoint path")
    p.add_argument("--count", type=int, default=8, help="images to render")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("report", help="aggregate results into tables + figures")
    add_common(p)
    p.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CLI_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
