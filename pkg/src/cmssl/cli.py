"""Command-line interface: ``cmssl <generate|pretrain|finetune|grid|gradcheck|report>``.

Exit codes: 0 success, 1 gradient check failure, 2 configuration or
validation error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

from . import autodiff as ad
from .config import ExperimentConfig, load_config, save_config
from .downstream import finetune, pretraining_pool
from .errors import CmsslError, NumericError
from .gradcheck import format_report, run_gradcheck
from .grid import GridResults, load_dataset, run_grid
from .trainer import Pretrainer, load_bundle, write_outputs
from .views import AugmentationConfig, write_dataset

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _modalities(text):
    names = [n.strip() for n in text.split(",") if n.strip()]
    if not names:
        raise argparse.ArgumentTypeError("expected a comma-separated list of modality names")
    return names


def _with_overrides(config: ExperimentConfig, args):
    changes = {}
    if getattr(args, "seed", None) is not None and args.command == "generate":
        changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        field = "finetune_optimizer" if args.command == "finetune" else "pretrain_optimizer"
        changes[field] = dataclasses.replace(getattr(config, field), epochs=args.epochs)
    if getattr(args, "finetune_epochs", None) is not None:
        changes["finetune_optimizer"] = dataclasses.replace(config.finetune_optimizer, epochs=args.finetune_epochs)
    if getattr(args, "seeds", None) is not None:
        changes["grid"] = dataclasses.replace(config.grid, seeds=tuple(range(args.seeds)))
    return dataclasses.replace(config, **changes) if changes else config


def _out_dir(args, config, sub):
    path = args.out or os.path.join(config.output_dir, sub)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CmsslError(f"cannot create output directory {path}: {exc.strerror}") from exc
    if not os.access(path, os.W_OK):
        raise CmsslError(f"output directory {path} is not writable")
    return path


def _run_seed(args, config):
    return config.seed if args.seed is None else args.seed


def cmd_generate(args, config):
    out = _out_dir(args, config, "dataset")
    ds = load_dataset(config)
    manifest = write_dataset(ds, out, metadata={"config_fingerprint": config.fingerprint(), "seed": config.seed})
    print(f"wrote {len(ds)} samples to {manifest}")
    for m in ds.modalities:
        print(f"  modality {m.modality_id} {m.name}: {m.channels}x{m.height}x{m.width}")
    for name, count in sorted(ds.class_counts().items()):
        print(f"  {name}: {count}")
    return EXIT_OK


def cmd_pretrain(args, config):
    ds = load_dataset(config)
    ids = ds.modality_ids(args.modalities)
    aug = AugmentationConfig(enabled=False) if args.star else config.augmentation
    seed = _run_seed(args, config)
    trainer = Pretrainer(ds, ids, config.encoder_specs, config.contrastive, aug, config.pretrain_optimizer, seed,
                         samples=pretraining_pool(ds))
    out = _out_dir(args, config, "pretrain")

    def show(row):
        ranks = " ".join(f"{k}={v['effective_rank']:.2f}" for k, v in row["metrics"].items())
        print(f"epoch {row['epoch']:4d}  loss {row['mean_loss']:.4f}  erank {ranks}", flush=True)

    log = trainer.fit(on_epoch=None if args.quiet else show)
    fp = {"config": config.fingerprint(), "pretrain_modalities": trainer.bundle.names(), "star": args.star,
          "seed": seed}
    write_outputs(trainer, log, out, fp)
    save_config(config, os.path.join(out, "config.json"))
    print(f"checkpoint written to {os.path.join(out, 'final.json')}")
    return EXIT_OK


def cmd_finetune(args, config):
    ds = load_dataset(config)
    seed = _run_seed(args, config)
    checkpoint, ckpt_fp = None, None
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise CmsslError(f"checkpoint {args.checkpoint} does not exist")
        checkpoint, ckpt_fp = load_bundle(args.checkpoint)
    fp = {"config": config.fingerprint(), "checkpoint": args.checkpoint, "checkpoint_fingerprint": ckpt_fp,
          "pretrain_modalities": None if checkpoint is None else checkpoint.names(),
          "star": bool(ckpt_fp and ckpt_fp.get("star"))}
    _, report = finetune(ds, args.modalities, config.finetune_optimizer, seed, checkpoint=checkpoint,
                         encoder_specs=config.encoder_specs, finetune_backbone=not args.linear_probe,
                         fingerprint=fp)
    out = _out_dir(args, config, "finetune")
    path = os.path.join(out, "report.json")
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
    print(f"validation accuracy {report.accuracy:.4f} ({'+'.join(args.modalities)}, "
          f"{'random init' if checkpoint is None else 'pre-trained'}); report at {path}")
    return EXIT_OK


def cmd_grid(args, config):
    out = _out_dir(args, config, "grid")
    cache = None if args.no_cache else os.path.join(out, "cache")
    t0 = time.perf_counter()

    def progress(row, column, seed, report):
        if not args.quiet:
            print(f"{row.label:>22s} -> {'+'.join(column):<14s} seed {seed}: {report.accuracy:.4f}", flush=True)

    results = run_grid(config, cache_dir=cache, progress=progress)
    results.write(out)
    with open(os.path.join(out, "grid_timing.json"), "w") as fh:
        json.dump({"wall_seconds": time.perf_counter() - t0}, fh)
    save_config(config, os.path.join(out, "config.json"))
    print(results.table_text(), end="")
    print(f"results: {os.path.join(out, 'grid_results.csv')}")
    return EXIT_OK


def cmd_gradcheck(args, config):
    if args.inject_fault:
        with ad.inject_fault(args.inject_fault):
            results = run_gradcheck(args.seed or 0)
    else:
        results = run_gradcheck(args.seed or 0)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_GRADCHECK


def cmd_report(args, config):
    if not os.path.exists(args.results):
        raise CmsslError(f"results file {args.results} does not exist")
    results = GridResults.from_csv(args.results, config.grid.rows, config.grid.columns)
    text = results.table_text()
    print(text, end="")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(f"# config {results.fingerprint}\n{text}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="cmssl", description="Multi-modal contrastive pre-training at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="experiment config JSON (defaults apply when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("generate", help="write a synthetic dataset (manifest + CMRW tiles)")
    common(sp)

    sp = sub.add_parser("pretrain", help="contrastive pre-training of per-modality encoders")
    common(sp)
    sp.add_argument("--modalities", type=_modalities, default=["S1", "S2", "NAIP"])
    sp.add_argument("--star", action="store_true", help="no augmentations: one original view per modality")
    sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("finetune", help="train and evaluate the fused classifier")
    common(sp)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="pre-trained bundle (final.json or best.json)")
    src.add_argument("--random-init", action="store_true")
    sp.add_argument("--modalities", type=_modalities, required=True)
    sp.add_argument("--linear-probe", action="store_true", help="freeze backbones, train the head only")
    sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("grid", help="run the pre-training x finetuning grid")
    common(sp, seed=False)
    sp.add_argument("--seeds", type=int, help="use seeds 0..N-1 instead of the configured list")
    sp.add_argument("--epochs", type=int, help="pre-training epochs")
    sp.add_argument("--finetune-epochs", type=int)
    sp.add_argument("--no-cache", action="store_true")

    sp = sub.add_parser("gradcheck", help="finite-difference check of every autodiff op")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config", help=argparse.SUPPRESS)
    sp.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)

    sp = sub.add_parser("report", help="render a grid results CSV as a table")
    sp.add_argument("--config")
    sp.add_argument("--results", required=True, help="grid_results.csv")
    sp.add_argument("--out", help="also write the table to this file")
    return p


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "grid": cmd_grid,
            "gradcheck": cmd_gradcheck, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _with_overrides(load_config(args.config), args)
        return COMMANDS[args.command](args, config)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CmsslError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
