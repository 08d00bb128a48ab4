"""Command-line experiment runner.

Verbs: make-synthetic, pretrain, train-fe-head, build-attention, finetune,
cross-validate, analyze-distances, compare. Every verb accepts --seed and
--out-dir; experiment verbs also accept --config (a ``key = value`` file,
see ExperimentConfig for the keys) with flags overriding file values.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis
from .attention import build_attention_table, train_fe_head
from .data import SyntheticStyle, load_dataset, make_synthetic_transfer_pair, save_dimg
from .errors import DeltaLearnError
from .experiment import (ExperimentConfig, compare_methods, eval_transform_for,
                         load_config, make_method_configs, run_experiment, run_pretrain)
from .models import load_checkpoint, replace_head, save_checkpoint
from .trainer import cross_validate_alpha, cross_validate_scores


def _experiment_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--model")
    p.add_argument("--source-checkpoint")
    p.add_argument("--train-data")
    p.add_argument("--test-data")
    p.add_argument("--kind")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--schedule", choices=["step", "exp"])
    p.add_argument("--base-lr", type=float)
    p.add_argument("--lr-factor", type=float)
    p.add_argument("--lr-step", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--log-interval", type=int)
    p.add_argument("--attention")
    p.add_argument("--resize-shorter", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--no-mirror", action="store_true")
    p.add_argument("--no-subtract-mean", action="store_true")
    p.add_argument("--ten-crop-eval", action="store_true")
    p.add_argument("--seed", type=int, help="single seed (shorthand for --seeds)")
    p.add_argument("--out-dir")


def _config_from_args(args):
    overrides = {}
    mapping = {
        "model": "model", "source_checkpoint": "source_checkpoint",
        "train_data": "train_data", "test_data": "test_data", "kind": "kind",
        "alpha": "alpha", "beta": "beta", "schedule": "schedule",
        "base_lr": "base_lr", "lr_factor": "lr_factor", "lr_step": "lr_step",
        "iterations": "iterations", "batch_size": "batch_size",
        "momentum": "momentum", "log_interval": "log_interval",
        "attention": "attention", "resize_shorter": "resize_shorter",
        "crop": "crop", "out_dir": "out_dir",
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "seeds", None):
        overrides["seeds"] = tuple(int(s) for s in args.seeds.replace(",", " ").split())
    elif getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    if getattr(args, "no_mirror", False):
        overrides["mirror"] = False
    if getattr(args, "no_subtract_mean", False):
        overrides["subtract_mean"] = False
    if getattr(args, "ten_crop_eval", False):
        overrides["ten_crop_eval"] = True
    if args.config:
        return load_config(args.config, overrides)
    return ExperimentConfig(**overrides)


def cmd_make_synthetic(args):
    style = SyntheticStyle(
        frequency=args.frequency, texture_amp=args.texture_amp,
        background_amp=args.background_amp, noise_std=args.noise_std,
        orientation_jitter_deg=args.jitter,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    names = {}
    for split, n in (("train", args.n_train), ("test", args.n_test)):
        src, tgt = make_synthetic_transfer_pair(
            args.seed, args.k_src, args.k_tgt, n, args.size, split=split, style=style)
        for tag, ds in (("source", src), ("target", tgt)):
            path = os.path.join(args.out_dir, f"{tag}_{split}.dimg")
            save_dimg(ds, path)
            names[f"{tag}_{split}"] = {"path": path, "hash": ds.content_hash,
                                       "samples": len(ds)}
    print(json.dumps(names, indent=2, sort_keys=True))
    return 0


def cmd_pretrain(args):
    config = _config_from_args(args)
    summary = run_pretrain(config)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_train_fe_head(args):
    train_ds = load_dataset(args.train_data, split="train")
    source = load_checkpoint(args.source_checkpoint)
    model = replace_head(source, train_ds.num_classes, args.seed)
    transform = eval_transform_for(train_ds, not args.no_subtract_mean)
    model = train_fe_head(model, train_ds, args.epochs, args.lr, args.seed,
                          batch_size=args.batch_size, transform=transform)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "fe_model.dlta")
    save_checkpoint(model, path)
    print(json.dumps({"checkpoint": path, "digest": model.digest()}, indent=2))
    return 0


def cmd_build_attention(args):
    train_ds = load_dataset(args.train_data, split="train")
    fe_model = load_checkpoint(args.fe_checkpoint)
    transform = eval_transform_for(train_ds, not args.no_subtract_mean)
    taps = None
    if args.taps:
        taps = [int(t) for t in args.taps.replace(",", " ").split()]
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "attention.datt")
    table = build_attention_table(fe_model, train_ds, taps=taps,
                                  cache_path=path, transform=transform)
    print(json.dumps({"path": path, "taps": table.taps,
                      "samples": table.n_samples}, indent=2))
    return 0


def cmd_finetune(args):
    config = _config_from_args(args)
    summary = run_experiment(config)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_cross_validate(args):
    config = _config_from_args(args)
    alphas = [float(a) for a in args.alphas.replace(",", " ").split()]
    train_ds = load_dataset(config.train_data, split="train")
    source = load_checkpoint(config.source_checkpoint)
    attention = None
    if config.kind == "delta":
        from .attention import AttentionTable
        attention = AttentionTable.load(config.attention)
    cfg = config.train_config(config.seeds[0], train_ds.channel_means())
    scores = cross_validate_scores(source, train_ds, alphas, cfg,
                                   attention, n_folds=args.folds)
    best = cross_validate_alpha(source, train_ds, alphas, cfg,
                                attention, n_folds=args.folds)
    os.makedirs(config.out_dir, exist_ok=True)
    payload = {
        "best_alpha": best,
        "mean_val_acc": {str(a): float(np.mean(s)) for a, s in scores.items()},
        "fold_val_acc": {str(a): s for a, s in scores.items()},
    }
    with open(os.path.join(config.out_dir, "cv.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_analyze_distances(args):
    before = load_checkpoint(args.before)
    after = load_checkpoint(args.after)
    grouping = {}
    if args.groups:
        for pair in args.groups.split(","):
            layer, label = pair.split("=", 1)
            grouping[layer.strip()] = label.strip()
    report = analysis.param_distance_report(before, after, grouping)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "distances.csv")
    analysis.write_distance_csv(report, path)
    if args.activation_data and args.activation_tap is not None:
        ds = load_dataset(args.activation_data)
        images = ds.images[:args.activation_samples]
        transform = eval_transform_for(ds, not args.no_subtract_mean)
        if transform is not None:
            images = transform(images)
        analysis.write_activation_grid_csv(
            after, images, args.activation_tap,
            os.path.join(args.out_dir, "activations.csv"))
    print(json.dumps({g: len(rows) for g, rows in report.items()}, indent=2, sort_keys=True))
    return 0


def cmd_compare(args):
    base = _config_from_args(args)
    method_alphas = {}
    for item in args.methods.split(","):
        if "=" in item:
            kind, alpha = item.split("=", 1)
            method_alphas[kind.strip()] = float(alpha)
        else:
            method_alphas[item.strip()] = base.alpha
    configs = make_method_configs(base, method_alphas)
    result = compare_methods(configs, base.out_dir)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deltalearn",
        description="Transfer-learning experiments with feature-map alignment regularizers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate the synthetic transfer pair")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-src", type=int, default=4)
    p.add_argument("--k-tgt", type=int, default=3)
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--frequency", type=float, default=SyntheticStyle.frequency)
    p.add_argument("--texture-amp", type=float, default=SyntheticStyle.texture_amp)
    p.add_argument("--background-amp", type=float, default=SyntheticStyle.background_amp)
    p.add_argument("--noise-std", type=float, default=SyntheticStyle.noise_std)
    p.add_argument("--jitter", type=float, default=SyntheticStyle.orientation_jitter_deg)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("pretrain", help="train the source model from scratch")
    _experiment_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-fe-head", help="train the frozen-extractor head")
    p.add_argument("--source-checkpoint", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--no-subtract-mean", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train_fe_head)

    p = sub.add_parser("build-attention", help="ablation-scan attention weights")
    p.add_argument("--fe-checkpoint", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--taps", help="comma-separated conv layer indices (default: model taps)")
    p.add_argument("--no-subtract-mean", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_build_attention)

    p = sub.add_parser("finetune", help="fine-tune under a configured objective")
    _experiment_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("cross-validate", help="five-fold search over alpha")
    _experiment_flags(p)
    p.add_argument("--alphas", required=True, help="comma-separated candidates")
    p.add_argument("--folds", type=int, default=5)
    p.set_defaults(func=cmd_cross_validate)

    p = sub.add_parser("analyze-distances", help="distance-from-start distributions")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--groups", help="layer=label pairs, comma separated")
    p.add_argument("--activation-data", help="dataset for activation grid dumps")
    p.add_argument("--activation-tap", type=int)
    p.add_argument("--activation-samples", type=int, default=4)
    p.add_argument("--no-subtract-mean", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_analyze_distances)

    p = sub.add_parser("compare", help="run several methods and tabulate")
    _experiment_flags(p)
    p.add_argument("--methods", required=True,
                   help="kind[=alpha] list, e.g. l2=0.001,l2_sp=0.01,delta=0.01")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DeltaLearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
