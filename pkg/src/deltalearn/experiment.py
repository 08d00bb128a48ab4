"""Config-driven experiment runner with reproducible on-disk bundles.

A run directory contains one metrics CSV and one checkpoint per seed, a
summary JSON with the across-seed accuracy statistics, and a MANIFEST that
tracks stage completeness so a failed run leaves identifiable partial
output. All emitted floats use ``repr`` so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from . import analysis
from .attention import AttentionTable
from .data import AugmentSpec, load_dataset
from .errors import ConfigError, ValidationError
from .models import load_checkpoint, replace_head, resolve_model_spec, save_checkpoint
from .trainer import ScheduleSpec, TrainConfig, evaluate_accuracy, fine_tune

METRICS_HEADER = ["iteration", "epoch", "lr", "train_loss", "train_acc", "test_acc"]


@dataclass
class ExperimentConfig:
    """Complete description of one fine-tuning experiment."""

    model: str = "desk32"
    source_checkpoint: str = ""
    train_data: str = ""
    test_data: str = ""
    kind: str = "delta"
    alpha: float = 0.01
    beta: float = 0.01
    schedule: str = "step"
    base_lr: float = 0.01
    lr_factor: float = 0.1
    lr_step: int = 1000
    iterations: int = 1500
    batch_size: int = 16
    momentum: float = 0.9
    seeds: tuple = (0,)
    log_interval: int = 50
    attention: str = ""
    resize_shorter: int = 0
    crop: int = 0
    mirror: bool = True
    subtract_mean: bool = True
    ten_crop_eval: bool = False
    normalize_by_area: bool = False
    out_dir: str = "runs/exp"

    def schedule_spec(self):
        return ScheduleSpec(self.schedule, self.base_lr, self.lr_factor, self.lr_step)

    def augment_spec(self, train_mean):
        return AugmentSpec(
            resize_shorter=self.resize_shorter,
            crop=self.crop,
            mirror=self.mirror,
            mean=tuple(float(m) for m in train_mean) if self.subtract_mean else (),
        )

    def train_config(self, seed, train_mean):
        return TrainConfig(
            kind=self.kind, alpha=self.alpha, beta=self.beta,
            schedule=self.schedule_spec(), iterations=self.iterations,
            batch_size=self.batch_size, momentum=self.momentum, seed=seed,
            log_interval=self.log_interval, augment=self.augment_spec(train_mean),
            normalize_by_area=self.normalize_by_area,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name, raw):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "tuple":
        return tuple(int(s) for s in raw.replace(",", " ").split())
    return raw


def load_config(path, overrides=None):
    """Parse a ``key = value`` config file; later CLI overrides win."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            values[key.strip()] = _coerce(key.strip(), raw)
    values.update(overrides or {})
    return ExperimentConfig(**values)


def config_to_text(config):
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = " ".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for r in rows:
            writer.writerow([r.iteration, r.epoch, repr(r.lr), repr(r.train_loss),
                             repr(r.train_acc), repr(r.test_acc)])


def read_metrics_csv(path):
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValidationError(f"{path}: unexpected metrics header {header}")
        return [
            {"iteration": int(r[0]), "epoch": int(r[1]), "lr": float(r[2]),
             "train_loss": float(r[3]), "train_acc": float(r[4]), "test_acc": float(r[5])}
            for r in reader
        ]


def _write_json(payload, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


class _Manifest:
    def __init__(self, out_dir, stages):
        self.path = os.path.join(out_dir, "MANIFEST.json")
        self.stages = {s: "pending" for s in stages}
        self.error = None
        self.flush()

    def mark(self, stage, status="complete"):
        self.stages[stage] = status
        self.flush()

    def fail(self, stage, error):
        self.stages[stage] = "failed"
        self.error = str(error)
        self.flush()

    def flush(self):
        _write_json({"stages": self.stages, "error": self.error}, self.path)


def summarize_accuracies(per_seed):
    accs = [acc for _, acc in sorted(per_seed.items())]
    mean = float(np.mean(accs))
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    return mean, std


def run_experiment(config):
    """Run one method over all configured seeds; returns the summary dict."""
    for path in (config.source_checkpoint, config.train_data, config.test_data):
        if path and not os.path.exists(path):
            raise ConfigError(f"configured path does not exist: {path}")
    if config.kind == "delta" and not config.attention:
        raise ConfigError("kind=delta requires an attention table path")

    os.makedirs(config.out_dir, exist_ok=True)
    stages = ["load", *(f"seed{s}" for s in config.seeds), "summary"]
    manifest = _Manifest(config.out_dir, stages)
    try:
        train_ds = load_dataset(config.train_data, split="train")
        test_ds = load_dataset(config.test_data, split="test")
        source = load_checkpoint(config.source_checkpoint)
        attention = None
        if config.kind == "delta":
            attention = AttentionTable.load(config.attention)
            if attention.dataset_hash != train_ds.content_hash:
                raise ValidationError(
                    "attention table was built for a different training set "
                    f"({attention.dataset_hash[:12]} != {train_ds.content_hash[:12]})")
        train_mean = train_ds.channel_means()
        with open(os.path.join(config.out_dir, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(config_to_text(config))
        manifest.mark("load")
    except Exception as exc:
        manifest.fail("load", exc)
        raise

    per_seed = {}
    for seed in config.seeds:
        stage = f"seed{seed}"
        try:
            cfg = config.train_config(seed, train_mean)
            model, rows = fine_tune(source, train_ds, test_ds, cfg, attention)
            write_metrics_csv(rows, os.path.join(config.out_dir, f"metrics_seed{seed}.csv"))
            save_checkpoint(model, os.path.join(config.out_dir, f"model_seed{seed}.dlta"))
            final_acc = rows[-1].test_acc
            if config.ten_crop_eval:
                final_acc = evaluate_accuracy(model, test_ds, cfg.augment,
                                              ten_crop_eval=True)
            per_seed[seed] = final_acc
            manifest.mark(stage)
        except Exception as exc:
            manifest.fail(stage, exc)
            raise

    try:
        mean, std = summarize_accuracies(per_seed)
        summary = {
            "kind": config.kind,
            "alpha": config.alpha,
            "beta": config.beta,
            "seeds": list(config.seeds),
            "train_hash": train_ds.content_hash,
            "test_hash": test_ds.content_hash,
            "per_seed_acc": {str(s): per_seed[s] for s in config.seeds},
            "mean_acc": mean,
            "std_acc": std,
        }
        _write_json(summary, os.path.join(config.out_dir, "summary.json"))
        manifest.mark("summary")
    except Exception as exc:
        manifest.fail("summary", exc)
        raise
    return summary


def compare_methods(configs, out_dir):
    """Run several method configs on one task and tabulate the results.

    All configs must share datasets and seeds. When both the attention and
    the plain weight-anchor variants are present, also reports what fraction
    of conv filters moved farther from the source under attention alignment
    (per seed and mean).
    """
    if not configs:
        raise ConfigError("compare_methods needs at least one config")
    ref = configs[0]
    for cfg in configs[1:]:
        if (cfg.train_data != ref.train_data or cfg.test_data != ref.test_data
                or tuple(cfg.seeds) != tuple(ref.seeds)
                or cfg.source_checkpoint != ref.source_checkpoint):
            raise ValidationError("compare configs must share datasets, source and seeds")
    ref_train = load_dataset(ref.train_data, split="train")
    for cfg in configs[1:]:
        if load_dataset(cfg.train_data).content_hash != ref_train.content_hash:
            raise ValidationError("compare configs reference differing training data")

    os.makedirs(out_dir, exist_ok=True)
    summaries = {}
    for cfg in configs:
        summaries[cfg.kind] = run_experiment(cfg)

    rows = [["method", "mean_acc", "std_acc", "formatted"]]
    for cfg in configs:
        s = summaries[cfg.kind]
        rows.append([cfg.kind, repr(s["mean_acc"]), repr(s["std_acc"]),
                     f"{100 * s['mean_acc']:.1f} +/- {100 * s['std_acc']:.1f}"])
    with open(os.path.join(out_dir, "comparison.csv"), "w", newline="") as fh:
        csv.writer(fh).writerows(rows)

    result = {"methods": summaries}
    by_kind = {cfg.kind: cfg for cfg in configs}
    if "delta" in by_kind and "l2_sp" in by_kind:
        result["delta_vs_l2_sp_larger_distance_fraction"] = _distance_fractions(
            by_kind["delta"], by_kind["l2_sp"], ref_train.num_classes)
    _write_json(result, os.path.join(out_dir, "comparison.json"))
    return result


def _distance_fractions(delta_cfg, sp_cfg, num_classes):
    source = load_checkpoint(delta_cfg.source_checkpoint)
    fractions = {}
    for seed in delta_cfg.seeds:
        start = replace_head(source, num_classes, seed)
        model_delta = load_checkpoint(os.path.join(delta_cfg.out_dir, f"model_seed{seed}.dlta"))
        model_sp = load_checkpoint(os.path.join(sp_cfg.out_dir, f"model_seed{seed}.dlta"))
        fractions[str(seed)] = analysis.larger_distance_fraction(start, model_delta, model_sp)
    fractions["mean"] = float(np.mean([v for k, v in fractions.items() if k != "mean"]))
    return fractions


def make_method_configs(base, method_alphas):
    """Per-method configs derived from a base config (subdirectory per kind)."""
    configs = []
    for kind, alpha in method_alphas.items():
        configs.append(replace(
            base, kind=kind, alpha=float(alpha),
            attention=base.attention if kind == "delta" else "",
            out_dir=os.path.join(base.out_dir, kind),
        ))
    return configs


def resolve_model(config, num_classes):
    return resolve_model_spec(config.model, num_classes)


def run_pretrain(config):
    """Train the source model from scratch and write its checkpoint bundle."""
    from .trainer import pretrain

    for path in (config.train_data, config.test_data):
        if not os.path.exists(path):
            raise ConfigError(f"configured path does not exist: {path}")
    os.makedirs(config.out_dir, exist_ok=True)
    train_ds = load_dataset(config.train_data, split="train")
    test_ds = load_dataset(config.test_data, split="test")
    layers, input_shape = resolve_model_spec(config.model, train_ds.num_classes)
    seed = config.seeds[0]
    cfg = replace(config, kind="l2").train_config(seed, train_ds.channel_means())
    model, rows = pretrain(layers, input_shape, train_ds, test_ds, cfg)
    write_metrics_csv(rows, os.path.join(config.out_dir, f"metrics_seed{seed}.csv"))
    ckpt = os.path.join(config.out_dir, "model.dlta")
    save_checkpoint(model, ckpt)
    summary = {"kind": "pretrain", "seed": seed, "final_test_acc": rows[-1].test_acc,
               "checkpoint": ckpt, "train_hash": train_ds.content_hash}
    _write_json(summary, os.path.join(config.out_dir, "summary.json"))
    return summary


def eval_transform_for(train_ds, subtract_mean=True):
    """Batch transform applying the train split's per-channel mean subtraction."""
    if not subtract_mean:
        return None
    mean = train_ds.channel_means()[None, :, None, None]

    def transform(batch):
        return np.asarray(batch, dtype=np.float64) - mean

    return transform
