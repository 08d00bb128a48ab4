"""Fine-tuning loop, SGD with momentum, LR schedules and alpha search.

Transfer runs start at the source weights (shared parameters equal the
snapshot bitwise, head freshly seeded) and optimize the configured objective
with classic momentum SGD. Everything is deterministic given the config
seed: batch order, augmentation draws, head init and fold assignment all
derive from it through named seed sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import AugmentSpec, Batch, augment_batch, eval_batch
from .errors import ConfigError, ContractError, TrainingDiverged
from .models import build_model, forward, replace_head
from .regularizers import RegularizerConfig, objective_with_logits
from .tensor import no_grad, softmax_probs
from .data import ten_crop


@dataclass
class ScheduleSpec:
    """StepLR (factor at every ``step_every`` iterations) or per-epoch exponential."""

    kind: str = "step"           # "step" | "exp"
    base_lr: float = 0.01
    factor: float = 0.1
    step_every: int = 6000

    def __post_init__(self):
        if self.kind not in ("step", "exp"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not (0.0 < self.factor <= 1.0):
            raise ConfigError("schedule factor must lie in (0, 1]")
        if self.base_lr <= 0 or self.step_every <= 0:
            raise ConfigError("base_lr and step_every must be positive")


def schedule_lr(spec, iteration, epoch):
    if spec.kind == "step":
        return spec.base_lr * spec.factor ** (iteration // spec.step_every)
    return spec.base_lr * spec.factor ** epoch


class SGDMomentum:
    """Classic (non-Nesterov) momentum: v <- mu v + g; w <- w - lr v."""

    def __init__(self, model, momentum=0.9, frozen=()):
        self.momentum = float(momentum)
        self.frozen = frozenset(frozen)
        self.velocity = {n: np.zeros_like(p.data)
                         for n, p in model.params.items() if n not in self.frozen}
        self.iteration = 0
        self.lr = None

    def step(self, model, lr):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr
        for name, v in self.velocity.items():
            p = model.params[name]
            if p.grad is None:
                raise ContractError(f"missing gradient for parameter {name}")
            v *= self.momentum
            v += p.grad
            p.data -= lr * v
        self.iteration += 1


@dataclass
class TrainConfig:
    kind: str = "delta"
    alpha: float = 0.01
    beta: float = 0.01
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    iterations: int = 1500
    batch_size: int = 16
    momentum: float = 0.9
    seed: int = 0
    log_interval: int = 50
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    normalize_by_area: bool = False

    def regularizer(self):
        return RegularizerConfig(self.kind, self.alpha, self.beta, self.normalize_by_area)


@dataclass
class MetricsRow:
    iteration: int
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float


def evaluate_accuracy(model, dataset, aug=AugmentSpec(), batch_size=64, ten_crop_eval=False):
    """Top-1 accuracy on a dataset under the deterministic eval view."""
    correct = 0
    n = len(dataset)
    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            if ten_crop_eval:
                preds = _ten_crop_predict(model, dataset.images[idx], aug)
            else:
                x = eval_batch(dataset.images[idx], aug)
                preds = forward(model, x).data.argmax(axis=1)
            correct += int((preds == dataset.labels[idx]).sum())
    return correct / n


def _ten_crop_predict(model, images, aug):
    crop = aug.crop or images.shape[2]
    preds = np.empty(len(images), dtype=np.int64)
    mean = np.asarray(aug.mean)[:, None, None] if aug.mean else None
    for i, img in enumerate(images):
        if aug.resize_shorter:
            from .data import resize_shorter_edge
            img = resize_shorter_edge(img, aug.resize_shorter)
        views = np.stack(ten_crop(img, crop))
        if mean is not None:
            views = views - mean[None]
        probs = softmax_probs(forward(model, views).data)
        preds[i] = probs.mean(axis=0).argmax()
    return preds


class _BatchSampler:
    """Epoch-wise shuffled batches; a fresh permutation per pass."""

    def __init__(self, n, batch_size, seed):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6F726472]))
        self.order = self.rng.permutation(n)
        self.pos = 0
        self.epoch = 0

    def next_batch(self):
        if self.pos >= self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
            self.epoch += 1
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += len(idx)
        return idx


def _diagnostics(model, iteration, epoch, lr, loss_value):
    stats = {n: float(np.abs(p.data).max()) for n, p in model.params.items()}
    return {"iteration": iteration, "epoch": epoch, "lr": lr,
            "loss": loss_value, "param_absmax": stats}


def train_loop(model, train_ds, test_ds, cfg, attention=None):
    """Optimize ``model`` in place; returns the metrics log."""
    reg = cfg.regularizer()
    if cfg.kind == "delta" and attention is None:
        raise ContractError("kind=delta requires an attention table")
    frozen = model.shared_names() if cfg.kind == "l2_fe" else ()
    opt = SGDMomentum(model, cfg.momentum, frozen)
    sampler = _BatchSampler(len(train_ds), cfg.batch_size, cfg.seed)
    rows = []

    def log_row(iteration, epoch, lr, batch, logits_data, loss_value):
        train_acc = float((logits_data.argmax(axis=1) == batch.labels).mean())
        rows.append(MetricsRow(iteration, epoch, lr, loss_value, train_acc,
                               evaluate_accuracy(model, test_ds, cfg.augment)))

    # Initial row: the untrained state, metrics on the first samples in order.
    idx0 = np.arange(min(cfg.batch_size, len(train_ds)))
    batch0 = Batch(eval_batch(train_ds.images[idx0], cfg.augment),
                   train_ds.labels[idx0], idx0)
    with no_grad():
        obj0, logits0 = objective_with_logits(model, batch0, reg, attention)
    log_row(0, 0, schedule_lr(cfg.schedule, 0, 0), batch0, logits0.data, obj0.item())

    for it in range(1, cfg.iterations + 1):
        idx = sampler.next_batch()
        lr = schedule_lr(cfg.schedule, it - 1, sampler.epoch)
        x = augment_batch(train_ds.images[idx], idx, cfg.augment, cfg.seed, it)
        batch = Batch(x, train_ds.labels[idx], idx)
        model.zero_grad()
        objective, logits = objective_with_logits(model, batch, reg, attention)
        loss_value = objective.item()
        if not np.isfinite(loss_value):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}",
                state=_diagnostics(model, it, sampler.epoch, lr, loss_value))
        objective.backward()
        opt.step(model, lr)
        if it % cfg.log_interval == 0 or it == cfg.iterations:
            log_row(it, sampler.epoch, lr, batch, logits.data, loss_value)
    return rows


def fine_tune(source_model, train_ds, test_ds, cfg, attention=None):
    """Transfer the source model to the train split's label space (SPAR start)."""
    model = replace_head(source_model, train_ds.num_classes, cfg.seed)
    rows = train_loop(model, train_ds, test_ds, cfg, attention)
    return model, rows


def pretrain(layers, input_shape, train_ds, test_ds, cfg):
    """Train a model from a seeded fresh initialization (source-task training)."""
    if cfg.kind not in ("l2",):
        raise ConfigError("pretraining supports only the plain l2 objective")
    model = build_model(layers, input_shape, cfg.seed)
    rows = train_loop(model, train_ds, test_ds, cfg)
    return model, rows


# -- five-fold alpha search ---------------------------------------------------

def stratified_folds(labels, n_folds, seed):
    """Per-class shuffled round-robin assignment; returns per-fold index arrays."""
    labels = np.asarray(labels)
    counts = np.bincount(labels)
    if (counts < n_folds).any():
        lacking = int(np.argmin(counts))
        raise ConfigError(
            f"class {lacking} has {counts[lacking]} samples; "
            f"{n_folds}-fold stratification needs at least {n_folds} per class")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x666F6C64]))
    folds = [[] for _ in range(n_folds)]
    for c in range(counts.size):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(len(members))]
        for pos, sample in enumerate(members):
            folds[pos % n_folds].append(int(sample))
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def cross_validate_scores(source_model, train_ds, candidate_alphas, cfg,
                          attention=None, n_folds=5):
    """Mean validation accuracy per candidate alpha over stratified folds."""
    folds = stratified_folds(train_ds.labels, n_folds, cfg.seed)
    scores = {}
    for alpha in candidate_alphas:
        accs = []
        for fold_id, val_idx in enumerate(folds):
            train_idx = np.setdiff1d(np.arange(len(train_ds)), val_idx)
            fold_train = train_ds.subset(train_idx)
            fold_val = train_ds.subset(val_idx, split="val")
            fold_att = attention.select(train_idx) if attention is not None else None
            fold_cfg = replace(cfg, alpha=float(alpha),
                               seed=cfg.seed + 1000003 * (fold_id + 1))
            _, rows = fine_tune(source_model, fold_train, fold_val, fold_cfg, fold_att)
            accs.append(rows[-1].test_acc)
        scores[float(alpha)] = accs
    return scores


def cross_validate_alpha(source_model, train_ds, candidate_alphas, cfg,
                         attention=None, n_folds=5):
    """The candidate with the best mean validation accuracy; ties pick the smallest."""
    if not candidate_alphas:
        raise ConfigError("need at least one candidate alpha")
    if len(candidate_alphas) == 1:
        return float(candidate_alphas[0])
    scores = cross_validate_scores(source_model, train_ds, candidate_alphas,
                                   cfg, attention, n_folds)
    best = None
    for alpha in sorted(scores):
        mean = float(np.mean(scores[alpha]))
        if best is None or mean > best[1] + 1e-12:
            best = (alpha, mean)
    return best[0]
