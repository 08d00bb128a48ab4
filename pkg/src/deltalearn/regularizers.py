"""The four transfer objectives: L2, L2-SP, L2-FE and feature-map alignment.

All penalties use the 1/2 convention (gradient is the plain difference, not
twice it); the alpha/beta coefficients absorb the factor. The feature-map
penalty sums, over the batch's samples, every tapped filter's squared
distance between target and source activation vectors, weighted by the
per-sample per-filter attention weight. Source activations are computed
with gradients disabled, so the term pulls only on the live parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .models import forward, forward_with_taps, source_feature_maps
from .tensor import Tensor

KINDS = ("l2", "l2_sp", "l2_fe", "delta", "delta_no_att")


@dataclass(frozen=True)
class RegularizerConfig:
    kind: str = "delta"
    alpha: float = 0.01
    beta: float = 0.01
    # Divide each filter's squared distance by its spatial area instead of
    # letting larger taps contribute proportionally more. Off by default.
    normalize_by_area: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown regularizer kind {self.kind!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")


def _half_sumsq(tensors):
    total = None
    for t in tensors:
        term = (t * t).sum()
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()))
    return total * 0.5


def l2_penalty(model):
    """0.5 * sum of squared entries over every trainable parameter."""
    return _half_sumsq(model.params.values())


def sp_shared_penalty(model):
    """0.5 * squared distance of the shared parameters from the source snapshot."""
    if model.source_params is None:
        raise ContractError("l2_sp penalties need a source snapshot (run replace_head first)")
    terms = []
    for name in model.shared_names():
        terms.append(model.params[name] - Tensor(model.source_params[name]))
    return _half_sumsq(terms)


def private_penalty(model):
    """0.5 * sum of squared entries over the head (target-private) parameters."""
    return _half_sumsq(model.params[n] for n in sorted(model.head_names))


def l2_sp_penalty(model):
    """Shared-distance plus head-norm halves in one term."""
    return sp_shared_penalty(model) + private_penalty(model)


def _uniform_weights(model, batch_size):
    return {
        tap: np.full((batch_size, model.tap_channels(tap)),
                     1.0 / model.tap_channels(tap))
        for tap in model.tap_ids
    }


def _attention_rows(model, attention, sample_ids):
    rows = {}
    for tap in model.tap_ids:
        rows[tap] = attention.batch_rows(tap, sample_ids)
    return rows


def behavioral_distance(model, fms, ref_fms, weight_rows):
    """Weighted feature-map alignment term given both networks' tap outputs."""
    total = None
    for tap in model.tap_ids:
        d = fms.vectors(tap) - Tensor(ref_fms.vectors(tap).data)
        per_filter = (d * d).sum(axis=2)          # (B, N)
        w = np.asarray(weight_rows[tap], dtype=np.float64)
        if w.shape != per_filter.data.shape:
            raise ContractError(
                f"attention rows for tap {tap} have shape {w.shape}, "
                f"expected {per_filter.data.shape}"
            )
        term = (per_filter * Tensor(w)).sum()
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()))
    return total


def _tap_terms(model, batch, attention):
    if not model.tap_ids:
        raise ContractError("model declares no taps; the behavioral penalty is undefined")
    logits, fms = forward_with_taps(model, batch.x)
    ref_fms = source_feature_maps(model, batch.x)
    if attention is None:
        weight_rows = _uniform_weights(model, len(batch.labels))
    else:
        weight_rows = _attention_rows(model, attention, batch.sample_ids)
    return logits, fms, ref_fms, weight_rows


def _area_scaled(model, ref_fms, weight_rows):
    scaled = {}
    for tap in model.tap_ids:
        area = ref_fms.vectors(tap).data.shape[2]
        scaled[tap] = np.asarray(weight_rows[tap]) / float(area)
    return scaled


def behavioral_penalty(model, batch, attention=None, normalize_by_area=False):
    """Attention-weighted distance between target and source feature maps.

    ``batch`` carries (x, labels, sample_ids); ``attention=None`` uses uniform
    1/N weights (the no-attention variant). Missing table rows surface as the
    table's lookup error.
    """
    _, fms, ref_fms, weight_rows = _tap_terms(model, batch, attention)
    if normalize_by_area:
        weight_rows = _area_scaled(model, ref_fms, weight_rows)
    return behavioral_distance(model, fms, ref_fms, weight_rows)


def total_objective(model, batch, config, attention=None):
    """Empirical cross-entropy plus the configured penalty (a scalar Tensor)."""
    objective, _ = objective_with_logits(model, batch, config, attention)
    return objective


def objective_with_logits(model, batch, config, attention=None):
    """Like total_objective but also returns the live logits for metric reuse."""
    kind = config.kind
    if kind == "delta" and attention is None:
        raise ContractError("kind=delta requires an attention table")

    if kind in ("delta", "delta_no_att"):
        logits, fms, ref_fms, weight_rows = _tap_terms(
            model, batch, attention if kind == "delta" else None)
        if config.normalize_by_area:
            weight_rows = _area_scaled(model, ref_fms, weight_rows)
        loss = T.softmax_cross_entropy(logits, batch.labels)
        penalty = behavioral_distance(model, fms, ref_fms, weight_rows) * config.alpha
        penalty = penalty + private_penalty(model) * config.beta
        return loss + penalty, logits

    logits = forward(model, batch.x)
    loss = T.softmax_cross_entropy(logits, batch.labels)
    if kind == "l2":
        return loss + l2_penalty(model) * config.alpha, logits
    if kind == "l2_sp":
        return (loss + sp_shared_penalty(model) * config.alpha
                + private_penalty(model) * config.beta), logits
    # l2_fe: empirical loss only; the freeze is the optimizer's job.
    return loss, logits
