"""Diagnostics: activation-map normalization and distance-from-start reports."""

from __future__ import annotations

import csv

import numpy as np

from .errors import ContractError
from .models import forward_with_taps
from .tensor import no_grad


def normalize_activation_map(act):
    """Min-max normalize a 2-d map into [0, 1]; constant maps become zeros."""
    a = np.asarray(act, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def conv_filter_distances(model_before, model_after):
    """Per-filter Euclidean distance between flattened before/after conv weights."""
    before, after = model_before.params, model_after.params
    names = sorted(n for n in before if n.startswith("conv") and n.endswith(".weight"))
    if names != sorted(n for n in after if n.startswith("conv") and n.endswith(".weight")):
        raise ContractError("models have different conv layouts")
    out = {}
    for name in names:
        wb, wa = before[name].data, after[name].data
        if wb.shape != wa.shape:
            raise ContractError(f"{name}: shape {wb.shape} != {wa.shape}")
        delta = (wa - wb).reshape(wb.shape[0], -1)
        out[name.removesuffix(".weight")] = np.sqrt((delta * delta).sum(axis=1))
    return out


def param_distance_report(model_before, model_after, grouping=None):
    """Filter distances grouped by layer label, sorted descending per group.

    ``grouping`` maps conv layer names (``conv0``, ...) to group labels;
    ungrouped layers use their own name. Returns ``{label: [(layer, filter,
    distance), ...]}`` with each group sorted by descending distance.
    """
    grouping = grouping or {}
    report = {}
    for layer, dists in conv_filter_distances(model_before, model_after).items():
        label = grouping.get(layer, layer)
        rows = report.setdefault(label, [])
        rows.extend((layer, j, float(d)) for j, d in enumerate(dists))
    for label in report:
        report[label].sort(key=lambda r: (-r[2], r[0], r[1]))
    return report


def larger_distance_fraction(model_before, model_a, model_b):
    """Fraction of conv filters that moved farther from start in A than in B."""
    da = conv_filter_distances(model_before, model_a)
    db = conv_filter_distances(model_before, model_b)
    wins = total = 0
    for layer in da:
        wins += int((da[layer] > db[layer]).sum())
        total += da[layer].size
    return wins / total


def write_distance_csv(report, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "rank", "layer", "filter", "distance"])
        for label in sorted(report):
            for rank, (layer, j, dist) in enumerate(report[label]):
                writer.writerow([label, rank, layer, j, repr(dist)])


def write_activation_grid_csv(model, images, tap, path, params=None):
    """Normalized per-filter activation grids for a few samples, one CSV row
    per (sample, filter, map-row)."""
    with no_grad():
        _, fms = forward_with_taps(model, np.asarray(images), params)
    vectors = fms.vectors(tap).data  # (B, N, h*w)
    spec = model.layers[tap]
    # Infer the spatial side from the tap's vector length (square taps only
    # in the reference models; general maps stay flat otherwise).
    length = vectors.shape[2]
    side = int(round(np.sqrt(length)))
    square = side * side == length
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "filter", "row", "values"])
        for i in range(vectors.shape[0]):
            for j in range(vectors.shape[1]):
                grid = vectors[i, j].reshape(side, side) if square else vectors[i, j][None, :]
                norm = normalize_activation_map(grid)
                for r in range(norm.shape[0]):
                    writer.writerow([i, j, r, " ".join(repr(v) for v in norm[r])])
    return spec.out_channels
