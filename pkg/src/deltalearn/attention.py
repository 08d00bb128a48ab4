"""Supervised per-filter attention from channel-ablation loss gaps.

A filter's weight for a sample is the softmax, across the filters of one
tapped layer, of how much zeroing the filter (its outgoing weights and its
bias) increases that sample's cross-entropy under the frozen source features
with a trained classifier head. The loss oracle is exactly the frozen-
extractor baseline model, so ``train_fe_head`` doubles as that baseline.

Ablating filter j of a conv layer zeroes its output channel, so the scanner
caches each tapped layer's post-ReLU activation once per sample and replays
only the downstream layers per filter; results are bitwise identical to
re-running the whole network with the filter's parameters zeroed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, FormatError
from .models import ConvKernel, forward
from .tensor import Tensor, no_grad

_MAGIC = b"DATT"
_VERSION = 1


def softmax(v):
    z = np.asarray(v, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class AttentionTable:
    """Frozen per-sample, per-tap, per-filter weights plus provenance hashes."""

    taps: list
    weights: dict              # tap id -> (n_samples, N) float64
    dataset_hash: str
    checkpoint_hash: str

    @property
    def n_samples(self):
        return next(iter(self.weights.values())).shape[0] if self.weights else 0

    def row(self, tap, sample_index):
        try:
            return self.weights[tap][sample_index]
        except KeyError:
            raise KeyError(f"attention table has no tap {tap}") from None

    def batch_rows(self, tap, sample_indices):
        if tap not in self.weights:
            raise KeyError(f"attention table has no tap {tap}")
        rows = self.weights[tap]
        idx = np.asarray(sample_indices)
        if idx.min() < 0 or idx.max() >= rows.shape[0]:
            raise KeyError(
                f"attention table covers samples [0, {rows.shape[0]}), "
                f"requested [{idx.min()}, {idx.max()}]"
            )
        return rows[idx]

    def select(self, sample_indices):
        """A re-indexed table restricted to ``sample_indices`` (for CV folds)."""
        idx = np.asarray(sample_indices)
        return AttentionTable(
            taps=list(self.taps),
            weights={t: w[idx].copy() for t, w in self.weights.items()},
            dataset_hash=self.dataset_hash,
            checkpoint_hash=self.checkpoint_hash,
        )

    def serialize(self):
        parts = [_MAGIC, struct.pack("<I", _VERSION),
                 bytes.fromhex(self.dataset_hash), bytes.fromhex(self.checkpoint_hash),
                 struct.pack("<I", len(self.taps))]
        for tap in self.taps:
            parts.append(struct.pack("<II", tap, self.weights[tap].shape[1]))
        parts.append(struct.pack("<Q", self.n_samples))
        for i in range(self.n_samples):
            for tap in self.taps:
                parts.append(np.ascontiguousarray(self.weights[tap][i], dtype="<f8").tobytes())
        return b"".join(parts)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.serialize())

    @staticmethod
    def deserialize(raw):
        if raw[:4] != _MAGIC:
            raise FormatError(f"bad attention-cache magic {raw[:4]!r}", offset=0)
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != _VERSION:
            raise FormatError(f"unsupported attention-cache version {version}", offset=4)
        dataset_hash = raw[8:40].hex()
        checkpoint_hash = raw[40:72].hex()
        (n_taps,) = struct.unpack_from("<I", raw, 72)
        pos = 76
        taps, widths = [], {}
        for _ in range(n_taps):
            tap, n = struct.unpack_from("<II", raw, pos)
            taps.append(tap)
            widths[tap] = n
            pos += 8
        (n_samples,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        weights = {t: np.empty((n_samples, widths[t])) for t in taps}
        for i in range(n_samples):
            for t in taps:
                nbytes = widths[t] * 8
                if pos + nbytes > len(raw):
                    raise FormatError("truncated attention row", offset=pos)
                weights[t][i] = np.frombuffer(raw[pos:pos + nbytes], dtype="<f8")
                pos += nbytes
        if pos != len(raw):
            raise FormatError("trailing bytes after final attention row", offset=pos)
        return AttentionTable(taps, weights, dataset_hash, checkpoint_hash)

    @staticmethod
    def load(path):
        with open(path, "rb") as fh:
            return AttentionTable.deserialize(fh.read())


def train_fe_head(model, dataset, epochs, lr, seed, batch_size=16, transform=None):
    """Train only the classifier head on frozen source features (plain SGD).

    Returns a clone; every non-head parameter of the result is bitwise equal
    to the input's. This is also the frozen-extractor baseline model.
    """
    out = model.clone()
    head = sorted(out.head_names)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x666568]))
    n = len(dataset.labels)
    for _ in range(int(epochs)):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = dataset.images[idx]
            if transform is not None:
                x = transform(x)
            out.zero_grad()
            loss = T.softmax_cross_entropy(forward(out, x), dataset.labels[idx])
            loss.backward()
            for name in head:
                p = out.params[name]
                p.data = p.data - lr * p.grad
    return out


def per_sample_loss(model, x, label, params=None):
    """Cross-entropy of one sample (no batch averaging effect: batch of one)."""
    with no_grad():
        logits = forward(model, x[None], params)
        return T.softmax_cross_entropy(logits, np.array([label])).item()


def ablate_filter_loss(fe_model, sample, label, tap, j, transform=None):
    """Per-sample loss with filter ``j`` of layer ``tap`` fully zeroed.

    Builds the ablated parameter set explicitly (no caching); the scanner's
    cached path must agree with this bitwise.
    """
    spec = fe_model.layers[tap]
    if spec.kind != "conv":
        raise ConfigError(f"layer {tap} is not a conv layer")
    if not 0 <= j < spec.out_channels:
        raise IndexError(f"filter index {j} out of range for {spec.out_channels} filters")
    x = _transformed(sample, transform)
    params = dict(fe_model.params)
    w = params[f"conv{tap}.weight"].data.copy()
    b = params[f"conv{tap}.bias"].data.copy()
    w[j] = 0.0
    b[j] = 0.0
    params[f"conv{tap}.weight"] = Tensor(w)
    params[f"conv{tap}.bias"] = Tensor(b)
    return per_sample_loss(fe_model, x, label, params)


def _transformed(sample, transform):
    x = np.asarray(sample, dtype=np.float64)
    if transform is not None:
        x = transform(x[None])[0]
    return x


class AblationScanner:
    """Activation-caching filter-ablation sweeps over a frozen model.

    Read-only with respect to the model: scans on one sample are independent,
    so concurrent scans and any evaluation order produce identical results.
    """

    def __init__(self, fe_model, taps=None, transform=None):
        self.model = fe_model
        self.taps = list(taps) if taps is not None else list(fe_model.tap_ids)
        self.transform = transform
        for tap in self.taps:
            if fe_model.layers[tap].kind != "conv":
                raise ConfigError(f"tap {tap} is not a conv layer")

    def _forward_from(self, layer_index, h):
        """Run layers[layer_index:] on activation ``h`` (batch of one)."""
        m = self.model
        for i in range(layer_index, len(m.layers)):
            spec = m.layers[i]
            if spec.kind == "conv":
                kernel = ConvKernel(m.params[f"conv{i}.weight"], m.params[f"conv{i}.bias"],
                                    spec.stride, spec.pad)
                h = T.conv2d(h, kernel)
            elif spec.kind == "relu":
                h = T.relu(h)
            elif spec.kind == "maxpool":
                h = T.maxpool2x2(h)
            elif spec.kind == "gap":
                h = T.global_avg_pool(h)
            else:
                h = T.linear(h, m.params[f"linear{i}.weight"], m.params[f"linear{i}.bias"])
        return h

    def scan(self, sample, label):
        """Baseline loss plus, per tap, the loss with each filter ablated.

        Returns ``(baseline, {tap: array of N losses})``.
        """
        x = _transformed(sample, self.transform)
        label_arr = np.array([int(label)])
        with no_grad():
            # One clean pass, recording each tapped layer's post-ReLU output.
            h = Tensor(x[None])
            cached = {}
            m = self.model
            for i, spec in enumerate(m.layers):
                if spec.kind == "conv":
                    kernel = ConvKernel(m.params[f"conv{i}.weight"], m.params[f"conv{i}.bias"],
                                        spec.stride, spec.pad)
                    h = T.conv2d(h, kernel)
                elif spec.kind == "relu":
                    h = T.relu(h)
                    if i - 1 in self.taps:
                        cached[i - 1] = h.data
                elif spec.kind == "maxpool":
                    h = T.maxpool2x2(h)
                elif spec.kind == "gap":
                    h = T.global_avg_pool(h)
                else:
                    h = T.linear(h, m.params[f"linear{i}.weight"], m.params[f"linear{i}.bias"])
            baseline = T.softmax_cross_entropy(h, label_arr).item()

            losses = {}
            for tap in self.taps:
                act = cached[tap]
                n_filters = act.shape[1]
                vals = np.empty(n_filters)
                for j in range(n_filters):
                    ablated = act.copy()
                    ablated[:, j] = 0.0
                    logits = self._forward_from(tap + 2, Tensor(ablated))
                    vals[j] = T.softmax_cross_entropy(logits, label_arr).item()
                losses[tap] = vals
        return baseline, losses


def attention_weights(fe_model, sample, label, tap, transform=None):
    """Softmax over the ablation loss gaps of one tap for one sample."""
    scanner = AblationScanner(fe_model, taps=[tap], transform=transform)
    baseline, losses = scanner.scan(sample, label)
    return softmax(losses[tap] - baseline)


def build_attention_table(fe_model, dataset, taps=None, cache_path=None, transform=None):
    """Per-sample attention weights for every tap, cached to disk by content.

    A cache file whose dataset or checkpoint hash mismatches is recomputed
    and overwritten, not an error.
    """
    taps = list(taps) if taps is not None else list(fe_model.tap_ids)
    dataset_hash = dataset.content_hash
    checkpoint_hash = fe_model.digest()
    if cache_path is not None:
        try:
            cached = AttentionTable.load(cache_path)
        except (OSError, FormatError):
            cached = None
        if (cached is not None and cached.dataset_hash == dataset_hash
                and cached.checkpoint_hash == checkpoint_hash and cached.taps == taps):
            return cached

    scanner = AblationScanner(fe_model, taps=taps, transform=transform)
    n = len(dataset.labels)
    weights = {t: np.empty((n, fe_model.tap_channels(t))) for t in taps}
    for i in range(n):
        baseline, losses = scanner.scan(dataset.images[i], int(dataset.labels[i]))
        for t in taps:
            weights[t][i] = softmax(losses[t] - baseline)
    table = AttentionTable(taps, weights, dataset_hash, checkpoint_hash)
    if cache_path is not None:
        table.save(cache_path)
    return table
