"""Small configurable CNNs with source/target head swapping and feature taps.

A model is an ordered list of :class:`LayerSpec` plus a flat name->Tensor
parameter store. After ``replace_head`` the model additionally carries a
frozen snapshot of the source weights (every parameter except the replaced
classifier), which is what the transfer regularizers align against.

A *tap* marks a conv layer whose post-ReLU activation is observed as a
feature-map set during the forward pass: filter j's (h, w) activation is
flattened row-major into one vector per sample.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .tensor import ConvKernel, Tensor

_MAGIC = b"DLTA"
_VERSION = 1

KINDS = ("conv", "relu", "maxpool", "gap", "linear")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a model; fields other than ``kind`` apply per kind."""

    kind: str
    out_channels: int = 0     # conv
    kernel: int = 0           # conv, square
    stride: int = 1           # conv
    pad: int = 0              # conv
    out_features: int = 0     # linear
    tap: bool = False         # conv only: observe post-ReLU output

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.tap and self.kind != "conv":
            raise ConfigError("taps are only legal on conv layers")


class ConvNetModel:
    """Layered CNN with parameters partitioned into shared and head sets."""

    def __init__(self, layers, input_shape, params, head_names, source_params=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.params = params
        self.head_names = frozenset(head_names)
        self.source_params = source_params

    @property
    def num_classes(self):
        return self.layers[-1].out_features

    @property
    def tap_ids(self):
        return [i for i, spec in enumerate(self.layers) if spec.tap]

    def tap_channels(self, tap_id):
        return self.layers[tap_id].out_channels

    def shared_names(self):
        return sorted(n for n in self.params if n not in self.head_names)

    def trainable(self, frozen=()):
        return {n: p for n, p in self.params.items() if n not in frozen}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def clone(self):
        params = {n: Tensor(p.data.copy(), requires_grad=True) for n, p in self.params.items()}
        src = None if self.source_params is None else {n: a.copy() for n, a in self.source_params.items()}
        return ConvNetModel(self.layers, self.input_shape, params, self.head_names, src)

    def digest(self):
        """sha256 over the canonical serialization (spec + parameters)."""
        return hashlib.sha256(serialize_model(self)).hexdigest()


def _trace_shapes(layers, input_shape):
    """Walk the spec chain, returning per-layer input shapes; validates legality."""
    c, h, w = input_shape
    flat = None  # feature count once spatial structure is gone
    shapes = []
    for i, spec in enumerate(layers):
        shapes.append((c, h, w) if flat is None else (flat,))
        if spec.kind == "conv":
            if flat is not None:
                raise ConfigError(f"layer {i}: conv after flattening")
            if spec.out_channels < 1 or spec.kernel < 1:
                raise ConfigError(f"layer {i}: conv needs out_channels and kernel >= 1")
            span_h = h + 2 * spec.pad - spec.kernel
            span_w = w + 2 * spec.pad - spec.kernel
            if span_h < 0 or span_w < 0 or span_h % spec.stride or span_w % spec.stride:
                raise ConfigError(f"layer {i}: conv output extent is not a positive integer")
            h = span_h // spec.stride + 1
            w = span_w // spec.stride + 1
            c = spec.out_channels
            if spec.tap and not (i + 1 < len(layers) and layers[i + 1].kind == "relu"):
                raise ConfigError(f"layer {i}: tapped conv must be followed by relu")
        elif spec.kind == "relu":
            pass
        elif spec.kind == "maxpool":
            if flat is not None or h % 2 or w % 2:
                raise ConfigError(f"layer {i}: maxpool needs even spatial extents")
            h, w = h // 2, w // 2
        elif spec.kind == "gap":
            if flat is not None:
                raise ConfigError(f"layer {i}: gap after flattening")
            flat = c
        elif spec.kind == "linear":
            if spec.out_features < 1:
                raise ConfigError(f"layer {i}: linear needs out_features >= 1")
            flat = spec.out_features
    if not layers or layers[-1].kind != "linear":
        raise ConfigError("model must end in a linear classifier")
    return shapes


def build_model(layers, input_shape, seed):
    """Deterministically initialize a model (He fan-in scaling, zero biases)."""
    layers = list(layers)
    shapes = _trace_shapes(layers, input_shape)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D6F64]))
    params = {}
    for i, spec in enumerate(layers):
        in_shape = shapes[i]
        if spec.kind == "conv":
            cin = in_shape[0]
            fan_in = cin * spec.kernel * spec.kernel
            w = rng.standard_normal((spec.out_channels, cin, spec.kernel, spec.kernel))
            w *= np.sqrt(2.0 / fan_in)
            params[f"conv{i}.weight"] = Tensor(w, requires_grad=True)
            params[f"conv{i}.bias"] = Tensor(np.zeros(spec.out_channels), requires_grad=True)
        elif spec.kind == "linear":
            fin = in_shape[0] if len(in_shape) == 1 else int(np.prod(in_shape))
            w = rng.standard_normal((spec.out_features, fin)) * np.sqrt(2.0 / fin)
            params[f"linear{i}.weight"] = Tensor(w, requires_grad=True)
            params[f"linear{i}.bias"] = Tensor(np.zeros(spec.out_features), requires_grad=True)
    head = {f"linear{len(layers) - 1}.weight", f"linear{len(layers) - 1}.bias"}
    return ConvNetModel(layers, input_shape, params, head)


def replace_head(model, k_target, seed):
    """Re-dimension the final classifier for ``k_target`` classes (SPAR start).

    The returned model's non-head parameters are copies of ``model``'s and its
    source snapshot is set to those same values, so training starts exactly at
    the source weights. The fresh head is seeded He-style.
    """
    if k_target < 2:
        raise ConfigError(f"k_target must be >= 2, got {k_target}")
    last = len(model.layers) - 1
    layers = list(model.layers[:-1])
    layers.append(LayerSpec(kind="linear", out_features=int(k_target)))
    shapes = _trace_shapes(layers, model.input_shape)
    fin = shapes[last][0] if len(shapes[last]) == 1 else int(np.prod(shapes[last]))

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x68656164]))
    params = {}
    source = {}
    for name, p in model.params.items():
        if name in model.head_names:
            continue
        params[name] = Tensor(p.data.copy(), requires_grad=True)
        source[name] = p.data.copy()
    wname, bname = f"linear{last}.weight", f"linear{last}.bias"
    params[wname] = Tensor(rng.standard_normal((k_target, fin)) * np.sqrt(2.0 / fin),
                           requires_grad=True)
    params[bname] = Tensor(np.zeros(k_target), requires_grad=True)
    return ConvNetModel(layers, model.input_shape, params, {wname, bname}, source)


class FeatureMapSet:
    """Per-tap differentiable feature maps, shape (B, N_filters, h*w)."""

    def __init__(self, maps):
        self.maps = dict(maps)

    def taps(self):
        return sorted(self.maps)

    def vectors(self, tap_id):
        return self.maps[tap_id]

    def vector(self, tap_id, j, sample=0):
        """Filter j's flattened activation for one sample, as a plain array."""
        return self.maps[tap_id].data[sample, j]


def _as_input(model, x):
    if isinstance(x, Tensor):
        t = x
    else:
        t = Tensor(x)
    if t.data.ndim != 4 or t.data.shape[1:] != model.input_shape:
        raise ShapeError(
            f"batch shape {t.data.shape} does not match model input {model.input_shape}"
        )
    return t


def _forward(model, x, params, collect_taps, stop_after_last_tap=False):
    h = _as_input(model, x)
    bsz = h.data.shape[0]
    fms = {}
    pending_tap = None
    last_tap = max(model.tap_ids) if (stop_after_last_tap and model.tap_ids) else None
    for i, spec in enumerate(model.layers):
        if spec.kind == "conv":
            kernel = ConvKernel(params[f"conv{i}.weight"], params[f"conv{i}.bias"],
                                spec.stride, spec.pad)
            h = T.conv2d(h, kernel)
            pending_tap = i if spec.tap else None
        elif spec.kind == "relu":
            h = T.relu(h)
            if pending_tap is not None:
                if collect_taps:
                    _, c, hh, ww = h.data.shape
                    fms[pending_tap] = T.reshape(h, (bsz, c, hh * ww))
                if pending_tap == last_tap:
                    return None, FeatureMapSet(fms)
                pending_tap = None
        elif spec.kind == "maxpool":
            h = T.maxpool2x2(h)
        elif spec.kind == "gap":
            h = T.global_avg_pool(h)
        elif spec.kind == "linear":
            h = T.linear(h, params[f"linear{i}.weight"], params[f"linear{i}.bias"])
    return h, FeatureMapSet(fms)


def forward(model, x, params=None):
    """Logits for a batch."""
    logits, _ = _forward(model, x, params or model.params, collect_taps=False)
    return logits


def forward_with_taps(model, x, params=None):
    """Logits plus the FeatureMapSet of every tapped layer (both differentiable)."""
    return _forward(model, x, params or model.params, collect_taps=True)


def source_param_tensors(model):
    """The source snapshot wrapped as constant tensors, for forwards under omega*."""
    if model.source_params is None:
        raise ContractError("model has no source snapshot (not a transfer model)")
    return {n: Tensor(a) for n, a in model.source_params.items()}


def source_feature_maps(model, x):
    """FeatureMapSet of the source network on ``x``; no gradients flow."""
    if not model.tap_ids:
        return FeatureMapSet({})
    with T.no_grad():
        _, fms = _forward(model, x, source_param_tensors(model),
                          collect_taps=True, stop_after_last_tap=True)
    return fms


# -- checkpoint container -------------------------------------------------

def serialize_model(model):
    header = {
        "input_shape": list(model.input_shape),
        "layers": [asdict(s) for s in model.layers],
        "params": [
            {"name": n, "shape": list(model.params[n].data.shape),
             "head": n in model.head_names}
            for n in sorted(model.params)
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_MAGIC, struct.pack("<I", _VERSION), struct.pack("<Q", len(blob)), blob]
    for entry in header["params"]:
        data = np.ascontiguousarray(model.params[entry["name"]].data, dtype="<f8")
        parts.append(data.tobytes())
    return b"".join(parts)


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def deserialize_model(raw):
    if raw[:4] != _MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}", offset=0)
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", offset=16) from None
    pos = 16 + hlen
    layers = [LayerSpec(**d) for d in header["layers"]]
    params = {}
    head = set()
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8
        if pos + nbytes > len(raw):
            raise FormatError(f"truncated parameter blob for {entry['name']}", offset=pos)
        arr = np.frombuffer(raw[pos:pos + nbytes], dtype="<f8").reshape(shape).copy()
        params[entry["name"]] = Tensor(arr, requires_grad=True)
        if entry["head"]:
            head.add(entry["name"])
        pos += nbytes
    if pos != len(raw):
        raise FormatError("trailing bytes after final parameter blob", offset=pos)
    return ConvNetModel(layers, header["input_shape"], params, head)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())


# -- reference desk-scale architecture -------------------------------------

def desk32_layers(num_classes):
    """Three-conv 32x32 model; every conv except the first is tapped."""
    return [
        LayerSpec("conv", out_channels=8, kernel=3, pad=1),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("conv", out_channels=16, kernel=3, pad=1, tap=True),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("conv", out_channels=16, kernel=3, pad=1, tap=True),
        LayerSpec("relu"),
        LayerSpec("gap"),
        LayerSpec("linear", out_features=num_classes),
    ]


PRESETS = {"desk32": desk32_layers}


def layers_from_json(doc):
    return [LayerSpec(**d) for d in doc]


def resolve_model_spec(spec, num_classes):
    """A preset name or a JSON file path -> (layers, input_shape)."""
    if spec in PRESETS:
        return PRESETS[spec](num_classes), (3, 32, 32)
    with open(spec, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return layers_from_json(doc["layers"]), tuple(doc["input_shape"])
