"""Dataset container, synthetic transfer tasks, augmentation and 10-crop.

Images live in a custom binary container ("DIMG") instead of an image codec
so that content hashes are exact and round-trips are bitwise. The synthetic
generator produces oriented-texture classification tasks: source and target
tasks share background statistics and frequency band but use disjoint class
orientations, so low-level edge features transfer while the label spaces
differ. Phase is uniform per sample, which keeps raw-pixel linear
classifiers near chance.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, ValidationError

_MAGIC = b"DIMG"
_VERSION = 1


def dataset_hash(images, labels, num_classes):
    h = hashlib.sha256()
    h.update(struct.pack("<I", int(num_classes)))
    h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(images, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class Dataset:
    """Fixed-shape image classification split; pixels are float64 in [0, 1]."""

    images: np.ndarray          # (n, C, H, W)
    labels: np.ndarray          # (n,) int64
    num_classes: int
    split: str = "train"
    content_hash: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError(
                f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes})")
        if not self.content_hash:
            self.content_hash = dataset_hash(self.images, self.labels, self.num_classes)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, split=None):
        idx = np.asarray(indices)
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(),
                       self.num_classes, split or self.split)

    def channel_means(self):
        return self.images.mean(axis=(0, 2, 3))


@dataclass
class Batch:
    """One training batch: transformed pixels, labels, original sample indices."""

    x: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray


# -- DIMG container ---------------------------------------------------------

def save_dimg(dataset, path):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, dataset.num_classes))
        fh.write(struct.pack("<Q", len(dataset)))
        for i in range(len(dataset)):
            img = dataset.images[i]
            c, h, w = img.shape
            fh.write(struct.pack("<IIII", int(dataset.labels[i]), c, h, w))
            fh.write(np.ascontiguousarray(img, dtype="<f8").tobytes())


def _parse_dimg(raw, path):
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}", offset=0)
    version, k = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    (count,) = struct.unpack_from("<Q", raw, 12)
    pos = 20
    images, labels = [], []
    shape = None
    for i in range(count):
        if pos + 16 > len(raw):
            raise FormatError(f"{path}: truncated sample header", offset=pos)
        label, c, h, w = struct.unpack_from("<IIII", raw, pos)
        pos += 16
        nbytes = c * h * w * 8
        if pos + nbytes > len(raw):
            raise FormatError(f"{path}: truncated pixel data", offset=pos)
        img = np.frombuffer(raw[pos:pos + nbytes], dtype="<f8").reshape(c, h, w)
        pos += nbytes
        if shape is None:
            shape = (c, h, w)
        elif (c, h, w) != shape:
            raise ValidationError(f"{path}: sample {i} shape {(c, h, w)} != {shape}")
        if label >= k:
            raise ValidationError(f"{path}: sample {i} label {label} >= K={k}")
        images.append(img)
        labels.append(label)
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes", offset=pos)
    return np.array(images), np.array(labels, dtype=np.int64), k


def load_dimg(path, split="train"):
    with open(path, "rb") as fh:
        raw = fh.read()
    images, labels, k = _parse_dimg(raw, path)
    return Dataset(images, labels, k, split)


def load_dataset(path, split="train"):
    """A .dimg file, or a directory tree root/<class_name>/<sample>.dimg.

    Directory classes map to labels in lexicographic order of the class
    directory names; samples load in lexicographic filename order. Each
    per-sample file must hold exactly one image whose stored label matches
    its class directory.
    """
    if os.path.isfile(path):
        return load_dimg(path, split)
    classes = sorted(d for d in os.listdir(path)
                     if os.path.isdir(os.path.join(path, d)))
    if not classes:
        raise ValidationError(f"{path}: no class subdirectories")
    images, labels = [], []
    for ci, cname in enumerate(classes):
        cdir = os.path.join(path, cname)
        for fname in sorted(os.listdir(cdir)):
            if not fname.endswith(".dimg"):
                continue
            fpath = os.path.join(cdir, fname)
            with open(fpath, "rb") as fh:
                imgs, labs, _ = _parse_dimg(fh.read(), fpath)
            if len(imgs) != 1:
                raise ValidationError(f"{fpath}: per-sample files must hold exactly 1 image")
            if labs[0] != ci:
                raise ValidationError(
                    f"{fpath}: stored label {labs[0]} != class index {ci} of {cname!r}")
            images.append(imgs[0])
            labels.append(ci)
    return Dataset(np.array(images), np.array(labels, dtype=np.int64), len(classes), split)


# -- synthetic transfer tasks -----------------------------------------------

@dataclass(frozen=True)
class SyntheticStyle:
    frequency: float = 0.18      # texture cycles per pixel
    texture_amp: float = 0.22
    background_amp: float = 0.18
    noise_std: float = 0.12
    orientation_jitter_deg: float = 7.0


def _class_orientations(k, offset):
    return [np.pi * (c + offset) / k for c in range(k)]


def _bg_field(rng, size):
    coarse = rng.standard_normal((4, 4))
    return bilinear_resize(coarse[None], size, size)[0]


def _synth_sample(rng, theta, size, style):
    jitter = np.deg2rad(style.orientation_jitter_deg)
    th = theta + rng.normal(0.0, jitter)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    coords = np.arange(size, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    wave = np.sin(2.0 * np.pi * style.frequency * (np.cos(th) * xx + np.sin(th) * yy) + phase)
    bg = _bg_field(rng, size)
    tint = rng.uniform(0.7, 1.3, size=3)
    img = np.empty((3, size, size))
    for ch in range(3):
        img[ch] = (0.5 + style.background_amp * bg
                   + style.texture_amp * tint[ch] * wave
                   + style.noise_std * rng.standard_normal((size, size)))
    return np.clip(img, 0.0, 1.0)


def _synth_domain(seed, domain_id, orientations, n_per_class, size, split, style):
    split_id = {"train": 0, "test": 1}[split]
    images, labels = [], []
    for c, theta in enumerate(orientations):
        for i in range(n_per_class):
            rng = np.random.default_rng(
                np.random.SeedSequence([int(seed), domain_id, c, split_id, i]))
            images.append(_synth_sample(rng, theta, size, style))
            labels.append(c)
    return Dataset(np.array(images), np.array(labels, dtype=np.int64),
                   len(orientations), split)


def make_synthetic_transfer_pair(seed, k_src=4, k_tgt=3, n_per_class=20, size=32,
                                 split="train", style=SyntheticStyle()):
    """Deterministic (source, target) datasets with disjoint label spaces.

    Calling again with ``split="test"`` yields fresh draws of the same
    classes, disjoint from the train split.
    """
    if k_src < 2 or k_tgt < 2:
        raise ConfigError("both tasks need at least 2 classes")
    src = _synth_domain(seed, 0, _class_orientations(k_src, 0.0),
                        n_per_class, size, split, style)
    tgt = _synth_domain(seed, 1, _class_orientations(k_tgt, 0.37),
                        n_per_class, size, split, style)
    return src, tgt


# -- geometry and augmentation ----------------------------------------------

def bilinear_resize(img, out_h, out_w):
    """Half-pixel-center bilinear resize of a (C, H, W) image."""
    c, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    tl = img[:, y0[:, None], x0[None, :]]
    tr = img[:, y0[:, None], x1[None, :]]
    bl = img[:, y1[:, None], x0[None, :]]
    br = img[:, y1[:, None], x1[None, :]]
    top = tl * (1 - wx) + tr * wx
    bot = bl * (1 - wx) + br * wx
    return top * (1 - wy) + bot * wy


def resize_shorter_edge(img, target):
    """Resize so the shorter spatial edge equals ``target``, keeping aspect."""
    _, h, w = img.shape
    if h <= w:
        return bilinear_resize(img, target, int(round(w * target / h)))
    return bilinear_resize(img, int(round(h * target / w)), target)


def mirror(img):
    return img[:, :, ::-1]


@dataclass(frozen=True)
class AugmentSpec:
    """Training-time transform: resize, random crop, random mirror, zero-mean."""

    resize_shorter: int = 0      # 0 = keep size
    crop: int = 0                # 0 = full image
    mirror: bool = False
    mean: tuple = ()             # per-channel mean to subtract; () = none


def _check_crop(spec, h, w):
    if spec.crop and (spec.crop > h or spec.crop > w):
        raise ConfigError(f"crop {spec.crop} exceeds image extents {h}x{w}")


def augment(sample, spec, rng):
    """One augmented training view. Draw order: crop y, crop x, mirror coin."""
    img = np.asarray(sample, dtype=np.float64)
    if spec.resize_shorter:
        img = resize_shorter_edge(img, spec.resize_shorter)
    _, h, w = img.shape
    _check_crop(spec, h, w)
    if spec.crop:
        y = int(rng.integers(0, h - spec.crop + 1))
        x = int(rng.integers(0, w - spec.crop + 1))
        img = img[:, y:y + spec.crop, x:x + spec.crop]
    if spec.mirror and rng.random() < 0.5:
        img = mirror(img)
    if spec.mean:
        img = img - np.asarray(spec.mean)[:, None, None]
    return np.ascontiguousarray(img)


def eval_view(sample, spec):
    """The deterministic test-time view: resize, center crop, zero-mean."""
    img = np.asarray(sample, dtype=np.float64)
    if spec.resize_shorter:
        img = resize_shorter_edge(img, spec.resize_shorter)
    _, h, w = img.shape
    _check_crop(spec, h, w)
    if spec.crop:
        y = (h - spec.crop) // 2
        x = (w - spec.crop) // 2
        img = img[:, y:y + spec.crop, x:x + spec.crop]
    if spec.mean:
        img = img - np.asarray(spec.mean)[:, None, None]
    return np.ascontiguousarray(img)


def eval_batch(images, spec):
    return np.stack([eval_view(img, spec) for img in images])


def augment_batch(images, sample_ids, spec, seed, iteration):
    """Augment a batch with per-sample streams keyed by (seed, iteration, id)."""
    out = []
    for img, sid in zip(images, sample_ids):
        rng = np.random.default_rng(
            np.random.SeedSequence([int(seed), int(iteration), int(sid), 0x617567]))
        out.append(augment(img, spec, rng))
    return np.stack(out)


def ten_crop(image, crop):
    """Four corner crops, the center crop, and the mirrors of all five.

    Order: top-left, top-right, bottom-left, bottom-right, center, then the
    same five mirrored horizontally.
    """
    img = np.asarray(image, dtype=np.float64)
    _, h, w = img.shape
    if crop > h or crop > w:
        raise ConfigError(f"crop {crop} exceeds image extents {h}x{w}")
    cy, cx = (h - crop) // 2, (w - crop) // 2
    windows = [(0, 0), (0, w - crop), (h - crop, 0), (h - crop, w - crop), (cy, cx)]
    crops = [np.ascontiguousarray(img[:, y:y + crop, x:x + crop]) for y, x in windows]
    crops += [np.ascontiguousarray(mirror(c)) for c in crops[:5]]
    return crops
