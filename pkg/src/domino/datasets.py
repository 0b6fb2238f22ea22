"""Paired two-view / two-domain image data.

Images are float32 (N, C, 32, 32) arrays in [0, 1]; labels are int64.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from .ndgrad import checkpoint

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
PAIR_KINDS = ("two_view", "two_domain", "synthetic")


class FormatError(ValueError):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"{self.name}: images {self.images.shape} vs labels {self.labels.shape}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def check_range(self) -> None:
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError(f"{self.name}: intensities outside [0, 1]")

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx], self.name)


@dataclass
class MultimodalBatch:
    x1: np.ndarray
    x2: np.ndarray
    labels: np.ndarray
    pair_kind: str = "two_view"


# --- IDX -------------------------------------------------------------------

def _read_idx(path, magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = got & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) - header < count:
        raise FormatError(f"{path}: payload has {len(blob) - header} bytes, expected {count}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header).reshape(dims)


def resize_bilinear(images: np.ndarray, size: int = 32) -> np.ndarray:
    """Bilinear resize of (N, C, H, W) images to ``size`` x ``size``."""
    n, c, h, w = images.shape
    if (h, w) == (size, size):
        return images.astype(np.float32, copy=True)
    out = ndimage.zoom(images.astype(np.float64), (1, 1, size / h, size / w),
                       order=1, mode="nearest", grid_mode=True)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def load_idx(images_path, labels_path, size: int | None = 32, name: str = "idx") -> LabeledImageSet:
    raw = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if raw.ndim != 3 or labels.ndim != 1 or len(raw) != len(labels):
        raise FormatError(f"IDX shapes do not pair up: {raw.shape} vs {labels.shape}")
    images = (raw.astype(np.float32) / 255.0)[:, None]
    if size is not None:
        images = resize_bilinear(images, size)
    return LabeledImageSet(images, labels.astype(np.int64), name)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (used to craft fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", 0x00000800 | array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# --- NDCK-backed image sets -------------------------------------------------

def save_image_set(path, sets: dict[str, LabeledImageSet], meta: dict[str, float] | None = None) -> None:
    """Write image sets (and optional scalar metadata) to one NDCK container."""
    arrays = {}
    for key, s in sets.items():
        arrays[f"{key}/images"] = s.images.astype(np.float32)
        arrays[f"{key}/labels"] = s.labels.astype(np.float64)
    for key, value in (meta or {}).items():
        arrays[f"meta/{key}"] = np.array([value], dtype=np.float64)
    checkpoint.save(path, arrays)


def load_image_sets(path) -> dict[str, LabeledImageSet]:
    arrays = checkpoint.load(path)
    keys = sorted({k.rsplit("/", 1)[0] for k in arrays if k.endswith("/images")})
    out = {}
    for key in keys:
        if f"{key}/labels" not in arrays:
            raise FormatError(f"{path}: {key}/images without {key}/labels")
        out[key] = LabeledImageSet(arrays[f"{key}/images"], arrays[f"{key}/labels"].astype(np.int64), key)
    return out


# --- corruption pipeline ----------------------------------------------------

def rotate_images(images: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate each image by its angle (radians) about the centre; bilinear, zero fill."""
    out = np.empty_like(images, dtype=np.float32)
    for k, (img, ang) in enumerate(zip(images, angles)):
        if ang == 0:
            out[k] = img
            continue
        out[k] = ndimage.rotate(img, np.degrees(ang), axes=(1, 2), reshape=False,
                                order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def minmax_per_image(images: np.ndarray) -> np.ndarray:
    flat = images.reshape(len(images), -1)
    lo = flat.min(axis=1, keepdims=True)
    hi = flat.max(axis=1, keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return ((flat - lo) / span).reshape(images.shape).astype(np.float32)


def make_two_view(images: LabeledImageSet, seed: int, max_angle: float = np.pi / 4) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Rotated view and noisy view of every image, index-aligned."""
    images.check_range()
    rng = np.random.default_rng(seed)
    angles = rng.uniform(-max_angle, max_angle, size=len(images)) if max_angle else np.zeros(len(images))
    noise = rng.uniform(0.0, 1.0, size=images.images.shape)
    view1 = rotate_images(images.images, angles)
    view2 = minmax_per_image(images.images.astype(np.float64) + noise)
    base = images.name or "set"
    return (LabeledImageSet(view1, images.labels.copy(), f"{base}/rotated"),
            LabeledImageSet(view2, images.labels.copy(), f"{base}/noisy"))


# --- two-domain pairing ------------------------------------------------------

class TwoDomainPairing:
    """Class-matched pairing of set A with set B, resampled every epoch.

    Within an epoch each A sample appears exactly once; its partner is a
    uniformly drawn B sample of the same class.
    """

    def __init__(self, set_a: LabeledImageSet, set_b: LabeledImageSet, seed: int):
        classes_a = set(np.unique(set_a.labels).tolist())
        classes_b = set(np.unique(set_b.labels).tolist())
        if not classes_a & classes_b:
            raise ValueError("label sets of the two domains are disjoint")
        missing = classes_a - classes_b
        if missing:
            raise ValueError(f"classes {sorted(missing)} of domain A have no partner in domain B")
        self.set_a, self.set_b, self.seed = set_a, set_b, seed
        self._pools = {c: np.flatnonzero(set_b.labels == c) for c in classes_a}

    def epoch_pairs(self, epoch: int, shuffle: bool = True) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, epoch])
        a_idx = rng.permutation(len(self.set_a)) if shuffle else np.arange(len(self.set_a))
        b_idx = np.empty_like(a_idx)
        labels = self.set_a.labels[a_idx]
        for c, pool in self._pools.items():
            sel = labels == c
            b_idx[sel] = pool[rng.integers(0, len(pool), size=int(sel.sum()))]
        return a_idx, b_idx

    def batches(self, epoch: int, batch_size: int) -> Iterator[MultimodalBatch]:
        a_idx, b_idx = self.epoch_pairs(epoch)
        for s in _batch_slices(len(a_idx), batch_size):
            yield MultimodalBatch(self.set_a.images[a_idx[s]], self.set_b.images[b_idx[s]],
                                  self.set_a.labels[a_idx[s]], "two_domain")


def pair_two_domain(set_a: LabeledImageSet, set_b: LabeledImageSet, seed: int,
                    epoch: int = 0, batch_size: int = 64) -> Iterator[MultimodalBatch]:
    return TwoDomainPairing(set_a, set_b, seed).batches(epoch, batch_size)


def _batch_slices(n: int, batch_size: int) -> list[slice]:
    out = [slice(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    # a single leftover sample has no in-batch negatives
    if out and out[-1].stop - out[-1].start < 2:
        out.pop()
    return out


def num_batches(n: int, batch_size: int) -> int:
    return len(_batch_slices(n, batch_size))


# --- synthetic data ----------------------------------------------------------

_GRID = np.mgrid[0:32, 0:32].astype(np.float64)


def _glyph(cls: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _GRID
    cy, cx = 16 + rng.uniform(-2, 2, size=2)
    r = rng.uniform(6.5, 9.0)
    t = rng.uniform(1.6, 2.6)
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dy, dx)

    def hbar(off=0.0):
        return (np.abs(dy - off) < t) & (np.abs(dx) < r)

    def vbar(off=0.0):
        return (np.abs(dx - off) < t) & (np.abs(dy) < r)

    if cls == 0:
        m = dist < r * 0.8
    elif cls == 1:
        m = vbar()
    elif cls == 2:
        m = hbar()
    elif cls == 3:
        m = np.abs(dist - r * 0.85) < t
    elif cls == 4:
        m = vbar() | hbar()
    elif cls == 5:
        m = ((np.abs(dy - dx) < t * 1.2) | (np.abs(dy + dx) < t * 1.2)) & (np.maximum(np.abs(dx), np.abs(dy)) < r * 0.8)
    elif cls == 6:
        m = vbar(-r / 2) | vbar(r / 2)
    elif cls == 7:
        m = hbar(-r / 2) | hbar(r / 2)
    elif cls == 8:
        box = np.maximum(np.abs(dx), np.abs(dy))
        m = np.abs(box - r * 0.8) < t
    elif cls == 9:
        off = r * 0.5
        m = (np.hypot(dy - off, dx - off) < r * 0.4) | (np.hypot(dy + off, dx + off) < r * 0.4)
    else:
        raise ValueError(f"glyph class {cls} not defined (max 10 classes)")
    img = m.astype(np.float64) * rng.uniform(0.7, 1.0)
    return ndimage.gaussian_filter(img, 0.6)


def _grating(cls: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _GRID
    freq = 1.5 + 9.0 * cls / max(num_classes - 1, 1)  # cycles per image width
    theta = rng.uniform(-0.15, 0.15)
    phase = rng.uniform(0, 2 * np.pi)
    proj = xx * np.cos(theta) + yy * np.sin(theta)
    return 0.5 + 0.5 * np.sin(2 * np.pi * freq * proj / 32 + phase)


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % num_classes)


def synth_glyphs(n: int, num_classes: int, seed: int) -> LabeledImageSet:
    if n < num_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, num_classes, rng)
    images = np.stack([_glyph(int(c), rng) for c in labels])[:, None]
    return LabeledImageSet(np.clip(images, 0, 1), labels, "glyphs")


def synth_multimodal(n: int, num_classes: int, seed: int) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Glyph images paired with class-frequency gratings of random phase."""
    if n < num_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, num_classes, rng)
    glyphs = np.stack([_glyph(int(c), rng) for c in labels])[:, None]
    gratings = np.stack([_grating(int(c), num_classes, rng) for c in labels])[:, None]
    return (LabeledImageSet(np.clip(glyphs, 0, 1), labels, "synth/glyph"),
            LabeledImageSet(np.clip(gratings, 0, 1), labels.copy(), "synth/grating"))


# --- dataset bundles ---------------------------------------------------------

@dataclass
class MultimodalDataset:
    """Train/test splits per modality plus how the modalities pair up."""

    train: tuple[LabeledImageSet, LabeledImageSet]
    test: tuple[LabeledImageSet, LabeledImageSet]
    pair_kind: str = "two_view"
    seed: int = 0

    def __post_init__(self):
        if self.pair_kind not in PAIR_KINDS:
            raise ValueError(f"unknown pair kind {self.pair_kind!r}")
        for s in (*self.train, *self.test):
            s.check_range()
        if self.pair_kind != "two_domain":
            for a, b in (self.train, self.test):
                if len(a) != len(b) or not np.array_equal(a.labels, b.labels):
                    raise ValueError("index-aligned modalities must share labels")

    @property
    def in_channels(self) -> list[int]:
        return [s.images.shape[1] for s in self.train]

    @property
    def num_classes(self) -> int:
        return max(s.num_classes for s in (*self.train, *self.test))

    def n_train(self) -> int:
        return len(self.train[0])

    def train_batches(self, epoch: int, batch_size: int) -> Iterator[MultimodalBatch]:
        if self.pair_kind == "two_domain":
            yield from TwoDomainPairing(*self.train, self.seed).batches(epoch, batch_size)
            return
        a, b = self.train
        order = np.random.default_rng([self.seed, epoch]).permutation(len(a))
        for s in _batch_slices(len(order), batch_size):
            idx = order[s]
            yield MultimodalBatch(a.images[idx], b.images[idx], a.labels[idx], self.pair_kind)

    def paired(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Index-aligned image arrays for the split (a fixed pairing for two-domain data)."""
        a, b = self.train if split == "train" else self.test
        if self.pair_kind != "two_domain":
            return a.images, b.images
        a_idx, b_idx = TwoDomainPairing(a, b, self.seed + (0 if split == "train" else 1)).epoch_pairs(0, shuffle=False)
        return a.images[a_idx], b.images[b_idx]

    def save(self, path) -> None:
        save_image_set(path, {
            "train/0": self.train[0], "train/1": self.train[1],
            "test/0": self.test[0], "test/1": self.test[1],
        }, meta={"pair_kind": PAIR_KINDS.index(self.pair_kind), "seed": self.seed})

    @classmethod
    def load(cls, path) -> "MultimodalDataset":
        arrays = checkpoint.load(path)
        sets = load_image_sets(path)
        try:
            train = (sets["train/0"], sets["train/1"])
            test = (sets["test/0"], sets["test/1"])
        except KeyError as exc:
            raise FormatError(f"{path}: missing split {exc}") from None
        kind = PAIR_KINDS[int(arrays["meta/pair_kind"][0])] if "meta/pair_kind" in arrays else "two_view"
        seed = int(arrays["meta/seed"][0]) if "meta/seed" in arrays else 0
        return cls(train, test, kind, seed)


def build_two_view(source: LabeledImageSet, source_test: LabeledImageSet, seed: int) -> MultimodalDataset:
    train = make_two_view(source, seed)
    test = make_two_view(source_test, seed + 1)
    return MultimodalDataset(train, test, "two_view", seed)


def build_synth(n: int, n_test: int, num_classes: int, seed: int) -> MultimodalDataset:
    a, b = synth_multimodal(n + n_test, num_classes, seed)
    tr, te = np.arange(n), np.arange(n, n + n_test)
    return MultimodalDataset((a.subset(tr), b.subset(tr)), (a.subset(te), b.subset(te)), "synthetic", seed)


def build_two_view_synth(n: int, n_test: int, num_classes: int, seed: int) -> MultimodalDataset:
    src = synth_glyphs(n + n_test, num_classes, seed)
    return build_two_view(src.subset(np.arange(n)), src.subset(np.arange(n, n + n_test)), seed)


def build_two_domain(set_a: LabeledImageSet, set_b: LabeledImageSet, test_a: LabeledImageSet,
                     test_b: LabeledImageSet, seed: int) -> MultimodalDataset:
    return MultimodalDataset((set_a, set_b), (test_a, test_b), "two_domain", seed)


def _resolve(path, data_dir=None):
    p = Path(path)
    if p.is_absolute():
        return p
    root = data_dir or os.environ.get("DOMINO_DATA_DIR")
    return Path(root) / p if root else p


def dataset_from_spec(spec: dict, data_dir=None) -> MultimodalDataset:
    """Build a dataset from a config mapping.

    Kinds: ``synth`` (glyph/grating pairs), ``two_view_synth`` (corruption
    pipeline on synthetic glyphs), ``two_view`` (corruption pipeline on IDX
    files), ``two_domain`` (IDX digits paired with an NDCK image set, or the
    synthetic glyph/grating analogue) and ``file`` (a container written by
    ``gen-data``).
    """
    spec = dict(spec)
    kind = spec.pop("kind", "synth")
    seed = int(spec.pop("seed", 0))
    n = int(spec.pop("n", 2000))
    n_test = int(spec.pop("n_test", max(n // 5, 10)))
    num_classes = int(spec.pop("num_classes", 10))
    if kind == "synth":
        ds = build_synth(n, n_test, num_classes, seed)
    elif kind == "two_view_synth":
        ds = build_two_view_synth(n, n_test, num_classes, seed)
    elif kind == "two_view":
        train = load_idx(_resolve(spec.pop("images"), data_dir), _resolve(spec.pop("labels"), data_dir))
        test = load_idx(_resolve(spec.pop("test_images"), data_dir), _resolve(spec.pop("test_labels"), data_dir))
        train = train.subset(np.arange(min(n, len(train))))
        test = test.subset(np.arange(min(n_test, len(test))))
        ds = build_two_view(train, test, seed)
    elif kind == "two_domain":
        if "images" in spec:
            a = load_idx(_resolve(spec.pop("images"), data_dir), _resolve(spec.pop("labels"), data_dir))
            a_test = load_idx(_resolve(spec.pop("test_images"), data_dir), _resolve(spec.pop("test_labels"), data_dir))
            a, a_test = a.subset(np.arange(min(n, len(a)))), a_test.subset(np.arange(min(n_test, len(a_test))))
        else:
            src = synth_glyphs(n + n_test, num_classes, seed)
            a, a_test = src.subset(np.arange(n)), src.subset(np.arange(n, n + n_test))
        if "other" in spec:
            sets = load_image_sets(_resolve(spec.pop("other"), data_dir))
            b, b_test = sets["train"], sets["test"]
        else:
            _, b_all = synth_multimodal(n + n_test, num_classes, seed + 1)
            b, b_test = b_all.subset(np.arange(n)), b_all.subset(np.arange(n, n + n_test))
        ds = build_two_domain(a, b, a_test, b_test, seed)
    elif kind == "file":
        ds = MultimodalDataset.load(_resolve(spec.pop("path"), data_dir))
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if spec:
        raise ValueError(f"unknown dataset keys for kind {kind!r}: {sorted(spec)}")
    return ds
