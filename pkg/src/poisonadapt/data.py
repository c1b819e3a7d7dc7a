"""Synthetic two-domain image-grid benchmark with a controllable shift.

Each class is a fixed smoothed-noise prototype. Source examples are the
prototype plus Gaussian pixel noise; target examples first rotate and
brighten the prototype. Pixel values are clamped to [0, 1] and snapped to
the float32 grid at creation so that dataset persistence (which stores
32-bit pixels) round-trips bit-exactly.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ShapeError, UsageError


@dataclass
class Example:
    """One image grid with an optional class label."""

    image: np.ndarray
    label: int | None = None


@dataclass
class ShiftSpec:
    """Distribution gap between source and target domains."""

    rotation_deg: float = 25.0
    brightness: float = 0.15
    noise_std: float = 0.05
    prototype_seed: int = 7

    def to_meta(self) -> dict[str, str]:
        return {
            "shift_rotation_deg": repr(float(self.rotation_deg)),
            "shift_brightness": repr(float(self.brightness)),
            "shift_noise_std": repr(float(self.noise_std)),
            "shift_prototype_seed": str(int(self.prototype_seed)),
        }


class Dataset:
    """An ordered set of same-shape images with optional labels.

    ``images`` is (N, H, W) float64 on the float32 grid; ``labels`` is an
    int array of length N or None for the unlabeled (adaptation-facing) view.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray | None,
                 num_classes: int, domain: str, split: str, seed: int,
                 meta: dict[str, str] | None = None):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 3:
            raise ShapeError(f"images must be (N, H, W), got {images.shape}")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (images.shape[0],):
                raise ShapeError(f"labels shape {labels.shape} != ({images.shape[0]},)")
            if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
                raise UsageError("labels out of class range")
        self.images = images
        self.labels = labels
        self.num_classes = int(num_classes)
        self.domain = domain
        self.split = split
        self.seed = int(seed)
        self.meta = dict(meta or {})

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def example(self, i: int) -> Example:
        label = None if self.labels is None else int(self.labels[i])
        return Example(self.images[i], label)

    def examples(self):
        return [self.example(i) for i in range(len(self))]

    def has_labels(self) -> bool:
        return self.labels is not None

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise UsageError(f"dataset ({self.domain}/{self.split}) carries no labels")
        return self.labels

    def unlabeled_view(self) -> "Dataset":
        """Label-stripped copy sharing image storage; what adaptation sees."""
        return Dataset(self.images, None, self.num_classes, self.domain,
                       self.split, self.seed, meta=self.meta)

    def subset(self, indices: np.ndarray, split: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.num_classes, self.domain,
                       split if split is not None else self.split, self.seed,
                       meta=self.meta)


def quantize_pixels(images: np.ndarray) -> np.ndarray:
    """Snap to the float32 grid (the persistence precision)."""
    return np.asarray(images, dtype=np.float64).astype(np.float32).astype(np.float64)


def smoothed_field(height: int, width: int, rng: np.random.Generator,
                   passes: int = 2) -> np.ndarray:
    """Blurred uniform noise stretched to [0, 1]; the blob texture used for
    class prototypes and the blended trigger pattern."""
    img = rng.random((height, width))
    for _ in range(passes):
        padded = np.pad(img, 1, mode="edge")
        acc = np.zeros_like(img)
        for dr in (0, 1, 2):
            for dc in (0, 1, 2):
                acc += padded[dr:dr + height, dc:dc + width]
        img = acc / 9.0
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo + 1e-12)


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image center with edge-clamped sampling."""
    if degrees == 0.0:
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = rows - cy, cols - cx
    sy = cy + cos_t * dy - sin_t * dx
    sx = cx + sin_t * dy + cos_t * dx
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def class_prototypes(num_classes: int, height: int, width: int,
                     prototype_seed: int) -> np.ndarray:
    """One fixed smoothed-blob prototype per class, scaled into [0.2, 0.8]."""
    protos = np.empty((num_classes, height, width))
    for k in range(num_classes):
        rng = np.random.default_rng(np.random.SeedSequence([int(prototype_seed), k]))
        protos[k] = 0.2 + 0.6 * smoothed_field(height, width, rng)
    return quantize_pixels(protos)


def gaussian_pixel_noise(rng: np.random.Generator, n: int, height: int,
                         width: int, std: float) -> np.ndarray:
    """Independent per-pixel Gaussian noise for ``n`` samples."""
    return rng.normal(0.0, std, (n, height, width))


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    labels = np.repeat(np.arange(num_classes), counts)
    rng.shuffle(labels)
    return labels


def generate_benchmark(seed: int, num_classes: int, height: int, width: int,
                       n_source: int, n_target: int,
                       shift: ShiftSpec) -> tuple[Dataset, Dataset]:
    """Seeded source/target datasets over shared class prototypes.

    Target prototypes are the source prototypes rotated and brightened per
    ``shift``; both domains add Gaussian pixel noise of the same std. Labels
    are attached to both domains (target labels exist for attacker knowledge
    and metric computation only; adaptation consumes an unlabeled view).
    """
    if num_classes < 3:
        raise UsageError(f"num_classes must be >= 3, got {num_classes}")
    if height != width or height < 8:
        raise UsageError(f"images must be square with side >= 8, got {height}x{width}")
    if min(n_source, n_target) < 20 * num_classes:
        raise UsageError(f"need at least {20 * num_classes} examples per domain")

    protos = class_prototypes(num_classes, height, width, shift.prototype_seed)
    shifted = np.empty_like(protos)
    for k in range(num_classes):
        shifted[k] = np.clip(rotate_image(protos[k], shift.rotation_deg)
                             + shift.brightness, 0.0, 1.0)

    gen_meta = {
        "gen_num_classes": str(num_classes),
        "gen_height": str(height),
        "gen_width": str(width),
        "gen_n_source": str(n_source),
        "gen_n_target": str(n_target),
        **shift.to_meta(),
    }

    def sample(protobank, n, domain, sub_seed):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), sub_seed]))
        labels = _balanced_labels(n, num_classes, rng)
        noise = gaussian_pixel_noise(rng, n, height, width, shift.noise_std)
        images = quantize_pixels(np.clip(protobank[labels] + noise, 0.0, 1.0))
        return Dataset(images, labels, num_classes, domain, "full", seed, meta=gen_meta)

    return sample(protos, n_source, "source", 0), sample(shifted, n_target, "target", 1)


def split_train_test(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified disjoint split; per-class train share is within one example
    of ``fraction``. Deterministic under ``seed``; original ordering is kept
    inside each side."""
    if not (0.0 < fraction < 1.0):
        raise UsageError(f"fraction must lie in (0, 1), got {fraction}")
    labels = ds.require_labels()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x73706C]))
    train_idx, test_idx = [], []
    for k in range(ds.num_classes):
        members = np.flatnonzero(labels == k)
        if len(members) < 2:
            raise UsageError(f"class {k} has {len(members)} samples; need >= 2 to split")
        perm = rng.permutation(len(members))
        n_train = int(round(fraction * len(members)))
        n_train = min(max(n_train, 1), len(members) - 1)
        train_idx.append(members[perm[:n_train]])
        test_idx.append(members[perm[n_train:]])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return ds.subset(train_idx, split="train"), ds.subset(test_idx, split="test")


_DATASET_KEYS = ("num_examples", "height", "width", "num_classes", "domain",
                 "split", "seed", "has_labels")


def save_dataset(ds: Dataset, path: str) -> None:
    """Directory with a text manifest, float32-LE pixels, optional int32 labels."""
    os.makedirs(path, exist_ok=True)
    n, h, w = ds.images.shape
    lines = [
        "format dataset v1",
        f"num_examples {n}",
        f"height {h}",
        f"width {w}",
        f"num_classes {ds.num_classes}",
        f"domain {ds.domain}",
        f"split {ds.split}",
        f"seed {ds.seed}",
        f"has_labels {1 if ds.labels is not None else 0}",
        "pixel_dtype float32-le",
    ]
    for key in sorted(ds.meta):
        lines.append(f"{key} {ds.meta[key]}")
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(path, "images.f32"), "wb") as fh:
        fh.write(ds.images.astype("<f4").tobytes())
    if ds.labels is not None:
        with open(os.path.join(path, "labels.i32"), "wb") as fh:
            fh.write(ds.labels.astype("<i4").tobytes())


def load_dataset(path: str) -> Dataset:
    manifest_path = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise ParseError(f"manifest missing: {manifest_path}")
    man = {}
    with open(manifest_path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                key, _, value = line.partition(" ")
                man[key] = value
    for key in _DATASET_KEYS:
        if key not in man:
            raise ParseError(f"dataset manifest missing field {key}")
    try:
        n = int(man["num_examples"])
        h = int(man["height"])
        w = int(man["width"])
        num_classes = int(man["num_classes"])
        seed = int(man["seed"])
        has_labels = int(man["has_labels"])
    except ValueError as exc:
        raise ParseError(f"dataset manifest has non-integer field: {exc}") from exc

    pixels = np.fromfile(os.path.join(path, "images.f32"), dtype="<f4")
    if pixels.size != n * h * w:
        raise ParseError(f"dataset field images.f32: expected {n * h * w} pixels, "
                         f"blob holds {pixels.size}")
    images = pixels.astype(np.float64).reshape(n, h, w)

    labels = None
    if has_labels:
        label_path = os.path.join(path, "labels.i32")
        if not os.path.exists(label_path):
            raise ParseError("dataset field has_labels: labels.i32 missing")
        labels = np.fromfile(label_path, dtype="<i4").astype(np.int64)
        if labels.size != n:
            raise ParseError(f"dataset field labels.i32: expected {n} labels, "
                             f"blob holds {labels.size}")

    meta = {k: v for k, v in man.items() if k not in _DATASET_KEYS and k != "format"
            and k != "pixel_dtype"}
    return Dataset(images, labels, num_classes, man["domain"], man["split"],
                   seed, meta=meta)
