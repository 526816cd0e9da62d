"""Labeled image corpora: a deterministic synthetic generator and a folder loader.

Images are channels-first float32 arrays in [0, 1], quantized to the 8-bit grid
so that a save/load round trip through a lossless codec is exact.
"""

from __future__ import annotations

import colorsys
import json
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

CANONICAL_NUM_CLASSES = 10
CANONICAL_SIDE = 32
# Reduced from 500/100 per class: on a single-core CPU the larger corpus pushes
# full-pipeline runtime past its budget (see configs/full.yaml for the big one).
CANONICAL_TRAIN_PER_CLASS = 200
CANONICAL_TEST_PER_CLASS = 50

TEMPLATE_NAMES = (
    "disc",
    "ring",
    "cross",
    "stripes0",
    "stripes45",
    "stripes90",
    "stripes135",
    "checker",
    "triangle",
    "cornerblob",
)


class DatasetLoadError(RuntimeError):
    """A folder corpus could not be read; the message names the offending entry."""


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: int


@dataclass
class Dataset:
    """Immutable-by-convention collection of images with a class-name table."""

    pixels: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int
    class_names: list[str]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise ValueError(f"pixels must be (N, 3, H, W), got {self.pixels.shape}")
        if len(self.labels) != len(self.pixels):
            raise ValueError("labels and pixels length mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.pixels[i], int(self.labels[i]))

    @property
    def side(self) -> int:
        return self.pixels.shape[-1]

    def class_indices(self, c: int) -> np.ndarray:
        return np.nonzero(self.labels == c)[0]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(
            self.pixels[indices],
            self.labels[indices],
            self.num_classes,
            list(self.class_names),
            dict(self.provenance),
        )

    def manifest(self) -> dict:
        return {
            "provenance": self.provenance,
            "num_classes": self.num_classes,
            "side": self.side,
            "counts": {self.class_names[c]: int((self.labels == c).sum()) for c in range(self.num_classes)},
            "class_to_id": {name: i for i, name in enumerate(self.class_names)},
        }

    def fingerprint(self) -> str:
        """sha256 over pixels, labels and the manifest; binds checkpoints to data."""
        h = hashlib.sha256()
        h.update(json.dumps(self.manifest(), sort_keys=True).encode())
        h.update(self.labels.tobytes())
        h.update(self.pixels.tobytes())
        return h.hexdigest()


def _class_color(class_id: int) -> tuple[float, float, float]:
    hue = (class_id * 0.1 + 0.05 * (class_id // 10)) % 1.0
    return hue, 0.75, 0.9


def _template_mask(template: str, side: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    r = np.hypot(dx, dy)
    if template == "disc":
        return r <= radius
    if template == "ring":
        return (r <= radius) & (r >= 0.55 * radius)
    if template == "cross":
        w = 0.30 * radius
        return ((np.abs(dx) <= w) | (np.abs(dy) <= w)) & (r <= radius)
    if template.startswith("stripes"):
        theta = math.radians(int(template[len("stripes"):]))
        u = dx * math.cos(theta) + dy * math.sin(theta)
        period = max(radius / 2.0, 1.5)
        return (np.floor(u / period).astype(np.int64) % 2 == 0) & (r <= radius)
    if template == "checker":
        p = max(radius / 1.5, 1.5)
        return ((np.floor(dx / p) + np.floor(dy / p)).astype(np.int64) % 2 == 0) & (r <= radius)
    if template == "triangle":
        h = 1.8 * radius
        top = cy - radius
        half_w = np.clip((yy - top) / h, 0.0, None) * radius
        return (yy >= top) & (yy <= cy + 0.8 * radius) & (np.abs(dx) <= half_w)
    if template == "cornerblob":
        bx, by = cx + 0.55 * radius, cy - 0.55 * radius
        sigma = 0.35 * radius
        return np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * sigma**2)) > 0.5
    raise ValueError(f"unknown template {template!r}")


def _render_image(class_id: int, side: int, rng: np.random.Generator) -> np.ndarray:
    template = TEMPLATE_NAMES[class_id % len(TEMPLATE_NAMES)]
    hue, sat, val = _class_color(class_id)
    hue = (hue + rng.uniform(-0.1, 0.1)) % 1.0
    fg = np.array(colorsys.hsv_to_rgb(hue, sat, val))
    bg = np.array(colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.30, 0.25))

    jitter = max(1.0, side * 4.0 / 32.0)
    cx = side / 2 + rng.uniform(-jitter, jitter)
    cy = side / 2 + rng.uniform(-jitter, jitter)
    radius = 0.30 * side * rng.uniform(0.75, 1.25)

    mask = _template_mask(template, side, cx, cy, radius).astype(np.float64)
    img = bg[:, None, None] + mask[None] * (fg - bg)[:, None, None]
    img = img + rng.uniform(-0.05, 0.05, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # quantize onto the 8-bit grid so lossless export/import is exact
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def generate_synthetic_corpus(seed: int, per_class: int, num_classes: int, side: int) -> Dataset:
    """Procedural shape corpus; identical arguments yield bit-identical output."""
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if side < 8:
        raise ValueError(f"side must be >= 8, got {side}")
    rng = np.random.default_rng(seed)
    pixels = np.empty((num_classes * per_class, 3, side, side), dtype=np.float32)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    i = 0
    for c in range(num_classes):
        for _ in range(per_class):
            pixels[i] = _render_image(c, side, rng)
            labels[i] = c
            i += 1
    names = [f"{c:02d}_{TEMPLATE_NAMES[c % len(TEMPLATE_NAMES)]}" for c in range(num_classes)]
    return Dataset(pixels, labels, num_classes, names, {"kind": "synthetic", "seed": int(seed)})


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Per-class stratified, seeded split; the two parts partition ds exactly."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.num_classes):
        idx = ds.class_indices(c)
        perm = rng.permutation(len(idx))
        k = round(train_fraction * len(idx))
        train_idx.append(idx[perm[:k]])
        test_idx.append(idx[perm[k:]])
    tr = ds.subset(np.concatenate(train_idx) if train_idx else np.array([], dtype=int))
    te = ds.subset(np.concatenate(test_idx) if test_idx else np.array([], dtype=int))
    tr.provenance = {**ds.provenance, "split": ["train", train_fraction, int(seed)]}
    te.provenance = {**ds.provenance, "split": ["test", train_fraction, int(seed)]}
    return tr, te


def export_to_folder(ds: Dataset, root: str | Path) -> Path:
    """Write `<root>/<class_name>/<index>.png` plus a manifest; lossless."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    counters = [0] * ds.num_classes
    for i in range(len(ds)):
        c = int(ds.labels[i])
        cdir = root / ds.class_names[c]
        cdir.mkdir(exist_ok=True)
        arr = np.round(ds.pixels[i] * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(cdir / f"{counters[c]:05d}.png")
        counters[c] += 1
    (root / "manifest.json").write_text(json.dumps(ds.manifest(), indent=2, sort_keys=True))
    return root


def load_image_folder(path: str | Path, side: int = CANONICAL_SIDE) -> Dataset:
    """Load `<root>/<class_name>/*` with class ids in lexicographic subdir order."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetLoadError(f"dataset root does not exist or is not a directory: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetLoadError(f"no class subdirectories under {root}")
    pixels, labels, names = [], [], []
    for cid, cdir in enumerate(class_dirs):
        names.append(cdir.name)
        files = sorted(f for f in cdir.iterdir() if f.is_file())
        if not files:
            raise DatasetLoadError(f"class folder is empty: {cdir}")
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB")
                    if im.size != (side, side):
                        im = im.resize((side, side), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError, SyntaxError) as e:
                raise DatasetLoadError(f"cannot decode image file: {f} ({e})") from e
            pixels.append(arr.transpose(2, 0, 1))
            labels.append(cid)
    return Dataset(
        np.stack(pixels),
        np.array(labels),
        len(class_dirs),
        names,
        {"kind": "folder", "path": str(root)},
    )
