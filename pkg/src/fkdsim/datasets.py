"""Labeled image datasets: synthetic generator, PGM manifest loader, experiment splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, IoError, ShapeError
from .preprocess import PipelineConfig, clahe, normalize, read_pgm, replicate_channels, resize_bilinear, to_levels, write_pgm


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_names: list[str]
    provenance: str = "synthetic"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DomainError("label index outside class_names")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], list(self.class_names), self.provenance)


@dataclass(frozen=True)
class SplitSpec:
    private_fraction: float = 0.8
    public_fraction: float = 0.5
    test_fraction: float = 0.5
    disjoint: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("private_fraction", "public_fraction", "test_fraction"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise DomainError(f"{name} must lie in (0, 1], got {value}")
        total = self.private_fraction + self.public_fraction + self.test_fraction
        if self.disjoint and total > 1.0 + 1e-12:
            raise DomainError(f"disjoint split fractions sum to {total} > 1")


@dataclass
class ExperimentData:
    private_pool: LabeledDataset
    public_set: LabeledDataset
    test_set: LabeledDataset
    indices: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.public_set) == 0 or len(self.test_set) == 0:
            raise DomainError("public and test sets must be non-empty")

    @property
    def n_public(self) -> int:
        return len(self.public_set)


def generate_synthetic(classes: int = 3, per_class: int = 100, shape=(32, 32), seed: int = 0,
                       channels: int = 1, noise: float = 0.05) -> LabeledDataset:
    """Balanced, learnable stand-in images.

    Class ``c`` carries a Gaussian blob at angle ``2*pi*c/classes`` around the
    image centre and a stripe pattern of ``c + 1`` cycles, both jittered per
    sample, plus i.i.d. Gaussian pixel noise of scale ``noise``.
    """
    if classes < 2 or per_class < 1:
        raise DomainError(f"need classes >= 2 and per_class >= 1, got {classes}, {per_class}")
    h, w = (int(s) for s in shape)
    if h < 4 or w < 4:
        raise DomainError(f"image shape too small: {(h, w)}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    radius, sigma = 0.28 * min(h, w), 0.12 * min(h, w)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    images = np.empty((n, h, w))
    for i, c in enumerate(labels):
        angle = 2 * math.pi * c / classes + rng.normal(0.0, 0.08)
        cy = (h - 1) / 2 + radius * math.sin(angle) + rng.normal(0.0, 0.6)
        cx = (w - 1) / 2 + radius * math.cos(angle) + rng.normal(0.0, 0.6)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        phase = rng.uniform(0, 2 * math.pi)
        stripes = 0.5 + 0.5 * np.sin(2 * math.pi * (c + 1) * xx / w + phase)
        amp = rng.uniform(0.5, 0.7)
        images[i] = 0.15 + amp * blob + 0.1 * stripes + rng.normal(0.0, noise, size=(h, w))
    order = rng.permutation(n)
    images = np.clip(images[order], 0.0, 1.0)[..., None]
    if channels > 1:
        images = np.repeat(images, channels, axis=3)
    names = [f"class{c}" for c in range(classes)]
    return LabeledDataset(images, labels[order], names, "synthetic")


def load_manifest(path, pipeline: PipelineConfig | None = None) -> LabeledDataset:
    """Load a ``path,label`` CSV of PGM files (paths relative to the manifest).

    Without a pipeline the images come back normalized at native size with a
    single channel; with one, each goes through CLAHE/resize/replication.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows or [c.strip() for c in rows[0]] != ["path", "label"]:
        raise FormatError(f"{path}: row 1: expected header 'path,label'")
    images, labels, names = [], [], {}
    for rowno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2 or not row[0].strip() or not row[1].strip():
            raise FormatError(f"{path}: row {rowno}: expected 'path,label', got {row}")
        rel, label = row[0].strip(), row[1].strip()
        try:
            levels, bits = read_pgm(path.parent / rel)
        except FormatError as exc:
            raise FormatError(f"{path}: row {rowno}: {exc}") from None
        img = normalize(levels, bits)
        if pipeline is not None:
            if pipeline.clahe is not None and pipeline.clahe_before_resize:
                img = clahe(img, pipeline.clahe)
            img = resize_bilinear(img, pipeline.size)
            if pipeline.clahe is not None and not pipeline.clahe_before_resize:
                img = clahe(img, pipeline.clahe)
            img = replicate_channels(img, pipeline.channels)
        else:
            img = img[:, :, None]
        if images and img.shape != images[0].shape:
            raise ShapeError(f"{path}: row {rowno}: image shape {img.shape} differs from {images[0].shape}")
        images.append(img)
        labels.append(names.setdefault(label, len(names)))
    if not images:
        raise FormatError(f"{path}: manifest lists no images")
    return LabeledDataset(np.stack(images), np.array(labels), list(names), "manifest")


def write_manifest_tree(ds: LabeledDataset, out_dir, bits: int = 8) -> Path:
    """Write channel 0 of every image as a PGM plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        name = ds.class_names[label]
        (out_dir / name).mkdir(exist_ok=True)
        rel = f"{name}/{i:05d}.pgm"
        write_pgm(out_dir / rel, to_levels(img[:, :, 0], bits), bits)
        rows.append((rel, name))
    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        writer.writerows(rows)
    return manifest


def split_size(fraction: float, n: int) -> int:
    return max(1, math.floor(fraction * n))


def split_dataset(ds: LabeledDataset, spec: SplitSpec) -> ExperimentData:
    """Draw private/public/test sets.

    Overlapping mode takes three independent draws without replacement,
    so the sets may share samples; disjoint mode slices one shuffle.
    """
    n = len(ds)
    if n == 0:
        raise DomainError("cannot split an empty dataset")
    sizes = [split_size(f, n) for f in (spec.private_fraction, spec.public_fraction, spec.test_fraction)]
    rng = np.random.default_rng(spec.seed)
    if spec.disjoint:
        if sum(sizes) > n:
            raise DomainError(f"disjoint split needs {sum(sizes)} samples, dataset has {n}")
        perm = rng.permutation(n)
        bounds = np.cumsum([0] + sizes)
        parts = [perm[bounds[i] : bounds[i + 1]] for i in range(3)]
    else:
        parts = [rng.choice(n, size=k, replace=False) for k in sizes]
    keys = ("private", "public", "test")
    return ExperimentData(
        private_pool=ds.subset(parts[0]),
        public_set=ds.subset(parts[1]),
        test_set=ds.subset(parts[2]),
        indices=dict(zip(keys, parts)),
    )
