"""Datasets, synthetic multi-domain generators, splits, and disk I/O.

A Dataset holds per-class stacks of uint8 RGB images (decoded eagerly on
load, materialized to float64 in [0,1] on demand). Datasets are immutable
after construction and freely shareable.

On-disk format per dataset: ``<root>/images/*.png``, ``<root>/labels.csv``
with header ``FILE_NAME,CATEGORY``, optional ``<root>/info.json`` carrying
``dataset_id`` and ``domain_tag``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image

from .rng import RngStream

META_TRAIN, META_VALID, META_TEST = "meta-train", "meta-valid", "meta-test"
_ROLES = (META_TRAIN, META_VALID, META_TEST)

# Record-level jitter applied by every generator family; tuned so that a
# small conv net separates classes while single-shot episodes stay noisy.
# Colors are drawn per record around dataset-level anchors, so class
# identity is carried by structure (orientation, frequency, counts, scale),
# never by hue.
PIXEL_NOISE = 0.03
GAIN_JITTER = 0.10
BIAS_JITTER = 0.05
COLOR_JITTER = 0.40


class DatasetFormatError(ValueError):
    """Directory does not follow the dataset format contract."""


class DatasetIntegrityError(ValueError):
    """Labels reference missing files or images disagree in shape."""


class ImageRecord(NamedTuple):
    image: np.ndarray  # H x W x 3 float64 in [0,1]
    label: int


@dataclass(frozen=True)
class Dataset:
    """One image-classification dataset: named classes with image stacks."""

    id: str
    domain_tag: str
    classes: tuple[str, ...]
    images: tuple[np.ndarray, ...]  # per class: (M_c, H, W, 3) uint8

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError(f"dataset {self.id!r}: need at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"dataset {self.id!r}: duplicate class names")
        if len(self.images) != len(self.classes):
            raise ValueError(f"dataset {self.id!r}: class/image stack mismatch")
        shape = self.image_shape
        for name, stack in zip(self.classes, self.images):
            if stack.ndim != 4 or stack.shape[0] < 1:
                raise ValueError(
                    f"dataset {self.id!r}: class {name!r} needs at least 1 record"
                )
            if stack.shape[1:] != shape:
                raise DatasetIntegrityError(
                    f"dataset {self.id!r}: class {name!r} images have shape "
                    f"{stack.shape[1:]}, expected {shape}"
                )

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images[0].shape[1:])

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def records_in_class(self, class_idx: int) -> int:
        return self.images[class_idx].shape[0]

    @property
    def min_records_per_class(self) -> int:
        return min(stack.shape[0] for stack in self.images)

    @property
    def n_records(self) -> int:
        return sum(stack.shape[0] for stack in self.images)

    def image_f64(self, class_idx: int, record_idx: int) -> np.ndarray:
        return self.images[class_idx][record_idx].astype(np.float64) / 255.0

    def record(self, class_idx: int, record_idx: int) -> ImageRecord:
        return ImageRecord(self.image_f64(class_idx, record_idx), class_idx)

    def gather(self, refs: Sequence[tuple[int, int]]) -> np.ndarray:
        """Materialize (class, record) references into a (B,H,W,3) float64 batch."""
        out = np.empty((len(refs),) + self.image_shape, dtype=np.float64)
        for i, (c, r) in enumerate(refs):
            out[i] = self.images[c][r]
        out /= 255.0
        return out

    def take_classes(self, class_indices: Sequence[int], suffix: str) -> "Dataset":
        """Class-subset view sharing image memory."""
        return Dataset(
            id=f"{self.id}{suffix}",
            domain_tag=self.domain_tag,
            classes=tuple(self.classes[c] for c in class_indices),
            images=tuple(self.images[c] for c in class_indices),
        )


@dataclass(frozen=True)
class MetaDataset:
    datasets: tuple[Dataset, ...]
    role: str

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"invalid role {self.role!r}, expected one of {_ROLES}")
        if not self.datasets:
            raise ValueError("meta-dataset must contain at least one dataset")
        ids = [d.id for d in self.datasets]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate dataset ids: {ids}")

    def __len__(self) -> int:
        return len(self.datasets)

    def with_role(self, role: str) -> "MetaDataset":
        return MetaDataset(self.datasets, role)


# ---------------------------------------------------------------------------
# Synthetic generator families
# ---------------------------------------------------------------------------

def _grid(side: int):
    c = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    return np.meshgrid(c, c)


def _palette(rng) -> dict:
    # dataset-level anchors: a light foreground band and a dark background band
    return {
        "hi": rng.uniform(0.55, 0.95, size=3),
        "lo": rng.uniform(0.05, 0.45, size=3),
    }


def _record_colors(palette, rng):
    ca = palette["hi"] + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3)
    cb = palette["lo"] + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3)
    return np.clip(ca, 0.0, 1.0), np.clip(cb, 0.0, 1.0)


def _jitter_scale(rng) -> float:
    # heavy-tailed record jitter: occasional outliers make single-shot
    # prototypes unreliable while multi-shot averages stay stable
    return 2.6 if rng.uniform() < 0.18 else 1.0


def _compose(g: np.ndarray, palette, rng) -> np.ndarray:
    ca, cb = _record_colors(palette, rng)
    img = g[..., None] * ca + (1.0 - g[..., None]) * cb
    gain = 1.0 + rng.uniform(-GAIN_JITTER, GAIN_JITTER)
    bias = rng.uniform(-BIAS_JITTER, BIAS_JITTER)
    img = img * gain + bias + rng.normal(0.0, PIXEL_NOISE, img.shape)
    return np.clip(img, 0.0, 1.0)


def _gratings_params(rng, slot: int, n_slots: int) -> dict:
    return {
        "theta": (slot + rng.uniform(-0.15, 0.15)) * np.pi / n_slots,
        "freq": rng.uniform(2.0, 5.0),
    }


def _gratings_render(p, palette, rng, side):
    xx, yy = _grid(side)
    js = _jitter_scale(rng)
    theta = p["theta"] + rng.normal(0.0, 0.08 * js)
    freq = p["freq"] * (1.0 + rng.normal(0.0, 0.08 * js))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    g = 0.5 * (1.0 + np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase))
    return _compose(g, palette, rng)


def _blobs_params(rng, slot: int, n_slots: int) -> dict:
    tiers = max(1, (n_slots - 1) // 5 + 1)
    return {
        "count": 2 + slot % 5,
        "sigma": 0.09 + 0.13 * ((slot // 5) + rng.uniform(0.0, 0.6)) / tiers,
    }


def _blobs_render(p, palette, rng, side):
    xx, yy = _grid(side)
    g = np.zeros((side, side))
    sigma = p["sigma"] * (1.0 + rng.normal(0.0, 0.10 * _jitter_scale(rng)))
    for _ in range(p["count"]):
        cx, cy = rng.uniform(-0.6, 0.6, size=2)
        g += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2))
    return _compose(np.clip(g, 0.0, 1.0), palette, rng)


def _checker_params(rng, slot: int, n_slots: int) -> dict:
    return {
        "cells": 1.5 + 5.0 * (slot + rng.uniform(0.0, 0.5)) / n_slots,
        "rot": rng.uniform(0.0, np.pi / 2.0),
    }


def _checker_render(p, palette, rng, side):
    xx, yy = _grid(side)
    js = _jitter_scale(rng)
    rot = p["rot"] + rng.normal(0.0, 0.08 * js)
    cells = p["cells"] * (1.0 + rng.normal(0.0, 0.07 * js))
    u = xx * np.cos(rot) - yy * np.sin(rot)
    v = xx * np.sin(rot) + yy * np.cos(rot)
    du, dv = rng.uniform(0.0, 2.0, size=2)
    g = (np.floor(u * cells + du) + np.floor(v * cells + dv)) % 2.0
    return _compose(g, palette, rng)


def _radial_params(rng, slot: int, n_slots: int) -> dict:
    return {
        "freq": 1.0 + 5.0 * (slot + rng.uniform(0.0, 0.5)) / n_slots,
        "phase": rng.uniform(0.0, 2.0 * np.pi),
    }


def _radial_render(p, palette, rng, side):
    xx, yy = _grid(side)
    js = _jitter_scale(rng)
    cx, cy = rng.uniform(-0.22, 0.22, size=2)
    r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    freq = p["freq"] * (1.0 + rng.normal(0.0, 0.07 * js))
    phase = p["phase"] + rng.normal(0.0, 0.5)
    g = 0.5 * (1.0 + np.cos(2.0 * np.pi * freq * r + phase))
    return _compose(g, palette, rng)


def _spectral_params(rng, slot: int, n_slots: int) -> dict:
    return {
        "alpha": 0.6 + 2.6 * (slot + rng.uniform(0.0, 0.5)) / n_slots,
        "aniso_theta": rng.uniform(0.0, np.pi),
        "aniso": rng.uniform(0.5, 2.5),
    }


def _spectral_render(p, palette, rng, side):
    fx = np.fft.fftfreq(side)[None, :]
    fy = np.fft.fftfreq(side)[:, None]
    fr = np.sqrt(fx**2 + fy**2)
    fr[0, 0] = 1.0
    ang = np.arctan2(fy, fx)
    alpha = p["alpha"] + rng.normal(0.0, 0.10 * _jitter_scale(rng))
    weight = (1.0 + p["aniso"] * np.cos(ang - p["aniso_theta"]) ** 2) / fr**alpha
    weight[0, 0] = 0.0
    spec = np.fft.fft2(rng.normal(size=(side, side))) * weight
    g = np.real(np.fft.ifft2(spec))
    lo, hi = g.min(), g.max()
    g = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
    return _compose(g, palette, rng)


def _polygon_params(rng, slot: int, n_slots: int) -> dict:
    tiers = max(1, (n_slots - 1) // 6 + 1)
    return {
        "sides": 3 + slot % 6,
        "radius": 0.32 + 0.3 * ((slot // 6) + rng.uniform(0.0, 0.6)) / tiers,
        "rot": rng.uniform(0.0, 2.0 * np.pi),
    }


def _polygon_render(p, palette, rng, side):
    xx, yy = _grid(side)
    js = _jitter_scale(rng)
    cx, cy = rng.uniform(-0.2, 0.2, size=2)
    rot = p["rot"] + rng.normal(0.0, 0.20 * js)
    radius = p["radius"] * (1.0 + rng.normal(0.0, 0.10 * js))
    phi = np.arctan2(yy - cy, xx - cx) - rot
    r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    sector = np.pi / p["sides"]
    boundary = radius * np.cos(sector) / np.cos((phi % (2.0 * sector)) - sector)
    g = (r <= boundary).astype(np.float64)
    return _compose(g, palette, rng)


_FAMILIES = (
    ("gratings", _gratings_params, _gratings_render),
    ("blobs", _blobs_params, _blobs_render),
    ("checker", _checker_params, _checker_render),
    ("radial", _radial_params, _radial_render),
    ("spectral", _spectral_params, _spectral_render),
    ("polygons", _polygon_params, _polygon_render),
)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic multi-domain meta-dataset."""

    domains: int = 4
    classes_per_dataset: int = 10
    records_per_class: int = 40
    image_side: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.domains < 1:
            raise ValueError("domains must be >= 1")
        if self.classes_per_dataset < 2:
            raise ValueError("classes_per_dataset must be >= 2")
        if self.records_per_class < 21:
            raise ValueError("records_per_class must be >= 21 (k=1 plus 20 queries)")
        if self.image_side < 16:
            raise ValueError("image_side must be >= 16")

    def to_dict(self) -> dict:
        return {
            "domains": self.domains,
            "classes_per_dataset": self.classes_per_dataset,
            "records_per_class": self.records_per_class,
            "image_side": self.image_side,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def synth_dataset(spec: SynthSpec, domain_idx: int, stream: RngStream) -> Dataset:
    name, params_fn, render_fn = _FAMILIES[domain_idx % len(_FAMILIES)]
    c_count, m, side = spec.classes_per_dataset, spec.records_per_class, spec.image_side
    drng = stream.generator("dataset", domain_idx)
    palette = _palette(drng)
    slots = drng.permutation(c_count)
    class_params = [params_fn(drng, int(slots[c]), c_count) for c in range(c_count)]
    stacks = []
    for c in range(c_count):
        crng = stream.generator("dataset", domain_idx, "class", c)
        imgs = np.empty((m, side, side, 3), dtype=np.uint8)
        for r in range(m):
            imgs[r] = np.round(
                render_fn(class_params[c], palette, crng, side) * 255.0
            ).astype(np.uint8)
        stacks.append(imgs)
    return Dataset(
        id=f"{name}-{domain_idx:02d}",
        domain_tag=name,
        classes=tuple(f"c{c:02d}" for c in range(c_count)),
        images=tuple(stacks),
    )


def synth_meta_dataset(spec: SynthSpec, role: str = META_TRAIN) -> MetaDataset:
    """Generate a fully seed-determined multi-domain meta-dataset."""
    spec.validate()
    stream = RngStream(spec.seed).child("synth")
    datasets = tuple(synth_dataset(spec, d, stream) for d in range(spec.domains))
    return MetaDataset(datasets, role)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def split_classes(
    dataset: Dataset,
    seed: int,
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
) -> tuple[Dataset, Dataset, Dataset]:
    """Class-disjoint train/valid/test views.

    Counts are floor(fraction * C) with every remainder class going to the
    first (train) split; the assignment itself is a seeded permutation.
    """
    c = dataset.n_classes
    n_valid = int(np.floor(fractions[1] * c))
    n_test = int(np.floor(fractions[2] * c))
    n_train = c - n_valid - n_test
    if min(int(np.floor(fractions[0] * c)), n_valid, n_test) < 1:
        raise ValueError(
            f"dataset {dataset.id!r}: {c} classes leave an empty split under "
            f"fractions {fractions}"
        )
    rng = RngStream(seed).generator("class-split", dataset.id)
    perm = rng.permutation(c)
    parts = (perm[:n_train], perm[n_train : n_train + n_valid], perm[n_train + n_valid :])
    suffixes = ("/train", "/valid", "/test")
    return tuple(
        dataset.take_classes(sorted(int(i) for i in part), suffix)
        for part, suffix in zip(parts, suffixes)
    )


def split_datasets(
    meta_dataset: MetaDataset, counts: tuple[int, int], seed: int
) -> tuple[MetaDataset, MetaDataset]:
    """Seeded disjoint partition into meta-train and meta-valid collections."""
    n = len(meta_dataset.datasets)
    if counts[0] + counts[1] != n:
        raise ValueError(f"counts {counts} do not sum to dataset count {n}")
    if counts[0] < 1 or counts[1] < 1:
        raise ValueError(f"both partitions must be non-empty, got {counts}")
    rng = RngStream(seed).generator("dataset-split")
    perm = rng.permutation(n)
    train_idx = sorted(int(i) for i in perm[: counts[0]])
    valid_idx = sorted(int(i) for i in perm[counts[0] :])
    return (
        MetaDataset(tuple(meta_dataset.datasets[i] for i in train_idx), META_TRAIN),
        MetaDataset(tuple(meta_dataset.datasets[i] for i in valid_idx), META_VALID),
    )


# ---------------------------------------------------------------------------
# Batch pool (concatenated datasets with a global label space)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchPool:
    """Flat indexed pool over all records with globally remapped labels."""

    datasets: tuple[Dataset, ...]
    refs: tuple[tuple[int, int, int], ...]  # (dataset_idx, class_idx, record_idx)
    labels: np.ndarray  # global label per ref
    n_classes: int

    def __len__(self) -> int:
        return len(self.refs)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.datasets[0].image_shape

    def materialize(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        x = np.empty((len(indices),) + self.image_shape, dtype=np.float64)
        for i, idx in enumerate(indices):
            d, c, r = self.refs[idx]
            x[i] = self.datasets[d].images[c][r]
        x /= 255.0
        return x, self.labels[list(indices)]


def concat_for_batches(meta_dataset: MetaDataset) -> BatchPool:
    """Concatenate all datasets into one pool; labels offset per dataset."""
    shape = meta_dataset.datasets[0].image_shape
    for d in meta_dataset.datasets:
        if d.image_shape != shape:
            raise DatasetIntegrityError(
                f"cannot concatenate: {d.id!r} has shape {d.image_shape}, "
                f"expected {shape}"
            )
    refs = []
    labels = []
    offset = 0
    for di, d in enumerate(meta_dataset.datasets):
        for c in range(d.n_classes):
            for r in range(d.records_in_class(c)):
                refs.append((di, c, r))
                labels.append(offset + c)
        offset += d.n_classes
    return BatchPool(
        datasets=meta_dataset.datasets,
        refs=tuple(refs),
        labels=np.asarray(labels, dtype=np.int64),
        n_classes=offset,
    )


# ---------------------------------------------------------------------------
# Disk I/O
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, root) -> None:
    root = Path(root)
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for c, name in enumerate(dataset.classes):
        for r in range(dataset.records_in_class(c)):
            fname = f"{name}_{r:04d}.png"
            Image.fromarray(dataset.images[c][r], mode="RGB").save(img_dir / fname)
            rows.append((fname, name))
    with open(root / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["FILE_NAME", "CATEGORY"])
        writer.writerows(rows)
    info = {"dataset_id": dataset.id, "domain_tag": dataset.domain_tag}
    (root / "info.json").write_text(json.dumps(info, indent=2), encoding="utf-8")


def save_meta_dataset(meta_dataset: MetaDataset, root) -> None:
    root = Path(root)
    for d in meta_dataset.datasets:
        save_dataset(d, root / d.id.replace("/", "_"))


def load_dataset(root) -> Dataset:
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.is_file():
        raise DatasetFormatError(f"{root}: missing labels.csv")
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise DatasetFormatError(f"{root}: missing images/ directory")
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["FILE_NAME", "CATEGORY"]:
            raise DatasetFormatError(
                f"{labels_path}: expected header FILE_NAME,CATEGORY, got {header}"
            )
        rows = [(row[0].strip(), row[1].strip()) for row in reader if row]
    if not rows:
        raise DatasetFormatError(f"{labels_path}: no records")
    by_class: dict[str, list[str]] = {}
    for fname, category in rows:
        by_class.setdefault(category, []).append(fname)
    class_names = tuple(sorted(by_class))
    stacks = []
    shape = None
    for name in class_names:
        imgs = []
        for fname in by_class[name]:
            path = img_dir / fname
            if not path.is_file():
                raise DatasetIntegrityError(
                    f"{labels_path}: row references missing file {fname!r}"
                )
            arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise DatasetIntegrityError(
                    f"{path}: image shape {arr.shape} differs from {shape}"
                )
            imgs.append(arr)
        stacks.append(np.stack(imgs))
    info = {"dataset_id": root.name, "domain_tag": root.name}
    info_path = root / "info.json"
    if info_path.is_file():
        info.update(json.loads(info_path.read_text(encoding="utf-8")))
    return Dataset(
        id=str(info["dataset_id"]),
        domain_tag=str(info["domain_tag"]),
        classes=class_names,
        images=tuple(stacks),
    )


def load_meta_dataset(roots: Sequence, role: str) -> MetaDataset:
    return MetaDataset(tuple(load_dataset(r) for r in roots), role)
