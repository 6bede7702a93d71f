"""Synthetic datasets, label-noise injection, and dataset persistence.

Two dataset families are supported: flat Gaussian blobs (class means placed
on a circle scaled by ``separation``) and small grayscale images (per-class
pixel patterns plus noise, normalized to [0, 1]).

Noise models:
  * symmetric  -- within each class, exactly round(eps * n_k) samples are
    relabeled uniformly at random among the other C-1 classes.
  * asymmetric -- exactly round(eps * n_k) samples of class k are relabeled
    to class (k+1) mod C (wrap-around for the last class is configurable).

The file format is a small self-describing binary: magic, version, layout
and array payloads, little-endian throughout, so round-trips are bit-exact.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass

import numpy as np

MAGIC = b"NLDS"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Invalid dataset construction or operation arguments."""


class DoubleInjectionError(DatasetError):
    """Noise injected into an already-corrupted dataset."""


class DatasetFileError(IOError):
    """Base for dataset (de)serialization failures."""


class CorruptHeaderError(DatasetFileError):
    pass


class VersionMismatchError(DatasetFileError):
    pass


class PayloadShapeError(DatasetFileError):
    pass


@dataclass
class NoiseSpec:
    kind: str  # "symmetric" | "asymmetric"
    epsilon: float
    num_classes: int
    seed: int
    wrap_last_class: bool = True

    def __post_init__(self):
        if self.kind not in ("symmetric", "asymmetric"):
            raise DatasetError(f"unknown noise kind: {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise DatasetError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.num_classes < 2:
            raise DatasetError("need at least 2 classes")
        if self.kind == "asymmetric" and self.epsilon > 0.5:
            warnings.warn(
                "asymmetric noise with epsilon > 0.5 flips the majority of each class",
                stacklevel=2,
            )


@dataclass
class LabeledDataset:
    features: np.ndarray  # (N, ...) float32
    clean_labels: np.ndarray  # (N,) int32
    noisy_labels: np.ndarray  # (N,) int32
    corrupted: np.ndarray  # (N,) bool
    num_classes: int

    def __post_init__(self):
        n = len(self.features)
        if not (len(self.clean_labels) == len(self.noisy_labels) == len(self.corrupted) == n):
            raise DatasetError("array lengths disagree")
        for labels in (self.clean_labels, self.noisy_labels):
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise DatasetError("label id outside [0, C)")
        if not np.array_equal(self.corrupted, self.clean_labels != self.noisy_labels):
            raise DatasetError("corrupted flags inconsistent with labels")

    def __len__(self):
        return len(self.features)

    @property
    def input_shape(self):
        return self.features.shape[1:]

    @property
    def is_image(self):
        return self.features.ndim >= 3

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.clean_labels, other.clean_labels)
            and np.array_equal(self.noisy_labels, other.noisy_labels)
            and np.array_equal(self.corrupted, other.corrupted)
        )

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(
            features=self.features[idx],
            clean_labels=self.clean_labels[idx],
            noisy_labels=self.noisy_labels[idx],
            corrupted=self.corrupted[idx],
            num_classes=self.num_classes,
        )


def generate_blobs(
    num_samples: int,
    num_classes: int,
    dims_or_image_shape,
    separation: float,
    seed: int,
) -> LabeledDataset:
    """Class-conditional Gaussian data, flat or image-shaped.

    Flat: class means sit on a circle of radius ``separation`` in the first
    two dims, unit isotropic noise. Image: each class has a random pixel
    pattern whose amplitude scales with ``separation``; values end up in
    [0, 1]. ``separation=0`` makes classes indistinguishable.
    """
    if num_samples < num_classes:
        raise DatasetError("need at least one sample per class")
    if separation < 0:
        raise DatasetError("separation must be >= 0")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    labels = rng.integers(0, num_classes, size=num_samples).astype(np.int32)
    # guarantee every class appears
    labels[:num_classes] = np.arange(num_classes, dtype=np.int32)

    if isinstance(dims_or_image_shape, int):
        dims = dims_or_image_shape
        if dims < 1:
            raise DatasetError(f"invalid flat dimension: {dims}")
        angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
        means = np.zeros((num_classes, dims))
        means[:, 0] = separation * np.cos(angles)
        if dims > 1:
            means[:, 1] = separation * np.sin(angles)
        feats = means[labels] + rng.standard_normal((num_samples, dims))
        features = feats.astype(np.float32)
    else:
        shape = tuple(int(s) for s in dims_or_image_shape)
        if len(shape) != 2 or any(s < 1 for s in shape):
            raise DatasetError(f"invalid image shape: {dims_or_image_shape}")
        patterns = rng.uniform(-1.0, 1.0, size=(num_classes,) + shape)
        amp = 0.1 * separation
        raw = 0.5 + amp * patterns[labels] + 0.1 * rng.standard_normal((num_samples,) + shape)
        features = np.clip(raw, 0.0, 1.0).astype(np.float32)

    return LabeledDataset(
        features=features,
        clean_labels=labels,
        noisy_labels=labels.copy(),
        corrupted=np.zeros(num_samples, dtype=bool),
        num_classes=num_classes,
    )


def inject_noise(ds: LabeledDataset, spec: NoiseSpec) -> LabeledDataset:
    """Return a copy of ``ds`` with corrupted labels per ``spec``.

    Exactly round(eps * n_k) samples per class are flipped; victims are
    chosen at random, the count is deterministic.
    """
    if ds.corrupted.any() or not np.array_equal(ds.clean_labels, ds.noisy_labels):
        raise DoubleInjectionError("dataset already carries injected noise")
    if spec.num_classes != ds.num_classes:
        raise DatasetError(
            f"spec is for {spec.num_classes} classes, dataset has {ds.num_classes}"
        )

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    noisy = ds.clean_labels.copy()
    c = ds.num_classes
    for k in range(c):
        members = np.flatnonzero(ds.clean_labels == k)
        n_flip = int(round(spec.epsilon * len(members)))
        if n_flip == 0:
            continue
        victims = rng.choice(members, size=n_flip, replace=False)
        if spec.kind == "symmetric":
            # uniform over the other C-1 classes
            draws = rng.integers(0, c - 1, size=n_flip)
            draws = draws + (draws >= k)
            noisy[victims] = draws.astype(np.int32)
        else:
            target = (k + 1) % c
            if k == c - 1 and not spec.wrap_last_class:
                continue
            noisy[victims] = target

    return LabeledDataset(
        features=ds.features,
        clean_labels=ds.clean_labels,
        noisy_labels=noisy,
        corrupted=ds.clean_labels != noisy,
        num_classes=c,
    )


def empirical_transition_matrix(ds: LabeledDataset):
    """Row-stochastic matrix: entry (i, j) = P(noisy=j | clean=i).

    Returns ``(matrix, undefined_rows)`` where undefined_rows flags clean
    classes with no samples (their rows are NaN, never silently zero).
    """
    c = ds.num_classes
    matrix = np.zeros((c, c))
    undefined = np.zeros(c, dtype=bool)
    for i in range(c):
        members = ds.clean_labels == i
        total = int(members.sum())
        if total == 0:
            matrix[i] = np.nan
            undefined[i] = True
            continue
        counts = np.bincount(ds.noisy_labels[members], minlength=c)
        matrix[i] = counts / total
    return matrix, undefined


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_dataset(ds: LabeledDataset, path) -> None:
    shape = ds.features.shape
    header = struct.pack(
        "<4sHII B", MAGIC, FORMAT_VERSION, ds.num_classes, shape[0], len(shape) - 1
    )
    dims = struct.pack(f"<{len(shape) - 1}I", *shape[1:])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(ds.features.astype("<f4", copy=False).tobytes())
        fh.write(ds.clean_labels.astype("<i4", copy=False).tobytes())
        fh.write(ds.noisy_labels.astype("<i4", copy=False).tobytes())
        fh.write(ds.corrupted.astype(np.uint8).tobytes())


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    head_fmt = "<4sHII B"
    head_size = struct.calcsize(head_fmt)
    if len(blob) < head_size:
        raise CorruptHeaderError(f"{path}: truncated header")
    magic, version, c, n, ndim = struct.unpack_from(head_fmt, blob)
    if magic != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    offset = head_size
    if len(blob) < offset + 4 * ndim:
        raise CorruptHeaderError(f"{path}: truncated shape record")
    dims = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    feat_count = n * int(np.prod(dims, dtype=np.int64)) if ndim else n
    expected = feat_count * 4 + n * 4 + n * 4 + n
    if len(blob) - offset != expected:
        raise PayloadShapeError(
            f"{path}: payload is {len(blob) - offset} bytes, expected {expected}"
        )
    features = np.frombuffer(blob, dtype="<f4", count=feat_count, offset=offset)
    offset += feat_count * 4
    clean = np.frombuffer(blob, dtype="<i4", count=n, offset=offset)
    offset += n * 4
    noisy = np.frombuffer(blob, dtype="<i4", count=n, offset=offset)
    offset += n * 4
    corrupted = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset)
    return LabeledDataset(
        features=features.reshape((n,) + tuple(dims)).copy(),
        clean_labels=clean.astype(np.int32),
        noisy_labels=noisy.astype(np.int32),
        corrupted=corrupted.astype(bool),
        num_classes=int(c),
    )


def export_labels_csv(ds: LabeledDataset, path) -> None:
    """One row per sample: index, clean_label, noisy_label, corrupted."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "clean_label", "noisy_label", "corrupted"])
        for i in range(len(ds)):
            writer.writerow(
                [i, int(ds.clean_labels[i]), int(ds.noisy_labels[i]), int(ds.corrupted[i])]
            )
