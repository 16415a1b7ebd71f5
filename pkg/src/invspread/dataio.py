"""Datasets: CIFAR-10 binary ingestion, synthetic clusters, minibatch streams."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import rng as rngmod
from .errors import ContractError, FormatError, IngestionError
from .imaging import resize_bilinear

CIFAR_SHAPE = (3, 32, 32)
CIFAR_PIXELS = 3 * 32 * 32
CIFAR_RECORD = CIFAR_PIXELS + 1
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
CIFAR_CLASSES = (
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
)


@dataclass(frozen=True)
class ImageRecord:
    pixels: np.ndarray  # uint8, C×H×W
    label: int


class Dataset:
    """An ordered, immutable collection of images; the position is the instance id.

    Pixels are held as one uint8 array of shape n×C×H×W. Labels are kept for
    evaluation and never reach a training loss.
    """

    def __init__(self, pixels: np.ndarray, labels: np.ndarray, num_classes: int, name: str = ""):
        pixels = np.asarray(pixels)
        labels = np.asarray(labels, dtype=np.int64)
        if pixels.dtype != np.uint8 or pixels.ndim != 4:
            raise ContractError(f"pixels must be uint8 n×C×H×W, got {pixels.dtype} {pixels.shape}")
        if len(pixels) == 0:
            raise ContractError("a dataset needs at least one record")
        if labels.shape != (len(pixels),):
            raise ContractError(f"{len(labels)} labels for {len(pixels)} images")
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ContractError(f"labels must lie in [0, {num_classes})")
        pixels.setflags(write=False)
        labels.setflags(write=False)
        self.pixels = pixels
        self.labels = labels
        self.num_classes = int(num_classes)
        self.name = name

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i: int) -> ImageRecord:
        return ImageRecord(self.pixels[i], int(self.labels[i]))

    @property
    def records(self) -> list[ImageRecord]:
        return [self[i] for i in range(len(self))]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.pixels.shape[1:])

    def subset(self, index, name: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.pixels[index].copy(), self.labels[index].copy(), self.num_classes, name or self.name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.pixels, other.pixels)
            and np.array_equal(self.labels, other.labels)
        )


# ---------------------------------------------------------------- CIFAR-10


def read_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"missing CIFAR-10 batch file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        start = raw.size - raw.size % CIFAR_RECORD
        raise FormatError(
            f"file length {raw.size} is not a multiple of {CIFAR_RECORD}; "
            f"record starting at byte {start} is truncated",
            offset=raw.size,
            path=path,
        )
    rows = raw.reshape(-1, CIFAR_RECORD)
    labels = rows[:, 0].astype(np.int64)
    if labels.size and labels.max() >= len(CIFAR_CLASSES):
        bad = int(np.argmax(labels >= len(CIFAR_CLASSES)))
        raise FormatError(f"label byte {labels[bad]} out of range", offset=bad * CIFAR_RECORD, path=path)
    pixels = rows[:, 1:].reshape(-1, *CIFAR_SHAPE).copy()
    return pixels, labels


def load_cifar10(directory, split: str = "train", limit: int | None = None) -> Dataset:
    """Read the CIFAR-10 binary batches from ``directory``.

    ``split`` is ``"train"`` (the five data batches, in filename order) or
    ``"test"``. ``limit`` keeps only the first records, in file order.
    """
    directory = Path(os.path.expandvars(str(directory)))
    if split == "train":
        names = CIFAR_TRAIN_FILES
    elif split == "test":
        names = CIFAR_TEST_FILES
    else:
        raise ContractError(f"unknown CIFAR-10 split {split!r}")
    parts = [read_cifar_file(directory / name) for name in names]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([lab for _, lab in parts])
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    return Dataset(pixels, labels, len(CIFAR_CLASSES), name=f"cifar10-{split}")


def write_records(ds: Dataset, path) -> None:
    """Serialise a 3×32×32 dataset in the CIFAR-10 binary record layout."""
    if ds.image_shape != CIFAR_SHAPE:
        raise ContractError(f"record format needs {CIFAR_SHAPE} images, got {ds.image_shape}")
    if ds.num_classes > 256:
        raise ContractError("labels must fit in one byte")
    out = np.empty((len(ds), CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = ds.labels
    out[:, 1:] = ds.pixels.reshape(len(ds), -1)
    out.tofile(path)


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation of pixels scaled to [0, 1]."""
    x = ds.pixels.astype(np.float64) / 255.0
    x = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
    return x.mean(axis=1), x.std(axis=1)


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    num_clusters: int = 4
    points_per_cluster: int = 50
    dim: int = 32
    cluster_spread: float = 0.1
    seed: int = 0
    pattern_grid: int = 4

    def __post_init__(self):
        if self.num_clusters < 2:
            raise ContractError("num_clusters must be >= 2")
        if self.dim < 2:
            raise ContractError("dim must be >= 2")
        if self.points_per_cluster < 1:
            raise ContractError("points_per_cluster must be >= 1")
        if self.cluster_spread < 0:
            raise ContractError("cluster_spread must be >= 0")


def _cluster_means(k: int, dim: int, gen: np.random.Generator) -> np.ndarray:
    if k <= dim:
        return np.eye(k, dim) / np.sqrt(2.0)
    means = gen.normal(size=(k, dim))
    d = np.sqrt(((means[:, None] - means[None]) ** 2).sum(-1))
    d[np.diag_indices(k)] = np.inf
    return means / d.min()


def _smooth_basis(dim: int, grid: int, gen: np.random.Generator) -> np.ndarray:
    coarse = gen.normal(size=(dim, 3, grid, grid))
    fine = np.stack([resize_bilinear(c, 32, 32) for c in coarse]).reshape(dim, -1)
    q, _ = np.linalg.qr(fine.T)
    return q.T  # dim × 3072, orthonormal rows


def make_synthetic(spec: SyntheticSpec, name: str = "synthetic") -> Dataset:
    """Gaussian blobs rendered as 3×32×32 images.

    Cluster means sit at pairwise distance 1 in a ``dim``-dimensional latent
    space; points get isotropic noise of std ``cluster_spread``. Latent points
    are mapped to pixels through an orthonormal basis of smooth (low-frequency)
    colour patterns, so pixel distances are proportional to latent distances,
    then affinely rescaled onto [0, 255] and rounded. Labels are cluster ids.
    """
    gen = rngmod.stream(spec.seed, "synthetic")
    means = _cluster_means(spec.num_clusters, spec.dim, gen)
    basis = _smooth_basis(spec.dim, spec.pattern_grid, gen)
    labels = np.repeat(np.arange(spec.num_clusters), spec.points_per_cluster)
    noise = gen.normal(size=(len(labels), spec.dim)) * spec.cluster_spread
    latent = means[labels] + noise
    flat = latent @ basis
    lo, hi = flat.min(), flat.max()
    if hi > lo:
        flat = (flat - lo) * (255.0 / (hi - lo))
    else:
        flat = np.full_like(flat, 127.5)
    pixels = np.clip(np.rint(flat), 0, 255).astype(np.uint8).reshape(-1, *CIFAR_SHAPE)
    return Dataset(pixels, labels, spec.num_clusters, name=name)


def split_per_class(ds: Dataset, test_per_class: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Hold out ``test_per_class`` seeded-random records of every class."""
    gen = rngmod.stream(seed, "split")
    test_idx = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if len(members) <= test_per_class:
            raise ContractError(f"class {c} has {len(members)} records, cannot hold out {test_per_class}")
        test_idx.extend(gen.choice(members, size=test_per_class, replace=False).tolist())
    test_idx = np.sort(np.asarray(test_idx, dtype=np.int64))
    train_idx = np.setdiff1d(np.arange(len(ds)), test_idx)
    return ds.subset(train_idx, ds.name + "-train"), ds.subset(test_idx, ds.name + "-test")


# ---------------------------------------------------------------- batching


def epoch_permutation(n: int, epoch_seed: int) -> np.ndarray:
    return rngmod.stream(epoch_seed, "shuffle").permutation(n)


def minibatches(ds: Dataset, batch_size: int, epoch_seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(instance_ids, pixels)`` over a seeded permutation, dropping the short tail."""
    n = len(ds)
    if not 1 <= batch_size <= n:
        raise ContractError(f"batch_size must be in [1, {n}], got {batch_size}")
    perm = epoch_permutation(n, epoch_seed)
    for start in range(0, n - batch_size + 1, batch_size):
        ids = perm[start : start + batch_size]
        yield ids, ds.pixels[ids]
