"""Datasets: IDX (MNIST) files, synthetic Gaussian blobs, batching, task splits."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        if inputs.ndim != 2 or labels.ndim != 1 or len(inputs) != len(labels):
            raise ValueError(f"inputs {inputs.shape} and labels {labels.shape} do not pair up")
        if len(labels) < 1:
            raise ValueError("dataset is empty")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(inputs)):
            raise ValueError("inputs contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count)

    def head(self, count: int) -> "Dataset":
        return self.subset(np.arange(min(count, len(self))))


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, ndim: int, path) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(shape))
    if len(raw) - header != count:
        raise IdxFormatError(f"{path}: payload has {len(raw) - header} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(shape)


def load_idx(image_path: str | Path, label_path: str | Path, class_count: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) into a dataset in [0, 1]."""
    images = _parse_idx(_read_bytes(image_path), IMAGE_MAGIC, 3, image_path)
    labels = _parse_idx(_read_bytes(label_path), LABEL_MAGIC, 1, label_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), class_count)


def load_mnist(directory: str | Path) -> tuple[Dataset, Dataset]:
    """Train and test splits from the four standard MNIST file names."""
    directory = Path(directory)

    def find(stem: str) -> Path:
        for name in (stem, stem + ".gz"):
            if (directory / name).exists():
                return directory / name
        raise FileNotFoundError(directory / stem)

    train = load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    test = load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    return train, test


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX; used to build fixtures."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def _simplex_means(class_count: int, dim: int, separation: float, rng) -> np.ndarray:
    """``class_count`` points with all pairwise distances equal to ``separation``."""
    if dim >= class_count:
        # centred standard basis: regular simplex with edge sqrt(2)
        basis = np.eye(class_count)
        centred = basis - basis.mean(axis=0)
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        # embed the class_count-dim simplex via an orthonormal frame
        means = centred @ q[:class_count, :]
        return means * separation / np.sqrt(2.0)
    # not enough room for a regular simplex: random directions scaled to the
    # requested minimum pairwise distance
    means = rng.normal(size=(class_count, dim))
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    dmin = d[np.triu_indices(class_count, 1)].min()
    return means * separation / dmin


def synth_blobs(
    class_count: int,
    dim: int,
    per_class: int,
    separation: float,
    seed: int = 0,
) -> Dataset:
    """Unit-variance Gaussian clusters around simplex-arranged class means."""
    if class_count < 2:
        raise ValueError("need at least two classes")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    means = _simplex_means(class_count, dim, separation, rng)
    labels = np.repeat(np.arange(class_count), per_class)
    inputs = means[labels] + rng.normal(size=(len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(inputs[order], labels[order], class_count)


def epoch_order(n: int, seed: int, epoch_index: int) -> np.ndarray:
    rng = np.random.default_rng([seed, epoch_index])
    return rng.permutation(n)


def epoch_batches(dataset: Dataset, batch_size: int, seed: int, epoch_index: int) -> list[np.ndarray]:
    """Index arrays for one epoch; a fresh shuffle per ``(seed, epoch_index)``.

    The final short batch is kept so every sample is visited exactly once.
    """
    n = len(dataset)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch size {batch_size} outside [1, {n}]")
    order = epoch_order(n, seed, epoch_index)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass(frozen=True)
class TaskSplit:
    task_a: Dataset
    task_b: Dataset
    partition: tuple[tuple[int, ...], tuple[int, ...]]


def split_tasks(dataset: Dataset, partition: Sequence[Sequence[int]]) -> TaskSplit:
    """Two tasks by label class. Labels keep their original ids (shared head)."""
    if len(partition) != 2:
        raise ValueError("partition must have exactly two class groups")
    groups = tuple(tuple(int(c) for c in g) for g in partition)
    for g in groups:
        if not g:
            raise ValueError("partition groups must be nonempty")
        if any(not 0 <= c < dataset.class_count for c in g):
            raise ValueError(f"class ids {g} out of range")
    if set(groups[0]) & set(groups[1]):
        raise ValueError(f"partition groups overlap: {sorted(set(groups[0]) & set(groups[1]))}")
    masks = [np.isin(dataset.labels, g) for g in groups]
    for g, m in zip(groups, masks):
        if not m.any():
            raise ValueError(f"no samples for classes {g}")
    return TaskSplit(dataset.subset(np.flatnonzero(masks[0])), dataset.subset(np.flatnonzero(masks[1])), groups)
