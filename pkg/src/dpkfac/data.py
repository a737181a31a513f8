"""Dataset ingestion: IDX (MNIST-format) files and synthetic blob tasks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, IdxFormatError
from .rng import Rng

IDX_IMAGE_MAGIC = 0x00000803  # unsigned byte, 3-D
IDX_LABEL_MAGIC = 0x00000801  # unsigned byte, 1-D


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    num_classes: int
    name: str = "dataset"
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ContractError("features and labels disagree in length")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ContractError("labels out of range")
        if not np.isfinite(self.x).all():
            raise ContractError("features contain non-finite values")

    @property
    def train_x(self):
        return self.x[self.train_idx]

    @property
    def train_y(self):
        return self.y[self.train_idx]

    @property
    def test_x(self):
        return self.x[self.test_idx]

    @property
    def test_y(self):
        return self.y[self.test_idx]

    @property
    def n_train(self) -> int:
        return len(self.train_idx)


def _read_be_u32(buf: bytes, off: int) -> int:
    if off + 4 > len(buf):
        raise IdxFormatError("truncated header", off)
    return int.from_bytes(buf[off : off + 4], "big")


def _parse_idx_images(buf: bytes, path: str) -> np.ndarray:
    magic = _read_be_u32(buf, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"{path}: bad image magic 0x{magic:08x}", 0)
    count = _read_be_u32(buf, 4)
    rows = _read_be_u32(buf, 8)
    cols = _read_be_u32(buf, 12)
    need = count * rows * cols
    if len(buf) - 16 < need:
        raise IdxFormatError(f"{path}: truncated image payload", len(buf))
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=16)
    return raw.reshape(count, 1, rows, cols).astype(np.float64) / 255.0


def _parse_idx_labels(buf: bytes, path: str) -> np.ndarray:
    magic = _read_be_u32(buf, 0)
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(f"{path}: bad label magic 0x{magic:08x}", 0)
    count = _read_be_u32(buf, 4)
    if len(buf) - 8 < count:
        raise IdxFormatError(f"{path}: truncated label payload", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_idx(images_path: str, labels_path: str, num_classes: int = 10) -> Dataset:
    """Parse an IDX image/label file pair (big-endian, pixels scaled to [0, 1]).

    The returned dataset has every row in the train split; pair it with a
    second call for the test files via ``merge_splits``.
    """
    with open(images_path, "rb") as f:
        images = _parse_idx_images(f.read(), images_path)
    with open(labels_path, "rb") as f:
        labels = _parse_idx_labels(f.read(), labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{labels_path}: label count {labels.shape[0]} does not match "
            f"image count {images.shape[0]}",
            4,
        )
    n = images.shape[0]
    return Dataset(
        x=images,
        y=labels,
        train_idx=np.arange(n),
        test_idx=np.arange(0),
        num_classes=num_classes,
        name="idx",
        normalization={"kind": "scale255"},
    )


def merge_splits(train: Dataset, test: Dataset, name: str = "idx") -> Dataset:
    x = np.concatenate([train.x, test.x])
    y = np.concatenate([train.y, test.y])
    n1 = train.x.shape[0]
    return Dataset(
        x=x,
        y=y,
        train_idx=np.arange(n1),
        test_idx=np.arange(n1, n1 + test.x.shape[0]),
        num_classes=max(train.num_classes, test.num_classes),
        name=name,
        normalization=train.normalization,
    )


def subsample_train(ds: Dataset, k: int, seed: int) -> Dataset:
    """Deterministically keep k training rows (test split untouched)."""
    if k >= ds.n_train:
        return ds
    keep = Rng(seed).permutation(ds.n_train)[:k]
    return Dataset(
        x=ds.x,
        y=ds.y,
        train_idx=ds.train_idx[np.sort(keep)],
        test_idx=ds.test_idx,
        num_classes=ds.num_classes,
        name=f"{ds.name}-sub{k}",
        normalization=ds.normalization,
    )


def _mean_basis(classes: int, dim: int, image_shape) -> np.ndarray:
    """Orthonormal directions carrying the class means.

    A simplex is rotation-invariant, so the basis is free to choose: for
    image-shaped features the means sit on the lowest 2-D cosine modes
    (smooth, digit-like class patterns a convolution can pick up); for flat
    features, on coordinate axes.
    """
    if image_shape is None:
        basis = np.zeros((classes, dim))
        basis[np.arange(classes), np.arange(classes)] = 1.0
        return basis
    c, h, w = image_shape
    fy, fx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    order = sorted(
        ((int(a + b), int(a), int(b)) for a, b in zip(fy.ravel(), fx.ravel()))
    )
    ys = (np.arange(h) + 0.5) * np.pi / h
    xs = (np.arange(w) + 0.5) * np.pi / w
    basis = np.zeros((classes, dim))
    for i in range(classes):
        _, a, b = order[i]
        mode = np.cos(a * ys)[:, None] * np.cos(b * xs)[None, :]
        img = np.tile(mode[None, :, :], (c, 1, 1)).ravel()
        basis[i] = img / np.linalg.norm(img)
    return basis


def gen_blobs(
    n: int,
    dim: int,
    classes: int,
    noise: float,
    seed: int,
    image_shape: tuple | None = None,
) -> Dataset:
    """Gaussian blobs with class means on a scaled simplex.

    Labels are assigned round-robin (balanced within one sample), every 5th
    row of each class goes to the test split, and features are standardized
    per feature with training-split statistics. ``image_shape`` reshapes
    features to (C, H, W) and moves the simplex onto smooth low-frequency
    image modes so convolutional models see digit-like class structure.
    """
    if classes < 2:
        raise ContractError("classes must be >= 2")
    if n < classes:
        raise ContractError("need at least one sample per class")
    if dim < classes:
        raise ContractError("simplex means need dim >= classes")
    if image_shape is not None and int(np.prod(image_shape)) != dim:
        raise ContractError("image_shape does not match feature dim")
    rng = Rng(seed)
    scale = 2.0
    basis = _mean_basis(classes, dim, image_shape)
    means = scale * (basis - basis.mean(axis=0))
    y = np.arange(n, dtype=np.int64) % classes
    x = means[y] + noise * rng.standard_normal((n, dim))
    idx = np.arange(n)
    # stride within each class's subsequence so both splits stay balanced
    in_test = (idx // classes) % 5 == 4
    test_idx = idx[in_test]
    train_idx = idx[~in_test]
    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    x = (x - mu) / sd
    if image_shape is not None:
        c, h, w = image_shape
        if c * h * w != dim:
            raise ContractError("image_shape does not match feature dim")
        x = x.reshape(n, c, h, w)
    return Dataset(
        x=x,
        y=y,
        train_idx=train_idx,
        test_idx=test_idx,
        num_classes=classes,
        name="blobs",
        normalization={"kind": "standardize", "mean": mu, "std": sd},
    )
