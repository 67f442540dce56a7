"""Datasets: IDX files, synthetic fixtures, stratified splits, cutout and random erasing."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_MULTICHANNEL_MAGIC = 0x00000804  # (n, C, H, W); used for the multi-channel synthetic fixtures


class IdxFormatError(ValueError):
    pass


class IdxConsistencyError(ValueError):
    pass


class IdxTruncatedError(OSError):
    pass


class StratificationError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W), values in [0, 1]
    labels: np.ndarray  # (n,) ints
    n_classes: int
    name: str = ""
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels outside [0, n_classes)")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("images contain non-finite values")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def with_stats(self) -> "Dataset":
        """Attach per-channel mean/std computed from this split."""
        mean = self.images.mean(axis=(0, 2, 3))
        std = self.images.std(axis=(0, 2, 3))
        return replace(self, mean=mean, std=np.where(std > 0, std, 1.0))


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (images - mean[None, :, None, None]) / std[None, :, None, None]


def denormalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return images * std[None, :, None, None] + mean[None, :, None, None]


# ---------------------------------------------------------------------------
# IDX


def read_idx(path) -> tuple[int, np.ndarray]:
    """Returns (magic, array) for an unsigned-byte IDX file."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"{path}: magic 0x{magic:08x} is not an unsigned-byte IDX file")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxTruncatedError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    return magic, data


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path, n_classes: int = 10, name: str = "") -> Dataset:
    magic, images = read_idx(images_path)
    if magic not in (IDX_IMAGES_MAGIC, IDX_MULTICHANNEL_MAGIC):
        raise IdxFormatError(f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    magic, labels = read_idx(labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if images.shape[0] != labels.shape[0]:
        raise IdxConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    imgs = images.astype(np.float64) / 255.0
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    return Dataset(imgs, labels.astype(np.int64), n_classes, name or Path(images_path).stem)


def save_idx_dataset(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset out with pixels quantised to bytes; multi-channel images get a 4-d header."""
    images = np.round(dataset.images * 255.0)
    write_idx(images_path, images[:, 0] if images.shape[1] == 1 else images)
    write_idx(labels_path, dataset.labels)


# ---------------------------------------------------------------------------
# synthetic fixtures


def synthetic_dataset(seed: int, n: int, n_classes: int, size: int, kind: str = "frequency",
                      channels: int | None = None, noise: float = 0.08) -> Dataset:
    """Deterministic desk-scale fixture.

    ``kind="frequency"``: one channel; each class is an oriented sinusoid with
    its own frequency under a Gaussian envelope, with random amplitude and
    pixel noise. A fixed template per class keeps it linearly separable.

    ``kind="channel"``: ``channels`` channels of random-phase texture; the
    label is the channel carrying the strongest texture, so the signal lives
    in per-channel energy rather than in any spatial template.
    """
    if n % n_classes:
        raise ValueError(f"n={n} must be divisible by n_classes={n_classes}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), n // n_classes)
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size] / size
    if kind == "frequency":
        images = np.empty((n, 1, size, size))
        envelope_c = [(0.5 + 0.2 * np.cos(2 * np.pi * k / n_classes), 0.5 + 0.2 * np.sin(2 * np.pi * k / n_classes))
                      for k in range(n_classes)]
        templates = []
        for k in range(n_classes):
            theta = np.pi * k / n_classes
            freq = 1.0 + 2.0 * k / max(n_classes - 1, 1) * min(3.0, size / 8)
            wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
            cy, cx = envelope_c[k]
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.25**2))
            templates.append(wave * blob)
        templates = np.stack(templates)
        amp = rng.uniform(0.25, 0.4, size=n)
        images[:, 0] = 0.5 + amp[:, None, None] * templates[labels]
        images += noise * rng.standard_normal(images.shape)
    elif kind == "channel":
        channels = channels or n_classes
        if channels < n_classes:
            raise ValueError("channel fixture needs at least one channel per class")
        fy = rng.integers(1, max(2, size // 4) + 1, size=(n, channels))
        fx = rng.integers(1, max(2, size // 4) + 1, size=(n, channels))
        phase = rng.uniform(0, 2 * np.pi, size=(n, channels, 2))
        tex = (np.cos(2 * np.pi * fy[..., None, None] * yy + phase[..., 0, None, None])
               * np.cos(2 * np.pi * fx[..., None, None] * xx + phase[..., 1, None, None]))
        amp = rng.uniform(0.05, 0.2, size=(n, channels))
        amp[np.arange(n), labels] = rng.uniform(0.3, 0.4, size=n)
        images = 0.5 + amp[..., None, None] * tex
        images += noise * rng.standard_normal(images.shape)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images, labels, n_classes, name=f"synthetic-{kind}-{seed}")


# ---------------------------------------------------------------------------
# splitting and batching


def split_indices(labels: np.ndarray, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split; the validation total is round(n * val_fraction), spread over classes by largest remainder."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == c) for c in classes]
    for c, idx in zip(classes, members):
        if idx.size < 2:
            raise StratificationError(f"class {c} has {idx.size} sample(s); need at least 2 to stratify")
    sizes = np.array([idx.size for idx in members])
    quota = sizes * val_fraction
    k = np.floor(quota).astype(int)
    extra = int(np.floor(labels.size * val_fraction + 0.5)) - k.sum()
    if extra > 0:
        remainder = quota - k
        order = sorted(range(len(k)), key=lambda i: (-remainder[i], rng.random()))
        for i in order[:extra]:
            k[i] += 1
    k = np.clip(k, 1, sizes - 1)
    train, val = [], []
    for idx, kc in zip(members, k):
        idx = rng.permutation(idx)
        val.append(idx[:kc])
        train.append(idx[kc:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def split(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified disjoint split; normalisation stats come from the training part only."""
    tr, va = split_indices(dataset.labels, val_fraction, seed)
    train = dataset.subset(tr).with_stats()
    val = replace(dataset.subset(va), mean=train.mean, std=train.std)
    return train, val


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def iterate_batches(dataset: Dataset, batch_size: int, seed: int, epoch: int, shuffle: bool = True,
                    augment: Callable | None = None, normalized: bool = True,
                    drop_last: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Deterministic batch sequence for (seed, epoch); augmentation runs before normalisation."""
    rng = epoch_rng(seed, epoch)
    order = rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    stop = len(order) - (len(order) % batch_size if drop_last else 0)
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        x = dataset.images[idx]
        if augment is not None:
            x = np.stack([augment(img, rng) for img in x])
        if normalized and dataset.mean is not None:
            x = normalize(x, dataset.mean, dataset.std)
        yield x, dataset.labels[idx]


# ---------------------------------------------------------------------------
# augmentation


def cutout(image: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Zero one ``length``-sided square whose centre is uniform over the image (clipped at borders)."""
    if length <= 0:
        raise ValueError("cutout length must be positive")
    _, h, w = image.shape
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    y0, x0 = cy - length // 2, cx - length // 2
    out = image.copy()
    out[:, max(0, y0):min(h, y0 + length), max(0, x0):min(w, x0 + length)] = 0.0
    return out


def random_erasing(image: np.ndarray, rng: np.random.Generator, p: float = 0.5,
                   area_range: tuple[float, float] = (0.02, 0.4),
                   aspect_range: tuple[float, float] = (0.3, 3.33),
                   return_box: bool = False):
    """With probability ``p`` fill one random rectangle with uniform noise in [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    box = None
    out = image
    if rng.random() < p:
        c, h, w = image.shape
        for _ in range(100):
            target = rng.uniform(*area_range) * h * w
            aspect = rng.uniform(*aspect_range)
            eh = int(round(np.sqrt(target * aspect)))
            ew = int(round(np.sqrt(target / aspect)))
            if 0 < eh < h and 0 < ew < w:
                y0 = int(rng.integers(0, h - eh + 1))
                x0 = int(rng.integers(0, w - ew + 1))
                out = image.copy()
                out[:, y0:y0 + eh, x0:x0 + ew] = rng.random((c, eh, ew))
                box = (y0, x0, eh, ew)
                break
    return (out, box) if return_box else out


def make_augmenter(cutout_length: int = 0, random_erasing_p: float = 0.0) -> Callable | None:
    """Cutout then random erasing, each optional."""
    if cutout_length <= 0 and random_erasing_p <= 0:
        return None

    def augment(img, rng):
        if cutout_length > 0:
            img = cutout(img, cutout_length, rng)
        if random_erasing_p > 0:
            img = random_erasing(img, rng, p=random_erasing_p)
        return img

    return augment
