"""Dataset ingestion: IDX-format files and the seeded synthetic-blobs generator.

Images are float32 NCHW in [0, 1]; labels are int64 class indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError

__all__ = ["Dataset", "load_idx", "synthetic_blobs", "load_dataset", "dataset_geometry"]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.images.shape[0]

    @property
    def geometry(self):
        return self.images.shape[1:]


def _read_be_u32(buf: bytes, offset: int, path: str) -> tuple[int, int]:
    if offset + 4 > len(buf):
        raise FormatError(f"{path}: truncated file, needed 4 bytes at offset {offset}, "
                          f"have {len(buf) - offset}")
    return int.from_bytes(buf[offset:offset + 4], "big"), offset + 4


def load_idx(images_path, labels_path) -> Dataset:
    """Load a big-endian IDX image/label file pair.

    Image files carry magic 0x00000803 and dims (N, H, W); label files carry
    magic 0x00000801 and dim (N,). Counts must agree between the two files.
    """
    with open(images_path, "rb") as fh:
        buf = fh.read()
    magic, off = _read_be_u32(buf, 0, str(images_path))
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    n, off = _read_be_u32(buf, off, str(images_path))
    rows, off = _read_be_u32(buf, off, str(images_path))
    cols, off = _read_be_u32(buf, off, str(images_path))
    expected = off + n * rows * cols
    if len(buf) != expected:
        raise FormatError(f"{images_path}: expected {expected} bytes "
                          f"({n}x{rows}x{cols} pixels after offset {off}), got {len(buf)}")
    images = np.frombuffer(buf, dtype=np.uint8, offset=off).reshape(n, 1, rows, cols)
    images = images.astype(np.float32) / 255.0

    with open(labels_path, "rb") as fh:
        lbuf = fh.read()
    magic, loff = _read_be_u32(lbuf, 0, str(labels_path))
    if magic != LABEL_MAGIC:
        raise FormatError(f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
    ln, loff = _read_be_u32(lbuf, loff, str(labels_path))
    if len(lbuf) != loff + ln:
        raise FormatError(f"{labels_path}: expected {loff + ln} bytes, got {len(lbuf)}")
    if ln != n:
        raise FormatError(f"image/label count mismatch: {images_path} has {n}, "
                          f"{labels_path} has {ln}")
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=loff).astype(np.int64)
    return Dataset(images, labels)


def synthetic_blobs(n_classes, train_samples, test_samples, image_size,
                    channels=1, noise=0.05, seed=0) -> tuple[Dataset, Dataset]:
    """Render per-class Gaussian blob images, fully determined by ``seed``.

    Each class owns two blob templates (position, width, per-channel
    amplitude); samples jitter the positions and amplitudes and add pixel
    noise, then clip to [0, 1].
    """
    rng = np.random.default_rng(seed)
    n_blobs = 2
    centers = rng.uniform(0.25, 0.75, size=(n_classes, n_blobs, 2)) * image_size
    sigmas = rng.uniform(0.08, 0.16, size=(n_classes, n_blobs)) * image_size
    amps = rng.uniform(0.7, 1.0, size=(n_classes, n_blobs, channels))
    yy, xx = np.mgrid[0:image_size, 0:image_size]

    def render(count):
        labels = rng.permutation(np.arange(count) % n_classes).astype(np.int64)
        images = np.empty((count, channels, image_size, image_size), dtype=np.float32)
        for i, k in enumerate(labels):
            img = np.zeros((channels, image_size, image_size), dtype=np.float64)
            for b in range(n_blobs):
                cy, cx = centers[k, b] + rng.normal(0.0, 0.04 * image_size, size=2)
                s = sigmas[k, b]
                bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * s * s))
                img += (amps[k, b] * rng.uniform(0.85, 1.15))[:, None, None] * bump[None]
            if noise:
                img += rng.normal(0.0, noise, size=img.shape)
            images[i] = np.clip(img, 0.0, 1.0)
        return Dataset(images, labels)

    return render(train_samples), render(test_samples)


def dataset_geometry(dcfg, default_seed=0):
    """(channels, height, width, n_classes) implied by a dataset config."""
    if dcfg.kind == "synthetic-blobs":
        return (dcfg.channels, dcfg.image_size, dcfg.image_size, dcfg.n_classes)
    return (1, 28, 28, 10)  # IDX digit files


def load_dataset(config) -> tuple[Dataset, Dataset]:
    dcfg = config.dataset
    if dcfg.kind == "synthetic-blobs":
        seed = dcfg.seed if dcfg.seed is not None else config.seed
        return synthetic_blobs(dcfg.n_classes, dcfg.train_samples, dcfg.test_samples,
                               dcfg.image_size, dcfg.channels, dcfg.noise, seed)
    train = load_idx(dcfg.train_images, dcfg.train_labels)
    test = load_idx(dcfg.test_images, dcfg.test_labels)
    if dcfg.train_limit is not None:
        train = Dataset(train.images[:dcfg.train_limit], train.labels[:dcfg.train_limit])
    if dcfg.test_limit is not None:
        test = Dataset(test.images[:dcfg.test_limit], test.labels[:dcfg.test_limit])
    return train, test
