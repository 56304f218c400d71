"""CIFAR-10 binary ingestion, row-average preprocessing, batching and synthetic data."""
from __future__ import annotations

import hashlib
import logging
import tarfile
import urllib.parse
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 32, 32)
IMAGE_BYTES = 3 * 32 * 32
RECORD_BYTES = 1 + IMAGE_BYTES
RECORDS_PER_FILE = 10_000
NUM_CLASSES = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
CLASS_NAMES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")


@dataclass
class Cifar10Set:
    """Images ``[M, 3, H, W]`` scaled to [0, 1] (float32) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int | None) -> "Cifar10Set":
        if n is None or n >= len(self):
            return self
        return Cifar10Set(self.images[:n], self.labels[:n], self.split)

    def with_images(self, images) -> "Cifar10Set":
        return Cifar10Set(images, self.labels, self.split)

    def class_histogram(self, num_classes: int = NUM_CLASSES) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


def decode_records(raw: bytes, source: str = "<bytes>"):
    if len(raw) % RECORD_BYTES:
        raise DataError(f"{source}: {len(raw)} bytes is not a whole number of {RECORD_BYTES}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if len(labels) and labels.max() >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise DataError(f"{source}: record {bad} has label byte {labels[bad]} > 9")
    images = rec[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float32) / np.float32(255)
    return images, labels


def encode_records(images, labels) -> bytes:
    """Inverse of :func:`decode_records`; pixel values are rounded to the nearest byte."""
    images = np.asarray(images)
    if images.shape[1:] != IMAGE_SHAPE:
        raise DataError(f"CIFAR-10 records hold {IMAGE_SHAPE} images, got {images.shape[1:]}")
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= NUM_CLASSES:
        raise DataError("labels must lie in 0..9")
    out = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = np.clip(np.rint(images.reshape(len(labels), -1) * 255), 0, 255)
    return out.tobytes()


def read_batch_file(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing CIFAR-10 batch file {path}")
    return decode_records(path.read_bytes(), str(path))


def load_cifar10_binary(directory, strict: bool = True) -> tuple[Cifar10Set, Cifar10Set]:
    """Read the five training batches and the test batch from ``directory``.

    With ``strict`` each file must hold exactly 10,000 records.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    parts = []
    for name in TRAIN_FILES + (TEST_FILE,):
        images, labels = read_batch_file(directory / name)
        if strict and len(labels) != RECORDS_PER_FILE:
            raise DataError(f"{directory / name}: expected {RECORDS_PER_FILE} records, found {len(labels)}")
        parts.append((images, labels))
    train = Cifar10Set(
        np.concatenate([p[0] for p in parts[:-1]]), np.concatenate([p[1] for p in parts[:-1]]), "train"
    )
    test = Cifar10Set(parts[-1][0], parts[-1][1], "test")
    return train, test


def write_cifar10_binary(directory, train: Cifar10Set, test: Cifar10Set):
    """Write the six standard batch files (train split into five equal parts)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    chunks = np.array_split(np.arange(len(train)), len(TRAIN_FILES))
    for name, idx in zip(TRAIN_FILES, chunks):
        (directory / name).write_bytes(encode_records(train.images[idx], train.labels[idx]))
    (directory / TEST_FILE).write_bytes(encode_records(test.images, test.labels))


def download_cifar10(dest, url: str, sha256: str, chunk: int = 1 << 20) -> Path:
    """Fetch the binary archive, verify its SHA-256 and unpack it under ``dest``.

    The checksum is caller-supplied configuration; there is no built-in default.
    Returns the directory containing the ``*.bin`` batches.
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    archive = dest / Path(urllib.parse.urlparse(url).path).name
    digest = hashlib.sha256()
    log.info("downloading %s", url)
    with urllib.request.urlopen(url) as resp, open(archive, "wb") as fh:
        while block := resp.read(chunk):
            digest.update(block)
            fh.write(block)
    if digest.hexdigest() != sha256.lower():
        archive.unlink()
        raise DataError(f"checksum mismatch for {url}: got {digest.hexdigest()}, expected {sha256}")
    with tarfile.open(archive) as tar:
        for member in tar.getmembers():
            target = (dest / member.name).resolve()
            if dest.resolve() not in target.parents and target != dest.resolve():
                raise DataError(f"refusing to extract {member.name} outside {dest}")
        tar.extractall(dest)
    found = sorted(dest.rglob(TEST_FILE))
    if not found:
        raise DataError(f"archive from {url} has no {TEST_FILE}")
    return found[0].parent


def row_average(images):
    """Replace every pixel row by the mean of itself and its vertical neighbours.

    Edge rows are replicated, so the first row averages (row0, row0, row1)
    and the last (row[-2], row[-1], row[-1]).  Spatial size is unchanged.
    """
    x = np.asarray(images)
    if x.shape[-2] == 1:
        return x.copy()
    up = np.concatenate([x[..., :1, :], x[..., :-1, :]], axis=-2)
    down = np.concatenate([x[..., 1:, :], x[..., -1:, :]], axis=-2)
    return ((up + x + down) / 3).astype(x.dtype, copy=False)


def batch_iterator(dataset: Cifar10Set, batch_size: int, seed=None, shuffle: bool = True):
    """Yield ``(images, labels)`` batches; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else None
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size] if shuffle else slice(start, start + batch_size)
        yield dataset.images[idx], dataset.labels[idx]


def make_synthetic(num_classes=10, samples_per_class=100, image_size=32, seed=0, split="train", noise=0.12):
    """Class-separable images: each class lights up its own block of a grid, plus a colour tint.

    Pixel values are quantized to multiples of 1/255 so the set can be
    written in the CIFAR-10 binary format without loss.
    """
    rng = np.random.default_rng(seed)
    grid = int(np.ceil(np.sqrt(num_classes)))
    cell = max(1, image_size // grid)
    protos = np.full((num_classes, 3, image_size, image_size), 0.25, dtype=np.float32)
    for k in range(num_classes):
        r, c = divmod(k, grid)
        protos[k, :, r * cell : (r + 1) * cell, c * cell : (c + 1) * cell] = 0.85
        protos[k, k % 3] += 0.1
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    labels = labels[rng.permutation(len(labels))]
    images = protos[labels] + rng.normal(0, noise, size=(len(labels), 3, image_size, image_size))
    images = np.rint(np.clip(images, 0, 1) * 255).astype(np.float32) / np.float32(255)
    return Cifar10Set(images, labels.astype(np.int64), split)


def write_ppm(path, image):
    """Write a ``[3, H, W]`` image in [0, 1] as a binary (P6) portable pixmap."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"expected a [3, H, W] image, got {image.shape}")
    _, h, w = image.shape
    pixels = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    """Parse a P6 pixmap written by :func:`write_ppm` back to a float32 ``[3, H, W]`` array."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        if end == pos:
            raise DataError(f"{path}: truncated pixmap header")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or fields[3] != b"255":
        raise DataError(f"{path}: only 8-bit P6 pixmaps are supported")
    w, h = int(fields[1]), int(fields[2])
    body = raw[pos + 1 :]
    if len(body) != 3 * w * h:
        raise DataError(f"{path}: expected {3 * w * h} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255)
