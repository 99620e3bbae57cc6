"""Image batches, rotations, datasets and the non-stationary task stream.

Images are float tensors of shape (N, C, H, W) with values in [-1, 1].
Rotations are pure pixel permutations (counter-clockwise, k * 90 degrees), so
the rotation labels are exact and no interpolation ever touches the pixels.
"""

import hashlib
import io
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from config import SSGANError

logger = logging.getLogger(__name__)

RotationLabel = int
ROTATIONS: Tuple[RotationLabel, ...] = (0, 1, 2, 3)

DATASET_MAGIC = b"SSDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")

SHAPE_CLASSES = (
    "triangle", "ell", "tee", "arrow", "dome",
    "eff", "lollipop", "wedge", "cup", "house",
)


class DataError(SSGANError):
    """Raised for malformed batches or dataset requests."""


class DatasetFormatError(DataError):
    """Base class for binary dataset decoding failures."""


class BadMagicError(DatasetFormatError):
    """The file does not start with the dataset magic bytes."""


class UnsupportedVersionError(DatasetFormatError):
    """The file declares a format version this code cannot read."""


class TruncatedPayloadError(DatasetFormatError):
    """The file ends before the payload its header declares."""


class DimensionMismatchError(DatasetFormatError):
    """Header dimensions are inconsistent with each other or the payload."""


@dataclass
class ImageBatch:
    """A square image minibatch with optional class labels."""

    images: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got shape {tuple(self.images.shape)}")
        if self.images.shape[-1] != self.images.shape[-2]:
            raise DataError(f"images must be square, got {tuple(self.images.shape[-2:])}")
        if self.labels is not None and self.labels.shape[0] != self.images.shape[0]:
            raise DataError(
                f"label count {self.labels.shape[0]} != image count {self.images.shape[0]}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def head(self, n: int) -> "ImageBatch":
        labels = None if self.labels is None else self.labels[:n]
        return ImageBatch(self.images[:n], labels)


def check_rotation(k: int) -> int:
    """Validate a rotation label."""
    if k not in ROTATIONS:
        raise DataError(f"rotation label must be one of {ROTATIONS}, got {k}")
    return int(k)


def rotate90(batch: ImageBatch, k: RotationLabel) -> ImageBatch:
    """
    Rotate every image by k * 90 degrees counter-clockwise.

    Pixel (r, c) of an input image lands on (W - 1 - c, r). Labels pass
    through unchanged.

    Args:
        batch: Batch of square images
        k: Rotation label in {0, 1, 2, 3}

    Returns:
        Rotated batch

    Raises:
        DataError: On an invalid label
    """
    k = check_rotation(k)
    if k == 0:
        return ImageBatch(batch.images, batch.labels)
    return ImageBatch(torch.rot90(batch.images, k, dims=(-2, -1)), batch.labels)


def make_rotation_batch(batch: ImageBatch, n_base: int) -> Tuple[ImageBatch, torch.Tensor]:
    """
    Build the rotation-loss batch from the first n_base images.

    Every base image is emitted in all four orientations, image-major, so the
    rotation labels read 0, 1, 2, 3, 0, 1, 2, 3, ...

    Args:
        batch: Source batch (not extended with new images)
        n_base: Number of leading images to rotate

    Returns:
        Tuple of (4 * n_base rotated images, rotation labels)

    Raises:
        DataError: If n_base exceeds the batch size
    """
    if n_base < 1 or n_base > len(batch):
        raise DataError(f"n_base={n_base} must lie in [1, {len(batch)}]")
    base = batch.head(n_base)
    rotated = torch.stack([rotate90(base, k).images for k in ROTATIONS], dim=1)
    images = rotated.reshape(4 * n_base, *base.images.shape[1:])
    labels = None if base.labels is None else base.labels.repeat_interleave(4)
    rotation_labels = torch.tensor(ROTATIONS, dtype=torch.long).repeat(n_base)
    return ImageBatch(images, labels), rotation_labels


def stream_generator(seed: int, stream: str, *keys: int) -> torch.Generator:
    """
    Independent random stream for a (seed, stream, keys...) tuple.

    Streams are derived, never advanced across steps, so any step of a run can
    be replayed from its coordinates alone.

    Args:
        seed: Run seed
        stream: Stream name (e.g. "z", "data", "penalty")
        keys: Further integer coordinates such as step and sub-step

    Returns:
        Seeded torch.Generator
    """
    entropy = [int(seed), zlib.crc32(stream.encode("utf-8"))] + [int(k) for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0]
    generator = torch.Generator()
    generator.manual_seed(int(state))
    return generator


class ImageDataset:
    """In-memory image dataset with optional labels."""

    def __init__(self, images: torch.Tensor, labels: Optional[torch.Tensor] = None, num_classes: int = 0):
        """
        Initialize the dataset.

        Args:
            images: Float32 tensor (N, C, H, W)
            labels: Optional int64 tensor (N,)
            num_classes: Number of classes (0 when unlabeled)
        """
        if images.ndim != 4 or images.shape[0] == 0:
            raise DataError(f"dataset images must be non-empty (N, C, H, W), got {tuple(images.shape)}")
        if images.shape[-1] != images.shape[-2]:
            raise DataError("dataset images must be square")
        if labels is not None:
            if num_classes <= 0:
                raise DataError("labeled dataset needs num_classes > 0")
            if labels.shape[0] != images.shape[0]:
                raise DataError("label count does not match image count")
        self.images = images
        self.labels = labels
        self.num_classes = num_classes if labels is not None else 0

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def batch(self, indices: Union[torch.Tensor, Sequence[int]]) -> ImageBatch:
        index = torch.as_tensor(indices, dtype=torch.long)
        labels = None if self.labels is None else self.labels[index]
        return ImageBatch(self.images[index], labels)

    def sample_batch(self, batch_size: int, generator: torch.Generator) -> ImageBatch:
        """
        Draw a batch without replacement.

        Args:
            batch_size: Number of images
            generator: Random stream used for the draw

        Returns:
            ImageBatch of batch_size images
        """
        if batch_size > len(self):
            raise DataError(f"batch_size {batch_size} exceeds dataset size {len(self)}")
        indices = torch.randperm(len(self), generator=generator)[:batch_size]
        return self.batch(indices)

    def split(self, n_first: int) -> Tuple["ImageDataset", "ImageDataset"]:
        """Split into the first n_first items and the rest."""
        if not 0 < n_first < len(self):
            raise DataError(f"split point {n_first} outside (0, {len(self)})")
        head_labels = None if self.labels is None else self.labels[:n_first]
        tail_labels = None if self.labels is None else self.labels[n_first:]
        return (
            ImageDataset(self.images[:n_first], head_labels, self.num_classes),
            ImageDataset(self.images[n_first:], tail_labels, self.num_classes),
        )

    def to_bytes(self) -> bytes:
        buffer = io.BytesIO()
        _write_dataset(self, buffer)
        return buffer.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


# Shape membership tests in the shape's local frame; u points right, v points down.
def _shape_mask(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au = np.abs(u)
    if kind == 0:
        return (v <= 0.5) & (v >= -0.6) & (au <= (v + 0.6) * 0.5)
    if kind == 1:
        return ((np.abs(u + 0.3) <= 0.15) & (np.abs(v) <= 0.6)) | (
            (np.abs(v - 0.45) <= 0.15) & (u >= -0.45) & (u <= 0.45))
    if kind == 2:
        return ((np.abs(v + 0.45) <= 0.15) & (au <= 0.55)) | (
            (au <= 0.15) & (v >= -0.45) & (v <= 0.6))
    if kind == 3:
        stem = (au <= 0.12) & (v >= -0.1) & (v <= 0.6)
        head = (v >= -0.6) & (v <= -0.1) & (au <= (v + 0.6) * 1.1)
        return stem | head
    if kind == 4:
        return (u * u + v * v <= 0.36) & (v <= 0.1)
    if kind == 5:
        spine = (np.abs(u + 0.3) <= 0.12) & (np.abs(v) <= 0.6)
        top = (np.abs(v + 0.48) <= 0.12) & (u >= -0.3) & (u <= 0.5)
        middle = (np.abs(v) <= 0.1) & (u >= -0.3) & (u <= 0.3)
        return spine | top | middle
    if kind == 6:
        candy = u * u + (v + 0.3) ** 2 <= 0.09
        stick = (au <= 0.08) & (v >= 0.0) & (v <= 0.6)
        return candy | stick
    if kind == 7:
        return (au <= 0.5) & (np.abs(v) <= 0.5) & (v >= u)
    if kind == 8:
        walls = ((np.abs(u + 0.4) <= 0.12) | (np.abs(u - 0.4) <= 0.12)) & (np.abs(v) <= 0.5)
        floor = (np.abs(v - 0.4) <= 0.12) & (au <= 0.5)
        return walls | floor
    body = (au <= 0.4) & (v >= 0.0) & (v <= 0.55)
    roof = (v >= -0.5) & (v <= 0.0) & (au <= (v + 0.5) * 0.9)
    return body | roof


def _render_shapes(labels: np.ndarray, params: np.ndarray, size: int) -> np.ndarray:
    """Rasterize one chunk of shapes; params columns are cx, cy, scale, angle, bg, r, g, b."""
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size * 2.0 - 1.0
    y, x = np.meshgrid(coords, coords, indexing="ij")
    n = labels.shape[0]
    images = np.empty((n, 3, size, size), dtype=np.float64)
    for i in range(n):
        cx, cy, scale, angle, bg, r, g, b = params[i]
        dx, dy = x - cx, y - cy
        cos, sin = np.cos(angle), np.sin(angle)
        u = (cos * dx + sin * dy) / scale
        v = (-sin * dx + cos * dy) / scale
        mask = _shape_mask(int(labels[i]), u, v)
        # Brighter towards the top of the canvas.
        background = bg - 0.3 * y
        for channel, colour in enumerate((r, g, b)):
            images[i, channel] = np.where(mask, colour, background)
    return np.clip(images, -1.0, 1.0)


def synthetic_shapes_dataset(n: int, size: int = 32, num_classes: int = 10, seed: int = 0) -> ImageDataset:
    """
    Render a deterministic dataset of oriented geometric shapes.

    The class is the shape type. Shapes are anisotropic and stay within 25
    degrees of upright over a top-lit background, so the applied rotation of
    an image can be recovered. Classes are balanced by construction.

    Args:
        n: Number of images (> 0)
        size: Image side, 16 or 32
        num_classes: Number of shape classes (<= 10)
        seed: Seed of the rendering stream

    Returns:
        Labeled ImageDataset with values in [-1, 1]

    Raises:
        DataError: On invalid arguments
    """
    if n <= 0:
        raise DataError(f"n must be > 0, got {n}")
    if size not in (16, 32):
        raise DataError(f"size must be 16 or 32, got {size}")
    if not 1 <= num_classes <= len(SHAPE_CLASSES):
        raise DataError(f"num_classes must lie in [1, {len(SHAPE_CLASSES)}]")

    rng = np.random.Generator(np.random.PCG64(seed))
    labels = rng.permutation(np.arange(n) % num_classes)
    params = np.stack([
        rng.uniform(-0.3, 0.3, n),
        rng.uniform(-0.3, 0.3, n),
        rng.uniform(0.45, 0.7, n),
        rng.uniform(-np.pi * 25 / 180, np.pi * 25 / 180, n),
        rng.uniform(-0.7, -0.2, n),
        rng.uniform(0.1, 1.0, n),
        rng.uniform(0.1, 1.0, n),
        rng.uniform(0.1, 1.0, n),
    ], axis=1)

    chunks = []
    for start in range(0, n, 1024):
        stop = min(n, start + 1024)
        chunks.append(_render_shapes(labels[start:stop], params[start:stop], size))
    images = torch.from_numpy(np.concatenate(chunks).astype(np.float32))
    logger.debug("rendered %d shapes at %dpx (seed=%d)", n, size, seed)
    return ImageDataset(images, torch.from_numpy(labels.astype(np.int64)), num_classes)


def make_train_test(n_train: int, n_test: int, size: int = 32, num_classes: int = 10,
                    seed: int = 0) -> Tuple[ImageDataset, ImageDataset]:
    """
    Disjoint train and held-out splits of the synthetic shapes.

    Args:
        n_train: Training images
        n_test: Held-out images
        size: Image side
        num_classes: Number of classes
        seed: Rendering seed

    Returns:
        Tuple of (train, test) datasets
    """
    full = synthetic_shapes_dataset(n_train + n_test, size, num_classes, seed)
    return full.split(n_train)


def nonstationary_task_stream(
    dataset: ImageDataset,
    period: int,
    n_tasks: int,
    batch_size: int = 64,
    seed: int = 0,
    start_step: int = 0,
    total_steps: Optional[int] = None,
) -> Iterator[Tuple[int, ImageBatch]]:
    """
    Cycle through 1-vs-all tasks, switching every ``period`` steps.

    At global step t the task is (t // period) % n_tasks and batch labels are
    1 for images of that class, else 0.

    Args:
        dataset: Labeled dataset
        period: Steps per task (>= 1)
        n_tasks: Tasks per cycle (<= num_classes)
        batch_size: Images per batch
        seed: Stream seed
        start_step: First global step to emit
        total_steps: Stop before this step (infinite when None)

    Yields:
        Tuples of (task_id, binary-labeled ImageBatch)
    """
    if dataset.labels is None:
        raise DataError("task stream needs a labeled dataset")
    if period < 1:
        raise DataError("period must be >= 1")
    if not 1 <= n_tasks <= dataset.num_classes:
        raise DataError(f"n_tasks must lie in [1, {dataset.num_classes}]")
    step = start_step
    while total_steps is None or step < total_steps:
        task = task_for_step(step, period, n_tasks)
        batch = dataset.sample_batch(batch_size, stream_generator(seed, "task_stream", step))
        yield task, ImageBatch(batch.images, (batch.labels == task).long())
        step += 1


def task_for_step(step: int, period: int, n_tasks: int) -> int:
    return (step // period) % n_tasks


def _write_dataset(dataset: ImageDataset, handle) -> None:
    n, c, h, w = dataset.images.shape
    handle.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, c, h, w, dataset.num_classes))
    handle.write(dataset.images.contiguous().numpy().astype("<f4", copy=False).tobytes())
    if dataset.num_classes > 0:
        handle.write(dataset.labels.numpy().astype("<u4").tobytes())


def save_dataset(dataset: ImageDataset, path: Union[str, Path]) -> None:
    """
    Write a dataset in the SSDS binary format.

    Args:
        dataset: Dataset to store (images must be float32)
        path: Destination file
    """
    if dataset.images.dtype != torch.float32:
        raise DataError("datasets are stored as float32")
    with open(path, "wb") as handle:
        _write_dataset(dataset, handle)


def decode_dataset(payload: bytes) -> ImageDataset:
    """
    Decode an SSDS byte string.

    Raises:
        BadMagicError: Wrong leading bytes
        UnsupportedVersionError: Unknown format version
        TruncatedPayloadError: Fewer bytes than the header declares
        DimensionMismatchError: Inconsistent dimensions, trailing bytes or labels
    """
    if len(payload) < 4 or payload[:4] != DATASET_MAGIC:
        raise BadMagicError("bad magic")
    if len(payload) < _HEADER.size:
        raise TruncatedPayloadError("truncated payload: incomplete header")
    _, version, n, c, h, w, num_classes = _HEADER.unpack_from(payload)
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version}")
    if n == 0 or c == 0 or h == 0 or w == 0 or h != w:
        raise DimensionMismatchError(f"dimension mismatch: N={n} C={c} H={h} W={w}")

    pixel_bytes = n * c * h * w * 4
    label_bytes = n * 4 if num_classes > 0 else 0
    expected = _HEADER.size + pixel_bytes + label_bytes
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}"
        )
    if len(payload) > expected:
        raise DimensionMismatchError(
            f"dimension mismatch: {len(payload) - expected} bytes beyond declared payload"
        )

    offset = _HEADER.size
    pixels = np.frombuffer(payload, dtype="<f4", count=n * c * h * w, offset=offset)
    images = torch.from_numpy(pixels.astype(np.float32).reshape(n, c, h, w))
    labels = None
    if num_classes > 0:
        raw = np.frombuffer(payload, dtype="<u4", count=n, offset=offset + pixel_bytes)
        if raw.max(initial=0) >= num_classes:
            raise DimensionMismatchError(f"dimension mismatch: label >= num_classes ({num_classes})")
        labels = torch.from_numpy(raw.astype(np.int64))
    return ImageDataset(images, labels, num_classes)


def load_dataset(path: Union[str, Path]) -> ImageDataset:
    """
    Read a dataset written by :func:`save_dataset`.

    Args:
        path: Source file

    Returns:
        Decoded ImageDataset
    """
    with open(path, "rb") as handle:
        return decode_dataset(handle.read())
