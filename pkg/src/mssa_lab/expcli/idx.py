"""Reader for IDX ubyte files (MNIST-style image and label sets).

Layout, big-endian::

    offset 0   uint32  magic (0x00000803 images, 0x00000801 labels)
    offset 4   uint32  item count
    offset 8   uint32  rows, offset 12 uint32 cols      (images only)
    then       ubyte   payload, row-major
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

__all__ = ["IDXFormatError", "IMAGES_MAGIC", "LABELS_MAGIC", "read_idx_images", "read_idx_labels", "load_idx"]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(buf: bytes, n_dims: int, magic: int, path) -> tuple[int, ...]:
    size = 4 + 4 * n_dims
    if len(buf) < size:
        raise IDXFormatError(f"{path}: truncated header at offset {len(buf)}, need {size} bytes")
    found = struct.unpack_from(">I", buf, 0)[0]
    if found != magic:
        raise IDXFormatError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack_from(f">{n_dims}I", buf, 4)


def _payload(buf: bytes, start: int, count: int, path) -> np.ndarray:
    end = start + count
    if len(buf) < end:
        raise IDXFormatError(f"{path}: truncated payload at offset {len(buf)}, expected {end} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=start)


def read_idx_images(path) -> np.ndarray:
    """Images as ``float64`` in ``[0, 1]`` with shape ``(n, rows, cols)``."""
    buf = _read_bytes(path)
    n, rows, cols = _header(buf, 3, IMAGES_MAGIC, path)
    data = _payload(buf, 16, n * rows * cols, path)
    return data.reshape(n, rows, cols) / 255.0


def read_idx_labels(path) -> np.ndarray:
    buf = _read_bytes(path)
    (n,) = _header(buf, 1, LABELS_MAGIC, path)
    return _payload(buf, 8, n, path).astype(np.int64)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(
            f"count mismatch at offset 4: {images.shape[0]} images in {images_path} "
            f"but {labels.shape[0]} labels in {labels_path}"
        )
    return images, labels
