"""Datasets: generalized XOR points, multiplicative-interaction images, IDX files."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Malformed IDX file."""


class IdxFormatError(IdxError):
    pass


class IdxLengthError(IdxError):
    pass


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0] or self.labels.shape[0] < 1:
            raise ValueError(f"{self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, index, split=None) -> "LabeledDataset":
        return LabeledDataset(self.inputs[index], self.labels[index], self.num_classes,
                              split or self.split)

    def split_stride(self, val_every: int) -> tuple["LabeledDataset", "LabeledDataset"]:
        """Every ``val_every``-th example goes to validation, the rest to training."""
        idx = np.arange(len(self))
        val = idx % val_every == val_every - 1
        return self.subset(idx[~val], "train"), self.subset(idx[val], "val")

    def to_bytes(self) -> bytes:
        return self.inputs.tobytes() + self.labels.tobytes()


def gen_xor(n_per_quadrant: int, spread: float = 2.0, seed: int = 0) -> LabeledDataset:
    """Generalized XOR: points in the four open quadrants of [-spread, spread]^2.

    ``n_per_quadrant`` points are drawn uniformly from (0, spread]^2 and
    mirrored into the other three quadrants, so every quadrant holds the same
    point cloud up to reflection. Label 1 where x1*x2 > 0, else 0. Quadrants
    are emitted in the order (+,+), (-,+), (-,-), (+,-).
    """
    if n_per_quadrant < 1 or spread <= 0:
        raise ValueError("need n_per_quadrant >= 1 and spread > 0")
    rng = np.random.default_rng(seed)
    # 1 - U[0, 1) lies in (0, 1]: never on an axis
    base = spread * (1.0 - rng.random((n_per_quadrant, 2)))
    signs = np.array([(1, 1), (-1, 1), (-1, -1), (1, -1)], dtype=np.float64)
    x = np.concatenate([base * s for s in signs])
    labels = (x[:, 0] * x[:, 1] > 0).astype(np.int64)
    return LabeledDataset(x, labels, 2)


def xor_signed_labels(ds: LabeledDataset) -> np.ndarray:
    return np.where(ds.labels == 1, 1.0, -1.0)


def gen_xor_images(n_per_quadrant: int, size: int = 32, spread: float = 2.0, seed: int = 0) -> LabeledDataset:
    """Generalized XOR rendered as single-channel images.

    Each point of :func:`gen_xor` becomes a Gaussian dot whose pixel position
    encodes the point, so the label is the pair of image quadrants the dot
    falls in: separable by any network that can see position.
    """
    pts = gen_xor(n_per_quadrant, spread, seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = (size - 1) / 2.0
    scale = (size / 2.0 - 2.0) / spread
    sigma = max(size / 16.0, 1.0)
    cx = centre + scale * pts.inputs[:, 0]
    cy = centre - scale * pts.inputs[:, 1]
    d2 = (xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2
    images = np.exp(-d2 / (2 * sigma ** 2))[:, None]
    return LabeledDataset(images, pts.labels, 2)


def gen_interaction_images(n: int, size: int = 32, num_classes: int = 4, seed: int = 0,
                           channels: int = 3, noise: float = 0.05, amp_range=(0.5, 1.5),
                           position_margin: float = 1.5) -> LabeledDataset:
    """Images holding two signed Gaussian blobs.

    Amplitudes are ``s * U[0.5, 1.5]`` with independent fair signs ``s``.
    Label bit 0 is ``a1 * a2 > 0``; with four classes, bit 1 is whether the
    blobs are separated more horizontally than vertically. Both bits are
    invariant to flipping the sign of the whole image, which is what defeats
    a linear read-out of the pixels. ``num_classes`` must be 2 or 4.
    """
    if size < 8:
        raise ValueError("size must be >= 8")
    if num_classes not in (2, 4):
        raise ValueError("num_classes must be 2 or 4")
    rng = np.random.default_rng(seed)
    sigma = size / 12.0
    margin = 2.0 * sigma
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    gains = np.linspace(1.0, 0.5, channels)
    images = np.empty((n, channels, size, size))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        while True:
            c = rng.uniform(margin, size - 1 - margin, size=(2, 2))
            dy, dx = np.abs(c[0] - c[1])
            if np.hypot(dx, dy) >= 3 * sigma and abs(dx - dy) >= position_margin:
                break
        amp = rng.uniform(amp_range[0], amp_range[1], 2) * rng.choice((-1.0, 1.0), 2)
        img = np.zeros((size, size))
        for (cy, cx), a in zip(c, amp):
            img += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        images[i] = gains[:, None, None] * img + noise * rng.standard_normal((channels, size, size))
        label = int(amp[0] * amp[1] > 0)
        if num_classes == 4:
            label += 2 * int(dx > dy)
        labels[i] = label
    return LabeledDataset(images, labels, num_classes)


# ---------------------------------------------------------------------------
# IDX

def _read_header(buf: bytes, expected_magic: int, what: str):
    if len(buf) < 4:
        raise IdxLengthError(f"{what}: truncated at offset {len(buf)}, need 4-byte magic")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expected_magic:
        raise IdxFormatError(f"{what}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise IdxLengthError(f"{what}: truncated at offset {len(buf)}, header needs {4 + 4 * ndim} bytes")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    return dims, 4 + 4 * ndim


def _read_payload(buf, offset, dims, what):
    count = int(np.prod(dims))
    if len(buf) - offset < count:
        raise IdxLengthError(f"{what}: payload truncated at offset {len(buf)}, "
                             f"expected {count} bytes after offset {offset}")
    if len(buf) - offset > count:
        raise IdxLengthError(f"{what}: {len(buf) - offset - count} trailing bytes after payload")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=offset).reshape(dims)


def read_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] as (N, 1, rows, cols)."""
    ibuf = Path(images_path).read_bytes()
    lbuf = Path(labels_path).read_bytes()
    idims, ioff = _read_header(ibuf, IDX_IMAGES_MAGIC, str(images_path))
    ldims, loff = _read_header(lbuf, IDX_LABELS_MAGIC, str(labels_path))
    if idims[0] != ldims[0]:
        raise IdxError(f"{idims[0]} images but {ldims[0]} labels")
    pixels = _read_payload(ibuf, ioff, idims, str(images_path))
    labels = _read_payload(lbuf, loff, ldims, str(labels_path)).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    inputs = pixels.astype(np.float64)[:, None] / 255.0
    return LabeledDataset(inputs, labels, num_classes)


def write_idx(ds: LabeledDataset, images_path, labels_path, channel: int = 0):
    """Write one channel of an image dataset as IDX, quantising [0, 1] to u8.

    Values outside [0, 1] are clipped; data of the form k/255 round-trips
    exactly through :func:`read_idx`.
    """
    x = ds.inputs
    if x.ndim == 4:
        x = x[:, channel]
    if x.ndim != 3:
        raise ValueError(f"need (N, rows, cols) images, got {ds.inputs.shape}")
    pixels = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
    if ds.labels.max() > 255:
        raise ValueError("labels must fit in u8")
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, *pixels.shape) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(ds))
                                  + ds.labels.astype(np.uint8).tobytes())
