"""MNIST ingestion and the rotated dataset variants.

Archive byte layout (all integers little-endian)::

    magic     8 bytes   b"HNXDSET1"
    variant   u16 length + UTF-8 bytes
    split     u16 length + UTF-8 bytes
    seed      i64
    N, H, W   3 x u32
    angles    N x f64   (degrees)
    labels    N x u8
    images    N*H*W x f32 (row-major, values in [0, 1])
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, LengthError, ParameterError
from .grid import rotate_resample

__all__ = [
    "IDX_IMAGES_MAGIC",
    "IDX_LABELS_MAGIC",
    "read_idx",
    "write_idx",
    "MnistSource",
    "load_mnist_dir",
    "read_mnist_csv",
    "RotatedDataset",
    "VARIANTS",
    "STUB_VARIANTS",
    "FIXED_ANGLES",
    "split_sizes",
    "generate_dataset",
    "write_archive",
    "read_archive",
    "file_sha256",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
ARCHIVE_MAGIC = b"HNXDSET1"

VARIANTS = ("mnist-rot-test", "swn-gcn-mnist", "rot-mnist")
STUB_VARIANTS = ("cifar-rot-test", "swn-gcn-cifar")
FIXED_ANGLES = tuple(float(a) for a in range(0, 360, 30))

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _open_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzip-compressed) holding unsigned bytes."""
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise LengthError(f"{path}: file shorter than the IDX magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"{path}: unsupported IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - header
    if payload != expected:
        raise LengthError(f"{path}: payload has {payload} bytes, header announces {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()


def write_idx(path, array) -> None:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise FormatError("IDX writer only supports unsigned bytes")
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(a.ndim)
    if magic is None:
        raise FormatError(f"IDX writer supports 1-D labels or 3-D images, got {a.ndim}-D")
    data = struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    if str(path).endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    Path(path).write_bytes(data)


@dataclass(frozen=True)
class MnistSource:
    """Raw MNIST: ``uint8`` images ``(N, 28, 28)`` and labels per official split."""

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(str(directory / stem))


def load_mnist_dir(directory) -> MnistSource:
    """Read the four standard MNIST IDX files (plain or ``.gz``) from ``directory``."""
    d = Path(directory)
    arrays = {key: read_idx(_find(d, stem)) for key, stem in MNIST_FILES.items()}
    for part in ("train", "test"):
        if len(arrays[f"{part}_images"]) != len(arrays[f"{part}_labels"]):
            raise DataError(f"{part}: image and label counts differ")
    return MnistSource(**arrays)


def read_mnist_csv(path, label_column: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Images ``(N, 28, 28)`` and labels from a CSV of 784 pixels plus a label."""
    with gzip.open(path, "rt") if str(path).endswith(".gz") else open(path) as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64, ndmin=2)
    labels = table[:, label_column].astype(np.uint8)
    pixels = np.delete(table, label_column % table.shape[1], axis=1).astype(np.uint8)
    side = int(round(np.sqrt(pixels.shape[1])))
    return pixels.reshape(-1, side, side), labels


@dataclass(frozen=True)
class RotatedDataset:
    split: str
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) uint8
    angles: np.ndarray  # (N,) float64 degrees
    variant: str
    seed: int

    def __post_init__(self):
        n = len(self.labels)
        if len(self.images) != n or len(self.angles) != n:
            raise DataError("images, labels and angles must have equal length")
        if self.images.ndim != 3:
            raise DataError(f"images must be (N, H, W), got {self.images.shape}")

    def __len__(self) -> int:
        return len(self.labels)


def split_sizes(variant: str, swap_rot_mnist_sizes: bool = False) -> dict[str, int]:
    """Sample counts per split; ``test`` counts source images before any replication."""
    if variant in STUB_VARIANTS:
        raise NotImplementedError(f"{variant} is declared but not implemented")
    if variant in ("mnist-rot-test", "swn-gcn-mnist"):
        return {"train": 50_000, "valid": 10_000, "test": 10_000}
    if variant == "rot-mnist":
        sizes = {"train": 10_000, "valid": 50_000, "test": 2_000}
        if swap_rot_mnist_sizes:
            sizes["valid"], sizes["test"] = sizes["test"], sizes["valid"]
        return sizes
    raise ParameterError(f"unknown dataset variant {variant!r}")


_CHUNK = 2048


def _make_split(name, variant, seed, images_u8, labels, angles) -> RotatedDataset:
    """Scale to [0, 1], rotate in float64 and store float32, a chunk at a time."""
    out = np.empty(images_u8.shape, dtype=np.float32)
    for start in range(0, len(images_u8), _CHUNK):
        sl = slice(start, start + _CHUNK)
        base = images_u8[sl].astype(np.float64) / 255.0
        a = angles[sl]
        moving = a % 360 != 0
        if moving.any():
            rotated = np.real(rotate_resample(base[moving], np.deg2rad(a[moving])))
            base[moving] = np.clip(rotated, 0.0, 1.0)
        out[sl] = base
    return RotatedDataset(name, out, labels.astype(np.uint8), angles.astype(np.float64),
                          variant, int(seed))


def generate_dataset(variant: str, seed: int, source: MnistSource,
                     sizes: dict[str, int] | None = None,
                     swap_rot_mnist_sizes: bool = False) -> dict[str, RotatedDataset]:
    """Build the train/valid/test splits of ``variant``.

    mnist-rot-test and swn-gcn-mnist carve train and valid from the official
    training images by a seeded shuffle and draw test from the official test
    images.  rot-mnist pools both official splits before carving, since its
    printed sizes need more than either.  ``sizes`` overrides the per-split
    counts (for reduced runs).  Rotation policy:

    * mnist-rot-test: train upright, valid and test uniformly random.
    * swn-gcn-mnist: train and valid upright, test replicated at 0, 30, ..., 330.
    * rot-mnist: every split uniformly random.
    """
    if variant in STUB_VARIANTS:
        raise NotImplementedError(f"{variant} is declared but not implemented")
    if variant not in VARIANTS:
        raise ParameterError(f"unknown dataset variant {variant!r}")
    sizes = dict(sizes or split_sizes(variant, swap_rot_mnist_sizes))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), VARIANTS.index(variant)]))

    if variant == "rot-mnist":
        pool_images = np.concatenate([source.train_images, source.test_images])
        pool_labels = np.concatenate([source.train_labels, source.test_labels])
        need = sizes["train"] + sizes["valid"] + sizes["test"]
        if need > len(pool_labels):
            raise DataError(f"rot-mnist needs {need} source images, have {len(pool_labels)}")
        order = rng.permutation(len(pool_labels))
        cuts = np.cumsum([sizes["train"], sizes["valid"], sizes["test"]])
        picks = {"train": order[:cuts[0]], "valid": order[cuts[0]:cuts[1]],
                 "test": order[cuts[1]:cuts[2]]}
        return {
            name: _make_split(name, variant, seed, pool_images[idx], pool_labels[idx],
                              rng.uniform(0.0, 360.0, len(idx)))
            for name, idx in picks.items()
        }

    if sizes["train"] + sizes["valid"] > len(source.train_labels):
        raise DataError("not enough training images for train + valid")
    if sizes["test"] > len(source.test_labels):
        raise DataError("not enough test images")
    order = rng.permutation(len(source.train_labels))
    tr = order[: sizes["train"]]
    va = order[sizes["train"]: sizes["train"] + sizes["valid"]]
    te = rng.permutation(len(source.test_labels))[: sizes["test"]]
    zeros = np.zeros
    if variant == "mnist-rot-test":
        valid_angles = rng.uniform(0.0, 360.0, len(va))
        test_angles = rng.uniform(0.0, 360.0, len(te))
        test_idx = te
    else:
        valid_angles = zeros(len(va))
        test_idx = np.tile(te, len(FIXED_ANGLES))
        test_angles = np.repeat(np.array(FIXED_ANGLES), len(te))
    return {
        "train": _make_split("train", variant, seed, source.train_images[tr],
                             source.train_labels[tr], zeros(len(tr))),
        "valid": _make_split("valid", variant, seed, source.train_images[va],
                             source.train_labels[va], valid_angles),
        "test": _make_split("test", variant, seed, source.test_images[test_idx],
                            source.test_labels[test_idx], test_angles),
    }


# -- archives ---------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def write_archive(path, ds: RotatedDataset) -> None:
    N, H, W = ds.images.shape
    parts = [
        ARCHIVE_MAGIC,
        _pack_str(ds.variant),
        _pack_str(ds.split),
        struct.pack("<q3I", int(ds.seed), N, H, W),
        np.asarray(ds.angles, dtype="<f8").tobytes(),
        np.asarray(ds.labels, dtype=np.uint8).tobytes(),
        np.asarray(ds.images, dtype="<f4").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def read_archive(path) -> RotatedDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != ARCHIVE_MAGIC:
        raise FormatError(f"{path}: not a dataset archive")
    pos = 8
    strings = []
    for _ in range(2):
        if pos + 2 > len(raw):
            raise LengthError(f"{path}: truncated header")
        (n,) = struct.unpack_from("<H", raw, pos)
        strings.append(raw[pos + 2: pos + 2 + n].decode("utf-8"))
        pos += 2 + n
    if pos + 20 > len(raw):
        raise LengthError(f"{path}: truncated header")
    seed, N, H, W = struct.unpack_from("<q3I", raw, pos)
    pos += 20
    expected = N * 8 + N + N * H * W * 4
    if len(raw) - pos != expected:
        raise LengthError(f"{path}: payload has {len(raw) - pos} bytes, expected {expected}")
    angles = np.frombuffer(raw, "<f8", N, pos).astype(np.float64)
    pos += N * 8
    labels = np.frombuffer(raw, np.uint8, N, pos).copy()
    pos += N
    images = np.frombuffer(raw, "<f4", N * H * W, pos).astype(np.float32).reshape(N, H, W)
    return RotatedDataset(strings[1], images, labels, angles, strings[0], int(seed))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
