"""Datasets, IDX parsing and few-shot episode construction."""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .memory import MemoryBuffer
from .pgm import read_pgm

# IDX type code -> (numpy big-endian dtype, item size)
IDX_TYPES = {
    0x08: (np.dtype("u1"), 1),
    0x09: (np.dtype("i1"), 1),
    0x0B: (np.dtype(">i2"), 2),
    0x0C: (np.dtype(">i4"), 4),
    0x0D: (np.dtype(">f4"), 4),
    0x0E: (np.dtype(">f8"), 8),
}


class IdxParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def parse_idx(buf: bytes, scale: bool = False) -> tuple[np.ndarray, tuple[int, ...]]:
    """Decode an IDX stream into ``(array, dims)``.

    With ``scale=True`` unsigned-byte payloads are divided by 255.
    """
    buf = bytes(buf)
    if len(buf) < 4:
        raise IdxParseError("stream shorter than the 4-byte magic", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise IdxParseError(f"magic must start with two zero bytes, got {buf[:2].hex()}", 0)
    code, rank = buf[2], buf[3]
    if code not in IDX_TYPES:
        raise IdxParseError(f"unknown data type code 0x{code:02x}", 2)
    if rank == 0:
        raise IdxParseError("rank must be at least 1", 3)
    header_end = 4 + 4 * rank
    if len(buf) < header_end:
        raise IdxParseError(f"header needs {header_end} bytes, stream has {len(buf)}", len(buf))
    dims = struct.unpack(f">{rank}I", buf[4:header_end])
    dtype, size = IDX_TYPES[code]
    expected = math.prod(dims) * size
    payload = len(buf) - header_end
    if payload < expected:
        raise IdxParseError(f"payload truncated: expected {expected} bytes, found {payload}", len(buf))
    if payload > expected:
        raise IdxParseError(f"{payload - expected} trailing bytes after payload", header_end + expected)
    arr = np.frombuffer(buf, dtype=dtype, count=math.prod(dims), offset=header_end).reshape(dims)
    arr = arr.astype(np.float64) / 255.0 if (scale and code == 0x08) else arr.astype(dtype.newbyteorder("="))
    return arr, tuple(dims)


def encode_idx(arr: np.ndarray, code: int = 0x08) -> bytes:
    dtype, _ = IDX_TYPES[code]
    arr = np.asarray(arr)
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(dtype).tobytes()


def binarize(images: np.ndarray, mode: str = "threshold", rng: np.random.Generator | None = None,
             threshold: float = 0.5) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if mode == "threshold":
        return (images >= threshold).astype(np.float64)
    if mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic binarization needs an rng")
        return (rng.random(images.shape) < images).astype(np.float64)
    raise ValueError(f"unknown binarization mode {mode!r}")


@dataclass
class Dataset:
    images: np.ndarray
    class_ids: np.ndarray | None = None
    split: str = "train"
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 2:
            raise ValueError(f"images must be [N, D_x], got {self.images.shape}")
        if not np.all((self.images == 0) | (self.images == 1)):
            raise ValueError("dataset pixels must be binary")
        if self.class_ids is not None:
            self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.image_shape is None:
            side = int(round(math.sqrt(self.dim)))
            self.image_shape = (side, side) if side * side == self.dim else (1, self.dim)

    def __len__(self):
        return len(self.images)

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def classes(self) -> np.ndarray:
        return np.unique(self.class_ids)

    def class_index(self) -> dict[int, np.ndarray]:
        if self.class_ids is None:
            raise ValueError("dataset has no class labels")
        return {int(c): np.flatnonzero(self.class_ids == c) for c in self.classes()}

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], None if self.class_ids is None else self.class_ids[idx],
                       split or self.split, self.image_shape)


def load_idx_dataset(images_path, labels_path=None, split: str = "train", mode: str = "threshold",
                     rng=None) -> Dataset:
    with open(images_path, "rb") as f:
        images, dims = parse_idx(f.read(), scale=True)
    labels = None
    if labels_path is not None:
        with open(labels_path, "rb") as f:
            labels, _ = parse_idx(f.read())
    flat = binarize(images.reshape(dims[0], -1), mode, rng)
    shape = tuple(dims[1:3]) if len(dims) == 3 else None
    return Dataset(flat, labels, split, shape)


def synth_pattern_corpus(n_classes: int, per_class: int, dim_x: int, rng: np.random.Generator,
                         flip: float = 0.05, split: str = "train", class_offset: int = 0) -> Dataset:
    """Random binary class templates; examples flip each pixel with prob ``flip``."""
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    templates = (rng.random((n_classes, dim_x)) < 0.5).astype(np.float64)
    flips = rng.random((n_classes, per_class, dim_x)) < flip
    images = np.abs(templates[:, None, :] - flips).reshape(-1, dim_x)
    labels = np.repeat(np.arange(n_classes) + class_offset, per_class)
    return Dataset(images, labels, split)


def split_classes(ds: Dataset, n_test_classes: int, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Class-disjoint train/test split."""
    classes = ds.classes()
    if not 0 < n_test_classes < len(classes):
        raise ValueError(f"cannot hold out {n_test_classes} of {len(classes)} classes")
    test = set(rng.choice(classes, n_test_classes, replace=False).tolist())
    mask = np.array([c in test for c in ds.class_ids])
    return ds.subset(np.flatnonzero(~mask), "train"), ds.subset(np.flatnonzero(mask), "test")


def _max_pool(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // factor, w // factor
    return img[:h2 * factor, :w2 * factor].reshape(h2, factor, w2, factor).max(axis=(1, 3))


def load_class_directory(root, pool: int = 4, invert: bool = True, split: str = "train") -> Dataset:
    """One sub-directory per class holding ``.pgm`` (or square ``.raw`` byte)
    images. Images are max-pooled by ``pool`` and thresholded at 0.5;
    ``invert`` treats dark pixels as ink."""
    images, labels, shape = [], [], None
    for cid, name in enumerate(sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))):
        cdir = os.path.join(root, name)
        for fname in sorted(os.listdir(cdir)):
            path = os.path.join(cdir, fname)
            if fname.endswith(".pgm"):
                img = read_pgm(path)
            elif fname.endswith(".raw"):
                raw = np.fromfile(path, dtype=np.uint8).astype(np.float64) / 255.0
                side = int(round(math.sqrt(raw.size)))
                if side * side != raw.size:
                    raise ValueError(f"{path}: raw image is not square ({raw.size} bytes)")
                img = raw.reshape(side, side)
            else:
                continue
            if invert:
                img = 1.0 - img
            img = _max_pool(img, pool) if pool > 1 else img
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise ValueError(f"{path}: shape {img.shape} differs from {shape}")
            images.append(binarize(img.reshape(-1)))
            labels.append(cid)
    if not images:
        raise ValueError(f"no images found under {root}")
    return Dataset(np.stack(images), np.array(labels), split, shape)


@dataclass
class Episode:
    memory_images: np.ndarray
    memory_labels: np.ndarray
    memory_index: np.ndarray
    targets: np.ndarray
    target_labels: np.ndarray
    target_index: np.ndarray
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def memory(self) -> MemoryBuffer:
        return MemoryBuffer(self.memory_images, labels=self.memory_labels, source_index=self.memory_index)


def sample_episode(ds: Dataset, n_classes: int = 8, targets_per_class: int = 4, mem_per_class: int = 1,
                   rng: np.random.Generator | None = None, class_index: dict | None = None) -> Episode:
    """Classes without replacement; per class, disjoint target and memory examples."""
    index = class_index if class_index is not None else ds.class_index()
    classes = np.array(sorted(index))
    if n_classes > len(classes):
        raise ValueError(f"episode needs {n_classes} classes, dataset has {len(classes)}")
    chosen = rng.choice(classes, n_classes, replace=False)
    need = targets_per_class + mem_per_class
    t_idx, m_idx = [], []
    for c in chosen:
        members = index[int(c)]
        if len(members) < need:
            raise ValueError(f"class {int(c)} has {len(members)} examples, episode needs {need}")
        pick = rng.choice(members, need, replace=False)
        t_idx.append(pick[:targets_per_class])
        m_idx.append(pick[targets_per_class:])
    t_idx = np.concatenate(t_idx)
    m_idx = np.concatenate(m_idx) if mem_per_class else np.zeros(0, dtype=np.int64)
    return Episode(ds.images[m_idx], ds.class_ids[m_idx], m_idx,
                   ds.images[t_idx], ds.class_ids[t_idx], t_idx, chosen)


def test_memory_sweep(ds: Dataset, classes, per_class: int, rng: np.random.Generator,
                      exclude=()) -> MemoryBuffer:
    """Memory of ``len(classes) * per_class`` labeled rows, never using an
    index listed in ``exclude`` (the evaluation targets)."""
    banned = set(int(i) for i in np.asarray(exclude).ravel())
    index = ds.class_index()
    rows = []
    for c in np.atleast_1d(classes):
        pool = [i for i in index[int(c)] if int(i) not in banned]
        if len(pool) < per_class:
            raise ValueError(f"class {int(c)}: {len(pool)} usable examples, need {per_class}")
        rows.append(rng.choice(pool, per_class, replace=False))
    idx = np.concatenate(rows)
    return MemoryBuffer(ds.images[idx], labels=ds.class_ids[idx], source_index=idx)


test_memory_sweep.__test__ = False  # keep pytest from collecting it
