"""Minimal binary/ASCII PGM reading and writing, plus image grids."""
from __future__ import annotations

import numpy as np


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D array with values in [0, 1] as an 8-bit binary PGM."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.round(img * 255).astype(np.uint8).tobytes())


def _tokens(buf: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        out.append(buf[start:pos])
    return out, pos


def read_pgm(path) -> np.ndarray:
    """Read P2/P5 into floats in [0, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    magic = buf[:2]
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"{path}: not a PGM file (magic {magic!r})")
    (w, h, maxval), pos = _tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == b"P5":
        pos += 1  # single whitespace byte before the raster
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        n = w * h * np.dtype(dtype).itemsize
        raw = buf[pos:pos + n]
        if len(raw) != n:
            raise ValueError(f"{path}: truncated PGM raster")
        data = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    else:
        vals, _ = _tokens(buf, w * h, pos)
        data = np.array([int(v) for v in vals], dtype=np.float64)
    return data.reshape(h, w) / maxval


def image_grid(images: np.ndarray, shape: tuple[int, int], ncols: int, pad: int = 1,
               background: float = 0.5) -> np.ndarray:
    """Tile flat images ``[n, h*w]`` into one 2-D array, row-major."""
    images = np.asarray(images, dtype=np.float64)
    h, w = shape
    n = len(images)
    ncols = max(1, min(ncols, n)) if n else 1
    nrows = max(1, -(-n // ncols))
    grid = np.full((nrows * (h + pad) + pad, ncols * (w + pad) + pad), background)
    for i, img in enumerate(images):
        r, c = divmod(i, ncols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y:y + h, x:x + w] = img.reshape(h, w)
    return grid
