"""FGT1 binary tensors and 8/16-bit PGM images.

FGT1 layout (all little-endian): ``b"FGT1"``, rank as u32, one u32 per
extent, then the float64 payload in row-major order.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

from .errors import CheckpointError, DataError

FGT1_MAGIC = b"FGT1"


def write_fgt1(f: BinaryIO, array) -> None:
    a = np.array(array, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
    f.write(FGT1_MAGIC)
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.tobytes(order="C"))


def read_fgt1(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != FGT1_MAGIC:
        raise CheckpointError(f"bad FGT1 magic {magic!r}")
    head = f.read(4)
    if len(head) != 4:
        raise CheckpointError("truncated FGT1 header")
    (rank,) = struct.unpack("<I", head)
    raw = f.read(4 * rank)
    if len(raw) != 4 * rank:
        raise CheckpointError("truncated FGT1 extents")
    shape = struct.unpack(f"<{rank}I", raw)
    n = int(np.prod(shape, dtype=np.int64))
    payload = f.read(8 * n)
    if len(payload) != 8 * n:
        raise CheckpointError(f"truncated FGT1 payload: expected {8 * n} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def save_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as f:
        write_fgt1(f, array)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return read_fgt1(f)


def tensor_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_fgt1(buf, array)
    return buf.getvalue()


def save_pgm(path: str | os.PathLike, image, maxval: int | None = None) -> None:
    """Write a 2-D integer image (``[H, W]`` or ``[H, W, 1]``) as binary PGM.

    ``maxval`` defaults to 255 or 65535, whichever the data fits.
    """
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim != 2:
        raise DataError(f"PGM needs a single-channel 2-D image, got shape {img.shape}")
    if img.size and (img.min() < 0 or np.any(img != np.floor(img))):
        raise DataError("PGM pixels must be non-negative integers")
    top = int(img.max()) if img.size else 0
    if maxval is None:
        maxval = 255 if top < 256 else 65535
    if not 0 < maxval < 65536 or top > maxval:
        raise DataError(f"PGM maxval {maxval} invalid for data maximum {top}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        dtype = ">u1" if maxval < 256 else ">u2"
        f.write(np.ascontiguousarray(img, dtype=dtype).tobytes())


def load_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary (P5) PGM into an integer ``[H, W, 1]`` array."""
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DataError(f"{path}: only binary P5 PGM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u1" if maxval < 256 else ">u2"
    nbytes = w * h * np.dtype(dtype).itemsize
    body = data[pos : pos + nbytes]
    if len(body) != nbytes:
        raise DataError(f"{path}: truncated PGM payload")
    return np.frombuffer(body, dtype=dtype).astype(np.int64).reshape(h, w, 1)


def save_image(path: str | os.PathLike, image, n_bits: int | None = None) -> None:
    """Save by extension: ``.pgm`` (2-D, maxval ``2**n_bits - 1``) or FGT1."""
    path = os.fspath(path)
    if path.lower().endswith(".pgm"):
        save_pgm(path, image, None if n_bits is None else 2**n_bits - 1)
    else:
        save_tensor(path, image)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an image by extension: ``.pgm`` or FGT1 (anything else)."""
    path = os.fspath(path)
    if path.lower().endswith(".pgm"):
        return load_pgm(path)
    try:
        return load_tensor(path)
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from exc
