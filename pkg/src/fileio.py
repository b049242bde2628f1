"""
Binary array formats.

OCT1 (array payloads):
    b"OCT1" | ndim u32 | dims ndim x u32 | dtype u32 (0 = float32) | row-major payload

CKP1 (named tensors):
    b"CKP1" | count u32 | per entry: name_len u32, UTF-8 name, ndim u32,
    dims ndim x u32, float32 payload

All integers and floats are little-endian. PGM (P5, 8-bit) is the only image codec.
"""

import os
from collections import OrderedDict
from typing import Dict, Mapping, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from src.errors import DataFormatError

OCT1_MAGIC = b"OCT1"
CKP1_MAGIC = b"CKP1"
DTYPE_FLOAT32 = 0
MAX_NDIM = 32


class _Reader:
    """Cursor over a byte buffer that reports failures with byte offsets."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise DataFormatError(
                f"{self.path}: truncated {what} at byte {self.offset} "
                f"(need {n} bytes, {len(self.data) - self.offset} left)")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return int(np.frombuffer(self.take(4, what), dtype="<u4")[0])

    def dims(self, what: str):
        at = self.offset
        ndim = self.u32(f"{what} ndim")
        if ndim > MAX_NDIM:
            raise DataFormatError(f"{self.path}: implausible ndim {ndim} at byte {at}")
        return tuple(int(d) for d in np.frombuffer(self.take(4 * ndim, f"{what} dims"), dtype="<u4"))

    def floats(self, shape, what: str) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except FileNotFoundError:
        raise DataFormatError(f"File not found: {path}")


def write_oct1(path: str, array: np.ndarray):
    array = np.asarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(OCT1_MAGIC)
        np.array([array.ndim], dtype="<u4").tofile(f)
        np.array(array.shape, dtype="<u4").tofile(f)
        np.array([DTYPE_FLOAT32], dtype="<u4").tofile(f)
        array.tofile(f)


def read_oct1(path: str) -> np.ndarray:
    reader = _Reader(_read_bytes(path), path)
    magic = reader.take(4, "magic")
    if magic != OCT1_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at byte 0, expected {OCT1_MAGIC!r}")
    shape = reader.dims("header")
    at = reader.offset
    dtype = reader.u32("dtype code")
    if dtype != DTYPE_FLOAT32:
        raise DataFormatError(f"{path}: unsupported dtype code {dtype} at byte {at}")
    array = reader.floats(shape, "payload")
    if reader.offset != len(reader.data):
        raise DataFormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes after byte {reader.offset}")
    return array


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.asarray(value)


def save_checkpoint(path: str, tensors: Mapping[str, Union[torch.Tensor, np.ndarray]]):
    with open(path, "wb") as f:
        f.write(CKP1_MAGIC)
        np.array([len(tensors)], dtype="<u4").tofile(f)
        for name, value in tensors.items():
            array = np.asarray(_to_numpy(value), dtype="<f4")  # tofile writes C order; keeps 0-d shapes
            encoded = name.encode("utf-8")
            np.array([len(encoded)], dtype="<u4").tofile(f)
            f.write(encoded)
            np.array([array.ndim], dtype="<u4").tofile(f)
            np.array(array.shape, dtype="<u4").tofile(f)
            array.tofile(f)


def load_checkpoint(path: str) -> Dict[str, torch.Tensor]:
    """Read a CKP1 file into an ordered {name: float32 tensor} dict."""
    reader = _Reader(_read_bytes(path), path)
    magic = reader.take(4, "magic")
    if magic != CKP1_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at byte 0, expected {CKP1_MAGIC!r}")
    count = reader.u32("tensor count")

    tensors = OrderedDict()
    for i in range(count):
        at = reader.offset
        name_len = reader.u32(f"entry {i} name length")
        try:
            name = reader.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise DataFormatError(f"{path}: entry {i} name at byte {at + 4} is not UTF-8")
        shape = reader.dims(f"entry {name!r}")
        tensors[name] = torch.from_numpy(reader.floats(shape, f"entry {name!r} payload"))
    if reader.offset != len(reader.data):
        raise DataFormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes after byte {reader.offset}")
    return tensors


def export_pgm(array: np.ndarray, path: str):
    """Write a [0, 1] image as 8-bit binary PGM (P5)."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 2:
        raise DataFormatError(f"PGM export needs a 2-D image, got shape {array.shape}")
    levels = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(levels).save(path, format="PPM")


def import_pgm(path: str) -> np.ndarray:
    """Read an 8-bit binary PGM into a float64 [0, 1] image."""
    head = _read_bytes(path)[:2]
    if head != b"P5":
        raise DataFormatError(f"{path}: bad magic {head!r} at byte 0, expected b'P5' (binary PGM)")
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise DataFormatError(f"{path}: expected 8-bit grayscale PGM, got mode {img.mode}")
            levels = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DataFormatError(f"{path}: malformed PGM ({os.path.getsize(path)} bytes): {e}")
    return levels.astype(np.float64) / 255.0
