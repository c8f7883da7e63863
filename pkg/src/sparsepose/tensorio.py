"""Portable tensor container and PNG helpers.

Layout: 4-byte magic "SPT1", little-endian uint32 header length, a UTF-8
JSON header {"shape": [...], "dtype": "float32"}, then the row-major
payload bytes. Only float32 is accepted: the container exists to move
rendered tensors between tools, not to be a general serializer.
"""
from __future__ import annotations

import io
import json
import struct
from typing import Union

import numpy as np

MAGIC = b"SPT1"


class TensorFormatError(ValueError):
    pass


def save_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    header = json.dumps(
        {"shape": list(arr.shape), "dtype": "float32"},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise TensorFormatError(f"bad magic {magic!r}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TensorFormatError(f"unreadable header: {exc}") from exc
        if header.get("dtype") != "float32":
            raise TensorFormatError(f"unsupported dtype {header.get('dtype')!r}")
        shape = tuple(int(s) for s in header.get("shape", ()))
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read()
    expected = count * 4
    if len(payload) != expected:
        raise TensorFormatError(
            f"payload is {len(payload)} bytes, header implies {expected}"
        )
    return np.frombuffer(payload, dtype=np.float32).reshape(shape).copy()


def to_png_bytes(image: np.ndarray) -> bytes:
    """Encode an H x W x 3 float image in [0, 1] as PNG bytes."""
    from PIL import Image

    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an H x W x 3 image")
    u8 = np.clip(np.asarray(image, dtype=np.float64) * 255.0 + 0.5,
                 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_png(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(to_png_bytes(image))


def load_png(path_or_bytes: Union[str, bytes]) -> np.ndarray:
    """Decode a PNG back to H x W x 3 float32 in [0, 1]."""
    from PIL import Image

    if isinstance(path_or_bytes, bytes):
        img = Image.open(io.BytesIO(path_or_bytes))
    else:
        img = Image.open(path_or_bytes)
    rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return rgb
