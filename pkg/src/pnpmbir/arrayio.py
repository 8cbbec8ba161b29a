"""Flat binary array container, metadata sidecars and PNG export.

Container layout: 16-byte magic ``PNPMBIR-ARRAY\\0\\0\\0``, then little-endian
u32 rank, u32 dims[rank], then float64 data, row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

MAGIC = b"PNPMBIR-ARRAY\x00\x00\x00"
_MAX_RANK = 8


def write_array(path: str | Path, values: np.ndarray) -> None:
    """Write ``values`` to ``path`` in the array container format."""
    arr = np.ascontiguousarray(values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_array(path: str | Path) -> np.ndarray:
    """Read an array container; raises :class:`FormatError` on malformed files."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic", offset=0)
    pos = len(MAGIC)
    if len(data) < pos + 4:
        raise FormatError(f"{path}: truncated before rank", offset=pos)
    (rank,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if not 1 <= rank <= _MAX_RANK:
        raise FormatError(f"{path}: implausible rank {rank}", offset=pos - 4)
    if len(data) < pos + 4 * rank:
        raise FormatError(f"{path}: truncated inside dims", offset=pos)
    dims = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    count = int(np.prod(dims))
    need = count * 8
    if len(data) < pos + need:
        raise FormatError(
            f"{path}: truncated payload, expected {need} bytes for shape {dims}",
            offset=pos)
    arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
    return arr.reshape(dims).astype(np.float64)


def write_metadata(path: str | Path, entries: dict[str, object]) -> None:
    """Write a ``key=value`` text sidecar."""
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metadata(path: str | Path) -> dict[str, str]:
    """Read a ``key=value`` sidecar into a string dict."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_png(path: str | Path, values: np.ndarray, lo: float, hi: float) -> None:
    """Save a window/leveled 8-bit grayscale PNG (lossless).

    Rows are flipped so +y points up in the saved image.
    """
    if not hi > lo:
        raise ValueError("window requires hi > lo")
    scaled = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    img8 = np.round(scaled * 255.0).astype(np.uint8)
    Image.fromarray(img8[::-1, :], mode="L").save(path, format="PNG")
