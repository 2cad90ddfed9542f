"""On-disk formats: DSD1 tensors and binary PPM images.

DSD1 layout: ``b"DSD1"``, u32 LE rank, rank x u32 LE dims, then the
row-major float32 LE payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSD1"


class FormatError(ValueError):
    """A file is truncated, has the wrong magic, or otherwise malformed."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


def encode_dsd1(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_dsd1(blob: bytes, path="<bytes>") -> np.ndarray:
    """Decode to float64 (every float32 value is exactly representable)."""
    if len(blob) < 8:
        raise FormatError(path, f"file too short for a DSD1 header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise FormatError(path, f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank > 32:
        raise FormatError(path, f"implausible rank {rank}")
    hdr = 8 + 4 * rank
    if len(blob) < hdr:
        raise FormatError(path, "truncated shape header")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    need = hdr + 4 * count
    if len(blob) != need:
        raise FormatError(path, f"payload is {len(blob) - hdr} bytes, expected {4 * count}")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=hdr)
    return np.reshape(data.astype(np.float64), shape)


def write_dsd1(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_dsd1(array))


def read_dsd1(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(path, f"unreadable: {exc.strerror}") from None
    return decode_dsd1(blob, path)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a [3, H, W] (or [H, W] grayscale) image in [0, 1] as 8-bit P6."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.broadcast_to(img, (3,) + img.shape)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {img.shape}")
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    _, h, w = q.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes())


def _ppm_tokens(blob: bytes, path, count: int) -> tuple[list[int], int]:
    out: list[int] = []
    pos = 0
    while len(out) < count:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tok = blob[start:pos]
        if not tok:
            raise FormatError(path, "truncated PPM header")
        if not out and tok != b"P6":
            raise FormatError(path, f"bad magic {tok!r}, expected b'P6'")
        try:
            out.append(0 if not out else int(tok))
        except ValueError:
            raise FormatError(path, f"bad PPM header token {tok!r}") from None
    return out, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read an 8-bit P6 file into a float64 [3, H, W] array in [0, 1]."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(path, f"unreadable: {exc.strerror}") from None
    (_, w, h, maxval), start = _ppm_tokens(blob, path, 4)
    if maxval != 255:
        raise FormatError(path, f"only 8-bit PPM supported, maxval={maxval}")
    need = 3 * w * h
    if len(blob) - start != need:
        raise FormatError(path, f"pixel payload is {len(blob) - start} bytes, expected {need}")
    px = np.frombuffer(blob, dtype=np.uint8, offset=start).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0
