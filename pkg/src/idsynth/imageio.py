"""Binary PPM (P6) / PGM (P5) read and write, maxval 255."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    """[3, H, W] floats in [0, 1] -> P6 bytes."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"PPM needs a [3, H, W] image, got {image.shape}")
    _, h, w = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes(image).transpose(1, 2, 0).tobytes()


def encode_pgm(mask: np.ndarray) -> bytes:
    """[H, W] bool or float in [0, 1] -> P5 bytes."""
    if mask.ndim != 2:
        raise ValueError(f"PGM needs a [H, W] array, got {mask.shape}")
    h, w = mask.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + to_bytes(mask.astype(np.float64)).tobytes()


def _parse_header(buf: bytes, magic: bytes) -> tuple[int, int, int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"expected {magic!r} header, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    return w, h, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    w, h, off = _parse_header(buf, b"P6")
    px = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=off).reshape(h, w, 3)
    return (px.transpose(2, 0, 1) / 255.0).astype(np.float32)


def decode_pgm(buf: bytes) -> np.ndarray:
    w, h, off = _parse_header(buf, b"P5")
    return (np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=off).reshape(h, w) / 255.0).astype(np.float32)


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def write_pgm(path, mask: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(mask))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())
