"""Binary PPM (P6, RGB) and PGM (P5, masks) readers and writers."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _write(path: Path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header + np.ascontiguousarray(arr, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def write_ppm(path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {img.shape}")
    _write(Path(path), b"P6", img)


def write_pgm(path, mask: np.ndarray) -> None:
    arr = mask.astype(np.uint8) * 255 if mask.dtype == bool else mask
    _write(Path(path), b"P5", arr)


def _read(path) -> tuple[bytes, np.ndarray]:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images supported")
    channels = {b"P6": 3, b"P5": 1}.get(magic)
    if channels is None:
        raise ValueError(f"{path}: unsupported format {magic!r}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    return magic, data.reshape((h, w, channels) if channels == 3 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    magic, arr = _read(path)
    if magic != b"P6":
        raise ValueError(f"{path}: not a P6 image")
    return arr


def read_pgm(path) -> np.ndarray:
    """Returns a boolean mask."""
    magic, arr = _read(path)
    if magic != b"P5":
        raise ValueError(f"{path}: not a P5 image")
    return arr > 127
