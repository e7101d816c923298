"""Binary 8-bit PPM (P6) / PGM (P5) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def pnm_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported pixel array shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def write_pnm(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(pnm_bytes(arr))


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    toks, pos = [], 0
    while len(toks) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        toks.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return toks, pos + 1


def parse_pnm(data: bytes) -> np.ndarray:
    toks, pos = _tokens(data, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    w, h, maxval = (int(t) for t in toks[1:])
    if maxval != 255:
        raise ValueError(f"only 8-bit PNM supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise ValueError(f"truncated PNM raster: need {need} bytes, have {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def read_pnm(path) -> np.ndarray:
    return parse_pnm(Path(path).read_bytes())
