"""Optical-flow fields: log normalization, 16-bit fixed point codes, class bins
and the ``.flo16`` container."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_M = 56.0
SCALE = 64.0
OFFSET = 32768
NUM_CLASSES = 16
MAGIC = b"CPF1"
_HEADER = struct.Struct("<4sII")
_MAX_DIM = 1 << 20


class FlowFileError(ValueError):
    """Base class for malformed ``.flo16`` containers."""


class BadMagicError(FlowFileError):
    pass


class TruncatedError(FlowFileError):
    pass


class DimensionOverflowError(FlowFileError):
    pass


@dataclass(frozen=True)
class FlowField:
    """Per-pixel (fx, fy) displacements in pixels, shape (height, width, 2)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 2:
            raise ValueError(f"flow data must have shape (H, W, 2), got {data.shape}")
        bad = np.argwhere(~np.isfinite(data))
        if len(bad):
            r, c, k = bad[0]
            raise ValueError(f"non-finite flow component {'xy'[k]} at pixel (row={r}, col={c})")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class NormalizedFlowField:
    data: np.ndarray
    M: float

    def __post_init__(self):
        if not self.M > 0:
            raise ValueError("M must be positive")
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 2:
            raise ValueError(f"flow data must have shape (H, W, 2), got {data.shape}")
        if not (np.all(data >= -1.0) and np.all(data <= 1.0)):
            raise ValueError("normalized flow components must lie in [-1, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class EncodedFlowImage:
    """Fixed-point codes, shape (height, width, 2), dtype uint16."""

    codes: np.ndarray
    saturated: int = 0

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 3 or codes.shape[2] != 2:
            raise ValueError(f"codes must have shape (H, W, 2), got {codes.shape}")
        codes = codes.astype(np.uint16, copy=False)
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    @property
    def height(self) -> int:
        return self.codes.shape[0]

    @property
    def width(self) -> int:
        return self.codes.shape[1]


@dataclass(frozen=True)
class FlowClassField:
    classes: np.ndarray

    def __post_init__(self):
        classes = np.asarray(self.classes, dtype=np.int64)
        if classes.size and (classes.min() < 0 or classes.max() >= NUM_CLASSES):
            raise ValueError("class indices must lie in [0, 15]")
        classes.setflags(write=False)
        object.__setattr__(self, "classes", classes)


def normalize_values(f: np.ndarray, M: float = DEFAULT_M) -> np.ndarray:
    """Elementwise sign(f) * min(1, log(|f|+1) / log(M+1))."""
    if not M > 0:
        raise ValueError("M must be positive")
    f = np.asarray(f, dtype=np.float64)
    mag = np.minimum(1.0, np.log1p(np.abs(f)) / math.log1p(M))
    # np.sign(0) == 0 keeps zero fixed; the magnitude is sign-independent so the map is exactly odd
    return np.sign(f) * mag


def normalize_flow(flow: FlowField, M: float = DEFAULT_M) -> NormalizedFlowField:
    return NormalizedFlowField(normalize_values(flow.data, M), float(M))


def encode_flow(flow: FlowField) -> EncodedFlowImage:
    """Quantize to ``round(f * 64) + 32768``; out-of-range values saturate and
    are counted in ``EncodedFlowImage.saturated``."""
    raw = np.rint(flow.data * SCALE) + OFFSET
    saturated = int(np.count_nonzero((raw < 0) | (raw > 65535)))
    codes = np.clip(raw, 0, 65535).astype(np.uint16)
    return EncodedFlowImage(codes, saturated)


def decode_flow(img: EncodedFlowImage) -> FlowField:
    return FlowField((img.codes.astype(np.float64) - OFFSET) / SCALE)


def discretize_values(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not (np.all(v >= -1.0) and np.all(v <= 1.0)):
        raise ValueError("values to discretize must lie in [-1, 1]")
    bins = np.floor((v + 1.0) / 2.0 * NUM_CLASSES).astype(np.int64)
    return np.minimum(bins, NUM_CLASSES - 1)


def discretize_flow(nf: NormalizedFlowField) -> FlowClassField:
    return FlowClassField(discretize_values(nf.data))


def flow_file_bytes(img: EncodedFlowImage) -> bytes:
    header = _HEADER.pack(MAGIC, img.width, img.height)
    return header + img.codes.astype("<u2").tobytes(order="C")


def parse_flow_bytes(buf: bytes) -> EncodedFlowImage:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("bad magic: expected b'CPF1'")
    if len(buf) < _HEADER.size:
        raise TruncatedError("truncated header")
    _, width, height = _HEADER.unpack_from(buf)
    if width > _MAX_DIM or height > _MAX_DIM or width * height > _MAX_DIM * 16:
        raise DimensionOverflowError(f"dimensions {width}x{height} exceed limits")
    need = _HEADER.size + width * height * 2 * 2
    if len(buf) < need:
        raise TruncatedError(f"truncated payload: need {need} bytes, have {len(buf)}")
    if len(buf) > need:
        raise FlowFileError(f"trailing data: expected {need} bytes, have {len(buf)}")
    codes = np.frombuffer(buf, dtype="<u2", offset=_HEADER.size).reshape(height, width, 2)
    return EncodedFlowImage(codes.astype(np.uint16))


def write_flow_file(img: EncodedFlowImage, path) -> None:
    Path(path).write_bytes(flow_file_bytes(img))


def read_flow_file(path) -> EncodedFlowImage:
    return parse_flow_bytes(Path(path).read_bytes())
