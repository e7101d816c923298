"""Small conv backbone, sparse bilinear hypercolumns and the MLP embedding head.

Parameters live in a flat ``dict[str, np.ndarray]``. Images are ``(H, W, 3)``
arrays, feature levels are ``(h, w, c)``. Backprop is written by hand; every
forward returns a cache consumed by the matching backward.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import INIT_SIGMA_SQ

CHANNELS = (8, 16, 32)
STRIDES = (2, 4, 8)
HIDDEN = 64
EMBED_DIM = 16
NUM_CLASSES = 16
CKPT_MAGIC = b"CPM1"

Params = dict[str, np.ndarray]


@dataclass
class FeaturePyramid:
    levels: list[np.ndarray]
    image_size: tuple[int, int]
    strides: tuple[int, ...] = STRIDES

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ValueError("a pyramid needs at least two levels")
        H, W = self.image_size
        for lvl, s in zip(self.levels, self.strides):
            if lvl.shape[0] * s != H or lvl.shape[1] * s != W:
                raise ValueError(f"level shape {lvl.shape} inconsistent with stride {s}")

    @property
    def dim(self) -> int:
        return sum(lvl.shape[2] for lvl in self.levels)


@dataclass
class PixelSample:
    coords: np.ndarray  # (n, 2) int rows/cols

    @property
    def count(self) -> int:
        return len(self.coords)


def _glorot(rng, shape, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_backbone(rng: np.random.Generator) -> Params:
    params: Params = {}
    cin = 3
    for i, cout in enumerate(CHANNELS, start=1):
        params[f"conv{i}.w"] = _glorot(rng, (3, 3, cin, cout), 9 * cin, 9 * cout)
        params[f"conv{i}.b"] = np.zeros(cout)
        cin = cout
    return params


def init_params(seed: int, sigma_sq: float = INIT_SIGMA_SQ) -> Params:
    """Backbone + embedding head + kernel bandwidth ``kernel.rho``."""
    rng = np.random.default_rng(seed)
    params = init_backbone(rng)
    hc = sum(CHANNELS)
    params["head.w1"] = _glorot(rng, (hc, HIDDEN), hc, HIDDEN)
    params["head.b1"] = np.zeros(HIDDEN)
    params["head.w2"] = _glorot(rng, (HIDDEN, EMBED_DIM), HIDDEN, EMBED_DIM)
    params["head.b2"] = np.zeros(EMBED_DIM)
    params["kernel.rho"] = np.array([0.5 * math.log(sigma_sq)])
    return params


def init_baseline_params(seed: int) -> Params:
    """Backbone + two 16-way linear classifiers (x and y flow bins)."""
    rng = np.random.default_rng(seed)
    params = init_backbone(rng)
    hc = sum(CHANNELS)
    for axis in "xy":
        params[f"cls.w{axis}"] = _glorot(rng, (hc, NUM_CLASSES), hc, NUM_CLASSES)
        params[f"cls.b{axis}"] = np.zeros(NUM_CLASSES)
    return params


def is_baseline(params: Params) -> bool:
    return "cls.wx" in params


# -- backbone ---------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    H, W, C = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = np.empty((H, W, 3, 3, C))
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx, :] = xp[dy : dy + H, dx : dx + W, :]
    return cols.reshape(H * W, 9 * C)


def _col2im(dcols: np.ndarray, H: int, W: int, C: int) -> np.ndarray:
    dcols = dcols.reshape(H, W, 3, 3, C)
    dxp = np.zeros((H + 2, W + 2, C))
    for dy in range(3):
        for dx in range(3):
            dxp[dy : dy + H, dx : dx + W, :] += dcols[:, :, dy, dx, :]
    return dxp[1:-1, 1:-1, :]


def _maxpool(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    H, W, C = x.shape
    win = x.reshape(H // 2, 2, W // 2, 2, C).transpose(0, 2, 1, 3, 4).reshape(H // 2, W // 2, 4, C)
    idx = np.argmax(win, axis=2)
    out = np.take_along_axis(win, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return out, idx


def _maxpool_backward(dout: np.ndarray, idx: np.ndarray) -> np.ndarray:
    h, w, C = dout.shape
    dwin = np.zeros((h, w, 4, C))
    np.put_along_axis(dwin, idx[:, :, None, :], dout[:, :, None, :], axis=2)
    return dwin.reshape(h, w, 2, 2, C).transpose(0, 2, 1, 3, 4).reshape(2 * h, 2 * w, C)


def forward_backbone(image: np.ndarray, params: Params, cache: list | None = None) -> FeaturePyramid:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {image.shape}")
    H, W, _ = image.shape
    if H < 16 or W < 16 or H % 8 or W % 8:
        raise ValueError(f"image size {H}x{W} must be >= 16 and divisible by 8")
    x = image
    levels = []
    for i in range(1, len(CHANNELS) + 1):
        w = params[f"conv{i}.w"]
        h_, w_, cin = x.shape
        cols = _im2col(x)
        z = cols @ w.reshape(9 * cin, -1) + params[f"conv{i}.b"]
        z = z.reshape(h_, w_, -1)
        a = np.maximum(z, 0.0)
        x, idx = _maxpool(a)
        levels.append(x)
        if cache is not None:
            cache.append((cols, z, idx, (h_, w_, cin)))
    return FeaturePyramid(levels, (H, W))


def backbone_backward(d_levels: list[np.ndarray], params: Params, cache: list) -> Params:
    grads: Params = {}
    carry = None
    for i in range(len(CHANNELS), 0, -1):
        cols, z, idx, (h_, w_, cin) = cache[i - 1]
        d_out = d_levels[i - 1] if carry is None else d_levels[i - 1] + carry
        da = _maxpool_backward(d_out, idx)
        dz = np.where(z > 0, da, 0.0).reshape(h_ * w_, -1)
        w = params[f"conv{i}.w"]
        grads[f"conv{i}.w"] = (cols.T @ dz).reshape(w.shape)
        grads[f"conv{i}.b"] = dz.sum(axis=0)
        if i > 1:
            carry = _col2im(dz @ w.reshape(9 * cin, -1).T, h_, w_, cin)
    return grads


# -- hypercolumns -------------------------------------------------------------


def sample_pixels(H: int, W: int, n_s: int, rng_seed) -> PixelSample:
    """``n_s`` distinct pixels drawn uniformly without replacement."""
    if n_s > H * W:
        raise ValueError(f"cannot sample {n_s} distinct pixels from a {H}x{W} image")
    if n_s < 0:
        raise ValueError("n_s must be non-negative")
    rng = np.random.default_rng(rng_seed)
    flat = rng.choice(H * W, size=n_s, replace=False)
    return PixelSample(np.stack([flat // W, flat % W], axis=1))


def full_grid(H: int, W: int) -> PixelSample:
    rr, cc = np.mgrid[0:H, 0:W]
    return PixelSample(np.stack([rr.ravel(), cc.ravel()], axis=1))


def _bilinear_taps(pos: np.ndarray, stride: int, size: int):
    t = np.clip((pos + 0.5) / stride - 0.5, 0.0, size - 1)
    i0 = np.floor(t).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, t - i0


def _level_taps(coords: np.ndarray, level: np.ndarray, stride: int):
    h, w, _ = level.shape
    r0, r1, wr = _bilinear_taps(coords[:, 0], stride, h)
    c0, c1, wc = _bilinear_taps(coords[:, 1], stride, w)
    rows = (r0, r0, r1, r1)
    cols = (c0, c1, c0, c1)
    weights = ((1 - wr) * (1 - wc), (1 - wr) * wc, wr * (1 - wc), wr * wc)
    return rows, cols, weights


def _check_coords(coords: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    H, W = image_size
    bad = (coords[:, 0] < 0) | (coords[:, 0] > H - 1) | (coords[:, 1] < 0) | (coords[:, 1] > W - 1)
    if np.any(bad):
        r, c = coords[np.argmax(bad)]
        raise ValueError(f"pixel ({r}, {c}) outside {H}x{W} image")
    return coords


def hypercolumns(pyr: FeaturePyramid, coords) -> np.ndarray:
    """Bilinear hypercolumns at (row, col) positions, shape (n, sum of channels).

    Level coordinates are ``(p + 0.5) / stride - 0.5``, clamped to the grid.
    Positions may be fractional.
    """
    coords = _check_coords(coords, pyr.image_size)
    parts = []
    for level, s in zip(pyr.levels, pyr.strides):
        rows, cols, weights = _level_taps(coords, level, s)
        parts.append(sum(wt[:, None] * level[r, c] for r, c, wt in zip(rows, cols, weights)))
    return np.concatenate(parts, axis=1)


def hypercolumn_at(pyr: FeaturePyramid, p) -> np.ndarray:
    return hypercolumns(pyr, np.asarray(p, dtype=np.float64)[None, :])[0]


def hypercolumns_backward(pyr: FeaturePyramid, coords, d_h: np.ndarray) -> list[np.ndarray]:
    """Scatter hypercolumn gradients back onto the four bilinear nodes per level."""
    coords = _check_coords(coords, pyr.image_size)
    d_levels = []
    start = 0
    for level, s in zip(pyr.levels, pyr.strides):
        C = level.shape[2]
        g = d_h[:, start : start + C]
        start += C
        d_level = np.zeros_like(level)
        rows, cols, weights = _level_taps(coords, level, s)
        for r, c, wt in zip(rows, cols, weights):
            np.add.at(d_level, (r, c), wt[:, None] * g)
        d_levels.append(d_level)
    return d_levels


# -- heads ------------------------------------------------------------------


@dataclass
class HeadOutput:
    embeddings: np.ndarray
    fallbacks: int = 0
    cache: tuple = field(default=(), repr=False)


def embed_head(h: np.ndarray, params: Params) -> HeadOutput:
    """MLP (ReLU hidden layer) followed by L2 normalization.

    Rows whose pre-normalization norm is below 1e-12 are nudged along the first
    axis before renormalizing; such rows receive no gradient.
    """
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if h.shape[1] != params["head.w1"].shape[0]:
        raise ValueError(f"hypercolumn dim {h.shape[1]} != head input {params['head.w1'].shape[0]}")
    z1 = h @ params["head.w1"] + params["head.b1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params["head.w2"] + params["head.b2"]
    norms = np.linalg.norm(z2, axis=1)
    tiny = norms < 1e-12
    if np.any(tiny):
        z2 = z2.copy()
        z2[tiny, 0] += 1e-6
        norms = np.linalg.norm(z2, axis=1)
    e = z2 / norms[:, None]
    return HeadOutput(e, int(tiny.sum()), (h, z1, a1, e, norms, tiny))


def embed_head_backward(out: HeadOutput, d_e: np.ndarray, params: Params) -> tuple[Params, np.ndarray]:
    h, z1, a1, e, norms, tiny = out.cache
    d_z2 = (d_e - e * np.sum(d_e * e, axis=1, keepdims=True)) / norms[:, None]
    d_z2[tiny] = 0.0
    grads = {"head.w2": a1.T @ d_z2, "head.b2": d_z2.sum(axis=0)}
    d_z1 = np.where(z1 > 0, d_z2 @ params["head.w2"].T, 0.0)
    grads["head.w1"] = h.T @ d_z1
    grads["head.b1"] = d_z1.sum(axis=0)
    return grads, d_z1 @ params["head.w1"].T


def classifier_logits(h: np.ndarray, params: Params) -> tuple[np.ndarray, np.ndarray]:
    return h @ params["cls.wx"] + params["cls.bx"], h @ params["cls.wy"] + params["cls.by"]


def classifier_backward(h, d_lx, d_ly, params: Params) -> tuple[Params, np.ndarray]:
    grads = {
        "cls.wx": h.T @ d_lx,
        "cls.bx": d_lx.sum(axis=0),
        "cls.wy": h.T @ d_ly,
        "cls.by": d_ly.sum(axis=0),
    }
    return grads, d_lx @ params["cls.wx"].T + d_ly @ params["cls.wy"].T


# -- whole network ------------------------------------------------------------


@dataclass
class ForwardPass:
    pyramid: FeaturePyramid
    coords: np.ndarray
    hypercolumns: np.ndarray
    backbone_cache: list
    head: HeadOutput | None = None

    @property
    def embeddings(self) -> np.ndarray:
        return self.head.embeddings


def forward(image, coords, params: Params, with_head: bool = True) -> ForwardPass:
    cache: list = []
    pyr = forward_backbone(image, params, cache)
    coords = np.asarray(coords)
    h = hypercolumns(pyr, coords)
    fp = ForwardPass(pyr, coords, h, cache)
    if with_head:
        fp.head = embed_head(h, params)
    return fp


def backward_from_hypercolumns(fp: ForwardPass, d_h: np.ndarray, params: Params) -> Params:
    d_levels = hypercolumns_backward(fp.pyramid, fp.coords, d_h)
    return backbone_backward(d_levels, params, fp.backbone_cache)


def network_backward(image, sample, params: Params, d_embeddings, fp: ForwardPass | None = None) -> Params:
    """Gradients of ``sum(d_embeddings * embeddings)`` for every backbone/head tensor."""
    coords = sample.coords if isinstance(sample, PixelSample) else np.asarray(sample)
    d_embeddings = np.asarray(d_embeddings, dtype=np.float64)
    if d_embeddings.shape != (len(coords), params["head.w2"].shape[1]):
        raise ValueError(f"d_embeddings shape {d_embeddings.shape} does not match the sample")
    if fp is None:
        fp = forward(image, coords, params)
    grads, d_h = embed_head_backward(fp.head, d_embeddings, params)
    grads.update(backward_from_hypercolumns(fp, d_h, params))
    return grads


def embed_image(image, params: Params, coords=None) -> np.ndarray:
    image = np.asarray(image)
    if coords is None:
        coords = full_grid(image.shape[0], image.shape[1]).coords
    return forward(image, coords, params).embeddings


# -- checkpoints ----------------------------------------------------------------


def checkpoint_bytes(params: Params) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in params.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def parse_checkpoint(buf: bytes) -> Params:
    if buf[:4] != CKPT_MAGIC:
        raise ValueError("bad magic: expected b'CPM1'")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ValueError("truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = take("<I")
    manifest = []
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise ValueError("truncated checkpoint")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        manifest.append((name, shape))
    params: Params = {}
    for name, shape in manifest:
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + size > len(buf):
            raise ValueError(f"truncated checkpoint payload for {name!r}")
        params[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += size
    if pos != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    return params


def save_checkpoint(params: Params, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> Params:
    return parse_checkpoint(Path(path).read_bytes())
