"""Synthetic moving-shapes scenes with ground-truth translation flow and masks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import flow_io, pnm

SHAPE_KINDS = ("rectangle", "disk")
MANIFEST_NAME = "manifest.txt"


class SceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    min_objects: int = 2
    max_objects: int = 4
    shapes: tuple[str, ...] = SHAPE_KINDS
    min_size: int = 12
    max_size: int = 26
    noise: float = 0.04
    flow_min: float = 2.0
    flow_max: float = 20.0
    bg_flow_max: float = 2.0
    min_color_dist: float = 0.3
    max_retries: int = 500

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if self.max_objects > 254:
            raise ValueError("at most 254 objects fit in an 8-bit mask")
        unknown = set(self.shapes) - set(SHAPE_KINDS)
        if not self.shapes or unknown:
            raise ValueError(f"shape kinds must be a non-empty subset of {SHAPE_KINDS}")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError("need 1 <= min_size <= max_size")
        if self.max_objects and self.max_size > min(self.height, self.width):
            raise ValueError("max_size exceeds the image")
        if not 0 <= self.flow_min <= self.flow_max:
            raise ValueError("need 0 <= flow_min <= flow_max")
        if self.bg_flow_max < 0:
            raise ValueError("bg_flow_max must be non-negative")
        limit = 511.0
        if max(self.flow_max, self.bg_flow_max) > limit:
            raise ValueError(f"flow magnitudes must stay within the codec range (<= {limit})")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass(frozen=True)
class Scene:
    image: np.ndarray  # (H, W, 3) float64, multiples of 1/255
    flow: flow_io.FlowField
    masks: np.ndarray  # (H, W) uint8, 0 = background

    @property
    def image_u8(self) -> np.ndarray:
        return np.rint(self.image * 255.0).astype(np.uint8)


def _random_translation(rng, lo, hi) -> np.ndarray:
    mag = rng.uniform(lo, hi)
    ang = rng.uniform(0.0, 2.0 * math.pi)
    return np.array([mag * math.cos(ang), mag * math.sin(ang)])


def _pick_colors(rng, count, min_dist, retries) -> np.ndarray:
    colors: list[np.ndarray] = []
    for _ in range(retries * max(count, 1)):
        if len(colors) == count:
            break
        c = rng.uniform(0.1, 0.9, size=3)
        if all(np.linalg.norm(c - o) >= min_dist for o in colors):
            colors.append(c)
    if len(colors) < count:
        raise SceneError(f"could not pick {count} colors at distance >= {min_dist}")
    return np.array(colors)


def _shape_mask(kind, top, left, size_h, size_w, H, W) -> np.ndarray:
    rr, cc = np.mgrid[0:H, 0:W]
    if kind == "rectangle":
        return (rr >= top) & (rr < top + size_h) & (cc >= left) & (cc < left + size_w)
    d = min(size_h, size_w)
    cy, cx = top + (d - 1) / 2.0, left + (d - 1) / 2.0
    return (rr - cy) ** 2 + (cc - cx) ** 2 <= (d / 2.0) ** 2


def generate_scene(cfg: SceneConfig, rng_seed) -> Scene:
    cfg.validate()
    rng = np.random.default_rng(rng_seed)
    H, W = cfg.height, cfg.width
    k = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))

    boxes: list[tuple[int, int, int, int]] = []
    kinds: list[str] = []
    for obj in range(k):
        for _ in range(cfg.max_retries):
            kind = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
            sh = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            sw = sh if kind == "disk" else int(rng.integers(cfg.min_size, cfg.max_size + 1))
            top = int(rng.integers(0, H - sh + 1))
            left = int(rng.integers(0, W - sw + 1))
            # boxes plus a one-pixel gap never touch, so shapes never occlude
            if all(
                top + sh + 1 <= t or t + h + 1 <= top or left + sw + 1 <= l or l + w + 1 <= left
                for t, l, h, w in boxes
            ):
                boxes.append((top, left, sh, sw))
                kinds.append(kind)
                break
        else:
            raise SceneError(f"could not place object {obj + 1} of {k} after {cfg.max_retries} tries")

    colors = _pick_colors(rng, k + 1, cfg.min_color_dist, cfg.max_retries)
    masks = np.zeros((H, W), dtype=np.uint8)
    flow = np.empty((H, W, 2))
    flow[:] = _random_translation(rng, 0.0, cfg.bg_flow_max)
    image = np.empty((H, W, 3))
    image[:] = colors[0]
    for obj, ((top, left, sh, sw), kind) in enumerate(zip(boxes, kinds), start=1):
        m = _shape_mask(kind, top, left, sh, sw, H, W)
        masks[m] = obj
        image[m] = colors[obj]
        flow[m] = _random_translation(rng, cfg.flow_min, cfg.flow_max)
    image = image + cfg.noise * rng.standard_normal((H, W, 3))
    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return Scene(image, flow_io.FlowField(flow), masks)


def scene_names(i: int) -> tuple[str, str, str]:
    stem = f"scene_{i:05d}"
    return f"{stem}.ppm", f"{stem}.flo16", f"{stem}.mask.pgm"


def generate_dataset(cfg: SceneConfig, count: int, rng_seed: int, out_dir) -> Path:
    """Write ``count`` scenes plus a tab-separated manifest; returns the manifest path."""
    if count < 1:
        raise ValueError("count must be ≥ 1")
    cfg.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    lines = []
    for i in range(count):
        scene = generate_scene(cfg, np.random.SeedSequence([rng_seed, i]))
        names = scene_names(i)
        enc = flow_io.encode_flow(scene.flow)
        payloads = (pnm.pnm_bytes(scene.image_u8), flow_io.flow_file_bytes(enc), pnm.pnm_bytes(scene.masks))
        for name, data in zip(names, payloads):
            path = out / name
            try:
                path.write_bytes(data)
            except OSError as exc:
                raise OSError(f"failed writing {path}: {exc}") from exc
        lines.append("\t".join(names))
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list[tuple[Path, Path, Path]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated paths")
        entries.append(tuple(path.parent / p for p in parts))
    return entries


def load_scene(image_path, flow_path, mask_path) -> Scene:
    image = pnm.read_pnm(image_path)
    if image.ndim != 3:
        raise ValueError(f"{image_path}: expected a P6 color image")
    masks = pnm.read_pnm(mask_path)
    flow = flow_io.decode_flow(flow_io.read_flow_file(flow_path))
    if masks.shape != image.shape[:2] or flow.data.shape[:2] != image.shape[:2]:
        raise ValueError(f"{image_path}: image, flow and mask sizes disagree")
    return Scene(image.astype(np.float64) / 255.0, flow, masks)


def grouping_margin(emb: np.ndarray, ids: np.ndarray) -> float:
    """Mean cosine over same-id pairs minus mean cosine over different-id pairs
    (self pairs excluded)."""
    emb = np.asarray(emb, dtype=np.float64)
    ids = np.asarray(ids).ravel()
    if len(emb) != len(ids):
        raise ValueError("one mask id per embedding row required")
    if len(np.unique(ids)) < 2:
        raise ValueError("grouping margin needs at least 2 distinct ids among samples")
    U = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    cos = U @ U.T
    same = ids[:, None] == ids[None, :]
    np.fill_diagonal(same, False)
    diff = ids[:, None] != ids[None, :]
    if not same.any():
        raise ValueError("grouping margin needs at least one same-id pair")
    return float(cos[same].mean() - cos[diff].mean())
