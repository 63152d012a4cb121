"""Grayscale image pipeline: normalization, bilinear resize, channel replication, CLAHE.

Images are 2-D float64 arrays in [0, 1] once normalized; raw images are
integer arrays paired with a bit depth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, IoError


@dataclass(frozen=True)
class ClaheConfig:
    clip_limit: float = 2.0
    tile_grid: tuple[int, int] = (8, 8)
    bins: int = 256

    def __post_init__(self):
        if not self.clip_limit >= 1.0:
            raise DomainError(f"clip_limit must be >= 1, got {self.clip_limit}")
        rows, cols = self.tile_grid
        if rows < 1 or cols < 1:
            raise DomainError(f"tile_grid must be positive, got {self.tile_grid}")
        if self.bins < 2:
            raise DomainError(f"bins must be >= 2, got {self.bins}")


def normalize(pixels, bits: int = 8) -> np.ndarray:
    """Scale raw integer levels to [0, 1] by ``2**bits - 1``."""
    if bits not in (8, 16):
        raise DomainError(f"bit depth must be 8 or 16, got {bits}")
    raw = np.asarray(pixels)
    top = (1 << bits) - 1
    if raw.size and (raw.min() < 0 or raw.max() > top):
        raise DomainError(f"pixel values outside [0, {top}] for {bits}-bit image")
    return raw.astype(np.float64) / top


def resize_bilinear(image, target) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D image."""
    img = np.asarray(image, dtype=np.float64)
    th, tw = (int(t) for t in target)
    if img.ndim != 2 or min(img.shape) < 2:
        raise DomainError(f"source must be 2-D with extents >= 2, got {img.shape}")
    if th < 2 or tw < 2:
        raise DomainError(f"target extents must be >= 2, got {(th, tw)}")
    h, w = img.shape
    if (th, tw) == (h, w):
        return img.copy()
    ys = np.linspace(0.0, h - 1, th)
    xs = np.linspace(0.0, w - 1, tw)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x0 + 1)]
    c = img[np.ix_(y0 + 1, x0)]
    d = img[np.ix_(y0 + 1, x0 + 1)]
    top = a + wx * (b - a)
    bottom = c + wx * (d - c)
    out = top + wy * (bottom - top)
    return np.clip(out, 0.0, 1.0)


def replicate_channels(image, channels: int = 3) -> np.ndarray:
    if channels < 1:
        raise DomainError("channels must be >= 1")
    img = np.asarray(image, dtype=np.float64)
    return np.repeat(img[:, :, None], channels, axis=2)


def quantize(image, bins: int) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * (bins - 1)), 0, bins - 1).astype(np.int64)


def clip_histogram(hist: np.ndarray, ceiling: float) -> np.ndarray:
    """Clip at ``ceiling`` and hand the excess back uniformly until none remains.

    Repeating "clip, spread the excess over every bin" converges to
    ``min(hist + t, ceiling)`` for the unique ``t`` that conserves mass, so
    that fixed point is solved for directly.
    """
    hist = hist.astype(np.float64)
    total = hist.sum()
    if hist.max() <= ceiling:
        return hist
    if ceiling * hist.size <= total:
        return np.full(hist.shape, total / hist.size)
    excess = total - np.minimum(hist, ceiling).sum()
    # Need t with sum(min(t, room)) == excess over bins that still have room.
    room = np.sort((ceiling - hist)[hist < ceiling])
    below = 0.0
    for i, r in enumerate(room):
        t = (excess - below) / (room.size - i)
        if t <= r:
            break
        below += r
    return np.minimum(hist + t, ceiling)


def equalization_map(hist: np.ndarray) -> np.ndarray:
    """Level map (in bin units) sending ``hist``'s CDF onto the full range.

    Uses ``(cdf - cdf_min) / (n - cdf_min)`` where ``cdf_min`` is the CDF at
    the lowest occupied bin; a single occupied level maps to itself.
    """
    bins = hist.size
    cdf = np.cumsum(hist)
    total = cdf[-1]
    occupied = np.flatnonzero(hist > 0)
    cdf_min = cdf[occupied[0]]
    if total - cdf_min <= 1e-12 * total:
        return np.arange(bins, dtype=np.float64)
    return np.clip((cdf - cdf_min) / (total - cdf_min), 0.0, 1.0) * (bins - 1)


def clahe(image, cfg: ClaheConfig = ClaheConfig()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of a [0, 1] image.

    Each tile's histogram is clipped at ``clip_limit`` times the uniform bin
    height, equalized, and the per-tile maps are blended bilinearly between
    tile centres. Grids that do not divide the image work on an
    edge-replicated padding that is cropped away afterwards.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DomainError(f"clahe expects a 2-D image, got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise DomainError("clahe expects a normalized image in [0, 1]")
    rows, cols = cfg.tile_grid
    h, w = img.shape
    if h < rows or w < cols:
        raise DomainError(f"image {img.shape} smaller than one tile of grid {cfg.tile_grid}")
    th, tw = math.ceil(h / rows), math.ceil(w / cols)
    levels = quantize(img, cfg.bins)
    padded = np.pad(levels, ((0, th * rows - h), (0, tw * cols - w)), mode="edge")

    ceiling = cfg.clip_limit * th * tw / cfg.bins
    maps = np.empty((rows, cols, cfg.bins))
    for r in range(rows):
        for c in range(cols):
            tile = padded[r * th : (r + 1) * th, c * tw : (c + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=cfg.bins)
            if np.count_nonzero(hist) == 1:
                # Flat tile: clipping would smear it over every bin; keep it as is.
                maps[r, c] = np.arange(cfg.bins, dtype=np.float64)
            else:
                maps[r, c] = equalization_map(clip_histogram(hist, ceiling))

    # Fractional tile coordinate of each pixel centre, relative to tile centres.
    fy = (np.arange(th * rows) + 0.5) / th - 0.5
    fx = (np.arange(tw * cols) + 0.5) / tw - 0.5
    r0 = np.clip(np.floor(fy).astype(int), 0, rows - 1)
    c0 = np.clip(np.floor(fx).astype(int), 0, cols - 1)
    r1 = np.minimum(r0 + 1, rows - 1)
    c1 = np.minimum(c0 + 1, cols - 1)
    wy = np.clip(fy - r0, 0.0, 1.0)[:, None]
    wx = np.clip(fx - c0, 0.0, 1.0)[None, :]
    R0, C0 = r0[:, None], c0[None, :]
    R1, C1 = r1[:, None], c1[None, :]
    # a + w * (b - a) keeps equal neighbours exact.
    tl, tr = maps[R0, C0, padded], maps[R0, C1, padded]
    bl, br = maps[R1, C0, padded], maps[R1, C1, padded]
    top = tl + wx * (tr - tl)
    bottom = bl + wx * (br - bl)
    out = top + wy * (bottom - top)
    return np.clip(out[:h, :w] / (cfg.bins - 1), 0.0, 1.0)


@dataclass(frozen=True)
class PipelineConfig:
    size: tuple[int, int] = (224, 224)
    channels: int = 3
    clahe: ClaheConfig | None = ClaheConfig()
    clahe_before_resize: bool = True


def preprocess_image(raw, bits: int, cfg: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """normalize -> CLAHE -> resize -> replicate (CLAHE after resize if configured)."""
    img = normalize(raw, bits)
    if cfg.clahe is not None and cfg.clahe_before_resize:
        img = clahe(img, cfg.clahe)
    img = resize_bilinear(img, cfg.size)
    if cfg.clahe is not None and not cfg.clahe_before_resize:
        img = clahe(img, cfg.clahe)
    return replicate_channels(img, cfg.channels)


# --- binary PGM (P5) -------------------------------------------------------

def _pgm_tokens(data: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM; returns ``(levels, bits)`` with bits 8 or 16."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    try:
        tokens, offset = _pgm_tokens(data, 3)
        width, height, maxval = (int(t) for t in tokens)
    except (FormatError, ValueError):
        raise FormatError(f"{path}: malformed PGM header") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid PGM dimensions or maxval")
    bits = 8 if maxval < 256 else 16
    dtype = np.uint8 if bits == 8 else np.dtype(">u2")
    need = width * height * (bits // 8)
    body = data[offset : offset + need]
    if len(body) != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    levels = np.frombuffer(body, dtype=dtype).reshape(height, width).astype(np.int64)
    if levels.max(initial=0) > maxval:
        raise FormatError(f"{path}: pixel exceeds maxval {maxval}")
    return levels, bits


def write_pgm(path, levels, bits: int = 8) -> None:
    levels = np.asarray(levels)
    if levels.ndim != 2:
        raise DomainError("PGM images are 2-D")
    top = (1 << bits) - 1
    if levels.min(initial=0) < 0 or levels.max(initial=0) > top:
        raise DomainError(f"levels outside [0, {top}]")
    dtype = np.uint8 if bits == 8 else np.dtype(">u2")
    header = f"P5\n{levels.shape[1]} {levels.shape[0]}\n{top}\n".encode()
    Path(path).write_bytes(header + levels.astype(dtype).tobytes())


def to_levels(image, bits: int = 8) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * ((1 << bits) - 1)).astype(np.int64)
