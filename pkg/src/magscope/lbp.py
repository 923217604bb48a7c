"""Rotation-invariant uniform LBP histograms.

Each interior pixel is compared against ``p`` neighbours sampled by
bilinear interpolation on a radius-``r`` circle (ties set the bit). Codes
with at most two circular 0/1 transitions bin by popcount, all others
share one extra bin, giving ``p + 2`` histogram bins. Three presets are
used throughout: LBP1=(r=1,p=8) -> 10 bins, LBP2=(2,16) -> 18,
LBP3=(3,24) -> 26.

Sampling-point convention (shared by the optimized extractor and any
reference implementation): neighbour ``k`` sits at offset
``(r*cos(2*pi*k/p), r*sin(2*pi*k/p))``, with offsets within 1e-8 of an
integer snapped exactly, so axis-aligned samples land on pixel centers.
Bilinear interpolation uses the difference form
``I00 + tx*d1 + ty*(d2 + tx*d3)`` which is exact on constant
neighbourhoods.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import MagscopeError
from .pyramid import PatchRecord
from .store import FeatureStore
from .validation import check_rgb8

log = logging.getLogger(__name__)

_SNAP_TOL = 1e-8


@dataclass(frozen=True)
class LbpConfig:
    radius: int
    neighbors: int
    name: str

    @property
    def bins(self) -> int:
        return self.neighbors + 2


PRESETS: dict[str, LbpConfig] = {
    "LBP1": LbpConfig(radius=1, neighbors=8, name="LBP1"),
    "LBP2": LbpConfig(radius=2, neighbors=16, name="LBP2"),
    "LBP3": LbpConfig(radius=3, neighbors=24, name="LBP3"),
}


def get_preset(name: str) -> LbpConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown LBP preset {name!r}; choose from {sorted(PRESETS)}") from None


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """BT.601 luma, kept real-valued (no re-quantization)."""
    image = check_rgb8(image)
    r = image[:, :, 0].astype(np.float64)
    g = image[:, :, 1].astype(np.float64)
    b = image[:, :, 2].astype(np.float64)
    return 0.299 * r + 0.587 * g + 0.114 * b


def circle_offsets(radius: float, neighbors: int) -> list[tuple[float, float]]:
    """(dx, dy) of each neighbour; near-integer components snapped exactly."""
    offsets = []
    for k in range(neighbors):
        angle = 2.0 * math.pi * k / neighbors
        dx = radius * math.cos(angle)
        dy = radius * math.sin(angle)
        if abs(dx - round(dx)) < _SNAP_TOL:
            dx = float(round(dx))
        if abs(dy - round(dy)) < _SNAP_TOL:
            dy = float(round(dy))
        offsets.append((dx, dy))
    return offsets


def interior_margin(radius: float) -> int:
    return int(math.ceil(radius)) + 1


def lbp_code(gray: np.ndarray, x: int, y: int, radius: int, neighbors: int) -> int:
    """LBP code of one pixel; bit k set iff neighbour k >= center."""
    gray = np.asarray(gray, dtype=np.float64)
    h, w = gray.shape
    m = interior_margin(radius)
    if not (m <= x < w - m and m <= y < h - m):
        raise ValueError(f"pixel ({x},{y}) is within {m} px of the border of a {w}x{h} image")
    center = gray[y, x]
    code = 0
    for k, (dx, dy) in enumerate(circle_offsets(radius, neighbors)):
        x0 = math.floor(x + dx)
        y0 = math.floor(y + dy)
        tx = (x + dx) - x0
        ty = (y + dy) - y0
        i00 = gray[y0, x0]
        d1 = gray[y0, x0 + 1] - i00
        d2 = gray[y0 + 1, x0] - i00
        d3 = (gray[y0 + 1, x0 + 1] - gray[y0 + 1, x0]) - d1
        value = i00 + tx * d1 + ty * (d2 + tx * d3)
        if value >= center:
            code |= 1 << k
    return code


def riu2_bin(code: int, neighbors: int) -> int:
    """Map a raw code to its rotation-invariant uniform bin."""
    if not 0 <= code < (1 << neighbors):
        raise ValueError(f"code {code} out of range for {neighbors} neighbours")
    rotated = ((code >> 1) | ((code & 1) << (neighbors - 1)))
    transitions = bin(code ^ rotated).count("1")
    if transitions <= 2:
        return bin(code).count("1")
    return neighbors + 1


_RIU2_LUTS: dict[int, np.ndarray] = {}


def _popcount_u32(v: np.ndarray) -> np.ndarray:
    v = v - ((v >> np.uint32(1)) & np.uint32(0x55555555))
    v = (v & np.uint32(0x33333333)) + ((v >> np.uint32(2)) & np.uint32(0x33333333))
    return (((v + (v >> np.uint32(4))) & np.uint32(0x0F0F0F0F)) * np.uint32(0x01010101)) >> np.uint32(24)


def riu2_table(neighbors: int) -> np.ndarray:
    """Bin lookup for every possible code (cached per neighbour count)."""
    table = _RIU2_LUTS.get(neighbors)
    if table is None:
        codes = np.arange(1 << neighbors, dtype=np.uint32)
        rotated = (codes >> np.uint32(1)) | ((codes & np.uint32(1)) << np.uint32(neighbors - 1))
        transitions = _popcount_u32(codes ^ rotated)
        pop = _popcount_u32(codes)
        table = np.where(transitions <= 2, pop, neighbors + 1).astype(np.uint8)
        _RIU2_LUTS[neighbors] = table
    return table


def _neighbor_plane(gray: np.ndarray, dx: float, dy: float, margin: int) -> np.ndarray:
    """Bilinear samples at offset (dx, dy) from every interior pixel."""
    h, w = gray.shape
    x0 = math.floor(dx)
    y0 = math.floor(dy)
    tx = dx - x0
    ty = dy - y0

    def shifted(oy: int, ox: int) -> np.ndarray:
        return gray[margin + oy:h - margin + oy, margin + ox:w - margin + ox]

    i00 = shifted(y0, x0)
    d1 = shifted(y0, x0 + 1) - i00
    d2 = shifted(y0 + 1, x0) - i00
    d3 = (shifted(y0 + 1, x0 + 1) - shifted(y0 + 1, x0)) - d1
    return i00 + tx * d1 + ty * (d2 + tx * d3)


def lbp_histogram(gray: np.ndarray, cfg: LbpConfig) -> np.ndarray:
    """L1-normalized riu2 histogram over all interior pixels."""
    gray = np.ascontiguousarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale array, got shape {gray.shape}")
    h, w = gray.shape
    min_side = 2 * cfg.radius + 3
    if h < min_side or w < min_side:
        raise ValueError(f"image {w}x{h} too small for radius {cfg.radius} (needs {min_side} per side)")

    margin = interior_margin(cfg.radius)
    center = gray[margin:h - margin, margin:w - margin]
    codes = np.zeros(center.shape, dtype=np.uint32)
    for k, (dx, dy) in enumerate(circle_offsets(cfg.radius, cfg.neighbors)):
        plane = _neighbor_plane(gray, dx, dy, margin)
        codes |= (plane >= center).astype(np.uint32) << np.uint32(k)

    bins = riu2_table(cfg.neighbors)[codes]
    counts = np.bincount(bins.ravel(), minlength=cfg.bins)
    return counts.astype(np.float64) / counts.sum()


def _patch_histogram(record: PatchRecord, cfg: LbpConfig) -> np.ndarray:
    try:
        image = np.asarray(Image.open(record.image_path).convert("RGB"))
    except (OSError, ValueError) as exc:
        raise MagscopeError(f"patch {record.patch_id!r}: cannot read {record.image_path} ({exc})") from exc
    return lbp_histogram(to_grayscale(image), cfg)


def extract_lbp_batch(records: list[PatchRecord], cfg: LbpConfig,
                      threads: int = 1, log_every: int = 250) -> FeatureStore:
    """One histogram per patch, in index order.

    Patches are independent, so extraction parallelizes freely; the store
    contents depend only on (records, cfg).
    """
    start = time.monotonic()
    values = np.zeros((len(records), cfg.bins), dtype=np.float32)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = pool.map(lambda r: _patch_histogram(r, cfg), records)
            for i, hist in enumerate(results):
                values[i] = hist
                if (i + 1) % log_every == 0:
                    _log_progress(i + 1, len(records), start)
    else:
        for i, record in enumerate(records):
            values[i] = _patch_histogram(record, cfg)
            if (i + 1) % log_every == 0:
                _log_progress(i + 1, len(records), start)
    _log_progress(len(records), len(records), start)
    labels = np.array([r.level.ordinal for r in records], dtype=np.int64)
    return FeatureStore([r.patch_id for r in records], labels, values)


def _log_progress(done: int, total: int, start: float) -> None:
    elapsed = max(time.monotonic() - start, 1e-9)
    log.info("LBP features: %d/%d patches (%.1f patches/s)", done, total, done / elapsed)


class LbpExtractor(BaseEstimator, TransformerMixin):
    """Stateless transformer: RGB patches -> riu2 LBP histograms."""

    def __init__(self, preset: str = "LBP1"):
        self.preset = preset

    def fit(self, X, y=None):
        get_preset(self.preset)
        return self

    def transform(self, X) -> np.ndarray:
        cfg = get_preset(self.preset)
        return np.stack([lbp_histogram(to_grayscale(img), cfg) for img in X])
