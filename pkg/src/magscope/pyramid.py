"""Virtual-slide ingestion and center-aligned patch sampling.

A slide is a single base image at objective power 20 or 40. Lower
magnifications are produced on demand by integer-factor box averaging, so
the five views of one sample point are exactly centered on the same base
coordinate. Slides whose base power is neither 20 nor 40 are discarded at
ingestion; a 20x-base slide yields no 40x patches.
"""

from __future__ import annotations

import csv
import json
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestError, OutOfBoundsError
from .levels import MagLevel, VALID_BASE_POWERS, levels_for_base
from .seeding import spawn_rng
from .synth import synth_slide_pixels
from .validation import check_rgb8

DEFAULT_PATCH_SIZE = 224
DEFAULT_POINTS_PER_SLIDE = 5

# Coarsest view reachable from any accepted base power.
_MIN_LEVEL_POWER = 2.5


@dataclass(frozen=True)
class SlideManifest:
    """One accepted slide: identity, base power, dimensions, image location."""

    slide_id: str
    base_objective_power: float
    width: int
    height: int
    image_path: Path

    def __post_init__(self):
        if self.base_objective_power not in VALID_BASE_POWERS:
            raise ManifestError(
                f"slide {self.slide_id!r}: base objective power "
                f"{self.base_objective_power} is not 20 or 40"
            )
        if self.width <= 0 or self.height <= 0:
            raise ManifestError(f"slide {self.slide_id!r}: non-positive dimensions")


@dataclass(frozen=True)
class PatchRecord:
    """One snapshot at one magnification, tied to its slide and base center."""

    patch_id: str
    slide_id: str
    level: MagLevel
    center_x: int
    center_y: int
    size: int
    image_path: Path


@dataclass(frozen=True)
class SamplerConfig:
    points_per_slide: int = DEFAULT_POINTS_PER_SLIDE
    patch_size: int = DEFAULT_PATCH_SIZE
    seed: int = 42

    def __post_init__(self):
        if self.points_per_slide < 1:
            raise ValueError("points_per_slide must be >= 1")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")


@dataclass
class IngestResult:
    slides: list[SlideManifest] = field(default_factory=list)
    discarded: int = 0


def synth_slide(slide_id: str, width: int, height: int, seed: int,
                base_power: float = 40.0, out_dir: Path | str = ".") -> SlideManifest:
    """Render a synthetic slide to PNG and return its manifest entry."""
    pixels = synth_slide_pixels(slide_id, width, height, seed, base_power)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_path = out_dir / f"{slide_id}.png"
    # level 0: noise barely compresses and these are scratch corpora; skipping
    # deflate roughly halves both encode and decode time per slide
    Image.fromarray(pixels).save(image_path, format="PNG", compress_level=0)
    return SlideManifest(slide_id, base_power, width, height, image_path)


def write_manifest(slides: list[SlideManifest], path: Path | str, relative_to: Path | None = None) -> None:
    """Write slides as JSONL, one object per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for s in slides:
            img = s.image_path
            if relative_to is not None:
                img = img.relative_to(relative_to)
            fh.write(json.dumps({
                "slide_id": s.slide_id,
                "base_objective_power": s.base_objective_power,
                "width": s.width,
                "height": s.height,
                "image_path": str(img),
            }) + "\n")


def ingest_manifest(path: Path | str) -> IngestResult:
    """Parse a JSONL manifest, keeping only 20x/40x-base slides.

    Slides with any other base power are counted as discarded, mirroring
    dataset construction that drops slides lacking a usable base layer.
    Malformed lines and duplicate slide ids abort with the line number.
    """
    path = Path(path)
    result = IngestResult()
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                slide_id = str(obj["slide_id"])
                power = float(obj["base_objective_power"])
                width = int(obj["width"])
                height = int(obj["height"])
                image_path = Path(obj["image_path"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
            if slide_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate slide_id {slide_id!r}")
            seen.add(slide_id)
            if power not in VALID_BASE_POWERS:
                result.discarded += 1
                continue
            if not image_path.is_absolute():
                image_path = path.parent / image_path
            result.slides.append(SlideManifest(slide_id, power, width, height, image_path))
    return result


def _half_max_window(manifest: SlideManifest, patch_size: int) -> int:
    return int(patch_size * (manifest.base_objective_power / _MIN_LEVEL_POWER)) // 2


def sample_points(manifest: SlideManifest, cfg: SamplerConfig) -> list[tuple[int, int]]:
    """Draw the slide's sample centers, deterministically per (seed, slide_id).

    Coordinates are uniform over the margin-shrunk rectangle that keeps even
    the coarsest (2.5x) window fully inside the base image, so all levels can
    share the same center set.
    """
    if 16 * cfg.patch_size > min(manifest.width, manifest.height):
        raise ValueError(
            f"slide {manifest.slide_id!r}: patch_size {cfg.patch_size} needs "
            f"{16 * cfg.patch_size} px per side, slide is "
            f"{manifest.width}x{manifest.height}"
        )
    half = _half_max_window(manifest, cfg.patch_size)
    x_lo, x_hi = half, manifest.width - half
    y_lo, y_hi = half, manifest.height - half
    if x_hi <= x_lo or y_hi <= y_lo:
        raise ValueError(
            f"slide {manifest.slide_id!r}: empty sampling rectangle for "
            f"patch_size {cfg.patch_size} (margin {half})"
        )
    rng = spawn_rng(cfg.seed, "sample", manifest.slide_id)
    xs = rng.integers(x_lo, x_hi, size=cfg.points_per_slide)
    ys = rng.integers(y_lo, y_hi, size=cfg.points_per_slide)
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


def window_bounds(center: tuple[int, int], level: MagLevel, base_power: float,
                  size: int) -> tuple[int, int, int, int]:
    """Half-open (left, top, right, bottom) of the base-image window."""
    factor = level.factor(base_power)
    side = size * factor
    left = center[0] - side // 2
    top = center[1] - side // 2
    return left, top, left + side, top + side


def extract_patch(base_image: np.ndarray, base_power: float, center: tuple[int, int],
                  level: MagLevel, size: int) -> np.ndarray:
    """Cut the snapshot at ``level`` centered on a base coordinate.

    The window of side ``size * factor`` is cropped and each factor x factor
    block is area-averaged exactly (integer sums), with channel means rounded
    half-away-from-zero to 8 bits. Factor 1 is an exact crop.
    """
    base_image = check_rgb8(base_image, "base_image")
    factor = level.factor(base_power)  # raises UnavailableLevelError if too fine
    left, top, right, bottom = window_bounds(center, level, base_power, size)
    h, w = base_image.shape[:2]
    if left < 0 or top < 0 or right > w or bottom > h:
        raise OutOfBoundsError(
            f"window [{left},{right})x[{top},{bottom}) for {level.label} at "
            f"{center} exceeds the {w}x{h} base image"
        )
    window = base_image[top:bottom, left:right]
    if factor == 1:
        return window.copy()
    sums = window.reshape(size, factor, size, factor, 3).astype(np.uint32).sum(axis=(1, 3))
    return block_sums_to_u8(sums, factor)


def block_sums_to_u8(sums: np.ndarray, factor: int) -> np.ndarray:
    """Round integer block sums to 8-bit means, half away from zero."""
    d = factor * factor
    return ((2 * sums.astype(np.uint64) + d) // (2 * d)).astype(np.uint8)


def _rebin2(sums: np.ndarray) -> np.ndarray:
    return (sums[0::2, 0::2] + sums[0::2, 1::2]
            + sums[1::2, 0::2] + sums[1::2, 1::2])


def extract_views(base_image: np.ndarray, base_power: float, center: tuple[int, int],
                  size: int) -> dict[MagLevel, np.ndarray]:
    """All available level views of one center, each equal to extract_patch.

    For even patch sizes the block sums cascade through one integer pyramid
    (each factor is a 2x2 rebin of the previous), which crops the large
    coarse window once instead of re-reducing it per level. Odd sizes fall
    back to per-level extraction.
    """
    levels = levels_for_base(base_power)
    if size % 2:
        return {lv: extract_patch(base_image, base_power, center, lv, size) for lv in levels}
    base_image = check_rgb8(base_image, "base_image")
    coarsest = levels[0]
    left, top, right, bottom = window_bounds(center, coarsest, base_power, size)
    h, w = base_image.shape[:2]
    if left < 0 or top < 0 or right > w or bottom > h:
        raise OutOfBoundsError(
            f"window [{left},{right})x[{top},{bottom}) for {coarsest.label} at "
            f"{center} exceeds the {w}x{h} base image")
    by_factor = {lv.factor(base_power): lv for lv in levels}
    f_max = coarsest.factor(base_power)
    window = base_image[top:bottom, left:right]
    views: dict[MagLevel, np.ndarray] = {}
    if 1 in by_factor:
        offset = (window.shape[0] - size) // 2
        views[by_factor[1]] = window[offset:offset + size, offset:offset + size].copy()
    # block sums up to factor 16 stay below 2^16, so the whole cascade fits u16
    sums = np.add(window[0::2, 0::2], window[0::2, 1::2], dtype=np.uint16)
    sums += window[1::2, 0::2]
    sums += window[1::2, 1::2]
    factor = 2
    while True:
        if factor in by_factor:
            offset = (sums.shape[0] - size) // 2
            block = sums[offset:offset + size, offset:offset + size]
            views[by_factor[factor]] = block_sums_to_u8(block, factor)
        if factor == f_max:
            return views
        sums = _rebin2(sums)
        factor *= 2


def _load_base_image(manifest: SlideManifest) -> np.ndarray:
    if not manifest.image_path.exists():
        raise ManifestError(f"slide {manifest.slide_id!r}: image {manifest.image_path} missing")
    arr = np.asarray(Image.open(manifest.image_path).convert("RGB"))
    if arr.shape[:2] != (manifest.height, manifest.width):
        raise ManifestError(
            f"slide {manifest.slide_id!r}: image is {arr.shape[1]}x{arr.shape[0]}, "
            f"manifest says {manifest.width}x{manifest.height}"
        )
    return arr


def _build_slide(manifest: SlideManifest, cfg: SamplerConfig, patches_dir: Path) -> list[PatchRecord]:
    base = _load_base_image(manifest)
    records = []
    for pt_idx, center in enumerate(sample_points(manifest, cfg)):
        views = extract_views(base, manifest.base_objective_power, center, cfg.patch_size)
        for level in levels_for_base(manifest.base_objective_power):
            patch = views[level]
            patch_id = f"{manifest.slide_id}-p{pt_idx:02d}-{level.label}"
            image_path = patches_dir / f"{patch_id}.png"
            Image.fromarray(patch).save(image_path, format="PNG")
            records.append(PatchRecord(
                patch_id=patch_id,
                slide_id=manifest.slide_id,
                level=level,
                center_x=center[0],
                center_y=center[1],
                size=cfg.patch_size,
                image_path=image_path,
            ))
    return records


INDEX_HEADER = ["patch_id", "slide_id", "level", "center_x", "center_y", "size", "image_path"]


def write_index(records: list[PatchRecord], path: Path | str, relative_to: Path | None = None) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(INDEX_HEADER)
        for r in records:
            img = r.image_path.relative_to(relative_to) if relative_to else r.image_path
            writer.writerow([r.patch_id, r.slide_id, r.level.label,
                             r.center_x, r.center_y, r.size, str(img)])


def read_index(path: Path | str) -> list[PatchRecord]:
    path = Path(path)
    records = []
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INDEX_HEADER:
            raise ManifestError(f"{path}: unexpected index header {reader.fieldnames}")
        for row in reader:
            image_path = Path(row["image_path"])
            if not image_path.is_absolute():
                image_path = path.parent / image_path
            records.append(PatchRecord(
                patch_id=row["patch_id"],
                slide_id=row["slide_id"],
                level=MagLevel.from_label(row["level"]),
                center_x=int(row["center_x"]),
                center_y=int(row["center_y"]),
                size=int(row["size"]),
                image_path=image_path,
            ))
    return records


def build_dataset(manifests: list[SlideManifest], cfg: SamplerConfig,
                  out_dir: Path | str, threads: int = 1) -> list[PatchRecord]:
    """Extract every (point, level) snapshot for every slide.

    Writes ``patches/*.png`` plus ``index.csv`` under ``out_dir``. Per-slide
    work is independent and may run on several threads; the index and the
    patch bytes are a pure function of (manifests, cfg). On failure the
    partially written patches directory and index are removed.
    """
    if not manifests:
        raise ValueError("no slides to build a dataset from")
    ids = [m.slide_id for m in manifests]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate slide_id in manifests")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    patches_dir = out_dir / "patches"
    index_path = out_dir / "index.csv"
    patches_dir.mkdir(exist_ok=True)
    try:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                per_slide = list(pool.map(
                    lambda m: _build_slide(m, cfg, patches_dir), manifests))
        else:
            per_slide = [_build_slide(m, cfg, patches_dir) for m in manifests]
        records = [rec for slide_records in per_slide for rec in slide_records]
        write_index(records, index_path, relative_to=out_dir)
    except Exception:
        shutil.rmtree(patches_dir, ignore_errors=True)
        index_path.unlink(missing_ok=True)
        raise
    return records
