"""Synthetic multi-scale slide textures.

Generates desk-scale stand-ins for scanned slides: layered value noise
whose octave wavelengths span roughly 4 px to 512 px at 40x. Wavelengths
are defined in 40x-equivalent units and scaled by ``base_power / 40``, so
a 20x-base slide carries the same physical structure at half the pixel
pitch. That makes the apparent magnification of a patch, not the
downsample factor used to cut it, determine its texture statistics -- the
property the classifiers must pick up.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .seeding import spawn_rng
from .levels import VALID_BASE_POWERS

# Octave wavelengths in 40x pixels and their amplitudes. The amplitude bump
# around 64 px breaks the scale self-similarity of plain fractal noise:
# every downsample factor then sees a different fine-to-coarse energy ratio,
# which is what keeps neighbouring magnifications statistically separable.
OCTAVE_WAVELENGTHS_40X = (4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0)
OCTAVE_AMPLITUDES = (0.4, 0.7, 1.2, 2.0, 2.6, 2.0, 1.2, 0.7)

# Per-slide variation: the characteristic grain size shifts by up to about
# a third of an octave and octave amplitudes jitter mildly, so class
# manifolds overlap at neighbouring magnifications the way tissues with
# different feature sizes do. Both draws come from the slide's own stream.
GRAIN_SHIFT_OCTAVES = 0.22
AMPLITUDE_JITTER_SIGMA = 0.15

TARGET_STD = 42.0

MIN_SLIDE_SIDE = 16 * 224  # every level's window must fit a default patch


def _resize_bilinear(field: np.ndarray, height: int, width: int) -> np.ndarray:
    img = Image.fromarray(field, mode="F").resize((width, height), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32)


def synth_slide_pixels(slide_id: str, width: int, height: int, seed: int,
                       base_power: float = 40.0) -> np.ndarray:
    """Render the deterministic base image of a synthetic slide.

    Octaves are accumulated coarse to fine, each drawn at its own grid
    resolution and bilinearly upsampled, so only the final interpolation
    touches full resolution. Returns an (H, W, 3) uint8 array. Identical
    (slide_id, dims, seed, base_power) always reproduce identical pixels;
    the per-slide stream is derived from the master seed and the slide id,
    so batch generation order does not matter.
    """
    if base_power not in VALID_BASE_POWERS:
        raise ValueError(f"base_power must be one of {VALID_BASE_POWERS}, got {base_power}")
    if width < MIN_SLIDE_SIDE or height < MIN_SLIDE_SIDE:
        raise ValueError(
            f"slide dimensions {width}x{height} too small: each side must be "
            f">= {MIN_SLIDE_SIDE} px (16 x default patch size 224) so all "
            f"magnification windows fit"
        )

    rng = spawn_rng(seed, "synth", slide_id)
    scale = base_power / 40.0
    grain = 2.0 ** rng.uniform(-GRAIN_SHIFT_OCTAVES, GRAIN_SHIFT_OCTAVES)
    amplitudes = [a * float(np.exp(rng.normal(0.0, AMPLITUDE_JITTER_SIGMA)))
                  for a in OCTAVE_AMPLITUDES]
    norm = float(np.sqrt(sum(a * a for a in amplitudes) / 3.0))
    coarse_to_fine = sorted(zip(OCTAVE_WAVELENGTHS_40X, amplitudes), reverse=True)

    out = np.empty((height, width, 3), dtype=np.uint8)
    for ch in range(3):
        field: np.ndarray | None = None
        for wavelength, amp in coarse_to_fine:
            lam = wavelength * scale * grain
            gh = int(np.ceil(height / lam))
            gw = int(np.ceil(width / lam))
            octave = np.float32(amp) * rng.uniform(-1.0, 1.0, size=(gh, gw)).astype(np.float32)
            field = octave if field is None else _resize_bilinear(field, gh, gw) + octave
        pix = 127.5 + (TARGET_STD / norm) * _resize_bilinear(field, height, width)
        np.clip(pix, 0.0, 255.0, out=pix)
        out[:, :, ch] = np.floor(pix + 0.5).astype(np.uint8)
    return out
