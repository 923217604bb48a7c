"""Magnification levels and their canonical ordering.

Every label in the pipeline is one of five apparent magnifications
(2.5x, 5x, 10x, 20x, 40x). A level is reachable from a slide whose base
objective power is `base` only when `base / power` is a positive integer
downsample factor (1, 2, 4, 8 or 16).
"""

from __future__ import annotations

import enum

from .errors import UnavailableLevelError

VALID_BASE_POWERS = (20.0, 40.0)


class MagLevel(enum.Enum):
    """Apparent magnification of a snapshot."""

    M2_5 = 2.5
    M5 = 5.0
    M10 = 10.0
    M20 = 20.0
    M40 = 40.0

    @property
    def power(self) -> float:
        return self.value

    @property
    def label(self) -> str:
        """Serialized form, e.g. ``"2.5x"``."""
        return f"{self.value:g}x"

    @property
    def ordinal(self) -> int:
        """Position in the canonical report order (0 = 2.5x ... 4 = 40x)."""
        return CANONICAL_ORDER.index(self)

    @classmethod
    def from_label(cls, text: str) -> "MagLevel":
        try:
            return _BY_LABEL[text.strip()]
        except KeyError:
            raise ValueError(f"unknown magnification label {text!r}") from None

    @classmethod
    def from_ordinal(cls, ordinal: int) -> "MagLevel":
        return CANONICAL_ORDER[ordinal]

    def factor(self, base_power: float) -> int:
        """Integer downsample factor relative to a base objective power.

        Raises UnavailableLevelError when this level is finer than the base
        (e.g. 40x requested from a 20x slide).
        """
        if self.power > base_power:
            raise UnavailableLevelError(
                f"{self.label} is unavailable from a {base_power:g}x base layer"
            )
        ratio = base_power / self.power
        factor = int(round(ratio))
        if abs(ratio - factor) > 1e-9 or factor < 1:
            raise UnavailableLevelError(
                f"{base_power:g}x base does not reduce to {self.label} by an integer factor"
            )
        return factor


# Canonical report/label order, lowest magnification first.
CANONICAL_ORDER: tuple[MagLevel, ...] = (
    MagLevel.M2_5,
    MagLevel.M5,
    MagLevel.M10,
    MagLevel.M20,
    MagLevel.M40,
)

CANONICAL_LABELS: tuple[str, ...] = tuple(lv.label for lv in CANONICAL_ORDER)

N_CLASSES = len(CANONICAL_ORDER)

_BY_LABEL = {lv.label: lv for lv in CANONICAL_ORDER}


def levels_for_base(base_power: float) -> tuple[MagLevel, ...]:
    """Levels obtainable from a given base power, canonical order."""
    return tuple(lv for lv in CANONICAL_ORDER if lv.power <= base_power)
