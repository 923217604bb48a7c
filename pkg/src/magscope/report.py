"""Report rendering: metrics JSON, fold table CSV, confusion CSV and SVG.

The SVG heatmap mirrors the usual confusion-matrix figure: cells are
shaded by row-normalized rate and annotated with count and percentage.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .evaluation import MetricsReport

_CELL = 86
_PAD_LEFT = 110
_PAD_TOP = 70
_PAD_BOTTOM = 30


def write_report_json(report: MetricsReport, path: Path | str) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")


def load_report_json(path: Path | str) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_folds_csv(report: dict, path: Path | str) -> None:
    """Per-fold metric rows plus an all-folds mean/std summary row."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "n_test", "accuracy", "kappa", "f1"])
        for m in report["per_fold"]:
            writer.writerow([m["fold"] + 1, m["n_test"],
                             f"{m['accuracy']:.6f}", f"{m['kappa']:.6f}", f"{m['f1']:.6f}"])
        mean, std = report["mean"], report["std"]
        writer.writerow(["all", sum(m["n_test"] for m in report["per_fold"]),
                         f"{mean['accuracy']:.6f} ± {std['accuracy']:.6f}",
                         f"{mean['kappa']:.6f} ± {std['kappa']:.6f}",
                         f"{mean['f1']:.6f} ± {std['f1']:.6f}"])


def write_confusion_csv(cm: np.ndarray, labels: list[str], path: Path | str) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["actual\\predicted"] + list(labels))
        for label, row in zip(labels, np.asarray(cm)):
            writer.writerow([label] + [int(v) for v in row])


def _cell_color(rate: float) -> str:
    # white -> deep blue
    r = int(round(255 - 205 * rate))
    g = int(round(255 - 161 * rate))
    b = int(round(255 - 75 * rate))
    return f"#{r:02x}{g:02x}{b:02x}"


def render_heatmap_svg(cm: np.ndarray, labels: list[str], path: Path | str,
                       title: str = "Confusion matrix") -> None:
    cm = np.asarray(cm, dtype=np.int64)
    k = cm.shape[0]
    row_sums = cm.sum(axis=1)
    width = _PAD_LEFT + k * _CELL + 20
    height = _PAD_TOP + k * _CELL + _PAD_BOTTOM
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="Helvetica, Arial, sans-serif">',
        f'<text x="{_PAD_LEFT + k * _CELL / 2}" y="24" text-anchor="middle" '
        f'font-size="16">{title}</text>',
        f'<text x="{_PAD_LEFT + k * _CELL / 2}" y="{_PAD_TOP - 28}" text-anchor="middle" '
        f'font-size="12" fill="#444">predicted</text>',
        f'<text x="22" y="{_PAD_TOP + k * _CELL / 2}" text-anchor="middle" font-size="12" '
        f'fill="#444" transform="rotate(-90 22 {_PAD_TOP + k * _CELL / 2})">actual</text>',
    ]
    for j, label in enumerate(labels):
        x = _PAD_LEFT + j * _CELL + _CELL / 2
        parts.append(f'<text x="{x}" y="{_PAD_TOP - 10}" text-anchor="middle" font-size="12">{label}</text>')
    for i, label in enumerate(labels):
        y = _PAD_TOP + i * _CELL + _CELL / 2 + 4
        parts.append(f'<text x="{_PAD_LEFT - 10}" y="{y}" text-anchor="end" font-size="12">{label}</text>')
    for i in range(k):
        for j in range(k):
            rate = cm[i, j] / row_sums[i] if row_sums[i] else 0.0
            x = _PAD_LEFT + j * _CELL
            y = _PAD_TOP + i * _CELL
            text_fill = "#ffffff" if rate > 0.6 else "#111111"
            parts.append(
                f'<rect x="{x}" y="{y}" width="{_CELL}" height="{_CELL}" '
                f'fill="{_cell_color(rate)}" stroke="#888" stroke-width="0.5"/>')
            parts.append(
                f'<text x="{x + _CELL / 2}" y="{y + _CELL / 2 - 2}" text-anchor="middle" '
                f'font-size="13" fill="{text_fill}">{int(cm[i, j])}</text>')
            parts.append(
                f'<text x="{x + _CELL / 2}" y="{y + _CELL / 2 + 14}" text-anchor="middle" '
                f'font-size="10" fill="{text_fill}">{100 * rate:.1f}%</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts), encoding="utf-8")
