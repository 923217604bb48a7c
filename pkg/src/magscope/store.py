"""Feature stores: labelled fixed-length vectors, one per patch.

Two on-disk forms. CSV: header ``patch_id,label,f0,...,f{d-1}`` with labels
serialized like the patch index and values at 9 significant digits. Binary
(``.magf``): magic ``MAGF``, u32 version=1, u32 dim, u64 count, then per
record a u32 label ordinal (canonical order) followed by ``dim``
little-endian float32 values; patch ids live in a ``<path>.ids`` sidecar,
one per line, same order.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MagscopeError
from .levels import MagLevel, N_CLASSES

MAGIC = b"MAGF"
VERSION = 1


@dataclass
class FeatureStore:
    patch_ids: list[str]
    labels: np.ndarray  # (n,) int64 class ordinals
    values: np.ndarray  # (n, dim) float32

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float32)
        n = len(self.patch_ids)
        if self.labels.shape != (n,) or self.values.ndim != 2 or self.values.shape[0] != n:
            raise ValueError("patch_ids, labels and values disagree on record count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise ValueError("labels must be canonical class ordinals")

    def __len__(self) -> int:
        return len(self.patch_ids)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def level_labels(self) -> list[str]:
        return [MagLevel.from_ordinal(o).label for o in self.labels]


def ids_sidecar_path(path: Path | str) -> Path:
    return Path(str(path) + ".ids")


def save_magf(store: FeatureStore, path: Path | str) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", VERSION, store.dim, len(store)))
        for ordinal, row in zip(store.labels, store.values):
            fh.write(struct.pack("<I", int(ordinal)))
            fh.write(row.astype("<f4").tobytes())
    ids_sidecar_path(path).write_text("".join(p + "\n" for p in store.patch_ids), encoding="utf-8")


def load_magf(path: Path | str) -> FeatureStore:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise MagscopeError(f"{path}: not a MAGF feature store")
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != VERSION:
        raise MagscopeError(f"{path}: unsupported MAGF version {version}")
    record = 4 + 4 * dim
    expected = 20 + count * record
    if len(data) != expected:
        raise MagscopeError(f"{path}: truncated store ({len(data)} bytes, expected {expected})")
    labels = np.empty(count, dtype=np.int64)
    values = np.empty((count, dim), dtype=np.float32)
    off = 20
    for i in range(count):
        labels[i] = struct.unpack_from("<I", data, off)[0]
        values[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=off + 4)
        off += record
    ids_path = ids_sidecar_path(path)
    if not ids_path.exists():
        raise MagscopeError(f"{ids_path}: patch-id sidecar missing")
    patch_ids = ids_path.read_text(encoding="utf-8").splitlines()
    if len(patch_ids) != count:
        raise MagscopeError(f"{ids_path}: {len(patch_ids)} ids for {count} records")
    return FeatureStore(patch_ids, labels, values)


def save_csv(store: FeatureStore, path: Path | str) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_id", "label"] + [f"f{i}" for i in range(store.dim)])
        for pid, label, row in zip(store.patch_ids, store.level_labels, store.values):
            writer.writerow([pid, label] + [f"{v:.9g}" for v in row])


def load_csv(path: Path | str) -> FeatureStore:
    path = Path(path)
    patch_ids: list[str] = []
    labels: list[int] = []
    rows: list[list[float]] = []
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["patch_id", "label"]:
            raise MagscopeError(f"{path}: unexpected feature CSV header")
        dim = len(header) - 2
        for row in reader:
            if len(row) != dim + 2:
                raise MagscopeError(f"{path}: row for {row[0]!r} has wrong width")
            patch_ids.append(row[0])
            labels.append(MagLevel.from_label(row[1]).ordinal)
            rows.append([float(v) for v in row[2:]])
    values = np.asarray(rows, dtype=np.float32).reshape(len(rows), dim)
    return FeatureStore(patch_ids, np.asarray(labels), values)
