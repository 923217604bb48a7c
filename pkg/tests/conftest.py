"""Shared fixtures: a small on-disk patch corpus and tiny ONNX models."""

from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from magscope.onnx_io import (FLOAT32, OnnxGraph, OnnxNode, OnnxValueInfo,
                              encode_model)
from magscope.pyramid import SamplerConfig, SlideManifest, build_dataset, write_manifest

MINI_PATCH_SIZE = 12
MINI_POINTS = 5


def make_slide_png(path, side: int, seed: int) -> None:
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 256, size=(side // 4, side // 4, 3), dtype=np.uint8)
    img = Image.fromarray(base).resize((side, side), Image.BILINEAR)
    img.save(path)


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """Two 40x-base slides and one 20x-base slide with small patches.

    Yields (records, index_path, manifest_path, out_dir); 70 patches total
    (2 x 5 x 5 + 1 x 5 x 4).
    """
    root = tmp_path_factory.mktemp("mini_corpus")
    side = 256
    slides = []
    for i, base in enumerate([40.0, 40.0, 20.0]):
        png = root / f"m{i}.png"
        make_slide_png(png, side, seed=100 + i)
        slides.append(SlideManifest(f"m{i}", base, side, side, png))
    manifest_path = root / "manifest.jsonl"
    write_manifest(slides, manifest_path)
    cfg = SamplerConfig(points_per_slide=MINI_POINTS, patch_size=MINI_PATCH_SIZE, seed=11)
    records = build_dataset(slides, cfg, root / "ds")
    return records, root / "ds" / "index.csv", manifest_path, root / "ds"


def build_feature_model(output_dim: int, seed: int = 0) -> bytes:
    """input (N,3,224,224) -> GAP -> Flatten -> MatMul(3 x output_dim) -> features."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, output_dim)).astype(np.float32)
    graph = OnnxGraph(
        name="pool-tap",
        nodes=[
            OnnxNode("GlobalAveragePool", ["input"], ["pooled"]),
            OnnxNode("Flatten", ["pooled"], ["flat"], attrs={"axis": 1}),
            OnnxNode("MatMul", ["flat", "proj"], ["features"]),
        ],
        initializers={"proj": w},
        inputs=[OnnxValueInfo("input", FLOAT32, ["N", 3, 224, 224])],
        outputs=[OnnxValueInfo("features", FLOAT32, ["N", output_dim])],
    )
    return encode_model(graph)


@pytest.fixture(scope="session")
def fixture_model_1024(tmp_path_factory):
    path = tmp_path_factory.mktemp("onnx") / "pool1024.onnx"
    path.write_bytes(build_feature_model(1024))
    return path


@pytest.fixture(scope="session")
def fixture_model_1000(tmp_path_factory):
    path = tmp_path_factory.mktemp("onnx") / "head1000.onnx"
    path.write_bytes(build_feature_model(1000))
    return path
