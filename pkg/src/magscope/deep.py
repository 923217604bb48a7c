"""Deep embeddings from a pretrained backbone's pooled features.

The model arrives as an ONNX file exposing float32 ``input`` of shape
N x 3 x 224 x 224 and float32 ``features`` of shape N x 1024 -- the
global-average-pool output of the network, not its classifier head.
Weights are never updated here: feature extraction stays separate from
classifier training.

Preprocessing resizes to 224 x 224 when needed and subtracts the
per-image per-channel mean, so every tensor fed to the network has zero
channel means. No variance scaling and no 1/255 normalization is applied.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MagscopeError, ModelLoadError, WrongOutputDimError
from .onnx_exec import run_graph
from .onnx_io import OnnxModel, decode_model
from .pyramid import PatchRecord
from .store import FeatureStore
from .validation import check_rgb8

log = logging.getLogger(__name__)

EXPECTED_INPUT_HW = (224, 224)
EXPECTED_OUTPUT_DIM = 1024


@dataclass(frozen=True)
class PreprocessSpec:
    target: tuple[int, int] = EXPECTED_INPUT_HW
    # per-image per-channel mean subtraction; no scaling


@dataclass
class ModelHandle:
    model_path: Path
    input_name: str
    output_name: str
    model: OnnxModel
    output_dim: int

    def run(self, batch: np.ndarray) -> np.ndarray:
        (out,) = run_graph(self.model.graph, {self.input_name: batch}, [self.output_name])
        return np.asarray(out, dtype=np.float32)


def load_model(model_path: Path | str, input_name: str = "input",
               output_name: str = "features") -> ModelHandle:
    """Parse and validate the model, including a dummy forward pass.

    Distinct failures: missing file (FileNotFoundError), malformed graph
    (ModelLoadError), wrong tapped-output width (WrongOutputDimError).
    """
    model_path = Path(model_path)
    if not model_path.exists():
        raise FileNotFoundError(f"model file {model_path} does not exist")
    model = decode_model(model_path.read_bytes())
    graph = model.graph
    graph_inputs = {i.name for i in graph.inputs}
    graph_outputs = {o.name for o in graph.outputs}
    if input_name not in graph_inputs:
        raise ModelLoadError(f"{model_path}: graph has inputs {sorted(graph_inputs)}, not {input_name!r}")
    if output_name not in graph_outputs:
        raise ModelLoadError(f"{model_path}: graph has outputs {sorted(graph_outputs)}, not {output_name!r}")

    dummy = np.zeros((1, 3) + EXPECTED_INPUT_HW, dtype=np.float32)
    (out,) = run_graph(graph, {input_name: dummy}, [output_name])
    if out.ndim != 2 or out.shape[1] != EXPECTED_OUTPUT_DIM:
        raise WrongOutputDimError(
            f"{model_path}: tapped output {output_name!r} has shape {out.shape}, "
            f"expected (N, {EXPECTED_OUTPUT_DIM}); is it the pooling layer, not the head?")
    return ModelHandle(model_path=model_path, input_name=input_name,
                       output_name=output_name, model=model, output_dim=out.shape[1])


def preprocess(image: np.ndarray, spec: PreprocessSpec = PreprocessSpec()) -> np.ndarray:
    """8-bit RGB patch -> zero-channel-mean float tensor (1, 3, H, W)."""
    image = check_rgb8(image)
    th, tw = spec.target
    if image.shape[:2] != (th, tw):
        image = np.asarray(Image.fromarray(image).resize((tw, th), Image.BILINEAR))
    tensor = image.astype(np.float64).transpose(2, 0, 1)
    tensor -= tensor.mean(axis=(1, 2), keepdims=True)
    return tensor[None].astype(np.float32)


def extract_deep_batch(records: list[PatchRecord], handle: ModelHandle,
                       spec: PreprocessSpec = PreprocessSpec(), batch_size: int = 8,
                       log_every: int = 64) -> FeatureStore:
    """One pooled embedding per patch, index order, batched inference.

    Results are reproducible across runs and batch-size choices to 1e-4
    per component (a single float32 graph evaluation per batch).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    start = time.monotonic()
    values = np.zeros((len(records), handle.output_dim), dtype=np.float32)
    for lo in range(0, len(records), batch_size):
        chunk = records[lo:lo + batch_size]
        tensors = []
        for record in chunk:
            try:
                image = np.asarray(Image.open(record.image_path).convert("RGB"))
            except (OSError, ValueError) as exc:
                raise MagscopeError(
                    f"patch {record.patch_id!r}: cannot read {record.image_path} ({exc})") from exc
            tensors.append(preprocess(image, spec))
        batch = np.concatenate(tensors, axis=0)
        try:
            values[lo:lo + len(chunk)] = handle.run(batch)
        except Exception as exc:
            raise MagscopeError(
                f"inference failed on batch starting at patch "
                f"{chunk[0].patch_id!r}: {exc}") from exc
        done = min(lo + batch_size, len(records))
        if done % log_every < batch_size or done == len(records):
            elapsed = max(time.monotonic() - start, 1e-9)
            log.info("deep features: %d/%d patches (%.2f patches/s)", done, len(records), done / elapsed)
    labels = np.array([r.level.ordinal for r in records], dtype=np.int64)
    return FeatureStore([r.patch_id for r in records], labels, values)
