#!/usr/bin/env python3
"""Export DenseNet121, truncated at its global-average-pool, to ONNX.

Walks the torchvision module tree and emits the corresponding ONNX nodes
(Conv / BatchNormalization / Relu / MaxPool / AveragePool / Concat /
GlobalAveragePool / Flatten) with the weights as float32 initializers, so
the tapped ``features`` output is the 1024-wide pooled vector, not the
1000-way classifier head. Alongside the model it writes a SHA-256
checksum manifest and a golden-activation file: five fixed random inputs
with the source framework's outputs, for end-to-end verification of any
loader within 1e-4.

Usage:
    export_densenet.py --out model.onnx --golden golden.json
                       [--weights imagenet|random|/path/to/state_dict.pt]
                       [--seed 0] [--opset 13]

``imagenet`` (the default) needs the torchvision weight download to be
reachable; ``random`` draws a seeded initialization instead, which keeps
every structural and numerical property testable in offline environments.
Export is deterministic: equal weights give byte-identical files.
"""

from __future__ import annotations

import argparse
import base64
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torchvision.models import densenet121

from magscope.onnx_io import FLOAT32, OnnxGraph, OnnxNode, OnnxValueInfo, encode_model

INPUT_NAME = "input"
OUTPUT_NAME = "features"
GOLDEN_COUNT = 5
GOLDEN_SEED = 20240


class ExportError(RuntimeError):
    pass


class _GraphBuilder:
    def __init__(self):
        self.nodes: list[OnnxNode] = []
        self.initializers: dict[str, np.ndarray] = {}
        self.counter = 0

    def fresh(self, stem: str) -> str:
        self.counter += 1
        return f"{stem}_{self.counter}"

    def weight(self, name: str, tensor: torch.Tensor) -> str:
        self.initializers[name] = tensor.detach().cpu().numpy().astype(np.float32)
        return name

    def conv(self, x: str, module: nn.Conv2d, prefix: str) -> str:
        if module.groups != 1:
            raise ExportError(f"{prefix}: grouped convolutions are not part of this backbone")
        out = self.fresh(prefix)
        inputs = [x, self.weight(f"{prefix}.weight", module.weight)]
        if module.bias is not None:
            inputs.append(self.weight(f"{prefix}.bias", module.bias))
        self.nodes.append(OnnxNode("Conv", inputs, [out], name=prefix, attrs={
            "kernel_shape": [int(k) for k in module.kernel_size],
            "strides": [int(s) for s in module.stride],
            "pads": [int(module.padding[0]), int(module.padding[1]),
                     int(module.padding[0]), int(module.padding[1])],
            "dilations": [int(d) for d in module.dilation],
            "group": 1,
        }))
        return out

    def batchnorm(self, x: str, module: nn.BatchNorm2d, prefix: str) -> str:
        out = self.fresh(prefix)
        self.nodes.append(OnnxNode("BatchNormalization", [
            x,
            self.weight(f"{prefix}.scale", module.weight),
            self.weight(f"{prefix}.shift", module.bias),
            self.weight(f"{prefix}.mean", module.running_mean),
            self.weight(f"{prefix}.var", module.running_var),
        ], [out], name=prefix, attrs={"epsilon": float(module.eps)}))
        return out

    def relu(self, x: str, prefix: str) -> str:
        out = self.fresh(prefix)
        self.nodes.append(OnnxNode("Relu", [x], [out], name=prefix))
        return out

    def maxpool(self, x: str, module: nn.MaxPool2d, prefix: str) -> str:
        out = self.fresh(prefix)
        k, s, p = int(module.kernel_size), int(module.stride), int(module.padding)
        self.nodes.append(OnnxNode("MaxPool", [x], [out], name=prefix, attrs={
            "kernel_shape": [k, k], "strides": [s, s], "pads": [p, p, p, p]}))
        return out

    def avgpool(self, x: str, module: nn.AvgPool2d, prefix: str) -> str:
        out = self.fresh(prefix)
        k, s = int(module.kernel_size), int(module.stride)
        self.nodes.append(OnnxNode("AveragePool", [x], [out], name=prefix, attrs={
            "kernel_shape": [k, k], "strides": [s, s]}))
        return out

    def concat(self, xs: list[str], prefix: str) -> str:
        if len(xs) == 1:
            return xs[0]
        out = self.fresh(prefix)
        self.nodes.append(OnnxNode("Concat", xs, [out], name=prefix, attrs={"axis": 1}))
        return out


def build_graph(model: nn.Module) -> OnnxGraph:
    """Translate torchvision's densenet121 feature tower plus the pool tap."""
    b = _GraphBuilder()
    x = INPUT_NAME
    for name, module in model.features.named_children():
        prefix = f"features.{name}"
        if isinstance(module, nn.Conv2d):
            x = b.conv(x, module, prefix)
        elif isinstance(module, nn.BatchNorm2d):
            x = b.batchnorm(x, module, prefix)
        elif isinstance(module, nn.ReLU):
            x = b.relu(x, prefix)
        elif isinstance(module, nn.MaxPool2d):
            x = b.maxpool(x, module, prefix)
        elif isinstance(module, nn.AvgPool2d):
            x = b.avgpool(x, module, prefix)
        elif module.__class__.__name__ == "_DenseBlock":
            tensors = [x]
            for layer_name, layer in module.named_children():
                lp = f"{prefix}.{layer_name}"
                h = b.concat(tensors, f"{lp}.concat")
                h = b.batchnorm(h, layer.norm1, f"{lp}.norm1")
                h = b.relu(h, f"{lp}.relu1")
                h = b.conv(h, layer.conv1, f"{lp}.conv1")
                h = b.batchnorm(h, layer.norm2, f"{lp}.norm2")
                h = b.relu(h, f"{lp}.relu2")
                h = b.conv(h, layer.conv2, f"{lp}.conv2")
                tensors.append(h)
            x = b.concat(tensors, f"{prefix}.concat")
        elif module.__class__.__name__ == "_Transition":
            x = b.batchnorm(x, module.norm, f"{prefix}.norm")
            x = b.relu(x, f"{prefix}.relu")
            x = b.conv(x, module.conv, f"{prefix}.conv")
            x = b.avgpool(x, module.pool, f"{prefix}.pool")
        else:
            raise ExportError(f"unexpected module {type(module).__name__} at {prefix}")
    # tap: relu on the final norm output, pool globally, flatten to N x 1024
    x = b.relu(x, "tap.relu")
    pooled = b.fresh("tap.pool")
    b.nodes.append(OnnxNode("GlobalAveragePool", [x], [pooled], name="tap.pool"))
    b.nodes.append(OnnxNode("Flatten", [pooled], [OUTPUT_NAME], name="tap.flatten",
                            attrs={"axis": 1}))
    return OnnxGraph(
        name="densenet121-pool-features",
        nodes=b.nodes,
        initializers=b.initializers,
        inputs=[OnnxValueInfo(INPUT_NAME, FLOAT32, ["N", 3, 224, 224])],
        outputs=[OnnxValueInfo(OUTPUT_NAME, FLOAT32, ["N", 1024])],
    )


class PooledDenseNet(nn.Module):
    """Reference forward for golden activations: features -> relu -> GAP."""

    def __init__(self, model: nn.Module):
        super().__init__()
        self.features = model.features

    def forward(self, x):
        h = torch.relu(self.features(x))
        h = torch.nn.functional.adaptive_avg_pool2d(h, (1, 1))
        return torch.flatten(h, 1)


def materialize_model(weights: str, seed: int) -> nn.Module:
    if weights == "imagenet":
        try:
            from torchvision.models import DenseNet121_Weights
            model = densenet121(weights=DenseNet121_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise ExportError(
                f"could not obtain the pretrained weights ({exc}); pass "
                f"--weights /path/to/state_dict.pt or --weights random") from exc
    elif weights == "random":
        torch.manual_seed(seed)
        model = densenet121(weights=None)
    else:
        path = Path(weights)
        if not path.exists():
            raise ExportError(f"weights file {path} does not exist")
        model = densenet121(weights=None)
        state = torch.load(path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    return model.eval()


def golden_payload(model: nn.Module, weights_label: str) -> dict:
    rng = np.random.default_rng(GOLDEN_SEED)
    inputs = rng.standard_normal((GOLDEN_COUNT, 3, 224, 224)).astype(np.float32)
    with torch.no_grad():
        outputs = PooledDenseNet(model)(torch.from_numpy(inputs)).numpy().astype(np.float32)

    def pack(array: np.ndarray) -> dict:
        return {"shape": list(array.shape), "dtype": "float32",
                "data": base64.b64encode(array.tobytes()).decode("ascii")}

    return {"inputs": pack(inputs), "outputs": pack(outputs),
            "tolerance": 1e-4, "weights": weights_label,
            "input_name": INPUT_NAME, "output_name": OUTPUT_NAME}


def unpack_golden(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def export(out: Path, golden: Path | None, weights: str = "imagenet",
           seed: int = 0, opset: int = 13) -> str:
    """Write model + checksum (+ golden activations); returns the checksum."""
    if opset < 11:
        raise ExportError(f"opset must be >= 11, got {opset}")
    model = materialize_model(weights, seed)
    data = encode_model(build_graph(model), opset_version=opset,
                        producer="export_densenet")
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(out, data)
    checksum = hashlib.sha256(data).hexdigest()
    _atomic_write(out.with_suffix(out.suffix + ".sha256"),
                  f"{checksum}  {out.name}\n".encode())
    if golden is not None:
        payload = golden_payload(model, weights)
        payload["model_sha256"] = checksum
        _atomic_write(golden, json.dumps(payload).encode())
    return checksum


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, type=Path, help="output ONNX path")
    parser.add_argument("--golden", type=Path, default=None,
                        help="also write golden activations JSON here")
    parser.add_argument("--weights", default="imagenet",
                        help="imagenet | random | path to a state_dict .pt")
    parser.add_argument("--seed", type=int, default=0, help="seed for --weights random")
    parser.add_argument("--opset", type=int, default=13)
    args = parser.parse_args(argv)
    try:
        checksum = export(args.out, args.golden, args.weights, args.seed, args.opset)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out} (sha256 {checksum[:16]}...)")
    if args.golden:
        print(f"wrote {args.golden}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
