"""Numpy executor for the convolutional op subset used by the deep extractor.

Supports Conv (group 1), BatchNormalization (inference), Relu, MaxPool,
AveragePool, GlobalAveragePool, Concat, Flatten, Add, MatMul and Gemm --
enough for DenseNet-style feature backbones. Convolution is im2col plus
one GEMM per node; intermediate tensors are freed as soon as no later
node references them, which keeps dense concat chains within memory.
"""

from __future__ import annotations

import numpy as np

from .errors import ModelLoadError
from .onnx_io import OnnxGraph, OnnxNode


def _pair(values, default: int) -> tuple[int, int]:
    if not values:
        return default, default
    if len(values) == 1:
        return int(values[0]), int(values[0])
    return int(values[0]), int(values[1])


def _pads(attrs) -> tuple[int, int, int, int]:
    pads = attrs.get("pads")
    if not pads:
        return 0, 0, 0, 0
    if len(pads) == 2:
        return int(pads[0]), int(pads[1]), int(pads[0]), int(pads[1])
    return int(pads[0]), int(pads[1]), int(pads[2]), int(pads[3])


def _window_view(x: np.ndarray, kh: int, kw: int, sh: int, sw: int,
                 dh: int = 1, dw: int = 1) -> np.ndarray:
    """(N, C, kh, kw, Ho, Wo) view-stack of sliding windows over padded input."""
    n, c, h, w = x.shape
    ho = (h - ((kh - 1) * dh + 1)) // sh + 1
    wo = (w - ((kw - 1) * dw + 1)) // sw + 1
    out = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i, j] = x[:, :, i * dh:i * dh + sh * ho:sh, j * dw:j * dw + sw * wo:sw]
    return out


def _op_conv(node: OnnxNode, inputs: list[np.ndarray]) -> np.ndarray:
    x, w = inputs[0], inputs[1]
    bias = inputs[2] if len(inputs) > 2 else None
    if int(node.attrs.get("group", 1)) != 1:
        raise ModelLoadError(f"Conv node {node.name!r}: grouped convolution unsupported")
    sh, sw = _pair(node.attrs.get("strides"), 1)
    dh, dw = _pair(node.attrs.get("dilations"), 1)
    pt, pl, pb, pr = _pads(node.attrs)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    m, c, kh, kw = w.shape
    cols = _window_view(xp, kh, kw, sh, sw, dh, dw)
    n, _, _, _, ho, wo = cols.shape
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    w2d = w.reshape(m, c * kh * kw)
    out = np.matmul(w2d[None], cols).reshape(n, m, ho, wo)
    if bias is not None:
        out += bias.reshape(1, m, 1, 1)
    return out


def _op_maxpool(node: OnnxNode, inputs: list[np.ndarray]) -> np.ndarray:
    x = inputs[0]
    kh, kw = _pair(node.attrs["kernel_shape"], 1)
    sh, sw = _pair(node.attrs.get("strides"), 1)
    pt, pl, pb, pr = _pads(node.attrs)
    if int(node.attrs.get("ceil_mode", 0)):
        raise ModelLoadError(f"MaxPool node {node.name!r}: ceil_mode unsupported")
    lowest = np.finfo(x.dtype).min if x.dtype.kind == "f" else np.iinfo(x.dtype).min
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=lowest)
    return _window_view(xp, kh, kw, sh, sw).max(axis=(2, 3))


def _op_avgpool(node: OnnxNode, inputs: list[np.ndarray]) -> np.ndarray:
    x = inputs[0]
    kh, kw = _pair(node.attrs["kernel_shape"], 1)
    sh, sw = _pair(node.attrs.get("strides"), 1)
    pt, pl, pb, pr = _pads(node.attrs)
    if (pt, pl, pb, pr) != (0, 0, 0, 0) and not int(node.attrs.get("count_include_pad", 0)):
        raise ModelLoadError(f"AveragePool node {node.name!r}: padded exclude-pad averaging unsupported")
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    return _window_view(xp, kh, kw, sh, sw).mean(axis=(2, 3))


def _op_batchnorm(node: OnnxNode, inputs: list[np.ndarray]) -> np.ndarray:
    x, scale, shift, mean, var = inputs[:5]
    eps = float(node.attrs.get("epsilon", 1e-5))
    inv = (scale / np.sqrt(var + eps)).astype(x.dtype)
    off = (shift - mean * inv).astype(x.dtype)
    return x * inv.reshape(1, -1, 1, 1) + off.reshape(1, -1, 1, 1)


def _op_gemm(node: OnnxNode, inputs: list[np.ndarray]) -> np.ndarray:
    a, b = inputs[0], inputs[1]
    if int(node.attrs.get("transA", 0)):
        a = a.T
    if int(node.attrs.get("transB", 0)):
        b = b.T
    out = float(node.attrs.get("alpha", 1.0)) * (a @ b)
    if len(inputs) > 2:
        out = out + float(node.attrs.get("beta", 1.0)) * inputs[2]
    return out


_OPS = {
    "Conv": _op_conv,
    "BatchNormalization": _op_batchnorm,
    "Relu": lambda node, ins: np.maximum(ins[0], 0),
    "MaxPool": _op_maxpool,
    "AveragePool": _op_avgpool,
    "GlobalAveragePool": lambda node, ins: ins[0].mean(axis=(2, 3), keepdims=True),
    "Concat": lambda node, ins: np.concatenate(ins, axis=int(node.attrs.get("axis", 1))),
    "Flatten": lambda node, ins: ins[0].reshape(ins[0].shape[0], -1),
    "Add": lambda node, ins: ins[0] + ins[1],
    "MatMul": lambda node, ins: ins[0] @ ins[1],
}


def run_graph(graph: OnnxGraph, feeds: dict[str, np.ndarray],
              output_names: list[str]) -> list[np.ndarray]:
    """Execute nodes in file order and return the requested tensors."""
    values: dict[str, np.ndarray] = {}
    for name, tensor in graph.initializers.items():
        values[name] = tensor
    for name, tensor in feeds.items():
        values[name] = np.asarray(tensor, dtype=np.float32)

    keep = set(graph.initializers) | set(feeds) | set(output_names)
    last_use: dict[str, int] = {}
    for i, node in enumerate(graph.nodes):
        for name in node.inputs:
            last_use[name] = i

    for i, node in enumerate(graph.nodes):
        op = _OPS.get(node.op_type)
        if op is None:
            raise ModelLoadError(f"unsupported op {node.op_type!r} (node {node.name!r})")
        try:
            ins = [values[name] for name in node.inputs]
        except KeyError as exc:
            raise ModelLoadError(f"node {node.name!r}: missing input {exc}") from exc
        out = op(node, ins)
        outs = out if isinstance(out, tuple) else (out,)
        for name, tensor in zip(node.outputs, outs):
            values[name] = tensor
        for name in node.inputs:
            if last_use.get(name) == i and name not in keep:
                values.pop(name, None)

    missing = [name for name in output_names if name not in values]
    if missing:
        raise ModelLoadError(f"graph did not produce outputs {missing}")
    return [values[name] for name in output_names]
