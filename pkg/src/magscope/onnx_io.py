"""Minimal ONNX file reader/writer (protobuf wire format, no dependencies).

Covers the subset of the ONNX schema needed to store and load a
convolutional feature extractor: float32/int64 initializers, node
attributes of type float/int/ints/string, and tensor-typed graph inputs
and outputs with symbolic batch dimensions. Field numbers follow the
public ONNX schema; unknown fields are skipped on read, so files written
by other exporters load as long as they stick to this subset.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelLoadError

# TensorProto.DataType
FLOAT32 = 1
INT64 = 7

# AttributeProto.AttributeType
_ATTR_FLOAT = 1
_ATTR_INT = 2
_ATTR_STRING = 3
_ATTR_FLOATS = 6
_ATTR_INTS = 7


# ---------------------------------------------------------------------------
# wire-format primitives

def _varint(value: int) -> bytes:
    if value < 0:
        value &= (1 << 64) - 1  # two's complement, 10 bytes
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _tag(field_no: int, wire: int) -> bytes:
    return _varint((field_no << 3) | wire)


def _w_varint(field_no: int, value: int) -> bytes:
    return _tag(field_no, 0) + _varint(value)


def _w_bytes(field_no: int, payload: bytes) -> bytes:
    return _tag(field_no, 2) + _varint(len(payload)) + payload


def _w_str(field_no: int, text: str) -> bytes:
    return _w_bytes(field_no, text.encode("utf-8"))


def _w_float(field_no: int, value: float) -> bytes:
    return _tag(field_no, 5) + struct.pack("<f", value)


def _w_packed_varints(field_no: int, values) -> bytes:
    payload = b"".join(_varint(int(v)) for v in values)
    return _w_bytes(field_no, payload)


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise ModelLoadError("truncated varint in model file")
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise ModelLoadError("malformed varint in model file")


def _fields(data: bytes):
    """Yield (field_no, wire_type, value) triples of one message."""
    pos = 0
    while pos < len(data):
        key, pos = _read_varint(data, pos)
        field_no = key >> 3
        wire = key & 7
        if wire == 0:
            value, pos = _read_varint(data, pos)
        elif wire == 1:
            value = data[pos:pos + 8]
            pos += 8
        elif wire == 2:
            size, pos = _read_varint(data, pos)
            value = data[pos:pos + size]
            if len(value) != size:
                raise ModelLoadError("truncated length-delimited field")
            pos += size
        elif wire == 5:
            value = data[pos:pos + 4]
            pos += 4
        else:
            raise ModelLoadError(f"unsupported wire type {wire}")
        yield field_no, wire, value


def _varints_of(payload: bytes) -> list[int]:
    out = []
    pos = 0
    while pos < len(payload):
        v, pos = _read_varint(payload, pos)
        out.append(v)
    return out


# ---------------------------------------------------------------------------
# message model

@dataclass
class OnnxNode:
    op_type: str
    inputs: list[str]
    outputs: list[str]
    name: str = ""
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        # own copies: callers may keep mutating the lists they passed in
        self.inputs = list(self.inputs)
        self.outputs = list(self.outputs)


@dataclass
class OnnxValueInfo:
    name: str
    elem_type: int
    dims: list  # ints, or strings for symbolic dims


@dataclass
class OnnxGraph:
    name: str
    nodes: list[OnnxNode]
    initializers: dict[str, np.ndarray]
    inputs: list[OnnxValueInfo]
    outputs: list[OnnxValueInfo]


@dataclass
class OnnxModel:
    graph: OnnxGraph
    opset_version: int
    ir_version: int
    producer: str = ""


# ---------------------------------------------------------------------------
# writing

def _encode_tensor(name: str, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array)
    if array.dtype == np.float32:
        dtype = FLOAT32
        raw = array.astype("<f4").tobytes()
    elif array.dtype == np.int64:
        dtype = INT64
        raw = array.astype("<i8").tobytes()
    else:
        raise ValueError(f"initializer {name!r}: unsupported dtype {array.dtype}")
    return (_w_packed_varints(1, array.shape)
            + _w_varint(2, dtype)
            + _w_str(8, name)
            + _w_bytes(9, raw))


def _encode_attr(name: str, value) -> bytes:
    body = _w_str(1, name)
    if isinstance(value, bool):
        raise ValueError("use int attributes, not bool")
    if isinstance(value, float):
        body += _w_float(2, value) + _w_varint(20, _ATTR_FLOAT)
    elif isinstance(value, int):
        body += _w_varint(3, value) + _w_varint(20, _ATTR_INT)
    elif isinstance(value, str):
        body += _w_bytes(4, value.encode("utf-8")) + _w_varint(20, _ATTR_STRING)
    elif isinstance(value, (list, tuple)) and all(isinstance(v, int) for v in value):
        body += _w_packed_varints(8, value) + _w_varint(20, _ATTR_INTS)
    elif isinstance(value, (list, tuple)) and all(isinstance(v, float) for v in value):
        body += _w_bytes(7, b"".join(struct.pack("<f", v) for v in value)) + _w_varint(20, _ATTR_FLOATS)
    else:
        raise ValueError(f"attribute {name!r}: unsupported value {value!r}")
    return body


def _encode_node(node: OnnxNode) -> bytes:
    body = b"".join(_w_str(1, s) for s in node.inputs)
    body += b"".join(_w_str(2, s) for s in node.outputs)
    if node.name:
        body += _w_str(3, node.name)
    body += _w_str(4, node.op_type)
    body += b"".join(_w_bytes(5, _encode_attr(k, v)) for k, v in node.attrs.items())
    return body


def _encode_value_info(info: OnnxValueInfo) -> bytes:
    dims = b""
    for d in info.dims:
        if isinstance(d, str):
            dims += _w_bytes(1, _w_str(2, d))
        else:
            dims += _w_bytes(1, _w_varint(1, int(d)))
    tensor_type = _w_varint(1, info.elem_type) + _w_bytes(2, dims)
    type_proto = _w_bytes(1, tensor_type)
    return _w_str(1, info.name) + _w_bytes(2, type_proto)


def _encode_graph(graph: OnnxGraph) -> bytes:
    body = b"".join(_w_bytes(1, _encode_node(n)) for n in graph.nodes)
    body += _w_str(2, graph.name)
    body += b"".join(_w_bytes(5, _encode_tensor(k, v)) for k, v in graph.initializers.items())
    body += b"".join(_w_bytes(11, _encode_value_info(i)) for i in graph.inputs)
    body += b"".join(_w_bytes(12, _encode_value_info(o)) for o in graph.outputs)
    return body


def encode_model(graph: OnnxGraph, opset_version: int = 13,
                 producer: str = "magscope", ir_version: int = 8) -> bytes:
    """Serialize a model; byte output is deterministic for equal inputs."""
    opset = _w_str(1, "") + _w_varint(2, opset_version)
    return (_w_varint(1, ir_version)
            + _w_str(2, producer)
            + _w_str(3, "1.0")
            + _w_bytes(7, _encode_graph(graph))
            + _w_bytes(8, opset))


# ---------------------------------------------------------------------------
# reading

def _decode_tensor(data: bytes) -> tuple[str, np.ndarray]:
    name = ""
    dims: list[int] = []
    dtype = None
    raw = None
    floats = None
    ints = None
    for field_no, wire, value in _fields(data):
        if field_no == 1:
            dims.extend(_varints_of(value) if wire == 2 else [value])
        elif field_no == 2:
            dtype = value
        elif field_no == 4:
            floats = np.frombuffer(value, dtype="<f4") if wire == 2 else None
        elif field_no == 7:
            ints = _varints_of(value) if wire == 2 else [value]
        elif field_no == 8:
            name = value.decode("utf-8")
        elif field_no == 9:
            raw = value
    if dtype == FLOAT32:
        if raw is not None:
            array = np.frombuffer(raw, dtype="<f4")
        elif floats is not None:
            array = floats
        else:
            raise ModelLoadError(f"initializer {name!r}: no float payload")
        return name, array.reshape(dims).copy()
    if dtype == INT64:
        if raw is not None:
            array = np.frombuffer(raw, dtype="<i8")
        elif ints is not None:
            array = np.asarray(ints, dtype=np.int64)
        else:
            raise ModelLoadError(f"initializer {name!r}: no int64 payload")
        return name, array.reshape(dims).copy()
    raise ModelLoadError(f"initializer {name!r}: unsupported data type {dtype}")


def _decode_attr(data: bytes):
    name = ""
    attr_type = None
    f_val = i_val = s_val = None
    floats: list[float] = []
    ints: list[int] = []
    for field_no, wire, value in _fields(data):
        if field_no == 1:
            name = value.decode("utf-8")
        elif field_no == 2:
            f_val = struct.unpack("<f", value)[0]
        elif field_no == 3:
            i_val = value
        elif field_no == 4:
            s_val = value.decode("utf-8", errors="replace")
        elif field_no == 7:
            if wire == 2:
                floats.extend(struct.unpack(f"<{len(value) // 4}f", value))
            else:
                floats.append(struct.unpack("<f", value)[0])
        elif field_no == 8:
            ints.extend(_varints_of(value) if wire == 2 else [value])
        elif field_no == 20:
            attr_type = value
    if attr_type == _ATTR_FLOAT or (attr_type is None and f_val is not None):
        return name, f_val
    if attr_type == _ATTR_INT or (attr_type is None and i_val is not None):
        return name, i_val
    if attr_type == _ATTR_STRING or (attr_type is None and s_val is not None):
        return name, s_val
    if attr_type == _ATTR_INTS or (attr_type is None and ints):
        return name, ints
    if attr_type == _ATTR_FLOATS or (attr_type is None and floats):
        return name, floats
    return name, None


def _decode_node(data: bytes) -> OnnxNode:
    node = OnnxNode(op_type="", inputs=[], outputs=[])
    for field_no, _wire, value in _fields(data):
        if field_no == 1:
            node.inputs.append(value.decode("utf-8"))
        elif field_no == 2:
            node.outputs.append(value.decode("utf-8"))
        elif field_no == 3:
            node.name = value.decode("utf-8")
        elif field_no == 4:
            node.op_type = value.decode("utf-8")
        elif field_no == 5:
            key, attr = _decode_attr(value)
            node.attrs[key] = attr
    return node


def _decode_value_info(data: bytes) -> OnnxValueInfo:
    name = ""
    elem_type = 0
    dims: list = []
    for field_no, _wire, value in _fields(data):
        if field_no == 1:
            name = value.decode("utf-8")
        elif field_no == 2:
            for t_field, _w, t_val in _fields(value):
                if t_field != 1:
                    continue
                for tt_field, _w2, tt_val in _fields(t_val):
                    if tt_field == 1:
                        elem_type = tt_val
                    elif tt_field == 2:
                        for s_field, _w3, s_val in _fields(tt_val):
                            if s_field != 1:
                                continue
                            dim_value = None
                            for d_field, _w4, d_val in _fields(s_val):
                                if d_field == 1:
                                    dim_value = d_val
                                elif d_field == 2 and dim_value is None:
                                    dim_value = d_val.decode("utf-8")
                            dims.append(dim_value)
    return OnnxValueInfo(name=name, elem_type=elem_type, dims=dims)


def _decode_graph(data: bytes) -> OnnxGraph:
    graph = OnnxGraph(name="", nodes=[], initializers={}, inputs=[], outputs=[])
    for field_no, _wire, value in _fields(data):
        if field_no == 1:
            graph.nodes.append(_decode_node(value))
        elif field_no == 2:
            graph.name = value.decode("utf-8")
        elif field_no == 5:
            name, array = _decode_tensor(value)
            graph.initializers[name] = array
        elif field_no == 11:
            graph.inputs.append(_decode_value_info(value))
        elif field_no == 12:
            graph.outputs.append(_decode_value_info(value))
    return graph


def decode_model(data: bytes) -> OnnxModel:
    graph = None
    opset_version = 0
    ir_version = 0
    producer = ""
    try:
        for field_no, _wire, value in _fields(data):
            if field_no == 1:
                ir_version = value
            elif field_no == 2:
                producer = value.decode("utf-8", errors="replace")
            elif field_no == 7:
                graph = _decode_graph(value)
            elif field_no == 8:
                for o_field, _w, o_val in _fields(value):
                    if o_field == 2:
                        opset_version = max(opset_version, o_val)
    except (ModelLoadError, struct.error, UnicodeDecodeError, ValueError) as exc:
        raise ModelLoadError(f"malformed model file: {exc}") from exc
    if graph is None:
        raise ModelLoadError("model file has no graph")
    return OnnxModel(graph=graph, opset_version=opset_version,
                     ir_version=ir_version, producer=producer)
