"""FRCM binary model container. See ``docs/model_format.md`` for the layout."""

import struct
import zlib
from pathlib import Path

import numpy as np

from .model import (LRN, Conv, Dropout, Flatten, FullyConnected, MaxPool, ModelGraph, ReLU,
                    is_trainable)
from .nn import ConvParams, LrnParams

MAGIC = b"FRCM"
FORMAT_VERSION = 1

KIND_IDS = {Conv: 1, ReLU: 2, LRN: 3, MaxPool: 4, FullyConnected: 5, Dropout: 6, Flatten: 7}


class ModelFormatError(ValueError):
    """Base class for model file parse failures."""


class NotAModelFileError(ModelFormatError):
    pass


class CorruptModelError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


def _encode_layer(layer):
    kind = KIND_IDS[type(layer)]
    head = struct.pack("<B", kind)
    if isinstance(layer, Conv):
        p = layer.params
        return head + struct.pack("<6I", p.in_channels, p.out_channels, p.kernel_h, p.kernel_w,
                                  p.stride, p.padding)
    if isinstance(layer, LRN):
        p = layer.params
        return head + struct.pack("<dIdd", p.k, p.n, p.alpha, p.beta)
    if isinstance(layer, MaxPool):
        return head + struct.pack("<2I", layer.kernel, layer.stride)
    if isinstance(layer, FullyConnected):
        return head + struct.pack("<2I", layer.in_features, layer.out_features)
    if isinstance(layer, Dropout):
        return head + struct.pack("<d", layer.p)
    return head


def encode_model(graph):
    meta = bytearray()
    meta += struct.pack("<3I", *graph.input_shape)
    if graph.input_mean is None:
        meta += struct.pack("<B", 0)
    else:
        meta += struct.pack("<B", 1)
        meta += np.asarray(graph.input_mean, dtype="<f4").tobytes()
    meta += struct.pack("<I", len(graph.labels))
    for label in graph.labels:
        raw = label.encode("utf-8")
        meta += struct.pack("<I", len(raw)) + raw
    meta += struct.pack("<I", len(graph.layers))
    for layer in graph.layers:
        meta += _encode_layer(layer)

    payload = b"".join(
        np.ascontiguousarray(t, dtype="<f4").tobytes()
        for i in graph.trainable_indices() for t in graph.params[i])

    out = bytearray(MAGIC)
    out += struct.pack("<HI", FORMAT_VERSION, len(meta))
    out += meta
    out += struct.pack("<Q", len(payload))
    out += payload
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def save_model(graph, path=None):
    """Serialise ``graph``; writes to ``path`` when given. Returns the bytes."""
    data = encode_model(graph)
    if path is not None:
        Path(path).write_bytes(data)
    return data


class _Reader:
    def __init__(self, data, start, end):
        self.data = data
        self.pos = start
        self.end = end

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > self.end:
            raise CorruptModelError(f"truncated metadata at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, size):
        if size < 0 or self.pos + size > self.end:
            raise CorruptModelError(f"truncated metadata at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk


def _decode_layer(rd):
    (kind,) = rd.take("<B")
    if kind == 1:
        return Conv(ConvParams(*rd.take("<6I")))
    if kind == 2:
        return ReLU()
    if kind == 3:
        k, n, alpha, beta = rd.take("<dIdd")
        return LRN(LrnParams(k, n, alpha, beta))
    if kind == 4:
        return MaxPool(*rd.take("<2I"))
    if kind == 5:
        return FullyConnected(*rd.take("<2I"))
    if kind == 6:
        return Dropout(*rd.take("<d"))
    if kind == 7:
        return Flatten()
    raise CorruptModelError(f"unknown layer kind id {kind}")


def load_model(data):
    """Parse FRCM bytes (or a path) into a float32 :class:`ModelGraph`."""
    if isinstance(data, (str, Path)):
        data = Path(data).read_bytes()
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise NotAModelFileError("not a model file (bad magic)")
    if len(data) < 10:
        raise CorruptModelError("truncated header")
    version, meta_len = struct.unpack_from("<HI", data, 4)
    if version > FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported version {version} (this build reads up to {FORMAT_VERSION})")
    if len(data) < 14:
        raise CorruptModelError("truncated file")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CorruptModelError("corrupt model file: checksum mismatch")

    meta_start = 10
    meta_end = meta_start + meta_len
    if meta_end + 8 > len(data) - 4:
        raise CorruptModelError("metadata block overruns the file")
    try:
        rd = _Reader(data, meta_start, meta_end)
        input_shape = rd.take("<3I")
        (has_mean,) = rd.take("<B")
        mean = None
        if has_mean:
            mean = tuple(float(v) for v in np.frombuffer(rd.raw(4 * input_shape[0]), dtype="<f4"))
        (n_labels,) = rd.take("<I")
        labels = []
        for _ in range(n_labels):
            (size,) = rd.take("<I")
            labels.append(rd.raw(size).decode("utf-8"))
        (n_layers,) = rd.take("<I")
        layers = [_decode_layer(rd) for _ in range(n_layers)]
        if rd.pos != meta_end:
            raise CorruptModelError("metadata length does not match its contents")

        (payload_len,) = struct.unpack_from("<Q", data, meta_end)
        payload_start = meta_end + 8
        if payload_start + payload_len != len(data) - 4:
            raise CorruptModelError("payload length does not match file size")
        payload = np.frombuffer(data, dtype="<f4", count=payload_len // 4, offset=payload_start)
        params = {}
        pos = 0
        for i, layer in enumerate(layers):
            if not is_trainable(layer):
                continue
            tensors = []
            for shape in layer.param_shapes():
                size = int(np.prod(shape))
                if pos + size > payload.size:
                    raise CorruptModelError("payload shorter than the layer table declares")
                tensors.append(payload[pos:pos + size].astype(np.float32).reshape(shape))
                pos += size
            params[i] = tensors
        if pos * 4 != payload_len:
            raise CorruptModelError("payload longer than the layer table declares")
        return ModelGraph(layers, labels, input_shape, params, mean, np.float32)
    except CorruptModelError:
        raise
    except (ValueError, UnicodeDecodeError, struct.error) as exc:
        raise CorruptModelError(f"invalid model contents: {exc}") from exc


def describe(graph):
    """Human-readable layer table and label list."""
    lines = [f"input {'x'.join(map(str, graph.input_shape))}"]
    shapes = graph.layer_shapes()
    for i, layer in enumerate(graph.layers):
        n_params = sum(t.size for t in graph.params.get(i, []))
        detail = ""
        if isinstance(layer, Conv):
            p = layer.params
            detail = f"{p.out_channels}@{p.kernel_h}x{p.kernel_w} s{p.stride} p{p.padding}"
        elif isinstance(layer, LRN):
            p = layer.params
            detail = f"k={p.k:g} n={p.n} alpha={p.alpha:g} beta={p.beta:g}"
        elif isinstance(layer, MaxPool):
            detail = f"{layer.kernel}x{layer.kernel} s{layer.stride}"
        elif isinstance(layer, FullyConnected):
            detail = f"{layer.in_features}->{layer.out_features}"
        elif isinstance(layer, Dropout):
            detail = f"p={layer.p:g}"
        out = "x".join(map(str, shapes[i + 1]))
        lines.append(f"{i:3d} {layer.kind:<8} {detail:<24} out {out:<12} params {n_params}")
    lines.append(f"total parameters {graph.parameter_count()}")
    lines.append("labels: " + ", ".join(graph.labels))
    return "\n".join(lines)
