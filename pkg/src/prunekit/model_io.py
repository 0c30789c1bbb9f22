"""The ``.pmk`` container: dense, sparse-bitmap and 8-bit quantized models.

All integers and floats are little-endian::

    "PMK1"  version:u16  layer_count:u16
    per layer:
        name_len:u16  name:utf-8
        dtype:u8  rank:u8  dims:u32 * rank
        weight payload  bias payload
    crc32:u32            (zlib CRC-32 of every preceding byte)

Weight dtypes:

* ``0`` dense f32: ``prod(dims)`` float32 values.
* ``1`` sparse bitmap: ``ceil(n / 8)`` presence bytes (element ``i`` is bit
  ``7 - i % 8`` of byte ``i // 8``, i.e. MSB first) followed by the nonzero
  float32 values in row-major order. The bias stays dense f32.
* ``2`` q8: ``scale:f32  zero_point:u8  codes:u8 * n``. The bias uses the
  same q8 layout with its own scale and zero point.

The bias length is ``dims[0]`` (the layer's output width). Activations are
not stored: hidden layers are relu and the last layer is identity, which is
the only layout :func:`serialize_dense` accepts.
"""

import gzip
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError, NumericError
from .nn_core import Layer, LayerSpec, Model

MAGIC = b"PMK1"
VERSION = 1
DENSE, SPARSE, Q8 = 0, 1, 2
SPARSE_MIN_ZERO_FRACTION = 0.25
GZIP_LEVEL = 9

VARIANTS = ("pruned", "sparse", "quantized")


@dataclass(frozen=True)
class QuantizedTensor:
    scale: float
    zero_point: int
    values: np.ndarray  # uint8, original shape

    @property
    def shape(self):
        return self.values.shape


@dataclass
class QuantizedLayer:
    spec: LayerSpec
    weight: QuantizedTensor
    bias: QuantizedTensor

    @property
    def name(self):
        return self.spec.name


@dataclass
class QuantizedModel:
    layers: list

    @property
    def in_dim(self):
        return self.layers[0].spec.in_dim

    @property
    def out_dim(self):
        return self.layers[-1].spec.out_dim


@dataclass(frozen=True)
class ModelArtifact:
    variant: str
    payload: bytes
    raw_size: int
    gzip_size: int

    @classmethod
    def from_payload(cls, variant, payload):
        return cls(variant, payload, len(payload), gzip_size(payload))


def gzip_compress(payload):
    """Gzip stream at level 9 with mtime 0 and no file name, so output depends only on input."""
    return gzip.compress(bytes(payload), compresslevel=GZIP_LEVEL, mtime=0)


def gzip_size(payload):
    return len(gzip_compress(payload))


# -- quantization -----------------------------------------------------------

def quantize_tensor(w, *, scale=None, zero_point=None):
    """Per-tensor asymmetric uint8 codes for ``w``.

    ``scale`` and ``zero_point`` are derived from ``[min(0, min w), max(0, max w)]``
    unless both are given. Requantizing dequantized values with the stored
    parameters reproduces the codes exactly; re-deriving the parameters can
    move a saturated code by one, because the rounded zero point shifts the
    representable range.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise NumericError("cannot quantize a tensor with non-finite values")
    if (scale is None) != (zero_point is None):
        raise ValueError("pass both scale and zero_point, or neither")
    if scale is None:
        lo = min(0.0, float(w.min())) if w.size else 0.0
        hi = max(0.0, float(w.max())) if w.size else 0.0
        # round-trip the scale through float32 now, since that is what gets stored
        span = (hi - lo) / 255.0
        if span > float(np.finfo(np.float32).max):
            raise NumericError(f"weight range [{lo}, {hi}] does not fit a float32 scale")
        scale = float(np.float32(span)) if hi > lo else 1.0
        if scale == 0.0:  # subnormal-only range: fall back to the smallest float32 step
            scale = float(np.nextafter(np.float32(0), np.float32(1)))
        zero_point = int(np.clip(np.round(-lo / scale), 0, 255))
    elif not (scale > 0 and 0 <= zero_point <= 255):
        raise ValueError(f"invalid quantization parameters scale={scale}, zero_point={zero_point}")
    codes = np.clip(np.round(w / scale) + zero_point, 0, 255).astype(np.uint8)
    return QuantizedTensor(scale, zero_point, codes)


def dequantize_tensor(q, dtype=np.float32):
    return (q.scale * (q.values.astype(np.float64) - q.zero_point)).astype(dtype)


def quantize(model):
    return QuantizedModel([
        QuantizedLayer(l.spec, quantize_tensor(l.weight), quantize_tensor(l.bias))
        for l in model.layers
    ])


def dequantize(qmodel):
    return Model([
        Layer(l.spec, dequantize_tensor(l.weight), dequantize_tensor(l.bias))
        for l in qmodel.layers
    ])


# -- writing ----------------------------------------------------------------

def _check_activations(layers):
    for k, layer in enumerate(layers):
        want = "identity" if k == len(layers) - 1 else "relu"
        if layer.spec.activation != want:
            raise ValueError(
                f"layer {layer.name!r}: the .pmk format stores {want} for this position, "
                f"got {layer.spec.activation}")


def _finish(parts):
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _header(layers):
    _check_activations(layers)
    return [MAGIC, struct.pack("<HH", VERSION, len(layers))]


def _layer_head(name, dtype, shape):
    raw = name.encode("utf-8")
    return (struct.pack("<H", len(raw)) + raw
            + struct.pack("<BB", dtype, len(shape))
            + struct.pack(f"<{len(shape)}I", *shape))


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _q8(q):
    return struct.pack("<fB", q.scale, q.zero_point) + q.values.astype(np.uint8).tobytes()


def encode_sparse(w):
    """Bitmap + packed nonzero values for one tensor."""
    flat = np.asarray(w, dtype=np.float32).reshape(-1)
    present = flat != 0
    return np.packbits(present).tobytes() + _f32(flat[present])


def serialize_dense(model):
    parts = _header(model.layers)
    for l in model.layers:
        parts += [_layer_head(l.name, DENSE, l.weight.shape), _f32(l.weight), _f32(l.bias)]
    return _finish(parts)


def serialize_sparse(model):
    """Like :func:`serialize_dense`, but weights with >= 25% zeros use the bitmap codec."""
    parts = _header(model.layers)
    for l in model.layers:
        w = l.weight
        if w.size and np.count_nonzero(w == 0) / w.size >= SPARSE_MIN_ZERO_FRACTION:
            parts += [_layer_head(l.name, SPARSE, w.shape), encode_sparse(w)]
        else:
            parts += [_layer_head(l.name, DENSE, w.shape), _f32(w)]
        parts.append(_f32(l.bias))
    return _finish(parts)


def serialize_quantized(qmodel):
    parts = _header(qmodel.layers)
    for l in qmodel.layers:
        parts += [_layer_head(l.name, Q8, l.weight.shape), _q8(l.weight), _q8(l.bias)]
    return _finish(parts)


def build_artifacts(model):
    """The three evaluation artifacts of a trained, pruned model."""
    return {
        "pruned": ModelArtifact.from_payload("pruned", serialize_dense(model)),
        "sparse": ModelArtifact.from_payload("sparse", serialize_sparse(model)),
        "quantized": ModelArtifact.from_payload("quantized", serialize_quantized(quantize(model))),
    }


# -- reading ----------------------------------------------------------------

class _Reader:
    def __init__(self, data):
        self.data = memoryview(bytes(data))
        self.pos = 0
        self.layer = None

    def take(self, n, what):
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}: need {n} bytes, "
                              f"{len(self.data) - self.pos} left", self.pos, self.layer)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


@dataclass(frozen=True)
class LayerRecord:
    """A decoded layer before it is turned into a model."""

    name: str
    dtype: int
    shape: tuple
    weight: object  # float32 ndarray or QuantizedTensor
    bias: object
    offset: int = 0  # first byte of the record (its name length field)
    size: int = 0  # record length in bytes


def _read_f32(r, n, what):
    return np.frombuffer(r.take(4 * n, what), dtype="<f4").astype(np.float32)


def _read_q8(r, n, shape, what):
    offset = r.pos
    scale, zp = r.unpack("<fB", what + " quantization header")
    if not (np.isfinite(scale) and scale > 0):
        raise FormatError(f"invalid {what} scale {scale}", offset, r.layer)
    codes = np.frombuffer(r.take(n, what), dtype=np.uint8).reshape(shape).copy()
    return QuantizedTensor(float(scale), int(zp), codes)


def read_records(data):
    """Decode a container into :class:`LayerRecord` entries."""
    r = _Reader(data)
    if bytes(r.take(4, "magic")) != MAGIC:
        raise FormatError("bad magic", 0)
    version, count = r.unpack("<HH", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if count == 0:
        raise FormatError("container holds no layers", 6)
    records = []
    names = set()
    for index in range(count):
        r.layer = f"#{index}"
        start = r.pos
        (name_len,) = r.unpack("<H", "layer name length")
        try:
            name = bytes(r.take(name_len, "layer name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("layer name is not valid UTF-8", start + 2, r.layer) from None
        if name in names:
            raise FormatError(f"duplicate layer name {name!r}", start, r.layer)
        names.add(name)
        r.layer = name
        offset = r.pos
        dtype, rank = r.unpack("<BB", "tensor header")
        if dtype not in (DENSE, SPARSE, Q8):
            raise FormatError(f"unknown dtype {dtype}", offset, name)
        if rank != 2:
            raise FormatError(f"dense layers need rank-2 weights, got rank {rank}", offset + 1, name)
        shape = r.unpack(f"<{rank}I", "dims")
        if min(shape) == 0:
            raise FormatError(f"zero-sized dimension in {shape}", offset + 2, name)
        n = shape[0] * shape[1]
        if dtype == DENSE:
            weight = _read_f32(r, n, "weights").reshape(shape)
            bias = _read_f32(r, shape[0], "bias")
        elif dtype == SPARSE:
            bitmap = np.frombuffer(r.take((n + 7) // 8, "presence bitmap"), dtype=np.uint8)
            present = np.unpackbits(bitmap)[:n].astype(bool)
            values = _read_f32(r, int(present.sum()), "sparse values")
            flat = np.zeros(n, dtype=np.float32)
            flat[present] = values
            weight = flat.reshape(shape)
            bias = _read_f32(r, shape[0], "bias")
        else:
            weight = _read_q8(r, n, shape, "weights")
            bias = _read_q8(r, shape[0], (shape[0],), "bias")
        records.append(LayerRecord(name, dtype, tuple(shape), weight, bias, start, r.pos - start))
    r.layer = None
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes", r.pos)
    if crc != zlib.crc32(r.data[:body_end]):
        raise FormatError("checksum mismatch", body_end)
    quantized = [rec.dtype == Q8 for rec in records]
    if any(quantized) and not all(quantized):
        raise FormatError("mixed quantized and float layers", 8)
    for prev, rec in zip(records, records[1:]):
        if prev.shape[0] != rec.shape[1]:
            raise FormatError(
                f"layer {rec.name!r} expects {rec.shape[1]} inputs, previous layer gives "
                f"{prev.shape[0]}", 8, rec.name)
    return records


def load(data):
    """Inverse of the serializers: a :class:`Model` or a :class:`QuantizedModel`."""
    records = read_records(data)
    layers = []
    for k, rec in enumerate(records):
        spec = LayerSpec(rec.name, rec.shape[1], rec.shape[0],
                         "identity" if k == len(records) - 1 else "relu")
        cls = QuantizedLayer if rec.dtype == Q8 else Layer
        layers.append(cls(spec, rec.weight, rec.bias))
    if records[0].dtype == Q8:
        return QuantizedModel(layers)
    return Model(layers)


def container_variant(records):
    kinds = {rec.dtype for rec in records}
    if Q8 in kinds:
        return "quantized"
    if SPARSE in kinds:
        return "sparse"
    return "dense"


def as_float_model(loaded):
    """Dequantize when needed so every artifact can run :func:`forward`."""
    return dequantize(loaded) if isinstance(loaded, QuantizedModel) else loaded


# -- files ------------------------------------------------------------------

def atomic_write(path, data):
    """Write ``data`` to ``path`` via a temp file in the same directory."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_artifact(path, payload):
    """Write ``<path>`` and its ``<path>.gz`` sidecar."""
    path = Path(path)
    atomic_write(path, payload)
    atomic_write(path.with_name(path.name + ".gz"), gzip_compress(payload))
    return path
