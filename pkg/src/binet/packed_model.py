"""Deployment form of a trained network and its binary file format.

Binary layers are stored as packed sign bits plus an integer shift; the
first and last layers keep float32 weights; batch norm is stored as the
per-channel affine ``(x - mean) * scale + beta``.

The executor keeps binary-layer outputs as integer accumulators.  A
non-negative shift is applied as a left shift straight away; a negative
shift is deferred and folded into the next batch norm
(``mean * 2**-s``, ``scale * 2**s``), which gives bit-identical results to
scaling first.

File layout (little-endian)::

    "BNET" | u16 version | u64 body length | body | u32 CRC32(all previous bytes)

where the body is a stream of TLV records ``u16 tag | u32 length | payload``.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import functional as F
from .bitpack import PackedBitTensor, PackedConv, PackedLinear, n_words, pack, packed_conv2d_int, packed_linear_int
from .model import BatchNorm, Conv2d, Flatten, GlobalAvgPool, Hardtanh, Layer, Linear, MaxPool2d, Network, Residual

MAGIC = b"BNET"
VERSION = 1

TAG_META = 0
TAG_FCONV = 1
TAG_BCONV = 2
TAG_FLINEAR = 3
TAG_BLINEAR = 4
TAG_BN = 5
TAG_HARDTANH = 6
TAG_MAXPOOL = 7
TAG_GAP = 8
TAG_FLATTEN = 9
TAG_RESIDUAL = 10


class PackedFormatError(ValueError):
    category = "format"


class BadMagicError(PackedFormatError):
    pass


class VersionMismatchError(PackedFormatError):
    pass


class TruncatedFileError(PackedFormatError):
    pass


class ChecksumError(PackedFormatError):
    pass


class ExportError(ValueError):
    category = "export"


# -- records -----------------------------------------------------------------
@dataclass(frozen=True)
class FloatConv:
    name: str
    weight: np.ndarray  # float32 OIHW
    stride: tuple[int, int]
    padding: tuple[int, int]


@dataclass(frozen=True)
class BinaryConv:
    name: str
    conv: PackedConv


@dataclass(frozen=True)
class FloatLinear:
    name: str
    weight: np.ndarray  # float32 (out, in)


@dataclass(frozen=True)
class BinaryLinear:
    name: str
    linear: PackedLinear


@dataclass(frozen=True)
class BNAffine:
    name: str
    mean: np.ndarray
    scale: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True)
class Simple:
    name: str
    kind: str  # hardtanh | gap | flatten
    kernel: int = 0  # maxpool only


@dataclass(frozen=True)
class ResidualRec:
    name: str
    body: tuple
    shortcut: tuple


Record = Union[FloatConv, BinaryConv, FloatLinear, BinaryLinear, BNAffine, Simple, ResidualRec]


@dataclass
class PackedModel:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    records: list = field(default_factory=list)

    # -- execution ---------------------------------------------------------
    def forward(self, x: np.ndarray, backend: str = "auto") -> np.ndarray:
        """Logits for a float32 NCHW batch."""
        x = np.asarray(x, dtype=np.float32)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match {self.input_shape}")
        out, pending = _run(self.records, x, 0, backend)
        return _materialize(out, pending)

    def predict_logits(self, x: np.ndarray, batch_size: int = 1000, backend: str = "auto") -> np.ndarray:
        outs = [self.forward(x[i : i + batch_size], backend) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.num_classes), np.float32)

    def evaluate(self, split, batch_size: int = 1000, backend: str = "auto") -> tuple[float, float]:
        logits = self.predict_logits(split.images, batch_size, backend)
        logp = F.log_softmax_array(logits)
        loss = float(-logp[np.arange(len(split)), split.labels].mean())
        return F.accuracy(logits, split.labels), loss

    def layer_records(self) -> list:
        out = []

        def walk(recs):
            for r in recs:
                if isinstance(r, ResidualRec):
                    walk(r.body)
                    walk(r.shortcut)
                else:
                    out.append(r)

        walk(self.records)
        return out

    def size_breakdown(self) -> dict[str, int]:
        """Payload bytes by category: packed sign bits, float weights, batch-norm affines."""
        bits = fw = bn = 0
        for r in self.layer_records():
            if isinstance(r, BinaryConv):
                bits += r.conv.weights.nbytes
            elif isinstance(r, BinaryLinear):
                bits += r.linear.weights.nbytes
            elif isinstance(r, (FloatConv, FloatLinear)):
                fw += r.weight.nbytes
            elif isinstance(r, BNAffine):
                bn += r.mean.nbytes + r.scale.nbytes + r.beta.nbytes
        return {"binary_weight_bytes": bits, "float_weight_bytes": fw, "bn_bytes": bn}


def _materialize(x: np.ndarray, pending: int) -> np.ndarray:
    if pending == 0:
        return x
    return np.ldexp(x, pending).astype(np.float32)


def _run(records, x: np.ndarray, pending: int, backend: str) -> tuple[np.ndarray, int]:
    for r in records:
        if isinstance(r, BinaryConv):
            x = _materialize(x, pending)
            acc = packed_conv2d_int(np.where(x >= 0, 1, -1).astype(np.int8), r.conv, backend)
            x, pending = _scaled(acc, r.conv.shift)
        elif isinstance(r, BinaryLinear):
            x = _materialize(x, pending)
            acc = packed_linear_int(x, r.linear, backend)
            x, pending = _scaled(acc, r.linear.shift)
        elif isinstance(r, BNAffine):
            if pending:
                mean = np.ldexp(r.mean, -pending).astype(np.float32)
                scale = np.ldexp(r.scale, pending).astype(np.float32)
            else:
                mean, scale = r.mean, r.scale
            x = F.bn_apply_array(x, mean, scale, r.beta).astype(np.float32, copy=False)
            pending = 0
        elif isinstance(r, Simple) and r.kind == "maxpool":
            x = F.max_pool2d_array(x, r.kernel)  # max commutes with the positive 2**s factor
        elif isinstance(r, ResidualRec):
            x = _materialize(x, pending)
            pending = 0
            y, py = _run(r.body, x, 0, backend)
            z, pz = _run(r.shortcut, x, 0, backend)
            x = _materialize(y, py) + _materialize(z, pz)
        else:
            x = _materialize(x, pending)
            pending = 0
            if isinstance(r, FloatConv):
                x = F.conv2d_array(x, r.weight, r.stride, r.padding)
            elif isinstance(r, FloatLinear):
                x = x @ r.weight.T
            elif r.kind == "hardtanh":
                x = np.clip(x, -1.0, 1.0)
            elif r.kind == "gap":
                x = F.global_avg_pool_array(x)
            elif r.kind == "flatten":
                x = x.reshape(x.shape[0], -1)
            else:
                raise ValueError(f"unknown record kind {r.kind!r}")
    return x, pending


def _scaled(acc: np.ndarray, shift: int) -> tuple[np.ndarray, int]:
    """Integer accumulators as float32; left shift now, defer right shifts."""
    if shift >= 0:
        return np.left_shift(acc, shift).astype(np.float32), 0
    return acc.astype(np.float32), shift


# -- export from a trained network ---------------------------------------------
def _export_layer(layer: Layer) -> Record:
    if isinstance(layer, Conv2d):
        stride, padding = F._pair(layer.stride), F._pair(layer.padding)
        if not layer.binary:
            return FloatConv(layer.name, layer.weight.data.astype(np.float32).copy(), stride, padding)
        q = layer.quantize()
        return BinaryConv(layer.name, PackedConv.from_signs(q.signs, q.shift, stride, padding))
    if isinstance(layer, Linear):
        if not layer.binary:
            return FloatLinear(layer.name, layer.weight.data.astype(np.float32).copy())
        q = layer.quantize()
        return BinaryLinear(layer.name, PackedLinear(pack(q.signs), int(q.shift)))
    if isinstance(layer, BatchNorm):
        mean, scale, beta = F.bn_eval_affine(layer.gamma.data, layer.beta.data, layer.running_mean,
                                             layer.running_var, layer.eps)  # fmt: skip
        return BNAffine(layer.name, mean.copy(), scale.copy(), beta.copy())
    if isinstance(layer, Hardtanh):
        return Simple(layer.name, "hardtanh")
    if isinstance(layer, MaxPool2d):
        return Simple(layer.name, "maxpool", layer.kernel)
    if isinstance(layer, GlobalAvgPool):
        return Simple(layer.name, "gap")
    if isinstance(layer, Flatten):
        return Simple(layer.name, "flatten")
    if isinstance(layer, Residual):
        return ResidualRec(
            layer.name,
            tuple(_export_layer(l) for l in layer.body.layers),
            tuple(_export_layer(l) for l in layer.shortcut.layers),
        )
    raise ExportError(f"cannot export layer {layer.name!r} of kind {layer.kind!r}")


def export_model(net: Network) -> PackedModel:
    """Freeze a trained network into its packed deployment form."""
    spec = net.spec
    if spec.binarizer == "xnor":
        raise ExportError("xnor-scaled layers need a float scalar per layer; only integer shifts can be packed")
    if not spec.binarize_acts:
        raise ExportError("packed kernels need binarized activations")
    recs = [_export_layer(l) for l in net.root.layers]
    return PackedModel(spec.name, spec.input_shape, spec.num_classes, recs)


# -- serialization ---------------------------------------------------------------
def _name_bytes(name: str) -> bytes:
    b = name.encode()
    return struct.pack("<H", len(b)) + b


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _encode(r: Record) -> tuple[int, bytes]:
    nb = _name_bytes(r.name)
    if isinstance(r, FloatConv):
        o, c, kh, kw = r.weight.shape
        return TAG_FCONV, nb + struct.pack("<8I", o, c, kh, kw, *r.stride, *r.padding) + _f32(r.weight)
    if isinstance(r, BinaryConv):
        p = r.conv
        o, nw = p.weights.words.shape
        kh, kw = p.kernel
        head = struct.pack("<8IiI", o, p.in_channels, kh, kw, *p.stride, *p.padding, p.shift, nw)
        return TAG_BCONV, nb + head + p.weights.words.astype("<u8").tobytes()
    if isinstance(r, FloatLinear):
        o, i = r.weight.shape
        return TAG_FLINEAR, nb + struct.pack("<2I", o, i) + _f32(r.weight)
    if isinstance(r, BinaryLinear):
        p = r.linear
        o, nw = p.weights.words.shape
        head = struct.pack("<2IiI", o, p.in_features, p.shift, nw)
        return TAG_BLINEAR, nb + head + p.weights.words.astype("<u8").tobytes()
    if isinstance(r, BNAffine):
        return TAG_BN, nb + struct.pack("<I", r.mean.size) + _f32(r.mean) + _f32(r.scale) + _f32(r.beta)
    if isinstance(r, Simple):
        tag = {"hardtanh": TAG_HARDTANH, "maxpool": TAG_MAXPOOL, "gap": TAG_GAP, "flatten": TAG_FLATTEN}[r.kind]
        return tag, nb + (struct.pack("<I", r.kernel) if r.kind == "maxpool" else b"")
    if isinstance(r, ResidualRec):
        body, short = _encode_stream(r.body), _encode_stream(r.shortcut)
        return TAG_RESIDUAL, nb + struct.pack("<I", len(body)) + body + struct.pack("<I", len(short)) + short
    raise ExportError(f"cannot encode {type(r).__name__}")


def _encode_stream(records) -> bytes:
    out = io.BytesIO()
    for r in records:
        tag, payload = _encode(r)
        out.write(struct.pack("<HI", tag, len(payload)))
        out.write(payload)
    return out.getvalue()


def to_bytes(model: PackedModel) -> bytes:
    meta = json.dumps(
        {"name": model.name, "input_shape": list(model.input_shape), "num_classes": model.num_classes},
        sort_keys=True,
    ).encode()
    body = struct.pack("<HI", TAG_META, len(meta)) + meta + _encode_stream(model.records)
    head = MAGIC + struct.pack("<HQ", VERSION, len(body))
    data = head + body
    return data + struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise PackedFormatError("record overruns its container")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode()

    def f32(self, count: int, shape) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)

    def words(self, rows: int, nw: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * rows * nw), dtype="<u8").astype(np.uint64).reshape(rows, nw)

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _decode(tag: int, payload: bytes) -> Record:
    r = _Reader(payload)
    name = r.name()
    if tag == TAG_FCONV:
        o, c, kh, kw, sh, sw, ph, pw = r.unpack("<8I")
        rec = FloatConv(name, r.f32(o * c * kh * kw, (o, c, kh, kw)), (sh, sw), (ph, pw))
    elif tag == TAG_BCONV:
        o, c, kh, kw, sh, sw, ph, pw, shift, nw = r.unpack("<8IiI")
        k = c * kh * kw
        if nw != n_words(k):
            raise PackedFormatError(f"{name}: {nw} words per filter for {k} bits")
        words = r.words(o, nw)
        rec = BinaryConv(name, PackedConv(PackedBitTensor(words, k, (o, k)), shift, c, (kh, kw), (sh, sw), (ph, pw)))
    elif tag == TAG_FLINEAR:
        o, i = r.unpack("<2I")
        rec = FloatLinear(name, r.f32(o * i, (o, i)))
    elif tag == TAG_BLINEAR:
        o, i, shift, nw = r.unpack("<2IiI")
        if nw != n_words(i):
            raise PackedFormatError(f"{name}: {nw} words per row for {i} bits")
        rec = BinaryLinear(name, PackedLinear(PackedBitTensor(r.words(o, nw), i, (o, i)), shift))
    elif tag == TAG_BN:
        (c,) = r.unpack("<I")
        rec = BNAffine(name, r.f32(c, (c,)), r.f32(c, (c,)), r.f32(c, (c,)))
    elif tag == TAG_HARDTANH:
        rec = Simple(name, "hardtanh")
    elif tag == TAG_MAXPOOL:
        (k,) = r.unpack("<I")
        rec = Simple(name, "maxpool", k)
    elif tag == TAG_GAP:
        rec = Simple(name, "gap")
    elif tag == TAG_FLATTEN:
        rec = Simple(name, "flatten")
    elif tag == TAG_RESIDUAL:
        (nb,) = r.unpack("<I")
        body = _decode_stream(r.take(nb))
        (ns,) = r.unpack("<I")
        rec = ResidualRec(name, tuple(body), tuple(_decode_stream(r.take(ns))))
    else:
        raise PackedFormatError(f"unknown record tag {tag}")
    if not r.done():
        raise PackedFormatError(f"{name}: trailing bytes in record")
    return rec


def _decode_stream(buf: bytes) -> list:
    r = _Reader(buf)
    out = []
    while not r.done():
        tag, n = r.unpack("<HI")
        out.append(_decode(tag, r.take(n)))
    return out


def from_bytes(data: bytes) -> PackedModel:
    """Parse a packed model; raises a distinct error for each failure class."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a packed model file (bad magic)")
    if len(data) < 6:
        raise TruncatedFileError("file ends inside the header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise VersionMismatchError(f"file version {version}, reader supports {VERSION}")
    if len(data) < 14:
        raise TruncatedFileError("file ends inside the header")
    (body_len,) = struct.unpack_from("<Q", data, 6)
    if len(data) < 14 + body_len + 4:
        raise TruncatedFileError(f"file has {len(data)} bytes, header promises {14 + body_len + 4}")
    if len(data) > 14 + body_len + 4:
        raise PackedFormatError("trailing bytes after checksum")
    (crc,) = struct.unpack_from("<I", data, 14 + body_len)
    if zlib.crc32(data[: 14 + body_len]) & 0xFFFFFFFF != crc:
        raise ChecksumError("checksum mismatch")
    r = _Reader(data[14 : 14 + body_len])
    tag, n = r.unpack("<HI")
    if tag != TAG_META:
        raise PackedFormatError("first record must be metadata")
    meta = json.loads(r.take(n))
    records = _decode_stream(r.buf[r.pos :])
    return PackedModel(meta["name"], tuple(meta["input_shape"]), int(meta["num_classes"]), records)


def save(model: PackedModel, path) -> int:
    from .io_utils import atomic_write_bytes

    data = to_bytes(model)
    atomic_write_bytes(path, data)
    return len(data)


def load(path) -> PackedModel:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


# -- operation accounting ----------------------------------------------------------
def count_ops(model: Union[Network, PackedModel], binarizer: Optional[str] = None) -> dict:
    """Extra float and bitwise operations of the binary layers.

    Per binary layer with C1 = output elements and C2 = fan-in:
    shift-scaled (imb): 0 float, C1*C2 + C1 bitwise (XNOR/bitcount plus one shift per output);
    xnor-scaled: C1 float, C1*C2 bitwise; plain sign: 0 float, C1*C2 bitwise.
    """
    layers = []
    if isinstance(model, Network):
        binarizer = binarizer or model.spec.binarizer
        outs = model.output_shapes()
        for l in model.binary_layers():
            if isinstance(l, Conv2d):
                c1, c2 = int(np.prod(outs[l.name])), l.kernel * l.kernel * l.in_channels
            else:
                c1, c2 = l.out_features, l.in_features
            layers.append((l.name, c1, c2))
    else:
        binarizer = binarizer or "imb"
        shapes = _packed_output_shapes(model)
        for r in model.layer_records():
            if isinstance(r, BinaryConv):
                layers.append((r.name, int(np.prod(shapes[r.name])), r.conv.weights.logical_len))
            elif isinstance(r, BinaryLinear):
                layers.append((r.name, r.linear.out_features, r.linear.in_features))
    per = {}
    for name, c1, c2 in layers:
        if binarizer == "imb":
            f, b = 0, c1 * c2 + c1
        elif binarizer == "xnor":
            f, b = c1, c1 * c2
        elif binarizer == "vanilla":
            f, b = 0, c1 * c2
        else:
            raise ValueError(f"unknown binarizer {binarizer!r}")
        per[name] = {"C1": c1, "C2": c2, "float_ops": f, "bitwise_ops": b}
    return {
        "float_ops": sum(v["float_ops"] for v in per.values()),
        "bitwise_ops": sum(v["bitwise_ops"] for v in per.values()),
        "layers": per,
    }


def _packed_output_shapes(model: PackedModel) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}

    def walk(recs, x):
        for r in recs:
            if isinstance(r, ResidualRec):
                y = walk(r.body, x)
                x = y + walk(r.shortcut, x)
            else:
                x, p = _run([r], x, 0, "numpy")
                x = _materialize(x, p)
            shapes[r.name] = x.shape[1:]
        return x

    walk(model.records, np.zeros((1,) + model.input_shape, np.float32))
    return shapes
