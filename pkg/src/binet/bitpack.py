"""Bit-packed ±1 tensors and XNOR/popcount convolution kernels.

Encoding: bit 1 is +1, bit 0 is -1, packed LSB-first into 64-bit words
along the last axis.  A dot product of two packed vectors of length n is
``n - 2 * popcount((p ^ q) & mask)`` where ``mask`` keeps only the bits
that carry data (the tail of the last word and, for convolutions, the
zero-padding positions of each receptive field).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .functional import _pair, conv_output_size, im2col

try:  # optional compiled kernels
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

WORD_BITS = 64


def n_words(n: int) -> int:
    return (n + WORD_BITS - 1) // WORD_BITS


@dataclass(frozen=True)
class PackedBitTensor:
    """±1 tensor packed one bit per element along its last axis.

    ``words`` has shape ``shape[:-1] + (ceil(logical_len / 64),)``.
    """

    words: np.ndarray
    logical_len: int
    shape: tuple[int, ...]

    def __post_init__(self):
        if self.words.dtype != np.uint64:
            raise TypeError("words must be uint64")
        if self.words.shape != tuple(self.shape[:-1]) + (n_words(self.logical_len),):
            raise ValueError(f"words shape {self.words.shape} inconsistent with logical shape {self.shape}")

    @property
    def nbytes(self) -> int:
        return self.words.nbytes

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PackedBitTensor)
            and self.shape == other.shape
            and self.logical_len == other.logical_len
            and np.array_equal(self.words, other.words)
        )

    __hash__ = None


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a 0/1 array along its last axis into native uint64 words."""
    lead, n = bits.shape[:-1], bits.shape[-1]
    nw = n_words(n)
    pad = nw * WORD_BITS - n
    if pad:
        bits = np.concatenate([bits, np.zeros(lead + (pad,), dtype=bits.dtype)], axis=-1)
    b = np.packbits(bits.reshape(lead + (nw, WORD_BITS)), axis=-1, bitorder="little")
    return np.ascontiguousarray(b).view("<u8").reshape(lead + (nw,)).astype(np.uint64)


def pack(signs) -> PackedBitTensor:
    """Pack a ±1 tensor along its last axis."""
    signs = np.asarray(signs)
    if signs.ndim == 0:
        signs = signs.reshape(1)
    if not np.all((signs == 1) | (signs == -1)):
        raise ValueError("pack: every element must be -1 or +1")
    return PackedBitTensor(_pack_bits((signs > 0).astype(np.uint8)), signs.shape[-1], tuple(signs.shape))


def unpack(p: PackedBitTensor) -> np.ndarray:
    """Inverse of :func:`pack`, returning an int8 ±1 array."""
    lead = p.words.shape[:-1]
    raw = p.words.astype("<u8").view(np.uint8).reshape(lead + (p.words.shape[-1], 8))
    bits = np.unpackbits(raw, axis=-1, bitorder="little").reshape(lead + (-1,))[..., : p.logical_len]
    return np.where(bits.astype(bool), np.int8(1), np.int8(-1)).reshape(p.shape)


def tail_mask(n: int) -> np.ndarray:
    """Words with exactly the first ``n`` bits set."""
    return _pack_bits(np.ones(n, dtype=np.uint8))


# -- popcount --------------------------------------------------------------
_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


def popcount_swar(words: np.ndarray) -> np.ndarray:
    """Portable bit count of each uint64 word (SWAR reduction)."""
    x = np.asarray(words, dtype=np.uint64)
    x = x - ((x >> np.uint64(1)) & _M1)
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    return ((x * _H01) >> np.uint64(56)).astype(np.uint8)


def popcount_native(words: np.ndarray) -> np.ndarray:
    """Bit count through numpy's hardware population-count ufunc."""
    return np.bitwise_count(np.asarray(words, dtype=np.uint64))


popcount = popcount_native if hasattr(np, "bitwise_count") else popcount_swar


def xnor_dot(p: PackedBitTensor, q: PackedBitTensor, popcount_fn=None) -> Union[int, np.ndarray]:
    """Sum of elementwise products of two packed ±1 tensors along the last axis.

    Tail bits beyond ``logical_len`` are masked out, so garbage there is harmless.
    """
    if p.logical_len != q.logical_len or p.words.shape != q.words.shape:
        raise ValueError(f"xnor_dot: length mismatch {p.shape} vs {q.shape}")
    pc = popcount_fn or popcount
    diff = pc((p.words ^ q.words) & tail_mask(p.logical_len)).sum(axis=-1, dtype=np.int64)
    out = p.logical_len - 2 * diff
    return int(out) if np.ndim(out) == 0 else out


# -- convolution lowering --------------------------------------------------
@dataclass(frozen=True)
class PackedRows:
    """Packed im2row lowering of a binarized NCHW input.

    ``rows``: (N * OH * OW, W) words, one receptive field per row.
    ``masks``: (OH * OW, W) words flagging non-padding positions.
    ``counts``: (OH * OW,) number of non-padding positions per field.
    """

    rows: np.ndarray
    masks: np.ndarray
    counts: np.ndarray
    batch: int
    out_hw: tuple[int, int]
    field: int


def im2row_pack(signs: np.ndarray, kernel, stride=1, padding=0) -> PackedRows:
    """Binarize-and-pack the receptive fields of an NCHW ±1 input.

    Bits are laid out channel-major (c, i, j) to match OIHW filters.
    """
    if signs.ndim != 4:
        raise ValueError(f"im2row_pack expects NCHW, got {signs.shape}")
    (kh, kw), stride, padding = _pair(kernel), _pair(stride), _pair(padding)
    n, c, h, w = signs.shape
    oh, ow = conv_output_size(h, kh, stride[0], padding[0]), conv_output_size(w, kw, stride[1], padding[1])
    if oh < 1 or ow < 1:
        raise ValueError(f"im2row_pack: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    bits = (np.asarray(signs) > 0).astype(np.uint8)
    rows = _pack_bits(im2col(bits, kh, kw, stride, padding)).reshape(n * oh * ow, -1)
    valid = im2col(np.ones((1, c, h, w), dtype=np.uint8), kh, kw, stride, padding)[0]
    counts = valid.sum(axis=-1, dtype=np.int64).reshape(-1)
    masks = _pack_bits(valid).reshape(oh * ow, -1)
    return PackedRows(rows, masks, counts, n, (oh, ow), c * kh * kw)


def _xnor_gemm_numpy(rows, weights, masks, counts, popcount_fn=None) -> np.ndarray:
    """acc[p, o] = counts[p % Q] - 2 * popcount((rows[p] ^ weights[o]) & masks[p % Q])."""
    pc = popcount_fn or popcount
    p_total, nw = rows.shape
    o = weights.shape[0]
    q = masks.shape[0]
    out = np.empty((p_total, o), dtype=np.int64)
    chunk = max(q, (1 << 22) // max(1, o * nw) // q * q) if q else p_total
    for start in range(0, p_total, chunk):
        stop = min(start + chunk, p_total)
        idx = np.arange(start, stop) % q
        m = masks[idx]
        x = rows[start:stop]
        d = pc((x[:, None, :] ^ weights[None, :, :]) & m[:, None, :]).sum(axis=-1, dtype=np.int64)
        out[start:stop] = counts[idx][:, None] - 2 * d
    return out


if HAVE_NUMBA:

    @numba.njit(cache=True, inline="always")
    def _popcount64_nb(x):
        x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
        x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
        x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
        return (x * np.uint64(0x0101010101010101)) >> np.uint64(56)

    @numba.njit(cache=True)
    def _xnor_gemm_numba(rows, weights, masks, counts):
        p_total, nw = rows.shape
        o = weights.shape[0]
        q = masks.shape[0]
        out = np.empty((p_total, o), dtype=np.int64)
        for p in range(p_total):
            qi = p % q
            for oc in range(o):
                d = np.uint64(0)
                for j in range(nw):
                    d += _popcount64_nb((rows[p, j] ^ weights[oc, j]) & masks[qi, j])
                out[p, oc] = counts[qi] - 2 * np.int64(d)
        return out


def xnor_gemm(rows, weights, masks, counts, backend: str = "auto", popcount_fn=None) -> np.ndarray:
    """Integer ±1 products between packed rows and packed filters.

    ``backend`` is ``numpy`` (vectorized, native or portable popcount),
    ``numba`` (compiled loop) or ``auto``.
    """
    if rows.shape[1] != weights.shape[1]:
        raise ValueError(f"xnor_gemm: {rows.shape[1]} words per row vs {weights.shape[1]} per filter")
    if backend == "auto":
        backend = "numba" if HAVE_NUMBA and popcount_fn is None else "numpy"
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        return _xnor_gemm_numba(rows, weights, masks, np.ascontiguousarray(counts, dtype=np.int64))
    if backend != "numpy":
        raise ValueError(f"unknown backend {backend!r}")
    return _xnor_gemm_numpy(rows, weights, masks, counts, popcount_fn)


def apply_shift(acc: np.ndarray, shift: int) -> np.ndarray:
    """Scale integer accumulators by 2**shift exactly.

    Non-negative shifts stay integer (left shift); negative shifts return
    float64 values, which hold integers times a power of two exactly.
    """
    acc = np.asarray(acc, dtype=np.int64)
    if shift >= 0:
        return np.left_shift(acc, shift)
    return np.ldexp(acc.astype(np.float64), shift)


# -- packed layers ---------------------------------------------------------
@dataclass(frozen=True)
class PackedConv:
    """A binarized convolution in deployment form."""

    weights: PackedBitTensor  # (out_channels, in_channels*kh*kw)
    shift: int
    in_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def from_signs(cls, signs: np.ndarray, shift: int, stride=1, padding=0) -> "PackedConv":
        o, c, kh, kw = signs.shape
        return cls(pack(signs.reshape(o, c * kh * kw)), int(shift), c, (kh, kw), _pair(stride), _pair(padding))


@dataclass(frozen=True)
class PackedLinear:
    weights: PackedBitTensor  # (out_features, in_features)
    shift: int

    @property
    def in_features(self) -> int:
        return self.weights.logical_len

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]


def packed_conv2d_int(
    x: Union[np.ndarray, PackedRows], layer: PackedConv, backend: str = "auto", popcount_fn=None
) -> np.ndarray:
    """Integer XNOR/popcount convolution, NCHW int64 output before shift scaling."""
    if not isinstance(x, PackedRows):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != layer.in_channels:
            raise ValueError(f"packed_conv2d: input {x.shape} does not match {layer.in_channels} input channels")
        x = im2row_pack(x, layer.kernel, layer.stride, layer.padding)
    if x.field != layer.weights.logical_len:
        raise ValueError(f"packed_conv2d: receptive field {x.field} vs filter length {layer.weights.logical_len}")
    acc = xnor_gemm(x.rows, layer.weights.words, x.masks, x.counts, backend, popcount_fn)
    oh, ow = x.out_hw
    return np.ascontiguousarray(acc.reshape(x.batch, oh, ow, -1).transpose(0, 3, 1, 2))


def packed_conv2d(x, layer: PackedConv, backend: str = "auto", popcount_fn=None) -> np.ndarray:
    """XNOR/popcount convolution followed by the exact 2**shift scaling."""
    return apply_shift(packed_conv2d_int(x, layer, backend, popcount_fn), layer.shift)


def packed_linear_int(x: np.ndarray, layer: PackedLinear, backend: str = "auto", popcount_fn=None) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ValueError(f"packed_linear: input {x.shape} does not match {layer.in_features} features")
    rows = pack(np.where(x >= 0, 1, -1).astype(np.int8)).words
    n = layer.in_features
    masks = tail_mask(n)[None, :]
    return xnor_gemm(rows, layer.weights.words, masks, np.array([n], dtype=np.int64), backend, popcount_fn)


def float_sign_conv_reference(signs: np.ndarray, w_signs: np.ndarray, shift: int, stride=1, padding=0) -> np.ndarray:
    """Float64 oracle: direct convolution of ±1 tensors, then times 2**shift."""
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    x = np.pad(np.asarray(signs, np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    w = np.asarray(w_signs, np.float64)
    n, _, hp, wp = x.shape
    o, _, kh, kw = w.shape
    oh, ow = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    return np.ldexp(out, shift)


def naive_conv2d_loops(x: np.ndarray, w: np.ndarray, stride=1, padding=0) -> np.ndarray:
    """Direct six-loop cross-correlation in pure Python (test oracle, small shapes only)."""
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = conv_output_size(h, kh, sh, ph), conv_output_size(wd, kw, sw, pw)
    out = np.zeros((n, o, oh, ow), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                r, s = y * sh + i - ph, xx * sw + j - pw
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += float(x[b, ic, r, s]) * float(w[oc, ic, i, j])
                    out[b, oc, y, xx] = acc
    return out


def has_numba() -> bool:
    return HAVE_NUMBA


def backends() -> list[str]:
    return ["numpy", "numba"] if HAVE_NUMBA else ["numpy"]
