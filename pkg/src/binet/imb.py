"""Information-maximizing binarization of weights and activations.

Weights are centred and scaled to unit population standard deviation over
the whole layer, binarized with ``sign`` and scaled by a power of two
``2**s``, so a layer needs no floating-point scalar at inference.
Activations are binarized with a bare ``sign``.

Also provides the Bernoulli entropy and quantization-error diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SIGMA_FLOOR = 1e-12


def sign(x) -> np.ndarray:
    """Elementwise sign with sign(0) = +1, as float32 ±1."""
    x = np.asarray(x)
    return np.where(x >= 0, np.float32(1.0), np.float32(-1.0))


def standardize_balance(w) -> np.ndarray:
    """Return (w - mean(w)) / std(w) using layer-wide population statistics.

    The standard deviation is floored at 1e-12 for constant tensors.
    Statistics are accumulated in float64; the result keeps ``w``'s float
    dtype (float32 for non-float inputs).
    """
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("standardize_balance: empty tensor")
    out_dtype = w.dtype if np.issubdtype(w.dtype, np.floating) else np.float32
    w64 = w.astype(np.float64)
    mu = w64.mean()
    sigma = math.sqrt(np.mean(np.square(w64 - mu)))
    sigma = max(sigma, SIGMA_FLOOR)
    return ((w64 - mu) / sigma).astype(out_dtype)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def shift_scalar(w_hat) -> int:
    """Integer exponent s = round(log2(mean |w_hat|)), halves rounded away from 0."""
    w_hat = np.asarray(w_hat)
    if w_hat.size == 0:
        raise ValueError("shift_scalar: empty tensor")
    mean_abs = float(np.abs(w_hat.astype(np.float64)).mean())
    if mean_abs == 0.0:
        return 0
    return round_half_away(math.log2(mean_abs))


@dataclass(frozen=True)
class QuantizedWeights:
    """Binary weights of one layer: ±1 ``signs`` and integer ``shift``.

    The dequantized weight is ``signs * 2**shift``.
    """

    signs: np.ndarray
    shift: int
    source_shape: tuple[int, ...]

    def __post_init__(self):
        if not isinstance(self.shift, (int, np.integer)):
            raise TypeError("shift must be an integer")
        if self.signs.shape != tuple(self.source_shape):
            raise ValueError("signs shape differs from source_shape")

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        return np.ldexp(self.signs.astype(dtype), int(self.shift)).astype(dtype)

    @property
    def p_plus(self) -> float:
        return float(np.mean(self.signs > 0))


def binarize_weights(w) -> QuantizedWeights:
    """Forward binarization of a layer's latent weights."""
    w = np.asarray(w)
    w_hat = standardize_balance(w)
    return QuantizedWeights(signs=sign(w_hat).astype(np.int8), shift=shift_scalar(w_hat), source_shape=w.shape)


def binarize_activations(a) -> np.ndarray:
    return sign(a)


def entropy_from_p(p: float) -> float:
    """Bernoulli entropy in nats with 0 ln 0 = 0."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability out of range: {p}")
    h = 0.0
    for q in (p, 1.0 - p):
        if q > 0.0:
            h -= q * math.log(q)
    return h


def binary_entropy(signs) -> float:
    """Entropy (nats) of the empirical +1/-1 distribution of ``signs``."""
    signs = np.asarray(signs)
    if signs.size == 0:
        raise ValueError("binary_entropy: empty tensor")
    return entropy_from_p(float(np.mean(signs > 0)))


def quantization_error(x, q) -> tuple[float, float]:
    """(sum |q - x|, sum (q - x)^2) accumulated in float64."""
    x = np.asarray(x, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if x.shape != q.shape:
        raise ValueError(f"quantization_error: shape mismatch {x.shape} vs {q.shape}")
    d = q - x
    return float(np.abs(d).sum()), float(np.square(d).sum())


@dataclass(frozen=True)
class BinarizerReport:
    entropy_nats: float
    p_plus: float
    error_l1: float
    error_l2: float

    def as_dict(self) -> dict:
        return {"entropy": self.entropy_nats, "p_plus": self.p_plus, "error_l1": self.error_l1, "error_l2": self.error_l2}


def binarizer_report(w) -> BinarizerReport:
    """Entropy and quantization error of the IMB binarization of ``w``.

    The error is measured between the standardized weights and their
    dequantized binary form.
    """
    w_hat = standardize_balance(w)
    qw = QuantizedWeights(sign(w_hat).astype(np.int8), shift_scalar(w_hat), w_hat.shape)
    p = qw.p_plus
    l1, l2 = quantization_error(w_hat, qw.dequantize(np.float64))
    return BinarizerReport(entropy_from_p(p), p, l1, l2)


def vanilla_error(w) -> tuple[float, float]:
    """Quantization error of plain ``sign(w)`` against ``w``."""
    return quantization_error(w, sign(w))
