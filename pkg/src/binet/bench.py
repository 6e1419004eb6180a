"""Single-thread timing of the packed XNOR/popcount convolution against a naive float loop.

Both kernels are compiled with numba and run on one thread.  The packed
time covers binarizing and packing the input plus the XNOR/popcount
accumulation and shift; the weights are packed ahead of time, as in
deployment.  A BLAS-backed float convolution is timed as a reference
point but does not enter the ratio.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import bitpack
from .bitpack import PackedConv, im2row_pack, xnor_gemm
from .functional import conv2d_array, conv_output_size


@dataclass(frozen=True)
class Geometry:
    in_channels: int = 256
    out_channels: int = 256
    kernel: int = 3
    height: int = 14
    width: int = 14
    stride: int = 1
    padding: int = 1

    @classmethod
    def parse(cls, text: str) -> "Geometry":
        """``cin,cout,k,h,w[,stride,padding]``."""
        parts = [int(p) for p in text.split(",")]
        if len(parts) not in (5, 7):
            raise ValueError(f"geometry needs 5 or 7 comma-separated integers, got {text!r}")
        return cls(*parts)

    @property
    def out_hw(self) -> tuple[int, int]:
        return (
            conv_output_size(self.height, self.kernel, self.stride, self.padding),
            conv_output_size(self.width, self.kernel, self.stride, self.padding),
        )

    @property
    def macs(self) -> int:
        oh, ow = self.out_hw
        return oh * ow * self.out_channels * self.in_channels * self.kernel * self.kernel


if bitpack.HAVE_NUMBA:
    import numba

    @numba.njit(cache=True)
    def naive_conv_float(x, w, stride, padding, out):
        """Direct six-loop float32 cross-correlation of one image (C, H, W) with OIHW weights."""
        c_in, h, wd = x.shape
        c_out, _, kh, kw = w.shape
        oh, ow = out.shape[1], out.shape[2]
        for o in range(c_out):
            for y in range(oh):
                for xx in range(ow):
                    acc = np.float32(0.0)
                    for c in range(c_in):
                        for i in range(kh):
                            r = y * stride + i - padding
                            if r < 0 or r >= h:
                                continue
                            for j in range(kw):
                                s = xx * stride + j - padding
                                if s < 0 or s >= wd:
                                    continue
                                acc += x[c, r, s] * w[o, c, i, j]
                    out[o, y, xx] = acc


def _median_ns(fn, reps: int) -> float:
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(statistics.median(times))


def benchmark(geom: Geometry = Geometry(), reps: int = 100, seed: int = 0, shift: int = 0) -> dict:
    """Median wall time (ns per convolution call) of the packed and naive float kernels."""
    if not bitpack.HAVE_NUMBA:
        raise RuntimeError("the benchmark needs numba")
    prev_threads = numba.get_num_threads()
    numba.set_num_threads(1)
    try:
        rng = np.random.default_rng(seed)
        g = geom
        x_sign = rng.choice(np.array([-1, 1], np.int8), (1, g.in_channels, g.height, g.width))
        w_sign = rng.choice(np.array([-1, 1], np.int8), (g.out_channels, g.in_channels, g.kernel, g.kernel))
        layer = PackedConv.from_signs(w_sign, shift, g.stride, g.padding)
        x_act = x_sign.astype(np.float32) * 0.5  # pre-binarization activations
        x_f = x_sign[0].astype(np.float32)
        w_f = np.ldexp(w_sign.astype(np.float32), shift)
        oh, ow = g.out_hw
        out_f = np.empty((g.out_channels, oh, ow), np.float32)
        words = layer.weights.words

        def run_packed():
            rows = im2row_pack(np.where(x_act >= 0, 1, -1).astype(np.int8), g.kernel, g.stride, g.padding)
            acc = xnor_gemm(rows.rows, words, rows.masks, rows.counts, backend="numba")
            return bitpack.apply_shift(acc, shift)

        def run_float():
            naive_conv_float(x_f, w_f, g.stride, g.padding, out_f)

        def run_blas():
            conv2d_array(x_f[None], w_f, g.stride, g.padding)

        # both kernels must agree before timing means anything
        run_float()
        ref = out_f.transpose(1, 2, 0).reshape(oh * ow, g.out_channels).astype(np.float64)
        if not np.array_equal(run_packed().astype(np.float64), ref):
            raise AssertionError("packed and float kernels disagree")
        ns_packed = _median_ns(run_packed, reps)
        ns_float = _median_ns(run_float, reps)
        ns_blas = _median_ns(run_blas, max(3, reps // 10))
        threads = numba.get_num_threads()
    finally:
        numba.set_num_threads(prev_threads)
    return {
        "geometry": asdict(geom),
        "reps": reps,
        "ns_packed": ns_packed,
        "ns_float": ns_float,
        "ratio": ns_float / ns_packed,
        "thread_count": threads,
        "ns_per_mac_packed": ns_packed / geom.macs,
        "ns_per_mac_float": ns_float / geom.macs,
        "ns_float_blas_reference": ns_blas,
    }
