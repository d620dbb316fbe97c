"""Bit-packed xnor/popcount execution of binarized layers.

Sign vectors are packed 64 elements per little-endian uint64 word
(bit i of word k holds element 64k+i; bit=1 means +1).  A dot product of
two +-1 vectors of length n is then n - 2*popcount(a XOR w).  The packed
GEMM is exact: pre-scale results are integers equal to the float +-1
reference bit-for-bit.  Convolution lowers to the GEMM via im2col with
per-window valid masks so zero padding never contributes a fake sign.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numba
import numpy as np

from .autodiff import ShapeError, _conv_out_hw


class DomainError(ValueError):
    """Input violates the +-1 domain required for packing."""


@dataclass
class PackedBits:
    """Sign vectors packed into rows of 64-bit words.

    ``words`` has shape (rows, ceil(logical_len/64)); pad bits are zero.
    """
    logical_len: int
    words: np.ndarray

    @property
    def rows(self):
        return self.words.shape[0]


def pack_signs(t) -> PackedBits:
    """Pack a +-1 vector or row-matrix; round-trip with :func:`unpack_signs`."""
    t = np.asarray(t)
    mat = t.reshape(1, -1) if t.ndim == 1 else t
    if mat.ndim != 2:
        raise ShapeError(f"pack_signs expects 1-D or 2-D input, got {t.shape}")
    if not np.all(np.abs(mat) == 1):
        raise DomainError("pack_signs requires entries in {-1,+1}")
    n = mat.shape[1]
    nwords = (n + 63) // 64
    bits = (mat > 0).astype(np.uint8)
    padded = np.zeros((mat.shape[0], nwords * 64), dtype=np.uint8)
    padded[:, :n] = bits
    # element 64k+i -> bit i%8 of byte i//8 of word k (little-endian words)
    by = np.packbits(padded, axis=-1, bitorder="little")
    words = np.ascontiguousarray(by).view("<u8").reshape(mat.shape[0], nwords)
    return PackedBits(logical_len=n, words=np.ascontiguousarray(words))


def unpack_signs(p: PackedBits) -> np.ndarray:
    """Inverse of :func:`pack_signs`; returns float32 rows of +-1."""
    rows, nwords = p.words.shape
    by = np.ascontiguousarray(p.words).view(np.uint8).reshape(rows, nwords * 8)
    bits = np.unpackbits(by, axis=-1, bitorder="little")
    bits = bits[:, :p.logical_len]
    return (bits.astype(np.float32) * 2.0 - 1.0)


def packed_dot(a: PackedBits, w: PackedBits) -> int:
    """Sum a_i * w_i over the valid bits: n - 2*popcount(a XOR w)."""
    if a.logical_len != w.logical_len:
        raise ShapeError(f"packed_dot length mismatch: {a.logical_len} vs {w.logical_len}")
    x = np.bitwise_xor(a.words[0], w.words[0])
    return int(a.logical_len - 2 * int(np.bitwise_count(x).sum()))


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_S1 = np.uint64(1)
_S2 = np.uint64(2)
_S4 = np.uint64(4)
_S56 = np.uint64(56)


@numba.njit(cache=True, parallel=False, fastmath=False)
def _popcnt_gemm(a_words, w_words, n_logical, out):
    """out[m, o] = n - 2*popcount(a[m] XOR w[o]); LLVM lowers SWAR to popcnt."""
    m_rows = a_words.shape[0]
    o_rows = w_words.shape[0]
    nw = a_words.shape[1]
    for m in range(m_rows):
        for o in range(o_rows):
            acc = np.uint64(0)
            for k in range(nw):
                x = a_words[m, k] ^ w_words[o, k]
                x = x - ((x >> _S1) & _M1)
                x = (x & _M2) + ((x >> _S2) & _M2)
                x = (x + (x >> _S4)) & _M4
                acc += (x * _H01) >> _S56
            out[m, o] = n_logical - 2 * np.int64(acc)


@numba.njit(cache=True, parallel=False, fastmath=False)
def _naive_float_gemm(a, b, out):
    """Textbook triple loop: out = a @ b.T, no blocking, no BLAS."""
    m, k = a.shape
    n = b.shape[0]
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for p in range(k):
                acc += a[i, p] * b[j, p]
            out[i, j] = acc


def packed_gemm(a: PackedBits, w: PackedBits, scale=1.0) -> np.ndarray:
    """(rows_a x n) times (rows_w x n)^T, entry-wise times ``scale``.

    ``scale`` broadcasts along output columns (per-output-channel alpha).
    """
    if a.logical_len != w.logical_len:
        raise ShapeError(f"packed_gemm inner mismatch: {a.logical_len} vs {w.logical_len}")
    out = np.empty((a.rows, w.rows), dtype=np.int64)
    _popcnt_gemm(a.words, w.words, a.logical_len, out)
    return out.astype(np.float32) * np.asarray(scale, dtype=np.float32)


def packed_gemm_masked(a_words, w_words, valid, base, scale=1.0):
    """GEMM where row masks differ: dot over valid bits only.

    ``valid`` are per-a-row uint64 masks (same word count), ``base`` the
    per-a-row count of valid bits.  Used by the padded convolution path.
    """
    out = np.empty((a_words.shape[0], w_words.shape[0]), dtype=np.int64)
    _popcnt_gemm_masked(a_words, w_words, valid, base, out)
    return out.astype(np.float32) * np.asarray(scale, dtype=np.float32)


@numba.njit(cache=True)
def _popcnt_gemm_masked(a_words, w_words, valid, base, out):
    m_rows = a_words.shape[0]
    o_rows = w_words.shape[0]
    nw = a_words.shape[1]
    for m in range(m_rows):
        for o in range(o_rows):
            acc = np.uint64(0)
            for k in range(nw):
                x = (a_words[m, k] ^ w_words[o, k]) & valid[m, k]
                x = x - ((x >> _S1) & _M1)
                x = (x & _M2) + ((x >> _S2) & _M2)
                x = (x + (x >> _S4)) & _M4
                acc += (x * _H01) >> _S56
            out[m, o] = base[m] - 2 * np.int64(acc)


def _im2col_signs_masked(a, kh, kw, stride, pad):
    """im2col for +-1 activations with a validity mask for padded taps."""
    n, c, h, w = a.shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, pad)
    ap = np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else a
    vp = np.zeros((h + 2 * pad, w + 2 * pad), dtype=np.uint8)
    vp[pad:pad + h, pad:pad + w] = 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=a.dtype)
    vcols = np.empty((kh, kw, oh, ow), dtype=np.uint8)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = ap[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            vcols[i, j] = vp[i:i + stride * oh:stride, j:j + stride * ow:stride]
    cols = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)
    vmask = np.broadcast_to(vcols.transpose(2, 3, 0, 1).reshape(1, oh * ow, 1, kh * kw),
                            (n, oh * ow, c, kh * kw)).reshape(n * oh * ow, c * kh * kw)
    return cols, vmask, (n, oh, ow)


def packed_conv2d(a, w, stride=1, pad=0, scale=1.0) -> np.ndarray:
    """Conv of +-1 tensors via packed im2col GEMM; padded taps are masked out.

    a: (N,C,H,W) of +-1; w: (O,C,KH,KW) of +-1.  ``scale`` is a scalar or a
    per-output-channel vector.  Matches the float reference conv (with true
    zero padding) exactly pre-scale.
    """
    a = np.asarray(a, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride/pad: {stride}/{pad}")
    o, c, kh, kw = w.shape
    if a.ndim != 4 or a.shape[1] != c:
        raise ShapeError(f"packed_conv2d shapes: a{a.shape} w{w.shape}")
    cols, vmask, (n, oh, ow) = _im2col_signs_masked(a, kh, kw, stride, pad)
    wmat = w.reshape(o, -1)
    # pack; masked-out taps have arbitrary sign (0 -> +1) but are excluded
    cols = np.where(vmask, cols, 1.0)
    pa = pack_signs(cols)
    pw = pack_signs(wmat)
    pv = pack_signs(vmask.astype(np.float32) * 2.0 - 1.0)  # valid -> bit 1
    base = vmask.sum(axis=1).astype(np.int64)
    if pad == 0:
        y = packed_gemm(pa, pw)
    else:
        y = packed_gemm_masked(pa.words, pw.words, pv.words, base)
    scale = np.asarray(scale, dtype=np.float32)
    y = y * scale  # (N*OH*OW, O) times scalar or (O,)
    return y.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# references and benchmarking
# ---------------------------------------------------------------------------

def float_sign_gemm(a, w):
    """Float reference for +-1 GEMM (exact: all partial sums are integers)."""
    return np.asarray(a, dtype=np.float32) @ np.asarray(w, dtype=np.float32).T


def float_conv2d(a, w, stride=1, pad=0):
    """Float reference convolution with zero padding."""
    from .autodiff import im2col
    a = np.asarray(a, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    n, c, h, wd = a.shape
    o, _, kh, kw = w.shape
    oh, ow = _conv_out_hw(h, wd, kh, kw, stride, pad)
    cols = im2col(a, kh, kw, stride, pad)
    y = np.einsum("of,nfp->nop", w.reshape(o, -1), cols, optimize=True)
    return y.reshape(n, o, oh, ow)


def bench_throughput(sizes=(64, 512, 4096), m=128, o=128, repeats=5, seed=0):
    """Time packed vs naive float GEMM at each inner dimension.

    Returns a list of dicts with ops/second for both paths and their ratio.
    Timings include packing of the activation side (the weight side is
    packed once, as it would be for a deployed model).
    """
    rng = np.random.default_rng(seed)
    report = []
    for n in sizes:
        a = np.where(rng.random((m, n)) < 0.5, -1.0, 1.0).astype(np.float32)
        w = np.where(rng.random((o, n)) < 0.5, -1.0, 1.0).astype(np.float32)
        pw = pack_signs(w)
        # warm up JITs
        packed_gemm(pack_signs(a), pw)
        outf = np.empty((m, o), dtype=np.float32)
        _naive_float_gemm(a, w, outf)
        t_packed = min(_time_of(lambda: packed_gemm(pack_signs(a), pw), repeats), 1e9)
        t_float = min(_time_of(lambda: _naive_float_gemm(a, w, outf), repeats), 1e9)
        flops = 2.0 * m * n * o
        report.append({
            "inner_dim": n,
            "packed_ops_per_s": flops / t_packed,
            "float_ops_per_s": flops / t_float,
            "speedup": t_float / t_packed,
        })
    return report


def _time_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best
