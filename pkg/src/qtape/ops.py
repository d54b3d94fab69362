"""Dense tensor primitives with deterministic accumulation.

Tensors are plain numpy arrays, rank 2 (batch, channel) or rank 4
(batch, channel, height, width), float32 or float64, C order.  Every
reduction accumulates in float64 regardless of storage precision.  The
linear transforms (matmul, conv2d_forward) accumulate in a fixed
left-to-right order over the contraction index so that results are bit
identical to a scalar reference loop; the backward transforms are only
required to be deterministic run to run and use BLAS on float64.
"""

from __future__ import annotations

import os

import numpy as np

from . import _native
from .errors import ShapeError

# Finite-ness checks on op results; off by default since they cost a full
# pass over the data.  Enabled by the unit tests and QTAPE_DEBUG=1.
DEBUG_CHECKS = bool(os.environ.get("QTAPE_DEBUG"))


def set_debug_checks(enabled: bool) -> None:
    global DEBUG_CHECKS
    DEBUG_CHECKS = bool(enabled)


def _check_finite(*arrays: np.ndarray) -> None:
    if DEBUG_CHECKS:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError("non-finite values in op result")


def reduce_axes(x: np.ndarray) -> tuple:
    """Axes aggregated by per-channel reductions (all but the channel axis)."""
    if x.ndim == 2:
        return (0,)
    if x.ndim == 4:
        return (0, 2, 3)
    raise ShapeError(f"expected rank 2 or 4 tensor, got rank {x.ndim}")


def channel_shape(vec: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a length-C vector for broadcasting against a rank-2/4 tensor."""
    if ndim == 2:
        return vec.reshape(1, -1)
    return vec.reshape(1, -1, 1, 1)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """C = A @ B with float64 accumulation in ascending-k order.

    Bit identical to the scalar triple loop `acc += float64(a[n,k]) *
    float64(b[k,m])` for k = 0..K-1, rounded once to the storage dtype.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents disagree: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"precision mismatch: {a.dtype} x {b.dtype}")
    n, k_n = a.shape
    m = b.shape[1]
    a64 = a.astype(np.float64, copy=False)
    b64 = b.astype(np.float64, copy=False)
    acc = np.zeros((n, m), dtype=np.float64)
    tmp = np.empty((n, m), dtype=np.float64)
    for k in range(k_n):
        np.multiply(a64[:, k, None], b64[k, None, :], out=tmp)
        np.add(acc, tmp, out=acc)
    out = acc.astype(a.dtype)
    _check_finite(out)
    return out


def conv2d_out_shape(in_shape: tuple, k_shape: tuple, stride: int,
                     pad: int) -> tuple:
    n, ci, h, w = in_shape
    co, kci, kh, kw = k_shape
    if kci != ci:
        raise ShapeError(f"kernel expects {kci} input channels, got {ci}")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ShapeError(
            f"non-integral output extent for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("kernel larger than padded input")
    return n, co, oh, ow


def _pad_input(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


def conv2d_forward(x: np.ndarray, k: np.ndarray, stride: int = 1,
                   pad: int = 0, out: np.ndarray | None = None) -> np.ndarray:
    """Direct cross-correlation with zero padding.

    Accumulates each output element over (in-channel, kernel-row,
    kernel-col) in ascending order into a float64 accumulator, matching
    the six-loop reference exactly.  `out`, when given, receives the
    result in place and must have the output shape and x's dtype.
    """
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and kernel")
    n, co, oh, ow = conv2d_out_shape(x.shape, k.shape, stride, pad)
    ci, kh, kw = k.shape[1:]
    xp = _pad_input(x, pad)
    k = np.ascontiguousarray(k, dtype=x.dtype)
    acc = np.zeros((n, co, oh, ow), dtype=np.float64)
    if not _native.conv_forward_acc(xp, k, acc, stride):
        k64 = k.astype(np.float64)
        tmp = np.empty((n, co, oh, ow), dtype=np.float64)
        for c in range(ci):
            for u in range(kh):
                for v in range(kw):
                    xv = xp[:, c, u:u + stride * oh:stride,
                            v:v + stride * ow:stride]
                    np.multiply(xv[:, None].astype(np.float64, copy=False),
                                k64[:, c, u, v][None, :, None, None], out=tmp)
                    np.add(acc, tmp, out=acc)
    if out is None:
        out = acc.astype(x.dtype)
    else:
        np.copyto(out, acc, casting="same_kind")
    _check_finite(out)
    return out


def conv2d_backward(x: np.ndarray, k: np.ndarray, g_out: np.ndarray,
                    stride: int = 1, pad: int = 0,
                    g_x_out: np.ndarray | None = None,
                    need_g_x: bool = True):
    """Adjoints of conv2d_forward: gradients w.r.t. input and kernel.

    Float64 BLAS contractions; deterministic but not order-matched to the
    forward loop (validated against finite differences instead).  With
    need_g_x=False only the kernel gradient is computed and g_x is None
    (used for the first layer, whose input gradient is discarded).
    """
    shape = conv2d_out_shape(x.shape, k.shape, stride, pad)
    if g_out.shape != shape:
        raise ShapeError(f"gradient shape {g_out.shape} != expected {shape}")
    n, co, oh, ow = shape
    ci, kh, kw = k.shape[1:]
    h, w = x.shape[2:]
    xp64 = _pad_input(x, pad).astype(np.float64)
    g64 = g_out.astype(np.float64, copy=False)
    k64 = k.astype(np.float64, copy=False)

    g_k = np.empty((co, ci, kh, kw), dtype=np.float64)
    g_xp = np.zeros_like(xp64) if need_g_x else None
    for u in range(kh):
        for v in range(kw):
            xv = xp64[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride]
            g_k[:, :, u, v] = np.tensordot(g64, xv, axes=([0, 2, 3], [0, 2, 3]))
            if need_g_x:
                contrib = np.tensordot(g64, k64[:, :, u, v], axes=([1], [0]))
                g_xp[:, :, u:u + stride * oh:stride,
                     v:v + stride * ow:stride] += contrib.transpose(0, 3, 1, 2)
    g_k_cast = g_k.astype(k.dtype)
    if not need_g_x:
        _check_finite(g_k_cast)
        return None, g_k_cast
    g_x_full = g_xp[:, :, pad:pad + h, pad:pad + w] if pad else g_xp
    if g_x_out is None:
        g_x = g_x_full.astype(x.dtype)
    else:
        np.copyto(g_x_out, g_x_full, casting="same_kind")
        g_x = g_x_out
    _check_finite(g_x, g_k_cast)
    return g_x, g_k_cast


def channel_moments(x: np.ndarray):
    """Per-channel population mean and variance over batch and spatial axes.

    Two-pass computation with float64 accumulators; returns float64
    vectors of length C.
    """
    axes = reduce_axes(x)
    x64 = x.astype(np.float64, copy=False)
    mean = x64.mean(axis=axes)
    var = np.square(x64 - channel_shape(mean, x.ndim)).mean(axis=axes)
    return mean, var


def channel_sum(x: np.ndarray) -> np.ndarray:
    """Per-channel sum over batch and spatial axes (float64 accumulation)."""
    return x.astype(np.float64, copy=False).sum(axis=reduce_axes(x))


def channel_mean(x: np.ndarray) -> np.ndarray:
    """Per-channel mean over batch and spatial axes (float64 accumulation)."""
    return x.astype(np.float64, copy=False).mean(axis=reduce_axes(x))
