"""Shared oracles and fixtures.

The oracles here are deliberately naive (scalar loops, quadratic-cost
reference implementations) and independent of the library's vectorized
paths; several tests require exact agreement with them.
"""

import numpy as np
import pytest

from qtape import ops


@pytest.fixture(autouse=True)
def _debug_checks():
    ops.set_debug_checks(True)
    yield
    ops.set_debug_checks(False)


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple loop, float64 scalar accumulation in ascending-k order."""
    n, kn = a.shape
    m = b.shape[1]
    out = np.empty((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = np.float64(0.0)
            for k in range(kn):
                acc = acc + np.float64(a[i, k]) * np.float64(b[k, j])
            out[i, j] = acc
    return out.astype(a.dtype)


def conv2d_oracle(x: np.ndarray, k: np.ndarray, stride: int = 1,
                  pad: int = 0) -> np.ndarray:
    """Direct cross-correlation, scalar loops, float64 accumulation over
    (in-channel, kernel-row, kernel-col) ascending."""
    n, ci, h, w = x.shape
    co, _, kh, kw = k.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.empty((n, co, oh, ow), dtype=np.float64)
    for ni in range(n):
        for c in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = np.float64(0.0)
                    for d in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                ih = i * stride + u - pad
                                iw = j * stride + v - pad
                                if 0 <= ih < h and 0 <= iw < w:
                                    acc = acc + np.float64(x[ni, d, ih, iw]) \
                                        * np.float64(k[c, d, u, v])
                    out[ni, c, i, j] = acc
    return out.astype(x.dtype)


def central_diff(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar fn w.r.t. every entry of x."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2.0 * h)
    return g


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    """Worst-case elementwise relative error with an absolute floor."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.abs(want), 1e-8)
    return float(np.max(np.abs(got - want) / denom))
