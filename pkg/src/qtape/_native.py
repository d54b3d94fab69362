"""Optional C accelerator for the fixed-order convolution.

Compiles _kernels.c on first use and caches the shared object under
~/.cache/qtape (or the system temp dir).  The kernel reproduces the
reference accumulation order bit for bit, so everything keeps working,
just slower, when no compiler is available: callers fall back to the
pure-numpy path.  Set QTAPE_NO_NATIVE=1 to force the fallback.
"""

from __future__ import annotations

import ctypes
import hashlib
import os
import subprocess
import tempfile
from pathlib import Path

import numpy as np

_SRC = Path(__file__).parent / "_kernels.c"

# No -march/-ffast-math: baseline x86-64 has no FMA and gcc keeps FP adds in
# program order.  Contraction and reduction vectorization are disabled
# explicitly in case a newer compiler turns them on at -O2.
_CFLAGS = [
    "-O2", "-fPIC", "-shared",
    "-ffp-contract=off", "-fno-tree-vectorize", "-fno-tree-slp-vectorize",
]

_lib = None
_load_attempted = False


def _cache_dir() -> Path:
    base = os.environ.get("XDG_CACHE_HOME") or os.path.join(Path.home(), ".cache")
    d = Path(base) / "qtape"
    try:
        d.mkdir(parents=True, exist_ok=True)
        return d
    except OSError:
        return Path(tempfile.gettempdir())


def _load():
    global _lib, _load_attempted
    if _load_attempted:
        return _lib
    _load_attempted = True
    if os.environ.get("QTAPE_NO_NATIVE"):
        return None
    try:
        src = _SRC.read_bytes()
        tag = hashlib.sha256(src + " ".join(_CFLAGS).encode()).hexdigest()[:16]
        so = _cache_dir() / f"kernels-{tag}.so"
        if not so.exists():
            tmp = so.with_suffix(f".{os.getpid()}.tmp")
            subprocess.run(
                ["cc", *_CFLAGS, "-o", str(tmp), str(_SRC)],
                check=True, capture_output=True,
            )
            os.replace(tmp, so)
        lib = ctypes.CDLL(str(so))
        for name in ("conv_fwd_f32", "conv_fwd_f64"):
            getattr(lib, name).restype = None
        _lib = lib
    except Exception:
        _lib = None
    return _lib


def conv_forward_acc(xp: np.ndarray, w: np.ndarray, out64: np.ndarray,
                     stride: int) -> bool:
    """Accumulate the convolution of padded input `xp` with `w` into `out64`.

    Returns False when the native kernel is unavailable; `out64` is then
    untouched and the caller must run the numpy path.
    """
    lib = _load()
    if lib is None:
        return False
    if xp.dtype == np.float32:
        fn = lib.conv_fwd_f32
    elif xp.dtype == np.float64:
        fn = lib.conv_fwd_f64
    else:
        return False
    if not (xp.flags.c_contiguous and w.flags.c_contiguous
            and out64.flags.c_contiguous):
        return False
    n, ci, hp, wp = xp.shape
    co, _, kh, kw = w.shape
    _, _, oh, ow = out64.shape
    fn(xp.ctypes.data_as(ctypes.c_void_p),
       w.astype(xp.dtype, copy=False).ctypes.data_as(ctypes.c_void_p),
       out64.ctypes.data_as(ctypes.c_void_p),
       *(ctypes.c_long(v) for v in (n, ci, hp, wp, co, kh, kw, oh, ow, stride)))
    return True


def available() -> bool:
    return _load() is not None
