"""K-bit fixed-point approximation of batch-normalized activations.

An activation tensor whose per-channel statistics are (beta, gamma) after
the scale-and-bias step is clipped to beta +/- 3*|gamma| and coded into
2^K uniform intervals; decoding returns the median of each interval.
Codes are bit-packed, and the dequantization constants are frozen into
the tape at encode time so the code/decode pair stays bit-exact no matter
when the optimizer later mutates gamma and beta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CodecError, ConfigError
from .ops import channel_shape

SUPPORTED_BITS = (1, 2, 4, 8)

# Learned gamma may collapse to zero or go negative; the coding range uses
# |gamma| floored at this value so the step stays strictly positive.
GAMMA_FLOOR = 1e-8


def gamma_magnitude(gamma: np.ndarray) -> np.ndarray:
    """|gamma| floored away from zero, float64."""
    return np.maximum(np.abs(gamma.astype(np.float64, copy=False)), GAMMA_FLOOR)


@dataclass
class QuantizedTape:
    """Bit-packed activation codes plus frozen decode constants.

    step[c] is the interval width 6*|gamma_c|*2^-K; offset[c] is the
    integer floor(beta_c * 2^K / (6*|gamma_c|)).  sigma2 is the
    per-channel variance captured at forward time, kept at full precision
    for the normalization backward.
    """

    codes: np.ndarray           # packed uint8
    bits: int
    shape: tuple
    dtype: np.dtype
    step: np.ndarray            # float64, length C
    offset: np.ndarray          # int64, length C
    sigma2: np.ndarray          # float64, length C
    clip_count: int

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape))

    def nbytes_codes(self) -> int:
        return int(self.codes.nbytes)


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack integer codes < 2^bits into bytes, code i at bits [i*K, (i+1)*K),
    little-endian bit order within each byte."""
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bits)):
        raise CodecError(f"code out of range for {bits}-bit packing")
    c = codes.astype(np.uint8).ravel()
    if bits == 8:
        return c.copy()
    per_byte = 8 // bits
    if c.size % per_byte:
        c = np.concatenate([c, np.zeros(per_byte - c.size % per_byte,
                                        dtype=np.uint8)])
    c = c.reshape(-1, per_byte)
    out = np.zeros(c.shape[0], dtype=np.uint8)
    for i in range(per_byte):
        out |= c[:, i] << np.uint8(i * bits)
    return out


def unpack_codes(packed: np.ndarray, bits: int, count: int) -> np.ndarray:
    """Inverse of pack_codes; returns `count` uint8 codes."""
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    packed = np.asarray(packed, dtype=np.uint8).ravel()
    expected = (count * bits + 7) // 8
    if packed.size != expected:
        raise CodecError(
            f"need {expected} bytes for {count} {bits}-bit codes, "
            f"got {packed.size}")
    if bits == 8:
        return packed[:count].copy()
    per_byte = 8 // bits
    mask = np.uint8((1 << bits) - 1)
    out = np.empty((packed.size, per_byte), dtype=np.uint8)
    for i in range(per_byte):
        out[:, i] = (packed >> np.uint8(i * bits)) & mask
    return out.reshape(-1)[:count]


def _scales(gamma: np.ndarray, bits: int):
    """(encode scale 2^K/(6|gamma|), decode step 6|gamma|/2^K), float64."""
    g6 = 6.0 * gamma_magnitude(gamma)
    return (2.0 ** bits) / g6, g6 * (2.0 ** -bits)


def raw_codes(a: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
              bits: int) -> np.ndarray:
    """Integer codes before clipping, as int64.

    code = floor(a * 2^K/(6|gamma|)) + 2^(K-1) - floor(beta * 2^K/(6|gamma|)),
    evaluated per channel in float64.
    """
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    scale, _ = _scales(gamma, bits)
    offset = np.floor(beta.astype(np.float64, copy=False) * scale).astype(np.int64)
    u = np.floor(a.astype(np.float64, copy=False) * channel_shape(scale, a.ndim))
    return (u.astype(np.int64) + (1 << (bits - 1))
            - channel_shape(offset, a.ndim).astype(np.int64))


def quantize(a: np.ndarray, gamma: np.ndarray, beta: np.ndarray, bits: int,
             sigma2: np.ndarray | None = None) -> QuantizedTape:
    """Encode a tensor into a K-bit tape with frozen decode constants."""
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    c_extent = a.shape[1]
    if len(gamma) != c_extent or len(beta) != c_extent:
        raise ConfigError(
            f"gamma/beta length must match channel extent {c_extent}")
    raw = raw_codes(a, gamma, beta, bits)
    max_code = (1 << bits) - 1
    clip_count = int(np.count_nonzero((raw < 0) | (raw > max_code)))
    codes = np.clip(raw, 0, max_code).astype(np.uint8)
    scale, step = _scales(gamma, bits)
    offset = np.floor(beta.astype(np.float64, copy=False) * scale).astype(np.int64)
    if sigma2 is None:
        sigma2 = np.zeros(c_extent, dtype=np.float64)
    return QuantizedTape(
        codes=pack_codes(codes, bits), bits=bits, shape=a.shape,
        dtype=a.dtype, step=step, offset=offset.astype(np.int64),
        sigma2=np.asarray(sigma2, dtype=np.float64), clip_count=clip_count)


def dequantize(t: QuantizedTape, out: np.ndarray | None = None) -> np.ndarray:
    """Decode a tape to interval-median values using its frozen constants."""
    codes = unpack_codes(t.codes, t.bits, t.numel).reshape(t.shape)
    half = float(1 << (t.bits - 1))
    inner = codes.astype(np.float64) + (0.5 - half) \
        + channel_shape(t.offset.astype(np.float64), len(t.shape))
    values = channel_shape(t.step, len(t.shape)) * inner
    if out is None:
        return values.astype(t.dtype)
    np.copyto(out, values, casting="same_kind")
    return out


def error_bound(gamma: np.ndarray, bits: int) -> np.ndarray:
    """Per-channel worst-case absolute error for unclipped entries:
    3*|gamma|*2^-K (half the interval width)."""
    return 3.0 * gamma_magnitude(gamma) * (2.0 ** -bits)


def decode_threshold(t: QuantizedTape) -> np.ndarray:
    """Per-channel smallest code whose decoded value is positive.

    A decoded entry is positive iff code + 0.5 - 2^(K-1) + offset > 0,
    so the sign of stored activations can be read off the codes without
    a full decode.
    """
    half = 1 << (t.bits - 1)
    return (half - t.offset).astype(np.int64)
