"""One pre-activation layer: batch-norm, scale-and-bias, ReLU, linear.

The forward pass is always computed at full precision; what varies by
mode is what the tape keeps for the backward pass:

  exact  - a full-precision copy of the pre-ReLU activations.
  approx - a K-bit quantized copy; forward outputs still come from the
           full-precision values.
  naive  - a K-bit quantized copy, and the *reconstructed* values also
           replace the real ones for the ReLU and linear transform, so
           approximation errors feed forward (baseline behaviour).

The backward pass reconstructs the pre-ReLU activations from the tape,
re-derives the normalized and rectified tensors elementwise, and applies
the standard chain rule.  Buffers can be supplied by the caller so the
network engine can run the whole pass inside a fixed set of scratch
slots; standalone calls just allocate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError, StateError
from .ops import (channel_mean, channel_moments, channel_shape, channel_sum,
                  conv2d_backward, conv2d_forward, conv2d_out_shape, matmul)
from .codec import GAMMA_FLOOR, QuantizedTape, dequantize, quantize

MODES = ("exact", "approx", "naive")

RUNNING_STAT_MOMENTUM = 0.9


@dataclass
class LayerParams:
    """Learnable state for one layer plus gradient and momentum slots.

    kind is "conv" (weight is a Cout x Cin x kh x kw kernel), "dense"
    (weight is Din x Dout), or "gap_dense" (dense preceded by a global
    average pool folded into the transform).  gamma/beta are None for
    plain linear layers without the normalization/ReLU prefix.
    """

    kind: str
    weight: np.ndarray
    stride: int = 1
    pad: int = 0
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    bn_epsilon: float = 1e-5
    grad_weight: np.ndarray = None
    grad_gamma: Optional[np.ndarray] = None
    grad_beta: Optional[np.ndarray] = None
    vel_weight: np.ndarray = None
    vel_gamma: Optional[np.ndarray] = None
    vel_beta: Optional[np.ndarray] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.grad_weight is None:
            self.grad_weight = np.zeros_like(self.weight)
        if self.vel_weight is None:
            self.vel_weight = np.zeros_like(self.weight)
        if self.preact:
            c = len(self.gamma)
            if len(self.beta) != c:
                raise ShapeError("gamma/beta length mismatch")
            if self.grad_gamma is None:
                self.grad_gamma = np.zeros_like(self.gamma)
            if self.grad_beta is None:
                self.grad_beta = np.zeros_like(self.beta)
            if self.vel_gamma is None:
                self.vel_gamma = np.zeros_like(self.gamma)
            if self.vel_beta is None:
                self.vel_beta = np.zeros_like(self.beta)
            if self.running_mean is None:
                self.running_mean = np.zeros(c, dtype=np.float64)
            if self.running_var is None:
                self.running_var = np.ones(c, dtype=np.float64)

    @property
    def preact(self) -> bool:
        return self.gamma is not None

    @property
    def dtype(self) -> np.dtype:
        return self.weight.dtype

    def zero_grads(self) -> None:
        self.grad_weight[...] = 0
        if self.preact:
            self.grad_gamma[...] = 0
            self.grad_beta[...] = 0

    def param_nbytes(self) -> int:
        n = self.weight.nbytes
        if self.preact:
            n += self.gamma.nbytes + self.beta.nbytes
        return n


@dataclass
class LayerTape:
    """Per-layer state retained for the backward pass."""

    mode: str
    stored: object                       # ndarray, QuantizedTape, or None
    sigma2: Optional[np.ndarray] = None  # float64 per-channel variance
    gamma: Optional[np.ndarray] = None   # frozen copies from forward time
    beta: Optional[np.ndarray] = None
    bn_epsilon: float = 1e-5
    identity: bool = False               # quantization bypassed
    input_ref: Optional[np.ndarray] = None  # plain layers: the layer input

    @property
    def is_quantized(self) -> bool:
        return isinstance(self.stored, QuantizedTape)

    def stored_nbytes(self) -> int:
        """Bytes persisted for the backward pass (activation storage only)."""
        if isinstance(self.stored, QuantizedTape):
            return self.stored.nbytes_codes()
        if isinstance(self.stored, np.ndarray):
            return self.stored.nbytes
        return 0


def safe_gamma(gamma: np.ndarray) -> np.ndarray:
    """gamma with magnitude floored away from zero, sign kept (0 -> +)."""
    mag = np.maximum(np.abs(gamma), gamma.dtype.type(GAMMA_FLOOR))
    return np.where(gamma < 0, -mag, mag)


def _linear_forward(a3: np.ndarray, p: LayerParams,
                    out: Optional[np.ndarray]) -> np.ndarray:
    if p.kind == "conv":
        return conv2d_forward(a3, p.weight, p.stride, p.pad, out=out)
    if p.kind == "dense":
        r = matmul(a3, p.weight)
    elif p.kind == "gap_dense":
        r = matmul(_gap(a3), p.weight)
    else:
        raise StateError(f"unknown layer kind {p.kind!r}")
    if out is None:
        return r
    np.copyto(out, r)
    return out


def _gap(a3: np.ndarray) -> np.ndarray:
    """Global average pool to (N, C), float64 accumulation."""
    return a3.astype(np.float64, copy=False).mean(
        axis=tuple(range(2, a3.ndim))).astype(a3.dtype)


def _linear_backward(a3: np.ndarray, g_out: np.ndarray, p: LayerParams,
                     g_in_out: Optional[np.ndarray]):
    """Gradients of the linear transform; accumulates into p.grad_weight,
    returns the gradient w.r.t. a3."""
    if p.kind == "conv":
        g_a3, g_k = conv2d_backward(a3, p.weight, g_out, p.stride, p.pad,
                                    g_x_out=g_in_out)
        p.grad_weight += g_k
        return g_a3
    if p.kind == "dense":
        p.grad_weight += matmul(a3.T.copy(), g_out)
        g_a3 = matmul(g_out, p.weight.T.copy())
    elif p.kind == "gap_dense":
        hw = int(np.prod(a3.shape[2:])) if a3.ndim == 4 else 1
        pooled = _gap(a3)
        p.grad_weight += matmul(pooled.T.copy(), g_out)
        g_pool = matmul(g_out, p.weight.T.copy())
        g_a3 = np.broadcast_to(
            (g_pool / a3.dtype.type(hw)).reshape(a3.shape[:2] + (1,) * (a3.ndim - 2)),
            a3.shape)
    else:
        raise StateError(f"unknown layer kind {p.kind!r}")
    if g_in_out is None:
        return np.ascontiguousarray(g_a3)
    np.copyto(g_in_out, g_a3)
    return g_in_out


def linear_out_shape(p: LayerParams, in_shape: tuple) -> tuple:
    if p.kind == "conv":
        return conv2d_out_shape(in_shape, p.weight.shape, p.stride, p.pad)
    if p.kind == "dense":
        return (in_shape[0], p.weight.shape[1])
    if p.kind == "gap_dense":
        return (in_shape[0], p.weight.shape[1])
    raise StateError(f"unknown layer kind {p.kind!r}")


def _decode_stored(tape: LayerTape, out: Optional[np.ndarray]) -> np.ndarray:
    """Materialize the stored pre-ReLU activations into `out`."""
    if tape.is_quantized:
        return dequantize(tape.stored, out=out)
    if out is None:
        return tape.stored.copy()
    np.copyto(out, tape.stored)
    return out


def layer_forward(a_in: np.ndarray, p: LayerParams, mode: str = "exact",
                  bits: int | None = 8, training: bool = True,
                  out: Optional[np.ndarray] = None,
                  work: Optional[np.ndarray] = None):
    """Run the layer forward; returns (a_out, tape).

    bits=None bypasses the quantizer (approx/naive then store a
    full-precision copy through the same code path).  `work` must match
    a_in's shape and may not alias it; `out` receives the linear output
    and may share storage with a_in (a_in is fully consumed before the
    linear transform writes).  In evaluation mode (training=False) the
    running statistics normalize the input and no tape is produced.
    """
    if mode not in MODES:
        raise StateError(f"unknown mode {mode!r}")
    if not p.preact:
        a_out = _linear_forward(a_in, p, out)
        tape = LayerTape(mode="plain", stored=None, input_ref=a_in)
        return a_out, tape

    c = a_in.shape[1]
    if len(p.gamma) != c:
        raise ShapeError(f"layer expects {len(p.gamma)} channels, got {c}")
    dt = a_in.dtype
    if work is None:
        work = np.empty_like(a_in)

    if training:
        mean, var = channel_moments(a_in)
        m = RUNNING_STAT_MOMENTUM
        p.running_mean *= m
        p.running_mean += (1.0 - m) * mean
        p.running_var *= m
        p.running_var += (1.0 - m) * var
    else:
        mean, var = p.running_mean, p.running_var

    inv = 1.0 / np.sqrt(var + p.bn_epsilon)
    np.subtract(a_in, channel_shape(mean.astype(dt), a_in.ndim), out=work)
    np.multiply(work, channel_shape(inv.astype(dt), a_in.ndim), out=work)
    np.multiply(work, channel_shape(p.gamma, a_in.ndim), out=work)
    np.add(work, channel_shape(p.beta, a_in.ndim), out=work)

    tape = None
    if training:
        tape = LayerTape(mode=mode, stored=None, sigma2=var,
                         gamma=p.gamma.copy(), beta=p.beta.copy(),
                         bn_epsilon=p.bn_epsilon)
        if mode == "exact" or bits is None:
            tape.stored = work.copy()
            tape.identity = bits is None and mode != "exact"
        else:
            tape.stored = quantize(work, p.gamma, p.beta, bits, sigma2=var)
        if mode == "naive" and bits is not None:
            dequantize(tape.stored, out=work)

    np.maximum(work, dt.type(0), out=work)
    a_out = _linear_forward(work, p, out)
    return a_out, tape


def reconstruct_from_tape(tape: LayerTape):
    """Rebuild (normalized, pre-ReLU, rectified) tensors from a tape.

    The normalized tensor inverts the scale-and-bias step with the
    frozen gamma/beta captured at forward time, gamma's magnitude
    floored exactly as in the quantizer.
    """
    if tape.mode == "plain":
        raise StateError("plain layer tapes hold no activations")
    a2 = _decode_stored(tape, None)
    a3 = np.maximum(a2, a2.dtype.type(0))
    gsafe = safe_gamma(tape.gamma)
    a1 = (a2 - channel_shape(tape.beta, a2.ndim)) \
        / channel_shape(gsafe, a2.ndim)
    return a1, a2, a3


def bn_input_gradient(a1: np.ndarray, g1: np.ndarray, sigma2: np.ndarray,
                      eps: float, variance_a1: Optional[np.ndarray] = None,
                      out: Optional[np.ndarray] = None) -> np.ndarray:
    """Backward through the normalization step.

    grad_in = (sigma2+eps)^(-1/2) * [g1 - mean(g1) - a1v * mean(a1v * g1)]

    The third bracketed term is the only one that touches the stored
    activations; `variance_a1` substitutes a different tensor into that
    term alone (both occurrences), which the diagnostics use to localize
    approximation error.
    """
    dt = g1.dtype
    a1v = a1 if variance_a1 is None else variance_a1
    t2 = channel_mean(g1).astype(dt)
    t3 = channel_mean(np.multiply(a1v, g1)).astype(dt)
    inv = (1.0 / np.sqrt(sigma2 + eps)).astype(dt)
    if out is None:
        out = np.empty_like(g1)
    np.subtract(g1, channel_shape(t2, g1.ndim), out=out)
    out -= a1v * channel_shape(t3, g1.ndim)
    np.multiply(out, channel_shape(inv, g1.ndim), out=out)
    return out


def layer_backward(g_out: np.ndarray, tape: LayerTape, p: LayerParams,
                   out: Optional[np.ndarray] = None,
                   need_input_grad: bool = True,
                   variance_a1: Optional[np.ndarray] = None,
                   internals: Optional[dict] = None) -> np.ndarray:
    """Backward through the layer; accumulates parameter gradients into p
    and returns the gradient w.r.t. the layer input.

    `out` receives the input gradient (shape of the layer input); the
    engine points it at a pool slot.  Tape reconstruction and the masked
    intermediates live in op-local scratch that is released on return.
    need_input_grad=False skips the final input-gradient step (first
    layer).  `variance_a1` is forwarded to bn_input_gradient.
    `internals`, when a dict, receives copies of the intermediate
    gradients (diagnostics only).
    """
    if tape is None:
        raise StateError("no tape: layer was run in evaluation mode")
    if tape.mode == "plain":
        a_in = tape.input_ref
        if p.kind != "conv":
            p.grad_weight += matmul(a_in.T.copy(), g_out)
            if not need_input_grad:
                return None
            g_in = matmul(g_out, p.weight.T.copy())
            if out is not None:
                np.copyto(out, g_in)
                g_in = out
            return g_in
        g_in, g_k = conv2d_backward(a_in, p.weight, g_out, p.stride, p.pad,
                                    g_x_out=out, need_g_x=need_input_grad)
        p.grad_weight += g_k
        return g_in

    if tape.gamma is None or len(tape.gamma) != len(p.gamma):
        raise StateError("tape does not match layer parameters")
    dt = g_out.dtype
    in_shape = tape.stored.shape
    if linear_out_shape(p, in_shape) != g_out.shape:
        raise StateError(
            f"g_out shape {g_out.shape} inconsistent with tape {in_shape}")

    # Rectified activations for the weight gradient.
    a3 = _decode_stored(tape, None)
    mask = a3 > 0
    np.maximum(a3, dt.type(0), out=a3)
    if internals is not None:
        internals["mask"] = mask.copy()

    g3 = _linear_backward(a3, g_out, p, out)
    if internals is not None:
        internals["grad_linear_in"] = g3.copy()

    a1 = _decode_stored(tape, out=None)
    np.subtract(a1, channel_shape(tape.beta, a1.ndim), out=a1)
    np.divide(a1, channel_shape(safe_gamma(tape.gamma), a1.ndim), out=a1)

    np.multiply(g3, mask, out=g3)                      # ReLU gate
    if internals is not None:
        internals["grad_pre_relu"] = g3.copy()
    p.grad_beta += channel_sum(g3)
    p.grad_gamma += channel_sum(np.multiply(a1, g3))
    np.multiply(g3, channel_shape(tape.gamma, g3.ndim), out=g3)
    if internals is not None:
        internals["grad_normalized"] = g3.copy()
        internals["a1"] = a1.copy()

    if not need_input_grad:
        return None
    return bn_input_gradient(a1, g3, tape.sigma2, tape.bn_epsilon,
                             variance_a1=variance_a1, out=g3)
