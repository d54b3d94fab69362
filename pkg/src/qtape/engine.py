"""Whole-network forward/backward under a fixed budget of scratch buffers.

The engine drives a sequence of pre-activation layers (with optional
residual blocks) through a pool of width+1 reusable full-precision
slots: one slot holds the activation (or, in reverse, gradient)
currently flowing along the straight path, one holds the residual-path
snapshot while a block is open, and one is per-layer workspace.  A
layer's output overwrites the slot holding its input, which is exactly
the reuse that keeps live full-precision tensors bounded by width+1
regardless of depth; what persists per layer is only its tape.

Per-operator scratch inside the numpy kernels (padded copies, float64
accumulators, decode temporaries) is bounded by a constant number of
max-layer-size arrays and is not part of the pooled accounting; the
pool instruments the architectural buffers whose count would otherwise
scale with depth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .layer import layer_backward, layer_forward
from .ops import conv2d_out_shape
from .codec import QuantizedTape

MAX_WIDTH = 2


@dataclass
class LayerSpec:
    """Topology of one layer; weights live in LayerParams."""

    kind: str                 # conv | dense | gap_dense
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    preact: bool = True

    def to_json(self) -> dict:
        return {"kind": self.kind, "out_channels": self.out_channels,
                "kernel": self.kernel, "stride": self.stride,
                "pad": self.pad, "preact": self.preact}

    @classmethod
    def from_json(cls, d: dict) -> "LayerSpec":
        return cls(kind=d["kind"], out_channels=int(d["out_channels"]),
                   kernel=int(d.get("kernel", 3)),
                   stride=int(d.get("stride", 1)),
                   pad=int(d.get("pad", 1)),
                   preact=bool(d.get("preact", True)))


@dataclass
class NetworkSpec:
    """Ordered layers, residual block index ranges, and the input shape.

    The final layer is the classifier head (dense or gap_dense) and is
    never approximated.  blocks are inclusive (first, last) layer-index
    pairs carrying an identity shortcut from the input of `first` to the
    output of `last`; dimension changes use stride subsampling plus zero
    channel padding.
    """

    input_shape: tuple
    num_classes: int
    layers: list
    blocks: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.blocks = [tuple(b) for b in self.blocks]
        self.validate()

    # -- structure ----------------------------------------------------

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        head = self.layers[-1]
        if head.kind not in ("dense", "gap_dense"):
            raise ConfigError("final layer must be a dense classifier head")
        if head.out_channels != self.num_classes:
            raise ConfigError("head output extent must equal num_classes")
        for i, l in enumerate(self.layers):
            if not l.preact and i != 0:
                raise ConfigError("plain linear layers allowed only as stem")
        last_end = -1
        for first, last in self.blocks:
            if not (0 <= first <= last < len(self.layers) - 1):
                raise ConfigError(f"block ({first},{last}) out of range")
            if first <= last_end:
                raise ConfigError("blocks must be disjoint and ordered")
            if not 2 <= last - first + 1 <= 3:
                raise ConfigError("blocks group 2-3 layers")
            last_end = last
        # shape chain + shortcut compatibility checked here too
        shapes = self.layer_shapes(batch=1)
        for first, last in self.blocks:
            b_in, b_out = shapes[first][0], shapes[last][1]
            if len(b_in) != 4 or len(b_out) != 4:
                raise ConfigError("residual blocks need rank-4 activations")
            s = b_in[2] // b_out[2]
            if (b_in[2] != s * b_out[2] or b_in[3] != s * b_out[3]
                    or s not in (1, 2) or b_out[1] < b_in[1]):
                raise ConfigError(
                    f"block ({first},{last}) shortcut cannot map "
                    f"{b_in} to {b_out}")
        if self.width() > MAX_WIDTH:
            raise ConfigError(
                f"architecture width {self.width()} exceeds {MAX_WIDTH}")

    def layer_shapes(self, batch: int):
        """Per-layer (input_shape, output_shape) with batch extent N."""
        shapes = []
        cur = (batch,) + self.input_shape
        for i, l in enumerate(self.layers):
            if l.kind == "conv":
                if len(cur) != 4:
                    raise ShapeError(f"layer {i}: conv needs rank-4 input")
                out = conv2d_out_shape(
                    cur, (l.out_channels, cur[1], l.kernel, l.kernel),
                    l.stride, l.pad)
            elif l.kind in ("dense", "gap_dense"):
                if l.kind == "dense" and len(cur) != 2:
                    raise ShapeError(f"layer {i}: dense needs rank-2 input")
                out = (batch, l.out_channels)
            else:
                raise ConfigError(f"unknown layer kind {l.kind!r}")
            shapes.append((cur, out))
            cur = out
        return shapes

    def width(self) -> int:
        """Maximum number of outstanding activations while processing the
        layer sequence: 1 for feed-forward chains, 2 with residual blocks.

        Value v in {-1, 0, .., n-2} is the input of layer v+1 (-1 being
        the network input); its last reader is layer v+1 unless it is a
        block input, which the block-end addition also reads.
        """
        n = len(self.layers)
        last_use = {v: v + 1 for v in range(-1, n - 1)}
        for first, last in self.blocks:
            last_use[first - 1] = max(last_use[first - 1], last)
        w = 1
        for i in range(n):
            pending = sum(1 for v in range(-1, i) if last_use.get(v, -1) > i)
            w = max(w, pending + 1)   # +1 for the output produced at step i
        return w

    def block_of(self, i: int):
        for b in self.blocks:
            if b[0] <= i <= b[1]:
                return b
        return None

    # -- serialization ------------------------------------------------

    def to_json(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "num_classes": self.num_classes,
                "layers": [l.to_json() for l in self.layers],
                "blocks": [list(b) for b in self.blocks]}

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        return cls(input_shape=tuple(d["input_shape"]),
                   num_classes=int(d["num_classes"]),
                   layers=[LayerSpec.from_json(x) for x in d["layers"]],
                   blocks=[tuple(b) for b in d.get("blocks", [])])

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)

    @classmethod
    def load(cls, path: str) -> "NetworkSpec":
        with open(path) as f:
            return cls.from_json(json.load(f))


class BufferPool:
    """width+1 growable full-precision scratch slots with peak tracking."""

    def __init__(self, max_slots: int, dtype=np.float32):
        self.max_slots = max_slots
        self.dtype = np.dtype(dtype)
        self._slots = []          # list of [flat ndarray, live_view_or_None]
        self._live = {}           # id(view) -> slot index
        self.peak_live_count = 0
        self.peak_live_bytes = 0

    @property
    def live_count(self) -> int:
        return len(self._live)

    @property
    def live_bytes(self) -> int:
        return sum(self._slots[s][1].nbytes for s in self._live.values())

    @property
    def capacity_bytes(self) -> int:
        return sum(s[0].nbytes for s in self._slots)

    def _note_peaks(self) -> None:
        self.peak_live_count = max(self.peak_live_count, self.live_count)
        self.peak_live_bytes = max(self.peak_live_bytes, self.live_bytes)

    def _view_on(self, idx: int, shape: tuple) -> np.ndarray:
        numel = int(np.prod(shape))
        slot = self._slots[idx]
        if slot[0].size < numel:
            slot[0] = np.empty(numel, dtype=self.dtype)
        view = slot[0][:numel].reshape(shape)
        slot[1] = view
        self._live[id(view)] = idx
        return view

    def acquire(self, shape: tuple) -> np.ndarray:
        for idx in range(len(self._slots)):
            if idx not in self._live.values():
                break
        else:
            idx = len(self._slots)
            if idx >= self.max_slots:
                raise StateError(
                    f"buffer pool exceeded {self.max_slots} live slots")
            self._slots.append([np.empty(0, dtype=self.dtype), None])
        view = self._view_on(idx, shape)
        self._note_peaks()
        return view

    def replace(self, view: np.ndarray, shape: tuple) -> np.ndarray:
        """Retarget the slot holding `view` to a new shape (the buffer-reuse
        step: a layer output overwrites its input's slot)."""
        idx = self._live.pop(id(view))
        new = self._view_on(idx, shape)
        self._note_peaks()
        return new

    def release(self, view: np.ndarray) -> None:
        idx = self._live.pop(id(view))
        self._slots[idx][1] = None

    def release_all(self) -> None:
        self._live.clear()
        for s in self._slots:
            s[1] = None


def _shortcut_stride(in_shape: tuple, out_shape: tuple) -> int:
    return in_shape[2] // out_shape[2]


def _apply_shortcut_add(cur: np.ndarray, res: np.ndarray) -> None:
    """cur += shortcut(res): stride subsample + zero channel padding."""
    if cur.shape == res.shape:
        cur += res
        return
    s = _shortcut_stride(res.shape, cur.shape)
    cin = res.shape[1]
    cur[:, :cin] += res[:, :, ::s, ::s]


def _apply_shortcut_adjoint(g_in: np.ndarray, g_res: np.ndarray) -> None:
    """g_in += adjoint of the shortcut applied to g_res."""
    if g_in.shape == g_res.shape:
        g_in += g_res
        return
    s = _shortcut_stride(g_in.shape, g_res.shape)
    cin = g_in.shape[1]
    g_in[:, :, ::s, ::s] += g_res[:, :cin]


def network_forward(spec: NetworkSpec, params: list, batch: np.ndarray,
                    mode: str = "exact", bits: int | None = 8,
                    training: bool = True,
                    pool: Optional[BufferPool] = None):
    """Run all layers forward; returns (logits, tapes).

    The classifier head always stores its tape at full precision.
    Logits are copied out of the pool, so they stay valid after the
    pool is reused.
    """
    shapes = spec.layer_shapes(batch.shape[0])
    if batch.shape != shapes[0][0]:
        raise ShapeError(
            f"batch shape {batch.shape} != spec input {shapes[0][0]}")
    if pool is None:
        pool = BufferPool(spec.width() + 1, dtype=batch.dtype)
    head_idx = len(spec.layers) - 1
    tapes = []
    cur = batch
    res = None
    res_block = None
    try:
        for i, (p, (in_shape, out_shape)) in enumerate(zip(params, shapes)):
            blk = spec.block_of(i)
            if blk is not None and i == blk[0]:
                res = pool.acquire(cur.shape)
                np.copyto(res, cur)
                res_block = blk
            work = pool.acquire(in_shape) if p.preact else None
            if cur is batch:
                out = pool.acquire(out_shape)
            else:
                out = pool.replace(cur, out_shape)
            layer_mode = "exact" if i == head_idx else mode
            a_out, tape = layer_forward(cur, p, mode=layer_mode, bits=bits,
                                        training=training, out=out, work=work)
            tapes.append(tape)
            if work is not None:
                pool.release(work)
            cur = out
            if res_block is not None and i == res_block[1]:
                _apply_shortcut_add(cur, res)
                pool.release(res)
                res, res_block = None, None
        logits = np.array(cur, copy=True)
    finally:
        pool.release_all()
    return logits, tapes


def network_backward(spec: NetworkSpec, params: list, tapes: list,
                     loss_grad: np.ndarray, batch: np.ndarray,
                     mode: str = "exact",
                     pool: Optional[BufferPool] = None) -> None:
    """Reverse pass over all layers; accumulates gradients into params.

    Residual connections copy the incoming gradient at the block output
    and add its shortcut adjoint back at the block input.  The gradient
    w.r.t. the network input is discarded.
    """
    if len(tapes) != len(spec.layers):
        raise StateError(f"expected {len(spec.layers)} tapes, got {len(tapes)}")
    shapes = spec.layer_shapes(batch.shape[0])
    if loss_grad.shape != shapes[-1][1]:
        raise ShapeError("loss gradient shape mismatch")
    if pool is None:
        pool = BufferPool(spec.width() + 1, dtype=batch.dtype)
    try:
        g = pool.acquire(loss_grad.shape)
        np.copyto(g, loss_grad)
        res_g = None
        res_block = None
        for i in range(len(spec.layers) - 1, -1, -1):
            blk = spec.block_of(i)
            if blk is not None and i == blk[1]:
                res_g = pool.acquire(g.shape)
                np.copyto(res_g, g)
                res_block = blk
            in_shape = shapes[i][0]
            if i == 0:
                layer_backward(g, tapes[i], params[i], need_input_grad=False)
                pool.release(g)
                g = None
            else:
                out = pool.acquire(in_shape)
                g_in = layer_backward(g, tapes[i], params[i], out=out)
                pool.release(g)
                g = g_in
            if res_block is not None and i == res_block[0]:
                if g is not None:
                    _apply_shortcut_adjoint(g, res_g)
                pool.release(res_g)
                res_g, res_block = None, None
    finally:
        pool.release_all()


@dataclass
class MemoryReport:
    """Byte accounting for one engine configuration.

    persistent_tape_bytes counts only the per-layer activation storage
    (codes or full-precision copies); the small per-channel vectors are
    reported separately under channel_overhead_bytes.  transient numbers
    come from a liveness simulation of the engine schedule and must
    match the pool's instrumented high-water marks exactly.
    """

    mode: str
    bits: Optional[int]
    batch_shape: tuple
    width: int
    persistent_tape_bytes: int
    channel_overhead_bytes: int
    transient_buffer_bytes: int
    peak_live_tensors: int
    parameter_bytes: int
    exact_persistent_bytes: int
    per_layer: list

    @property
    def total_bytes(self) -> int:
        return (self.persistent_tape_bytes + self.channel_overhead_bytes
                + self.transient_buffer_bytes + self.parameter_bytes)

    @property
    def ratio_vs_exact(self) -> float:
        """(persistent store + transient buffers) relative to the exact
        engine's persistent store."""
        return (self.persistent_tape_bytes + self.transient_buffer_bytes) \
            / self.exact_persistent_bytes

    @property
    def persistent_ratio_vs_exact(self) -> float:
        return self.persistent_tape_bytes / self.exact_persistent_bytes


def _simulate_transients(spec: NetworkSpec, shapes: list, itemsize: int):
    """Replay the engine's acquire/replace/release schedule on shape
    metadata; returns (peak_live_count, peak_live_bytes).

    Mirrors network_forward/network_backward exactly; the acceptance
    suite checks this against the instrumented pool.
    """
    peak_count, peak_bytes = 0, 0
    live = {}

    def note():
        nonlocal peak_count, peak_bytes
        peak_count = max(peak_count, len(live))
        peak_bytes = max(peak_bytes, sum(live.values()) * itemsize)

    def acquire(name, shape):
        live[name] = int(np.prod(shape))
        note()

    def release(name):
        live.pop(name)

    n_layers = len(spec.layers)
    # forward
    cur_pooled = False
    res_block = None
    for i in range(n_layers):
        in_shape, out_shape = shapes[i]
        blk = spec.block_of(i)
        if blk is not None and i == blk[0]:
            acquire("res", in_shape)
            res_block = blk
        if spec.layers[i].preact:
            acquire(f"work{i}", in_shape)
        if not cur_pooled:
            acquire("cur", out_shape)
            cur_pooled = True
        else:
            live["cur"] = int(np.prod(out_shape))
            note()
        if spec.layers[i].preact:
            release(f"work{i}")
        if res_block is not None and i == res_block[1]:
            release("res")
            res_block = None
    release("cur")
    # backward
    acquire("g", shapes[-1][1])
    res_block = None
    for i in range(n_layers - 1, -1, -1):
        blk = spec.block_of(i)
        if blk is not None and i == blk[1]:
            acquire("res_g", shapes[i][1])
            res_block = blk
        if i > 0:
            acquire("g_in", shapes[i][0])
            release("g")
            live["g"] = live.pop("g_in")
        else:
            release("g")
        if res_block is not None and i == res_block[0]:
            release("res_g")
            res_block = None
    return peak_count, peak_bytes


def memory_report(spec: NetworkSpec, batch_shape: tuple, mode: str = "approx",
                  bits: Optional[int] = 8,
                  dtype=np.float32) -> MemoryReport:
    """Byte-accurate accounting of tapes, buffers, and parameters."""
    dtype = np.dtype(dtype)
    shapes = spec.layer_shapes(batch_shape[0])
    head_idx = len(spec.layers) - 1
    per_layer = []
    persistent = 0
    exact_persistent = 0
    overhead = 0
    param_bytes = 0
    for i, l in enumerate(spec.layers):
        in_shape, out_shape = shapes[i]
        numel = int(np.prod(in_shape))
        cin = in_shape[1]
        if l.kind == "conv":
            w_count = l.out_channels * cin * l.kernel * l.kernel
        else:
            w_count = cin * l.out_channels
        param_bytes += w_count * dtype.itemsize
        if not l.preact:
            per_layer.append({"layer": i, "kind": l.kind, "stored_numel": 0,
                              "persistent_bytes": 0})
            continue
        param_bytes += 2 * cin * dtype.itemsize
        exact_bytes = numel * dtype.itemsize
        exact_persistent += exact_bytes
        if mode == "exact" or bits is None or i == head_idx:
            stored = exact_bytes
        else:
            stored = (bits * numel + 7) // 8
        persistent += stored
        overhead += cin * 8                      # sigma2 (float64)
        overhead += 2 * cin * dtype.itemsize     # frozen gamma/beta
        if mode != "exact" and bits is not None and i != head_idx:
            overhead += 2 * cin * 8              # step + offset
        per_layer.append({"layer": i, "kind": l.kind, "stored_numel": numel,
                          "persistent_bytes": stored})
    width = spec.width()
    peak_count, peak_bytes = _simulate_transients(spec, shapes, dtype.itemsize)
    return MemoryReport(
        mode=mode, bits=bits, batch_shape=tuple(batch_shape), width=width,
        persistent_tape_bytes=persistent,
        channel_overhead_bytes=overhead,
        transient_buffer_bytes=peak_bytes,
        peak_live_tensors=peak_count,
        parameter_bytes=param_bytes,
        exact_persistent_bytes=exact_persistent,
        per_layer=per_layer)


def measured_tape_bytes(tapes: list) -> int:
    """Actual persisted activation bytes across a tape set."""
    return sum(t.stored_nbytes() for t in tapes if t is not None)


def measured_overhead_bytes(tapes: list) -> int:
    """Actual per-channel vector bytes across a tape set."""
    total = 0
    for t in tapes:
        if t is None or t.mode == "plain":
            continue
        total += t.sigma2.nbytes + t.gamma.nbytes + t.beta.nbytes
        if isinstance(t.stored, QuantizedTape):
            total += t.stored.step.nbytes + t.stored.offset.nbytes
    return total


# ----------------------------------------------------------------------
# Spec builders for the standard evaluation topologies.

def make_residual_spec(input_shape=(3, 32, 32), num_classes=10,
                       base_channels=8, blocks_per_stage=3, stages=3,
                       stem_stride=2) -> NetworkSpec:
    """Stem conv + `stages` stages of two-layer residual blocks + head.

    Channel count doubles and resolution halves at each stage boundary
    after the first.  Downsampling convolutions use 2x2 kernels without
    padding so output extents stay integral; all other convolutions are
    3x3 pad-1.  Depth = 1 + 2*blocks_per_stage*stages + 1 layers.
    """
    def conv(out_ch, stride):
        if stride == 1:
            return LayerSpec("conv", out_ch, 3, 1, 1)
        return LayerSpec("conv", out_ch, 2, stride, 0)

    layers = [conv(base_channels, stem_stride)]
    layers[0].preact = False
    blocks = []
    for s in range(stages):
        for b in range(blocks_per_stage):
            stride = 2 if (s > 0 and b == 0) else 1
            out_ch = base_channels * (2 ** s)
            first = len(layers)
            layers.append(conv(out_ch, stride))
            layers.append(conv(out_ch, 1))
            blocks.append((first, first + 1))
    layers.append(LayerSpec("gap_dense", num_classes))
    return NetworkSpec(input_shape=input_shape, num_classes=num_classes,
                       layers=layers, blocks=blocks)


def make_uniform_spec(depth: int, channels: int = 8, hw: int = 16,
                      num_classes: int = 10,
                      residual: bool = True) -> NetworkSpec:
    """`depth` layers of identical size: depth-1 convs plus the head.

    The input already has `channels` channels at hw x hw so every
    layer's stored activation is the same size.  With residual=True
    consecutive conv pairs form identity blocks (width 2).
    """
    if depth < 2:
        raise ConfigError("uniform spec needs at least 2 layers")
    n_conv = depth - 1
    layers = [LayerSpec("conv", channels, 3, 1, 1) for _ in range(n_conv)]
    layers.append(LayerSpec("gap_dense", num_classes))
    blocks = []
    if residual:
        blocks = [(i, i + 1) for i in range(0, n_conv - 1, 2)]
    return NetworkSpec(input_shape=(channels, hw, hw),
                       num_classes=num_classes, layers=layers, blocks=blocks)
