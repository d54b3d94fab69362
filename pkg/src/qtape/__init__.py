"""Memory-efficient network training with K-bit quantized activation tapes.

The forward pass runs at full precision through a small pool of reusable
buffers; each layer persists only a quantized copy of its pre-ReLU
activations (plus the variance vector) for the backward pass, keeping
errors from compounding across layers.
"""

from .data import Dataset, augment_batch, load_cifar10, synth_blobs
from .engine import (BufferPool, LayerSpec, MemoryReport, NetworkSpec,
                     make_residual_spec, make_uniform_spec, memory_report,
                     network_backward, network_forward)
from .layer import (LayerParams, LayerTape, layer_backward, layer_forward,
                    reconstruct_from_tape)
from .codec import (QuantizedTape, dequantize, pack_codes, quantize,
                       unpack_codes)
from .training import (TrainConfig, evaluate, init_params, lr_at, sgd_step,
                    softmax_xent, train)

__version__ = "0.1.0"

__all__ = [
    "BufferPool", "Dataset", "LayerParams", "LayerSpec", "LayerTape",
    "MemoryReport", "NetworkSpec", "QuantizedTape", "TrainConfig",
    "augment_batch", "dequantize", "evaluate", "init_params",
    "layer_backward", "layer_forward", "load_cifar10",
    "make_residual_spec", "make_uniform_spec", "memory_report",
    "network_backward", "network_forward", "pack_codes", "quantize",
    "reconstruct_from_tape", "sgd_step", "softmax_xent", "synth_blobs",
    "train", "lr_at", "unpack_codes",
]
