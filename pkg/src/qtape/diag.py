"""Gradient-error diagnostics: approximation error vs. SGD noise,
stored-sign agreement, and the naive-vs-proposed depth sweep."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .engine import (LayerSpec, NetworkSpec, network_backward,
                     network_forward)
from .errors import ConfigError
from .codec import dequantize, raw_codes
from .training import init_params, softmax_xent


def _seeded_batch(dataset: Dataset, batch_size: int, seed, index: int):
    rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
    idx = rng.choice(len(dataset), size=batch_size, replace=False)
    return dataset.images[idx], dataset.labels[idx]


def _weight_grads(spec, params, images, labels, mode, bits):
    """One forward/backward; returns per-layer weight-gradient copies.

    Shares the engine's code paths so diagnostics measure exactly what
    training computes.
    """
    logits, tapes = network_forward(spec, params, images, mode=mode,
                                    bits=bits)
    _, g = softmax_xent(logits, labels)
    network_backward(spec, params, tapes, g, images, mode=mode)
    grads = [p.grad_weight.astype(np.float64) for p in params]
    for p in params:
        p.zero_grads()
    return grads


@dataclass
class GradReport:
    bits: int
    batches: int
    rows: list    # {layer, kind, approx_error, sgd_noise, ratio, degenerate}

    def to_csv(self, path: str) -> None:
        write_csv(path, ["layer", "kind", "approx_error", "sgd_noise",
                         "ratio"],
                  [[r["layer"], r["kind"], fmt(r["approx_error"]),
                    fmt(r["sgd_noise"]),
                    "" if r["ratio"] is None else fmt(r["ratio"])]
                   for r in self.rows])


def fmt(x: float) -> str:
    return f"{x:.12g}"


def write_csv(path: str, header: list, rows: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def grad_error_report(spec: NetworkSpec, params: list, dataset: Dataset,
                      bits: int = 8, batches: int = 100,
                      batch_size: int = 16, seed: int = 0,
                      csv_path: Optional[str] = None) -> GradReport:
    """Per-layer squared error of approximate weight gradients against the
    across-batch variance of exact ones.

    For each seeded batch the exact and approximate gradients are
    computed from identical inputs and parameters.  approx_error is the
    mean squared elementwise difference (over elements and batches);
    sgd_noise is the per-element variance of the exact gradient across
    batches, averaged over elements; ratio = approx_error / sgd_noise.
    """
    if batches < 2:
        raise ConfigError("need at least 2 batches to measure variance")
    exact_stack = None
    sq_err_sum = None
    for m in range(batches):
        images, labels = _seeded_batch(dataset, batch_size, seed, m)
        g_exact = _weight_grads(spec, params, images, labels, "exact", bits)
        g_approx = _weight_grads(spec, params, images, labels, "approx",
                                 bits)
        if exact_stack is None:
            exact_stack = [[] for _ in g_exact]
            sq_err_sum = [0.0 for _ in g_exact]
        for i, (ge, ga) in enumerate(zip(g_exact, g_approx)):
            exact_stack[i].append(ge.reshape(-1))
            sq_err_sum[i] += float(np.mean((ge - ga) ** 2))
    rows = []
    for i, p in enumerate(params):
        stack = np.stack(exact_stack[i])              # (M, numel)
        noise = float(stack.var(axis=0).mean())
        err = sq_err_sum[i] / batches
        degenerate = noise == 0.0
        rows.append({
            "layer": i, "kind": p.kind, "approx_error": err,
            "sgd_noise": noise,
            "ratio": None if degenerate else err / noise,
            "degenerate": degenerate,
        })
    report = GradReport(bits=bits, batches=batches, rows=rows)
    if csv_path:
        report.to_csv(csv_path)
    return report


def sign_agreement(spec: NetworkSpec, params: list, dataset: Dataset,
                   bits: int = 8, batch_size: int = 16, seed: int = 0):
    """Fraction of stored activation entries whose decoded sign matches the
    exact sign, per layer, split by clipped/unclipped.

    Runs the forward pass twice (exact and approximate storage); the
    forward outputs are identical, so the exact tape holds the reference
    values for the approximate tape's codes.
    """
    images, labels = _seeded_batch(dataset, batch_size, seed, 0)
    _, tapes_exact = network_forward(spec, params, images, mode="exact")
    _, tapes_q = network_forward(spec, params, images, mode="approx",
                                 bits=bits)
    rows = []
    for i, (te, tq) in enumerate(zip(tapes_exact, tapes_q)):
        if te is None or te.mode == "plain":
            continue
        if not tq.is_quantized:
            # identity bypass (or the head): stored values are exact
            rows.append({"layer": i, "clipped_fraction": 0.0,
                         "unclipped_match": 1.0, "clipped_match": 1.0,
                         "overall_match": 1.0})
            continue
        a2 = te.stored
        recon = dequantize(tq.stored)
        raw = raw_codes(a2, tq.gamma, tq.beta, bits)
        clipped = (raw < 0) | (raw > (1 << bits) - 1)
        match = (a2 >= 0) == (recon >= 0)
        n_clip = int(clipped.sum())
        n_total = a2.size
        rows.append({
            "layer": i,
            "clipped_fraction": n_clip / n_total,
            "unclipped_match": float(match[~clipped].mean())
            if n_clip < n_total else 1.0,
            "clipped_match": float(match[clipped].mean()) if n_clip else 1.0,
            "overall_match": float(match.mean()),
        })
    return rows


def quantizer_check(bits: int, n: int = 1_000_000, seed: int = 0,
                    channels: int = 16) -> dict:
    """Randomized check of the coding guarantees at one bit width.

    Draws n values across `channels` channels with random per-channel
    scale/shift, then verifies: every unclipped entry reconstructs
    within half an interval (3*|gamma|*2^-K) with its sign preserved,
    codes round-trip through packing, and storage is ceil(K*n/8) bytes.
    """
    from .codec import error_bound, pack_codes, quantize, unpack_codes

    rng = np.random.default_rng(seed)
    per = n // channels
    gamma = rng.uniform(0.05, 3.0, channels)
    gamma[0] *= -1.0                       # negative scale must be handled
    beta = rng.uniform(-2.0, 2.0, channels)
    a = beta[None, :] + rng.standard_normal((per, channels)) \
        * np.abs(gamma)[None, :] * 1.5
    tape = quantize(a, gamma, beta, bits)
    recon = dequantize(tape)
    raw = raw_codes(a, gamma, beta, bits)
    unclipped = (raw >= 0) & (raw <= (1 << bits) - 1)
    bound = np.broadcast_to(error_bound(gamma, bits)[None, :], a.shape)
    err_ok = bool(np.all(np.abs(recon - a)[unclipped] <= bound[unclipped]))
    sign_ok = bool(np.all(((a >= 0) == (recon >= 0))[unclipped]))
    codes = unpack_codes(tape.codes, bits, tape.numel)
    pack_ok = bool(np.array_equal(
        unpack_codes(pack_codes(codes, bits), bits, tape.numel), codes))
    size_ok = tape.nbytes_codes() == (bits * a.size + 7) // 8
    return {"bits": bits, "n": a.size,
            "clipped_fraction": tape.clip_count / a.size,
            "error_bound_ok": err_ok, "sign_ok": sign_ok,
            "pack_roundtrip_ok": pack_ok, "storage_ok": size_ok,
            "ok": err_ok and sign_ok and pack_ok and size_ok}


def make_sweep_spec(depth: int, dataset_shape: tuple, base_channels: int = 8,
                    num_classes: int = 10) -> NetworkSpec:
    """Stem + uniform residual pairs + head, `depth` layers total."""
    if depth < 2:
        raise ConfigError("sweep depth must be at least 2")
    layers = [LayerSpec("conv", base_channels, 2, 2, 0, preact=False)]
    n_conv = depth - 2
    for _ in range(n_conv):
        layers.append(LayerSpec("conv", base_channels, 3, 1, 1))
    layers.append(LayerSpec("gap_dense", num_classes))
    blocks = [(i, i + 1) for i in range(1, n_conv, 2)]
    return NetworkSpec(input_shape=tuple(dataset_shape),
                       num_classes=num_classes, layers=layers, blocks=blocks)


def naive_vs_proposed_depth_sweep(depths: list, bits: int, dataset: Dataset,
                                  seed: int = 0, batches: int = 20,
                                  batch_size: int = 16,
                                  base_channels: int = 8,
                                  csv_path: Optional[str] = None) -> list:
    """First-layer weight-gradient relative error versus exact, for the
    naive and proposed pipelines at equal bit width, per depth.

    The naive pipeline feeds reconstructed activations forward, so its
    logits and loss gradient differ too; the comparison is end to end.
    """
    if not depths:
        raise ConfigError("depths must be nonempty")
    rows = []
    for depth in depths:
        spec = make_sweep_spec(depth, dataset.images.shape[1:],
                               base_channels, dataset.num_classes)
        params = init_params(spec, seed)
        err = {"approx": 0.0, "naive": 0.0}
        for m in range(batches):
            images, labels = _seeded_batch(dataset, batch_size, seed, m)
            g_exact = _weight_grads(spec, params, images, labels,
                                    "exact", bits)[0]
            norm = np.linalg.norm(g_exact)
            for mode in ("approx", "naive"):
                g = _weight_grads(spec, params, images, labels, mode,
                                  bits)[0]
                err[mode] += float(np.linalg.norm(g - g_exact) / norm)
        rows.append({"depth": depth,
                     "proposed_error": err["approx"] / batches,
                     "naive_error": err["naive"] / batches})
    if csv_path:
        write_csv(csv_path, ["depth", "proposed_error", "naive_error"],
                  [[r["depth"], fmt(r["proposed_error"]),
                    fmt(r["naive_error"])] for r in rows])
    return rows
