"""Command-line front end.

Subcommands: train, gradcheck, memreport, quantcheck, sweep.  A config
file is a JSON document with a "network" section (the network layout,
see NetworkSpec.to_json) and a "train" section (TrainConfig fields).
Datasets come from --data (a directory of CIFAR-10 binary batches) or
--synth N (a generated corpus written in the same binary layout and
read back through the real parser).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import diag
from .data import load_cifar10, make_synthetic_cifar_dir
from .engine import NetworkSpec, memory_report
from .errors import QtapeError
from .training import TrainConfig, evaluate, init_params, train


def _load_bundle(path: str):
    with open(path) as f:
        doc = json.load(f)
    spec = NetworkSpec.from_json(doc["network"])
    cfg = TrainConfig.from_json(doc.get("train", {}))
    return spec, cfg


def _resolve_dataset(args, seed: int):
    if getattr(args, "data", None):
        return load_cifar10(args.data)
    n = getattr(args, "synth", None) or 2000
    d = os.path.join(tempfile.gettempdir(),
                     f"qtape-synth-{seed}-{n}")
    if not os.path.exists(os.path.join(d, "data_batch_1.bin")):
        make_synthetic_cifar_dir(d, seed=seed, train_n=n,
                                 test_n=max(n // 5, 10))
    return load_cifar10(d)


def cmd_train(args) -> int:
    spec, cfg = _load_bundle(args.config)
    if args.engine:
        cfg.mode = args.engine
    if args.bits is not None:
        cfg.bits = args.bits if args.bits > 0 else None
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iters is not None:
        cfg.total_iters = args.iters
    if args.out:
        cfg.log_path = args.out
    dataset = _resolve_dataset(args, cfg.seed)
    result = train(spec, cfg, dataset)
    final = result.records[-1]
    print(f"trained {cfg.total_iters} iterations ({cfg.mode}, "
          f"bits={cfg.bits}): final loss {final[1]:.4f}")
    if args.eval:
        err = evaluate(spec, result.params, dataset)
        print(f"train-set top-1 error: {err:.4f}")
    if cfg.log_path:
        print(f"log written to {cfg.log_path}")
    return 0


def cmd_gradcheck(args) -> int:
    spec, cfg = _load_bundle(args.config)
    dataset = _resolve_dataset(args, cfg.seed)
    params = init_params(spec, cfg.seed)
    if args.warmup:
        cfg.mode, cfg.total_iters = "exact", args.warmup
        train(spec, cfg, dataset, params=params)
    report = diag.grad_error_report(
        spec, params, dataset, bits=args.bits, batches=args.batches,
        batch_size=cfg.batch_size, seed=cfg.seed, csv_path=args.out)
    worst = 0.0
    for r in report.rows:
        ratio = "n/a" if r["ratio"] is None else f"{r['ratio']:.3e}"
        print(f"layer {r['layer']:3d} {r['kind']:>9}: "
              f"approx_err {r['approx_error']:.3e}  "
              f"sgd_noise {r['sgd_noise']:.3e}  ratio {ratio}")
        if r["ratio"] is not None:
            worst = max(worst, r["ratio"])
    print(f"worst ratio: {worst:.3e}")
    if args.out:
        print(f"csv written to {args.out}")
    return 0


def cmd_memreport(args) -> int:
    spec, _ = _load_bundle(args.config)
    batch_shape = (args.batch,) + tuple(spec.input_shape)
    rep = memory_report(spec, batch_shape, mode=args.mode,
                        bits=args.bits if args.bits > 0 else None)
    print(f"mode={rep.mode} bits={rep.bits} batch={args.batch} "
          f"width={rep.width}")
    print(f"persistent tape bytes:   {rep.persistent_tape_bytes:>12}")
    print(f"channel overhead bytes:  {rep.channel_overhead_bytes:>12}")
    print(f"transient buffer bytes:  {rep.transient_buffer_bytes:>12} "
          f"({rep.peak_live_tensors} live tensors peak)")
    print(f"parameter bytes:         {rep.parameter_bytes:>12}")
    print(f"total bytes:             {rep.total_bytes:>12}")
    print(f"ratio vs exact store:    {rep.ratio_vs_exact:>12.4f}")
    print(f"persistent-only ratio:   {rep.persistent_ratio_vs_exact:>12.4f}")
    return 0


def cmd_quantcheck(args) -> int:
    bits_list = [args.bits] if args.bits else [1, 2, 4, 8]
    ok = True
    for bits in bits_list:
        r = diag.quantizer_check(bits, n=args.values, seed=args.seed)
        status = "PASS" if r["ok"] else "FAIL"
        print(f"[{status}] K={bits}: bound={r['error_bound_ok']} "
              f"sign={r['sign_ok']} pack={r['pack_roundtrip_ok']} "
              f"storage={r['storage_ok']} "
              f"(clipped {r['clipped_fraction']:.3%})")
        ok = ok and r["ok"]
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    _, cfg = _load_bundle(args.config) if args.config else (None,
                                                            TrainConfig())
    dataset = _resolve_dataset(args, args.seed)
    depths = [int(d) for d in args.depths.split(",")]
    rows = diag.naive_vs_proposed_depth_sweep(
        depths, args.bits, dataset, seed=args.seed, batches=args.batches,
        csv_path=args.out)
    for r in rows:
        print(f"depth {r['depth']:3d}: proposed {r['proposed_error']:.4e}  "
              f"naive {r['naive_error']:.4e}")
    if args.out:
        print(f"csv written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="qtape",
        description="Training engine with quantized activation tapes")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_data_args(p):
        p.add_argument("--data", help="directory of CIFAR-10 binary batches")
        p.add_argument("--synth", type=int,
                       help="use a synthetic corpus of N images")

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--engine", choices=["exact", "approx", "naive"])
    p.add_argument("--bits", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--out", help="CSV training log path")
    p.add_argument("--eval", action="store_true")
    add_data_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("gradcheck", help="gradient error vs SGD noise")
    p.add_argument("--config", required=True)
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--batches", type=int, default=100)
    p.add_argument("--warmup", type=int, default=0)
    p.add_argument("--out", help="CSV output path")
    add_data_args(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("memreport", help="byte-accurate memory accounting")
    p.add_argument("--config", required=True)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--mode", choices=["exact", "approx", "naive"],
                   default="approx")
    p.set_defaults(fn=cmd_memreport)

    p = sub.add_parser("quantcheck", help="quantizer property suite")
    p.add_argument("--bits", type=int, choices=[1, 2, 4, 8])
    p.add_argument("--values", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_quantcheck)

    p = sub.add_parser("sweep", help="naive vs proposed error by depth")
    p.add_argument("--config")
    p.add_argument("--depths", default="4,8,16,32")
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV output path")
    add_data_args(p)
    p.set_defaults(fn=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (QtapeError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
