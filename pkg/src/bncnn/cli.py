"""Command-line entry point.

Subcommands: transform, generate, train, eval, gradcheck, curve, synth.
Exit codes: 0 ok, 2 input error, 3 contract refusal, 4 training diverged
past the restart budget, 5 gradient check failure. Every subcommand is
deterministic given its flags and --seed; a train run prints its full
effective config as its first output line.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_REFUSED = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="bncnn",
        description="Desk-scale training of batch-normalized CNNs on CPU.")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transform",
                       help="insert batch-norm layers into a .ndef net")
    p.add_argument("--in", dest="in_path", required=True,
                   help="input .ndef file (must not already contain bn)")
    p.add_argument("--out", required=True, help="output .ndef file")
    p.add_argument("--input-bn", action="store_true",
                   help="also prepend a bn layer on the network input")

    p = sub.add_parser("generate", help="emit a generated .ndef architecture")
    p.add_argument("--arch", required=True, choices=("alexnet", "vgg", "resnet"))
    p.add_argument("--scale", type=float, default=1.0,
                   help="width multiplier for alexnet/vgg")
    p.add_argument("--blocks", default="1,1,1,1",
                   help="resnet blocks per stage, e.g. 2,2,2,2")
    p.add_argument("--width", type=int, default=64, help="resnet base width")
    p.add_argument("--block-type", choices=("basic", "bottleneck"),
                   default="basic")
    p.add_argument("--classes", type=int, default=1000)
    p.add_argument("--input-size", type=int, default=224,
                   help="square input side in pixels")
    p.add_argument("--bn", action=argparse.BooleanOptionalAction, default=True,
                   help="emit the batch-norm variant (--no-bn: classic form)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a .ndef net on a dataset")
    p.add_argument("--net", required=True)
    p.add_argument("--data", required=True,
                   help="dataset root containing train/ (and optionally val/)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--base-lr", type=float, default=0.1)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--max-iter", type=int)
    group.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--iter-size", type=int, default=1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--snapshot-every", type=int, default=200)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--allow-small-batch", action="store_true",
                   help="waive the bn minimum batch size gate")
    p.add_argument("--global-stats", action="store_true",
                   help="bn layers train on stored running statistics")
    p.add_argument("--divergence-window", type=int, default=50)
    p.add_argument("--divergence-factor", type=float, default=50.0)
    p.add_argument("--max-restarts", type=int, default=3)
    p.add_argument("--eval-every", type=int, default=1,
                   help="epochs between validation passes (0: never)")
    p.add_argument("--resize", type=int, default=256,
                   help="shorter-side resize target")
    p.add_argument("--crop", type=int, default=224)
    p.add_argument("--workers", type=int, default=1,
                   help="image-decoding threads; never affects results")

    p = sub.add_parser("eval", help="single-crop evaluation of a snapshot")
    p.add_argument("--net", required=True)
    p.add_argument("--weights", required=True, help="snapshot file")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--resize", type=int, default=256)
    p.add_argument("--crop", type=int, default=224)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of backward passes")
    p.add_argument("--net", help=".ndef net to check end to end")
    p.add_argument("--layers", action="store_true",
                   help="check each layer kind in isolation")
    p.add_argument("--eps", type=float, default=1e-5,
                   help="finite-difference step")
    p.add_argument("--precision", choices=("float64",), default="float64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol-layer", type=float, default=1e-4)
    p.add_argument("--tol-net", type=float, default=1e-3)
    p.add_argument("--sample", type=int, default=100,
                   help="coordinates checked per tensor in --net mode")
    p.add_argument("--exhaustive", action="store_true",
                   help="check every coordinate (slow on large nets)")

    p = sub.add_parser("curve", help="export the error + lr training curve")
    p.add_argument("--log", required=True, help="solver CSV log")
    p.add_argument("--out", required=True, help="curve CSV output")

    p = sub.add_parser("synth", help="generate a synthetic PNG dataset")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--val-per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=1)
    return top


def _read_net(path: str):
    from .netdef import NetDefError, parse
    try:
        with open(path, encoding="utf-8") as fh:
            return parse(fh.read())
    except OSError as exc:
        raise SystemExit(_fail(f"cannot read net '{path}': {exc}", EXIT_INPUT))
    except NetDefError as exc:
        raise SystemExit(_fail(f"{path}: {exc}", EXIT_INPUT))


def _fail(message: str, code: int) -> int:
    print(f"bncnn: {message}", file=sys.stderr)
    return code


def cmd_transform(args) -> int:
    from .netdef import NetDefError, serialize
    from .transform import AlreadyTransformedError, RewriteError, insert_batchnorm
    try:
        net = _read_net(args.in_path)
        out, report = insert_batchnorm(net, add_input_bn=args.input_bn)
    except AlreadyTransformedError as exc:
        return _fail(str(exc), EXIT_REFUSED)
    except (NetDefError, RewriteError) as exc:
        return _fail(str(exc), EXIT_INPUT)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize(out))
    for ins in report.inserted:
        print(f"inserted {ins.name} after {ins.predecessor}")
    for rem in report.removed:
        print(f"removed {rem.name} ({rem.kind})")
    print(f"input bn added: {'yes' if report.input_bn_added else 'no'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .netdef import NetDefError, serialize
    from .transform import RewriteError, generate_plain, generate_resnet
    shape = (3, args.input_size, args.input_size)
    try:
        if args.arch == "resnet":
            blocks = [int(b) for b in args.blocks.split(",") if b]
            net = generate_resnet(blocks, args.width, args.classes, shape,
                                  block_type=args.block_type)
        else:
            net = generate_plain(args.arch, args.scale, args.classes, shape,
                                 with_bn=args.bn)
    except (NetDefError, RewriteError, ValueError) as exc:
        return _fail(str(exc), EXIT_INPUT)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize(net))
    print(f"wrote {net.name} ({len(net.layers)} layers) to {args.out}")
    return EXIT_OK


def _load_split(args, split: str, required: bool):
    from .data import DatasetError, load_dataset
    try:
        handle = load_dataset(args.data, split, resize_target=args.resize,
                              crop=args.crop)
    except DatasetError as exc:
        if required:
            raise SystemExit(_fail(str(exc), EXIT_INPUT))
        return None
    if args.workers > 1:
        _warm_cache(handle, args.workers)
    return handle


def _warm_cache(handle, workers: int) -> None:
    # Decoding is the only parallelizable stage; batch assembly stays
    # ordered by the epoch permutation, so results never change.
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(handle.image, range(len(handle))))


def cmd_train(args) -> int:
    from .evaluation import EvalError
    from .netdef import NetDefError
    from .solver import (BatchSizeRefusal, SolverConfig, SolverError,
                         TrainingDiverged, train)
    net = _read_net(args.net)
    train_data = _load_split(args, "train", required=True)
    val_data = _load_split(args, "val", required=False)
    if args.max_iter is not None:
        max_iter = args.max_iter
    else:
        per_epoch = len(train_data) // (args.batch * args.iter_size)
        if per_epoch < 1:
            return _fail("dataset smaller than one effective batch", EXIT_INPUT)
        max_iter = args.epochs * per_epoch
    try:
        cfg = SolverConfig(
            base_lr=args.base_lr, max_iter=max_iter, batch_size=args.batch,
            iter_size=args.iter_size, momentum=args.momentum,
            weight_decay=args.weight_decay, snapshot_every=args.snapshot_every,
            seed=args.seed, allow_small_batch=args.allow_small_batch,
            global_stats=args.global_stats,
            divergence_window=args.divergence_window,
            divergence_factor=args.divergence_factor,
            max_restarts=args.max_restarts, eval_every=args.eval_every)
    except SolverError as exc:
        return _fail(str(exc), EXIT_INPUT)
    print("config: " + " ".join(
        f"{f.name}={getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)))
    try:
        result = train(net, cfg, train_data, args.out, val_data=val_data)
    except BatchSizeRefusal as exc:
        return _fail(str(exc), EXIT_REFUSED)
    except TrainingDiverged as exc:
        return _fail(str(exc), EXIT_DIVERGED)
    except (SolverError, NetDefError, EvalError) as exc:
        return _fail(str(exc), EXIT_INPUT)
    print(f"final snapshot: {result.final_path}")
    print(f"log: {result.log_path}")
    print(f"restarts: {result.restarts}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import EvalError, evaluate, format_error
    from .layers import init_params
    from .solver import SnapshotError, apply_snapshot, load_snapshot
    net = _read_net(args.net)
    data = _load_split(args, args.split, required=True)
    try:
        snap = load_snapshot(args.weights)
        params = init_params(net, seed=0)
        apply_snapshot(params, snap)
        result = evaluate(net, params, data, args.batch)
    except (SnapshotError, EvalError, OSError) as exc:
        return _fail(str(exc), EXIT_INPUT)
    print(f"samples: {result.sample_count}")
    print(f"top-1 error: {format_error(result.top1_error)}")
    print(f"top-5 error: {format_error(result.top5_error)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck as G
    if not args.net and not args.layers:
        return _fail("gradcheck needs --net and/or --layers", EXIT_INPUT)
    results = []
    if args.layers:
        for kind in G.LAYER_KINDS:
            results.append(G.check_layer(kind, seed=args.seed, step=args.eps,
                                         tolerance=args.tol_layer))
    if args.net:
        net = _read_net(args.net)
        sample = 0 if args.exhaustive else args.sample
        results.extend(G.check_net(net, seed=args.seed, step=args.eps,
                                   tolerance=args.tol_net, sample=sample))
    width = max(len(r.name) for r in results)
    print(f"{'check'.ljust(width)}  {'max_rel_err':>12}  {'coords':>7}  "
          f"{'tol':>8}  status")
    failed = False
    for r in results:
        status = "ok" if r.ok else "FAIL"
        failed = failed or not r.ok
        print(f"{r.name.ljust(width)}  {r.max_rel_err:12.3e}  {r.checked:7d}  "
              f"{r.tolerance:8.0e}  {status}")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_curve(args) -> int:
    from .evaluation import EvalError, emit_curve, parse_log
    try:
        with open(args.log, encoding="utf-8") as fh:
            rows = parse_log(fh.read())
    except OSError as exc:
        return _fail(f"cannot read log '{args.log}': {exc}", EXIT_INPUT)
    except EvalError as exc:
        return _fail(str(exc), EXIT_INPUT)
    count = emit_curve(rows, args.out)
    print(f"wrote {count} curve rows to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import DatasetError, generate_synthetic
    try:
        generate_synthetic(args.out, args.classes, args.per_class, args.size,
                           args.seed, split="train")
        if args.val_per_class > 0:
            generate_synthetic(args.out, args.classes, args.val_per_class,
                               args.size, args.seed + 1, split="val")
    except DatasetError as exc:
        return _fail(str(exc), EXIT_INPUT)
    print(f"wrote synthetic dataset ({args.classes} classes) under {args.out}")
    return EXIT_OK


_COMMANDS = {
    "transform": cmd_transform,
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "curve": cmd_curve,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    np.seterr(over="ignore", invalid="ignore")  # divergence shows up as inf/nan
    try:
        return _COMMANDS[args.command](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
