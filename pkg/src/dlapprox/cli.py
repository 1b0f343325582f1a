"""Command-line driver: ``dla {fuse,optimize,flops,eval,diff}``.

Exit codes: 0 success, 1 ``diff`` tolerance exceeded, 2 usage or
validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import DLAError
from .evaluator import compare_models, forward, random_inputs
from .flops import model_cost
from .fusion import run_lossless_pass
from .model_ir import ensure_valid
from .selector import SelectorConfig, optimize_model
from .serialization import decode_tensors, encode_tensors, read_model, write_model

class UsageError(Exception):
    pass


def _load(model, weights):
    m = read_model(model, weights)
    ensure_valid(m)
    return m


def cmd_fuse(args) -> int:
    m = _load(args.model, args.weights)
    before = model_cost(m)
    fused = run_lossless_pass(m)
    after = model_cost(fused)
    write_model(fused, args.out_model, args.out_weights)
    print(f"nodes: {len(m.nodes)} → {len(fused.nodes)}")
    print(f"flops: {before.total_flops} → {after.total_flops} (delta {after.total_flops - before.total_flops})")
    return 0


def _summary_table(report) -> str:
    header = f"{'layer':<20} {'action':<10} {'kind':<34} {'b':>8} {'A':>7} {'R':>7} {'S':>7} {'FLOP delta':>12}"
    lines = [header, "-" * len(header)]
    for rec in report.layers:
        if rec["action"] == "fused":
            lines.append(f"{rec['name']:<20} {'fused':<10} {'into ' + rec['into']:<34}")
            continue
        fmt = lambda v: "-" if v is None else f"{v:.4f}"  # noqa: E731
        b = rec["b"]
        b = "-" if b is None else (",".join(map(str, b)) if isinstance(b, list) else str(b))
        delta = rec["flops_after"] - rec["flops_before"]
        lines.append(
            f"{rec['name']:<20} {rec['action']:<10} {rec['kind'] or '-':<34} {b:>8} "
            f"{fmt(rec['A']):>7} {fmt(rec['R']):>7} {fmt(rec['S']):>7} {delta:>12}"
        )
    t = report.totals
    lines.append(f"total flops: {t['flops_before']} → {t['flops_after']}")
    return "\n".join(lines)


def cmd_optimize(args) -> int:
    if not 0.0 <= args.p <= 1.0:
        raise UsageError(f"-p must lie in [0, 1], got {args.p}")
    m = _load(args.model, args.weights)
    if args.eps is not None:
        m = _override_eps(m, args.eps)
    cfg = SelectorConfig(
        p=args.p,
        start_threshold=args.start_threshold,
        target=args.target,
        rank_grid=args.rank_grid,
        max_chain=args.max_chain,
        workers=args.workers,
    )
    out, report = optimize_model(m, cfg)
    write_model(out, args.out_model, args.out_weights)
    Path(args.report).write_text(report.dumps(), encoding="utf-8")
    print(_summary_table(report))
    return 0


def _override_eps(m, eps):
    from dataclasses import replace

    from .model_ir import BatchNormParams, LayerKind

    nodes = [
        replace(n, params=BatchNormParams(n.params.mu, n.params.var, eps)) if n.kind is LayerKind.BATCH_NORM else n
        for n in m.nodes
    ]
    return m.with_nodes(nodes)


def cmd_flops(args) -> int:
    m = _load(args.model, args.weights)
    cost = model_cost(m)
    if args.format == "json":
        print(json.dumps(cost.to_json(), indent=2, sort_keys=True))
    else:
        print(f"{'layer':<24} {'kind':<16} {'flops':>14} {'weight B':>12} {'act B':>12}")
        for n in cost.nodes:
            print(f"{n.name:<24} {n.kind:<16} {n.flops:>14} {n.weight_bytes:>12} {n.activation_bytes:>12}")
        print(f"{'total':<24} {'':<16} {cost.total_flops:>14} {cost.weight_bytes:>12} {cost.activation_bytes:>12}")
    return 0


def cmd_eval(args) -> int:
    m = _load(args.model, args.weights)
    if args.input:
        tensors = decode_tensors(Path(args.input).read_bytes())
        if len(tensors) != 1:
            raise UsageError(f"input file must hold exactly one tensor, found {len(tensors)}")
        x = next(iter(tensors.values()))
    elif args.random:
        x = random_inputs(m.input_shape, 1, args.seed)[0]
    else:
        raise UsageError("eval needs --input or --random")
    acts = forward(m, x)
    edges = m.terminal_edges() if not args.all_edges else sorted(acts)
    Path(args.out).write_bytes(encode_tensors({e: acts[e] for e in edges}))
    for e in edges:
        print(f"{e}: shape {tuple(acts[e].shape)}")
    return 0


def cmd_diff(args) -> int:
    a = _load(args.model_a, args.weights_a)
    b = _load(args.model_b, args.weights_b)
    stats = compare_models(a, b, args.n_inputs, args.seed)
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 1 if stats["max_abs"] > args.tol else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dla", description="Post-training FLOP reduction for CNN models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_args(p):
        p.add_argument("--model", required=True, help="manifest JSON")
        p.add_argument("--weights", required=True, help="DLAW weights blob")

    p = sub.add_parser("fuse", help="apply lossless fusions")
    model_args(p)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-weights", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("optimize", help="fuse, then factorize layers")
    model_args(p)
    p.add_argument("-p", type=float, required=True, dest="p", help="accuracy weight in [0, 1]")
    p.add_argument("--target", choices=("cpu", "gpu"), default="cpu")
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-weights", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--start-threshold", type=float, default=0.99)
    p.add_argument("--max-chain", type=int, default=2)
    p.add_argument("--eps", type=float, default=None, help="override batchnorm eps")
    p.add_argument("--rank-grid", default="pow2", help="pow2 | all | step:N")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="accepted for interface stability; the optimizer is deterministic")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("flops", help="per-layer FLOP and memory accounting")
    model_args(p)
    p.add_argument("--format", choices=("json", "table"), default="table")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("eval", help="run a forward pass")
    model_args(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", help="DLAW file holding one input tensor")
    src.add_argument("--random", action="store_true", help="use a seeded standard-normal input")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="DLAW file for output tensors")
    p.add_argument("--all-edges", action="store_true", help="write every edge, not just terminal outputs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diff", help="compare two models on seeded inputs")
    p.add_argument("--model-a", required=True)
    p.add_argument("--weights-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--weights-b", required=True)
    p.add_argument("--n-inputs", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_diff)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dla: error: {exc}", file=sys.stderr)
        return 2
    except (DLAError, OSError) as exc:
        print(f"dla: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
