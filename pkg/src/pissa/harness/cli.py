"""Command-line entry point for decomposition, benchmarks, and conversion."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ..adapter import forward, pissa_init, reconstruction_error, to_lora_delta
from ..linalg import RandomSource, frobenius_norm
from .experiments import ExperimentSpec, run_experiment
from .matrix_io import load_adapter_dir, load_matrix, save_adapter_dir, save_matrix


def _parse_seeds(text: str) -> tuple:
    if ".." in text:
        lo, hi = text.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(s) for s in text.split(","))


def _parse_ints(text: str) -> tuple:
    return tuple(int(s) for s in text.split(","))


def _add_spec_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--m", type=int, default=256)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--ranks", type=_parse_ints, default=(16,))
    p.add_argument("--T", dest="iters", type=_parse_ints, default=(1, 5))
    p.add_argument("--niter", dest="niters", type=_parse_ints, default=(1, 16))
    p.add_argument("--seeds", type=_parse_seeds, default=tuple(range(10)))
    p.add_argument("--block-size", type=int, default=64)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--adapter-rank", type=int, default=8)
    p.add_argument("--strategies", type=lambda s: tuple(s.split(",")),
                   default=("pissa", "lora"))
    p.add_argument("--out", default="report.csv")
    p.add_argument("--format", dest="fmt", choices=("csv", "json"),
                   default="csv")


def _spec_from_args(kind: str, args) -> ExperimentSpec:
    return ExperimentSpec(
        kind=kind, m=args.m, n=args.n, alpha=args.alpha, ranks=args.ranks,
        iters=args.iters, niters=args.niters, seeds=args.seeds,
        block_size=args.block_size, steps=args.steps, lr=args.lr,
        adapter_rank=args.adapter_rank, strategies=args.strategies,
        out=args.out, fmt=args.fmt)


def _cmd_decompose(args) -> int:
    w = load_matrix(args.infile)
    layer = pissa_init(w, args.rank)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_matrix(out / "A.pssa", layer.adapter.a)
    save_matrix(out / "B.pssa", layer.adapter.b)
    save_matrix(out / "Wres.pssa", layer.base)
    err = reconstruction_error(w, layer)
    print(f"decompose rank={args.rank} reconstruction_error={err:.3e}")
    return 0 if err <= 1e-10 else 1


def _cmd_convert_lora(args) -> int:
    init = load_adapter_dir(args.init)
    trained = load_adapter_dir(args.trained)
    delta_a, delta_b = to_lora_delta(init.adapter, trained.adapter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_matrix(out / "deltaA.pssa", delta_a)
    save_matrix(out / "deltaB.pssa", delta_b)
    # Identity check on a probe batch: base + A'B' must match
    # original + deltaA deltaB.
    m = init.shape[0]
    probe = RandomSource(0).normal((4, m))
    from ..adapter import dense_base, merge
    w_original = dense_base(init) + init.adapter.delta()
    lhs = probe @ (w_original + trained.adapter.scale * (delta_a @ delta_b))
    rhs = forward(trained, probe)
    err = frobenius_norm(lhs - rhs) / max(1.0, frobenius_norm(rhs))
    print(f"convert-lora delta_rank={2 * init.adapter.rank} probe_error={err:.3e}")
    return 0 if err <= 1e-10 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pissa",
        description="Principal-singular-value adapter toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="split a stored matrix into "
                       "adapter factors plus residual")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser("convert-lora", help="convert a trained adapter into "
                       "a delta on the original weights")
    p.add_argument("--init", required=True)
    p.add_argument("--trained", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_convert_lora)

    for kind in ("quant-bench", "converge", "fastsvd-bench", "gradcheck",
                 "ablation"):
        p = sub.add_parser(kind)
        _add_spec_args(p)
        p.set_defaults(func=lambda args, kind=kind: _run_kind(kind, args))
    return parser


def _run_kind(kind: str, args) -> int:
    rows = run_experiment(_spec_from_args(kind, args))
    failures = sum(1 for row in rows if "error" in row)
    print(f"{kind}: wrote {len(rows)} rows to {args.out}"
          + (f" ({failures} failed)" if failures else ""))
    return 0 if failures == 0 else 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
