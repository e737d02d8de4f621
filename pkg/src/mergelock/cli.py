"""Command-line entry point: ``mergelock <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 I/O or format, 3 assertion or
equivalence failure, 4 numeric failure. Errors are printed to stderr as a
single JSON object ``{"code", "message", "context"}``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import math
import os
import sys
from pathlib import Path

from . import __version__
from .analysis import frobenius_report, lmc_curve, lmc_report, uniform_grid
from .attack import diagonal_align, hungarian_align_mlp, kabsch_align
from .checkpoint import (
    ModelConfig,
    canonical_json,
    read_batch,
    read_checkpoint,
    read_key,
    write_batch,
    write_checkpoint,
    write_key,
)
from .errors import MergeLockError, ParameterError
from .merge import DEFAULT_LAMBDA, DEFAULT_TRIM, merge
from .protect import SamplingConfig, protect, recover
from .synth import synthetic_family
from .transformer import max_output_deviation

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_ASSERT, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(ParameterError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, prog=self.prog)


def _emit_error(code: int, message: str, context: dict) -> None:
    sys.stderr.write(json.dumps({"code": code, "context": context, "message": message}, sort_keys=True, default=str) + "\n")


def _require(cond: bool, message: str, **context) -> None:
    if not cond:
        raise UsageError(message, **context)


def _thread_limit():
    raw = os.environ.get("MERGELOCK_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MERGELOCK_THREADS must be an integer, got {raw!r}") from None
    _require(n >= 0, "MERGELOCK_THREADS must be >= 0", value=n)
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _write_text(path: str, text: str | bytes) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(text, bytes):
        p.write_bytes(text)
    else:
        p.write_text(text, encoding="utf-8")


def cmd_gen(args) -> int:
    _require(args.tasks >= 1, "--tasks must be >= 1", tasks=args.tasks)
    _require(math.isfinite(args.perturb_scale) and args.perturb_scale >= 0, "--perturb-scale must be finite and >= 0")
    _require(args.batch_size >= 1 and args.seq_len >= 1, "--batch-size and --seq-len must be >= 1")
    config = ModelConfig(args.layers, args.heads, args.d_model, args.d_ff, args.activation, not args.no_bias)
    fam = synthetic_family(args.seed, config, args.tasks, args.perturb_scale, args.batch_size, args.seq_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out / "pretrained.mlck", fam.pretrained)
    for i, ft in enumerate(fam.finetunes, start=1):
        write_checkpoint(out / f"ft{i}.mlck", ft)
    write_batch(out / "batch.mlck", fam.batch)
    return EXIT_OK


def cmd_protect(args) -> int:
    _require(args.scheme != "params" or args.pretrained is not None, "--pretrained is required for --scheme params")
    model = read_checkpoint(args.model)
    pre = read_checkpoint(args.pretrained) if args.scheme == "params" else None
    protected, key = protect(model, args.scheme, SamplingConfig(seed=args.seed, r_kind=args.r_kind), pre)
    write_checkpoint(args.out, protected)
    write_key(args.key, key)
    return EXIT_OK


def cmd_recover(args) -> int:
    write_checkpoint(args.out, recover(read_checkpoint(args.model), read_key(args.key)))
    return EXIT_OK


def cmd_merge(args) -> int:
    _require(math.isfinite(args.lam), "--lambda must be finite")
    _require(0 < args.trim <= 1, "--trim must be in (0, 1]", trim=args.trim)
    _require(args.method == "avg" or args.pretrained is not None, f"--pretrained is required for --method {args.method}")
    models = [read_checkpoint(p) for p in args.models]
    pre = read_checkpoint(args.pretrained) if args.pretrained else models[0]
    write_checkpoint(args.out, merge(args.method, pre, models, args.lam, args.trim))
    return EXIT_OK


def cmd_align(args) -> int:
    model, target = read_checkpoint(args.model), read_checkpoint(args.target)
    if args.strategy == "kabsch":
        result = kabsch_align(model, target)
    elif args.strategy == "hungarian":
        result = hungarian_align_mlp(model, target)
    else:
        result = diagonal_align(model, target)
    write_checkpoint(args.out, result.model)
    if args.report:
        _write_text(args.report, canonical_json(result.report()) + b"\n")
    return EXIT_OK


def cmd_distance(args) -> int:
    report = frobenius_report(read_checkpoint(args.model), read_checkpoint(args.reference), {"models": [args.model, args.reference]})
    _write_text(args.out, report.to_csv())
    return EXIT_OK


def cmd_lmc(args) -> int:
    grid = uniform_grid(args.grid)
    curve = lmc_curve(read_checkpoint(args.pretrained), read_checkpoint(args.m1), read_checkpoint(args.m2), grid, read_batch(args.batch))
    _write_text(args.out, lmc_report(curve).to_csv())
    return EXIT_OK


def cmd_equiv(args) -> int:
    _require(args.tol >= 0 and math.isfinite(args.tol), "--tol must be finite and >= 0")
    dev = max_output_deviation(read_checkpoint(args.a), read_checkpoint(args.b), read_batch(args.batch))
    print(json.dumps({"equivalent": dev <= args.tol, "max_deviation": dev, "tol": args.tol}, sort_keys=True))
    if dev > args.tol:
        _emit_error(EXIT_ASSERT, "models are not functionally equivalent", {"max_deviation": dev, "tol": args.tol})
        return EXIT_ASSERT
    return EXIT_OK


def cmd_eval_suite(args) -> int:
    from .suite import run_suite, summary_bytes

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary, timings = run_suite(args.seed, log=lambda line: print(line, flush=True))
    (out / "summary.json").write_bytes(summary_bytes(summary))
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if summary["all_passed"] else EXIT_ASSERT


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mergelock", description="Protect transformer checkpoints against model merging.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic pretrained model, fine-tunes and an input batch")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--d-ff", type=int, default=64)
    p.add_argument("--activation", choices=("gelu", "relu", "tanh"), default="gelu")
    p.add_argument("--no-bias", action="store_true", help="zero-filled biases (includes_bias = false)")
    p.add_argument("--tasks", type=int, default=2)
    p.add_argument("--perturb-scale", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("protect", help="protect a checkpoint and write its secret key")
    p.add_argument("--scheme", choices=("mergelock", "params"), default="mergelock")
    p.add_argument("--model", required=True)
    p.add_argument("--pretrained")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--r-kind", choices=("gaussian", "orthogonal", "identity"), default="gaussian")
    p.add_argument("--out", required=True)
    p.add_argument("--key", required=True)
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("recover", help="undo protection with the key")
    p.add_argument("--model", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("merge", help="merge checkpoints")
    p.add_argument("--method", choices=("avg", "ta", "ties"), required=True)
    p.add_argument("--pretrained")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--trim", type=float, default=DEFAULT_TRIM)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("align", help="align a model to a target before merging")
    p.add_argument("--strategy", choices=("kabsch", "hungarian", "diag"), required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("distance", help="per-layer Frobenius distances as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("lmc", help="linear-mode-connectivity curve as CSV")
    p.add_argument("--pretrained", required=True)
    p.add_argument("--m1", required=True)
    p.add_argument("--m2", required=True)
    p.add_argument("--batch", required=True)
    p.add_argument("--grid", type=int, default=21)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lmc)

    p = sub.add_parser("equiv", help="exit 0 if two models agree on a batch")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--batch", required=True)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("eval-suite", help="run the acceptance matrix and write summary.json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_suite)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            return args.func(args)
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except MergeLockError as exc:
        _emit_error(exc.exit_code, exc.message, {"error": type(exc).__name__, **exc.context})
        return exc.exit_code
    except OSError as exc:
        _emit_error(EXIT_IO, exc.strerror or str(exc), {"error": type(exc).__name__, "path": exc.filename})
        return EXIT_IO
    except (ArithmeticError, FloatingPointError) as exc:
        _emit_error(EXIT_NUMERIC, str(exc), {"error": type(exc).__name__})
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
