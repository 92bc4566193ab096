"""Command-line interface for multisk."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigFormatError, config_to_dict, load_config, save_config
from .matrix_io import DenseMatrix, MatrixFormatError, read_matrix_csv, write_matrix_csv, write_tensor3
from .oracle import solve_exact
from .output import (
    STATUS_DIVERGED,
    STATUS_IO_ERROR,
    STATUS_NOT_CONVERGED,
    STATUS_OK,
    STATUS_USAGE_ERROR,
    emit_summary,
    write_csv,
    write_json,
    write_jsonl,
)
from .sinkhorn import (
    SolverConfig,
    assignment_objective,
    modified_sinkhorn,
    multi_sinkhorn,
    vanilla_sinkhorn,
)
from .trainer import (
    ABLATIONS,
    MultiModalModel,
    TrainConfig,
    TrainingDivergedError,
    ablation_suite,
    anchor_sweep,
    evaluate,
    generate_synthetic,
    split_dataset,
    train,
)
from .trainer.ablation import parse_anchor_grid
from .trainer.train import apply_ablation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

SOLVERS = ("multi", "vanilla", "modified")
BENCH_FIELDS = (
    "n",
    "k",
    "k_prime",
    "epsilon",
    "repeat",
    "iterations",
    "wall_time",
    "final_violation",
    "converged",
)
CURVE_FIELDS = ("n", "k", "epsilon", "repeat", "iteration", "violation")


class UsageError(ValueError):
    """Raised for invalid flag combinations that argparse cannot catch."""


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit 1 and still end stdout with a summary."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"Error: {message}", file=sys.stderr)
        emit_summary(STATUS_USAGE_ERROR, error=message)
        sys.exit(EXIT_USAGE)


# Solvers


def _solver_config(args) -> SolverConfig:
    return SolverConfig(
        epsilon=args.epsilon,
        max_iters=args.max_iters,
        tol=args.tol,
        mu=args.mu,
        k_prime=args.k_prime,
        relaxation=args.relaxation,
    )


def _run_solver(name: str, s, cfg: SolverConfig):
    """Returns (Q, Q' or None, report)."""
    if name == "vanilla":
        n_rows, n_anchors = np.shape(s.data if isinstance(s, DenseMatrix) else s)
        q, report = vanilla_sinkhorn(
            s, np.ones(n_rows), np.full(n_anchors, n_rows / n_anchors), cfg
        )
        return q, None, report
    if name == "modified":
        q, report = modified_sinkhorn(s, cfg)
        return q, None, report
    qp, q, report = multi_sinkhorn(s, cfg)
    return q, qp, report


def cmd_solve(args) -> int:
    if args.dump_tensor and args.solver != "multi":
        raise UsageError("--dump-tensor is only available with --solver multi")
    cfg = _solver_config(args)
    s = read_matrix_csv(args.input)
    print(f"Solving {s.rows}x{s.cols} with {args.solver} (K'={cfg.k_prime})", file=sys.stderr)
    q, qp, report = _run_solver(args.solver, s, cfg)

    write_matrix_csv(q, args.out)
    if args.dump_tensor:
        write_tensor3(qp, args.dump_tensor)
    print(f"Q saved to: {args.out}", file=sys.stderr)

    summary = dict(
        solver=args.solver,
        iterations=report.iterations_used,
        final_violation=report.final_violation,
        converged=report.converged,
        log_domain=report.log_domain,
        objective=assignment_objective(q, s),
        out=str(args.out),
    )
    if not report.converged:
        print(
            f"Error: no convergence within {cfg.max_iters} sweeps "
            f"(violation {report.final_violation:.3e}); Q written anyway",
            file=sys.stderr,
        )
        emit_summary(STATUS_NOT_CONVERGED, **summary)
        return EXIT_NUMERICAL
    emit_summary(STATUS_OK, **summary)
    return EXIT_OK


def cmd_oracle(args) -> int:
    s = read_matrix_csv(args.input)
    result = solve_exact(s, args.k_prime)
    write_matrix_csv(result.q_binary, args.out)
    print(f"Enumerated {result.candidates_enumerated} feasible matrices", file=sys.stderr)
    emit_summary(
        STATUS_OK,
        objective=result.objective,
        candidates_enumerated=result.candidates_enumerated,
        out=str(args.out),
    )
    return EXIT_OK


# Trainer


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed, data=dataclasses.replace(cfg.data, seed=args.seed))
    return cfg


def cmd_train(args) -> int:
    cfg = apply_ablation(_train_config(args), args.ablation)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    data = generate_synthetic(cfg.data)
    print(f"Training ({args.ablation}) on {len(data)} synthetic samples", file=sys.stderr)
    result = train(data, cfg)

    write_jsonl(result.history, out_dir / "metrics.jsonl")
    result.model.save(out_dir / "model.npz")
    save_config(cfg, out_dir)
    report = {"ablation": args.ablation, "data_checksum": result.data_checksum, **result.final}
    write_json(report, out_dir / "report.json")
    print(f"Outputs saved to: {out_dir}", file=sys.stderr)
    emit_summary(STATUS_OK, epochs=len(result.history), out_dir=str(out_dir), **report)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _train_config(args)
    model = MultiModalModel.load(args.model)
    _, held_out = split_dataset(generate_synthetic(cfg.data), cfg.held_out_fraction, cfg.seed)
    metrics = evaluate(model, held_out, cfg)
    report = {"n_held_out": len(held_out), **metrics}
    if args.out:
        write_json(report, args.out)
        print(f"Report saved to: {args.out}", file=sys.stderr)
    emit_summary(STATUS_OK, **report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    data = generate_synthetic(cfg.data)
    if args.anchors:
        rows = anchor_sweep(cfg, parse_anchor_grid(args.anchors), data=data)
    else:
        variants = args.variants.split(",") if args.variants else list(ABLATIONS)
        rows = ablation_suite(cfg, variants, data=data)
    table = [row.to_dict() for row in rows]
    report = {"config": config_to_dict(cfg), "rows": table}
    if args.out:
        write_json(report, args.out)
        print(f"Report saved to: {args.out}", file=sys.stderr)

    scores = {row.variant: row.structure_score for row in rows}
    summary = {"rows": len(table), "data_checksum": rows[0].data_checksum if rows else None}
    if "full" in scores and "no_sspc" in scores and not args.anchors:
        summary["structure_gain"] = scores["full"] - scores["no_sspc"]
    emit_summary(STATUS_OK, **summary)
    return EXIT_OK


# Bench


def _parse_sizes(text: str) -> list[tuple[int, int]]:
    sizes = []
    for item in text.split(","):
        parts = item.strip().lower().split("x")
        if len(parts) != 2 or not all(p.isdigit() and int(p) > 0 for p in parts):
            raise UsageError(f"Malformed size {item!r}; expected NxK, e.g. 64x16")
        sizes.append((int(parts[0]), int(parts[1])))
    return sizes


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        values = [float(item) for item in text.split(",")]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated numbers, got {text!r}") from None
    if any(v <= 0 for v in values):
        raise UsageError(f"{flag} values must be > 0")
    return values


def _bench_case(solver: str, n: int, k: int, epsilon: float, repeat: int, args):
    rng = np.random.default_rng([args.seed, n, k, repeat])
    s = rng.random((n, k))
    k_prime = args.k_prime or max(1, k // 2)
    cfg = SolverConfig(
        epsilon=epsilon,
        max_iters=args.max_iters,
        tol=args.tol,
        mu=args.mu,
        k_prime=k_prime,
        relaxation=args.relaxation,
    )
    start = time.perf_counter()
    _, _, report = _run_solver(solver, s, cfg)
    wall_time = time.perf_counter() - start
    row = dict(
        n=n,
        k=k,
        k_prime=k_prime,
        epsilon=epsilon,
        repeat=repeat,
        iterations=report.iterations_used,
        wall_time=wall_time,
        final_violation=report.final_violation,
        converged=report.converged,
    )
    curve = [
        dict(n=n, k=k, epsilon=epsilon, repeat=repeat, iteration=i, violation=v)
        for i, v in enumerate(report.history, start=1)
    ]
    return row, curve


def cmd_bench(args) -> int:
    sizes = _parse_sizes(args.sizes)
    epsilons = _parse_floats(args.epsilons, "--epsilons")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    cases = [
        (args.solver, n, k, eps, repeat)
        for n, k in sizes
        for eps in epsilons
        for repeat in range(args.repeats)
    ]
    with ThreadPoolExecutor(max_workers=min(args.repeats, 8)) as pool:
        results = list(pool.map(lambda case: _bench_case(*case, args), cases))

    rows = [row for row, _ in results]
    curve = [point for _, points in results for point in points]
    if args.out:
        write_csv(rows, BENCH_FIELDS, args.out)
    else:
        print(",".join(BENCH_FIELDS))
        for row in rows:
            print(",".join(str(row[f]) for f in BENCH_FIELDS))
    if args.curve_out:
        write_csv(curve, CURVE_FIELDS, args.curve_out)
    emit_summary(
        STATUS_OK,
        solver=args.solver,
        rows=len(rows),
        not_converged=sum(not row["converged"] for row in rows),
        out=args.out,
        curve_out=args.curve_out,
    )
    return EXIT_OK


def _fail(status: str, code: int, message: str) -> int:
    logger.debug("Command failed", exc_info=True)
    print(f"Error: {message}", file=sys.stderr)
    emit_summary(status, error=message)
    return code


def run_command(args) -> int:
    """Run a parsed command and map failures onto the exit-code contract."""
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        return _fail(STATUS_DIVERGED, EXIT_NUMERICAL, str(exc))
    except (MatrixFormatError, ConfigFormatError) as exc:
        return _fail(STATUS_IO_ERROR, EXIT_IO, str(exc))
    except OSError as exc:
        return _fail(STATUS_IO_ERROR, EXIT_IO, str(exc))
    except ValueError as exc:
        return _fail(STATUS_USAGE_ERROR, EXIT_USAGE, str(exc))


def _add_solver_flags(parser: argparse.ArgumentParser, k_prime_required: bool) -> None:
    parser.add_argument(
        "--k-prime", type=int, required=k_prime_required, help="Anchors per sample (K')"
    )
    parser.add_argument("--mu", type=float, default=0.25, help="Damping factor (default: 0.25)")
    parser.add_argument(
        "--epsilon", type=float, default=0.05, help="Entropic weight (default: 0.05)"
    )
    parser.add_argument("--tol", type=float, default=1e-6, help="Stop tolerance (default: 1e-6)")
    parser.add_argument(
        "--max-iters", type=int, default=1000, help="Maximum number of sweeps (default: 1000)"
    )
    parser.add_argument(
        "--relaxation",
        type=float,
        default=1.9,
        help="Multi-SK over-relaxation factor in [1, 2); 1 disables it (default: 1.9)",
    )


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Training config (.json, .yaml or .yml)")
    parser.add_argument(
        "--seed", type=int, default=None, help="Override the config seed (default: config, 0)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="multisk",
        description="multisk - Many-to-many anchor assignment with Multi-Assignment Sinkhorn-Knopp",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  multisk solve --input S.csv --k-prime 2 --out Q.csv
  multisk oracle --input S.csv --k-prime 2 --out Q.csv
  multisk train --config cfg.json --out-dir runs/full
  multisk ablate --config cfg.json --out report.json
  multisk bench --sizes 16x8,64x16 --epsilons 0.1,0.05 --repeats 3
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging to stderr")

    subparsers = parser.add_subparsers(dest="command", metavar="command")

    solve_parser = subparsers.add_parser("solve", help="Run an assignment solver on a CSV matrix")
    solve_parser.add_argument("--input", required=True, help="N x K similarity matrix (CSV)")
    _add_solver_flags(solve_parser, k_prime_required=True)
    solve_parser.add_argument("--out", required=True, help="Where to write Q (CSV)")
    solve_parser.add_argument("--solver", choices=SOLVERS, default="multi")
    solve_parser.add_argument("--dump-tensor", help="Also write Q' as channel blocks")
    solve_parser.set_defaults(func=cmd_solve)

    oracle_parser = subparsers.add_parser("oracle", help="Exact binary assignment by enumeration")
    oracle_parser.add_argument("--input", required=True, help="N x K similarity matrix (CSV)")
    oracle_parser.add_argument("--k-prime", type=int, required=True, help="Anchors per sample")
    oracle_parser.add_argument("--out", required=True, help="Where to write the binary Q (CSV)")
    oracle_parser.set_defaults(func=cmd_oracle)

    train_parser = subparsers.add_parser("train", help="Train the toy model on synthetic data")
    _add_train_flags(train_parser)
    train_parser.add_argument("--out-dir", required=True, help="Directory for run outputs")
    train_parser.add_argument("--ablation", choices=ABLATIONS, default="full")
    train_parser.set_defaults(func=cmd_train)

    eval_parser = subparsers.add_parser("eval", help="Evaluate a saved model on the held-out split")
    _add_train_flags(eval_parser)
    eval_parser.add_argument("--model", required=True, help="model.npz written by train")
    eval_parser.add_argument("--out", help="Where to write the report (JSON)")
    eval_parser.set_defaults(func=cmd_eval)

    ablate_parser = subparsers.add_parser("ablate", help="Compare objective variants")
    _add_train_flags(ablate_parser)
    ablate_parser.add_argument("--out", help="Where to write the report (JSON)")
    ablate_parser.add_argument(
        "--variants", help=f"Comma-separated subset of {','.join(ABLATIONS)} (default: all)"
    )
    ablate_parser.add_argument(
        "--anchors", help="Sweep anchor counts instead, e.g. 16x8,32x16 (K x K')"
    )
    ablate_parser.set_defaults(func=cmd_ablate)

    bench_parser = subparsers.add_parser("bench", help="Time solver convergence on random data")
    bench_parser.add_argument("--sizes", default="16x8,64x16,256x64", help="N x K list")
    bench_parser.add_argument("--epsilons", default="0.1,0.05,0.01", help="Epsilon list")
    bench_parser.add_argument("--repeats", type=int, default=1, help="Instances per cell")
    bench_parser.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    bench_parser.add_argument("--solver", choices=SOLVERS, default="multi")
    bench_parser.add_argument(
        "--k-prime", type=int, default=None, help="Anchors per sample (default: K // 2)"
    )
    bench_parser.add_argument("--mu", type=float, default=0.25)
    bench_parser.add_argument("--tol", type=float, default=1e-6)
    bench_parser.add_argument("--max-iters", type=int, default=1000)
    bench_parser.add_argument("--relaxation", type=float, default=1.9)
    bench_parser.add_argument("--out", help="Table CSV (default: stdout)")
    bench_parser.add_argument("--curve-out", help="Per-sweep violation curve CSV")
    bench_parser.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None):
    """Main entry point for the CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        emit_summary(STATUS_USAGE_ERROR, error="no command given")
        sys.exit(EXIT_USAGE)
    code = run_command(args)
    if code:
        sys.exit(code)


if __name__ == "__main__":
    main()
