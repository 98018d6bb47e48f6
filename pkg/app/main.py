from __future__ import annotations

import argparse
import asyncio
import logging
import sys
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError

from app import __version__
from app.cli import commands
from app.cli.schemas import RunReport, RunSettings, ScanSpec
from app.core.errors import AffineWalkError, InputError, NotHyperbolic
from app.core.lattice import IntMatrix
from app.core.symbolic import unit_torus
from app.core.tolerances import STATE_CAP
from app.di import get_run_settings, set_run_settings
from app.formats.files import (
    SCAN_COLUMNS,
    TV_COLUMNS,
    dump_json,
    load_matrix,
    load_measure,
    render_partition_svg,
    write_csv,
)

CONCURRENCY_LIMIT: int = 8
DEFAULT_SEED: int = 0
DEFAULT_LOG_LEVEL: str = "WARNING"
LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# first format is the default
FORMATS: Dict[str, Sequence[str]] = {
    "analyze": ("json",),
    "convergence": ("json",),
    "tv": ("csv", "json"),
    "scan": ("csv", "json"),
    "partition": ("json", "svg"),
    "code": ("json", "svg"),
    "bound": ("json",),
}
GLOBAL_KEYS = {"seed", "threads", "out", "format", "log_level", "state_cap", "command"}

logger = logging.getLogger(__name__)


@dataclass
class Outcome:
    result: Any
    rows: Optional[List[dict]] = None
    columns: Sequence[str] = ()
    svg: Optional[str] = None
    exit_code: int = 0


def parse_horizons(text: str) -> List[int]:
    """Horizons from "a:b" (inclusive), "a:b:step" or a list like "0,5,10"."""
    try:
        if ":" in text:
            parts = [int(p) for p in text.split(":")]
            if len(parts) not in (2, 3):
                raise ValueError(text)
            step = parts[2] if len(parts) == 3 else 1
            values = list(range(parts[0], parts[1] + 1, step))
        else:
            values = [int(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid horizon range {text!r}") from exc
    if not values or min(values) < 0:
        raise argparse.ArgumentTypeError(f"horizons must be non-negative: {text!r}")
    return values


def parse_point(text: str) -> List[float]:
    try:
        return [float(p) for p in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid point {text!r}") from exc


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def nonnegative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="affine-walks",
        description="Mixing of affine random walks X_{t+1} = A X_t + B_t mod n.",
    )
    parser.add_argument("--seed", type=nonnegative_int, default=DEFAULT_SEED)
    parser.add_argument(
        "--threads",
        type=positive_int,
        default=CONCURRENCY_LIMIT,
        help="simulation worker threads and concurrent scan moduli",
    )
    parser.add_argument("--out", default=None, help="output file (default: stdout)")
    parser.add_argument("--format", choices=["json", "csv", "svg"], default=None)
    parser.add_argument("--state-cap", type=positive_int, default=STATE_CAP)
    parser.add_argument(
        "--log-level",
        default=DEFAULT_LOG_LEVEL,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="determinant, spectrum and constants")
    analyze.add_argument("--matrix", required=True)
    analyze.add_argument("--measure", default=None)

    convergence = sub.add_parser("convergence", help="algebraic convergence verdict")
    convergence.add_argument("--matrix", required=True)
    convergence.add_argument("--measure", required=True)
    convergence.add_argument("--n", type=int, required=True)
    convergence.add_argument(
        "--verify", action="store_true", help="cross-check on the state graph"
    )

    tv = sub.add_parser("tv", help="total-variation curve with bounds")
    tv.add_argument("--matrix", required=True)
    tv.add_argument("--measure", required=True)
    tv.add_argument("--n", type=int, required=True)
    tv.add_argument("--t", type=parse_horizons, required=True, dest="horizons")
    tv.add_argument("--method", choices=["exact", "mc", "both"], default="exact")
    tv.add_argument("--replicates", type=positive_int, default=100_000)
    tv.add_argument(
        "--lower-bound-mode",
        choices=["derived", "paper-literal"],
        default="derived",
    )
    tv.add_argument("--proceed", action="store_true")
    tv.add_argument("--mc-fallback", action="store_true")

    scan = sub.add_parser("scan", help="mixing time over a range of moduli")
    scan.add_argument("--matrix", required=True)
    scan.add_argument("--measure", required=True)
    scan.add_argument("--n-min", type=int, default=2)
    scan.add_argument("--n-max", type=int, default=64)
    scan.add_argument(
        "--n-values", type=parse_horizons, default=None, help="explicit moduli"
    )
    scan.add_argument(
        "--n-filter", choices=["all", "coprime-to-factors", "odd"], default="all"
    )
    scan.add_argument("--target-tv", type=float, default=0.25)
    scan.add_argument("--method", choices=["exact", "mc"], default="exact")
    scan.add_argument("--t-max", type=positive_int, default=None)
    scan.add_argument("--replicates", type=positive_int, default=100_000)

    for name, text in (
        ("partition", "build or load a Markov partition and verify it"),
        ("code", "symbolic code of a point and its decoding"),
    ):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--matrix", required=True)
        cmd.add_argument("--diameter", type=float, default=None)
        cmd.add_argument("--load", default=None, help="partition JSON to use")
        if name == "partition":
            cmd.add_argument("--samples", type=positive_int, default=100)
        else:
            cmd.add_argument("--point", type=parse_point, required=True)
            cmd.add_argument("--K", type=int, default=8)

    bound = sub.add_parser("bound", help="closed-form bound pipeline")
    bound.add_argument("--matrix", required=True)
    bound.add_argument("--measure", required=True)
    bound.add_argument("--n", type=int, required=True)
    bound.add_argument("--r", type=positive_int, default=None)
    bound.add_argument("--eta", type=float, default=None)
    bound.add_argument("--grid-step", type=float, default=None)
    bound.add_argument(
        "--lemma-max", type=int, default=0, help="check the k-block lemma up to n"
    )
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level), format=LOG_FORMAT, stream=sys.stderr, force=True
    )


def _model_rows(models: Sequence[BaseModel]) -> List[dict]:
    return [model.model_dump() for model in models]


def _run_analyze(args: argparse.Namespace) -> Outcome:
    mu = load_measure(args.measure) if args.measure else None
    report = commands.cmd_analyze(load_matrix(args.matrix), mu)
    exit_code = 0 if report.hyperbolic else NotHyperbolic.exit_code
    return Outcome(report, exit_code=exit_code)


def _run_convergence(args: argparse.Namespace) -> Outcome:
    settings = get_run_settings()
    report = commands.cmd_convergence(
        load_matrix(args.matrix),
        load_measure(args.measure),
        args.n,
        verify=args.verify,
        cap=settings.state_cap,
    )
    return Outcome(report)


def _run_tv(args: argparse.Namespace) -> Outcome:
    settings = get_run_settings()
    rows = commands.cmd_tv(
        load_matrix(args.matrix),
        load_measure(args.measure),
        args.n,
        args.horizons,
        method=args.method,
        lower_bound_mode=args.lower_bound_mode,
        proceed=args.proceed,
        mc_fallback=args.mc_fallback,
        replicates=args.replicates,
        seed=settings.seed,
        threads=settings.threads,
        cap=settings.state_cap,
    )
    return Outcome(rows, rows=_model_rows(rows), columns=TV_COLUMNS)


def _run_scan(args: argparse.Namespace) -> Outcome:
    settings = get_run_settings()
    try:
        spec = ScanSpec(
            n_min=args.n_min,
            n_max=args.n_max,
            n_values=args.n_values,
            n_filter=args.n_filter,
            target_tv=args.target_tv,
            method=args.method,
            t_max=args.t_max,
            replicates=args.replicates,
        )
    except ValidationError as exc:
        raise InputError(f"invalid scan specification: {exc}") from exc
    report = asyncio.run(
        commands.cmd_scan(
            load_matrix(args.matrix),
            load_measure(args.measure),
            spec,
            seed=settings.seed,
            cap=settings.state_cap,
            concurrency=settings.threads,
        )
    )
    return Outcome(report, rows=_model_rows(report.rows), columns=SCAN_COLUMNS)


def _run_partition(args: argparse.Namespace) -> Outcome:
    settings = get_run_settings()
    partition, report = commands.cmd_partition(
        load_matrix(args.matrix),
        target_diameter=args.diameter,
        load_path=args.load,
        samples=args.samples,
        seed=settings.seed,
    )
    svg = render_partition_svg(partition) if settings.format == "svg" else None
    return Outcome(report, svg=svg)


def _forward_orbit(A: IntMatrix, point: Sequence[float], steps: int) -> np.ndarray:
    matrix = A.to_float()
    orbit = [unit_torus(np.asarray(point, dtype=np.float64))]
    for _ in range(steps):
        orbit.append(unit_torus(matrix @ orbit[-1]))
    return np.array(orbit)


def _run_code(args: argparse.Namespace) -> Outcome:
    A = load_matrix(args.matrix)
    partition, report = commands.cmd_code(
        A, args.point, args.K, target_diameter=args.diameter, load_path=args.load
    )
    svg = None
    if get_run_settings().format == "svg":
        svg = render_partition_svg(partition, _forward_orbit(A, args.point, args.K))
    return Outcome(report, svg=svg)


def _run_bound(args: argparse.Namespace) -> Outcome:
    report = commands.cmd_bound(
        load_matrix(args.matrix),
        load_measure(args.measure),
        args.n,
        r=args.r,
        eta=args.eta,
        grid_step=args.grid_step,
        lemma_max=args.lemma_max,
        cap=get_run_settings().state_cap,
    )
    return Outcome(report)


HANDLERS = {
    "analyze": _run_analyze,
    "convergence": _run_convergence,
    "tv": _run_tv,
    "scan": _run_scan,
    "partition": _run_partition,
    "code": _run_code,
    "bound": _run_bound,
}


def _json_result(result: Any) -> Any:
    if isinstance(result, BaseModel):
        return result.model_dump(mode="json", by_alias=True)
    if isinstance(result, list):
        return [_json_result(item) for item in result]
    return result


def render(args: argparse.Namespace, outcome: Outcome, elapsed: float) -> str:
    settings = get_run_settings()
    fmt = settings.format or FORMATS[args.command][0]
    if fmt == "csv":
        return write_csv(outcome.rows or [], outcome.columns)
    if fmt == "svg":
        return outcome.svg or ""
    inputs = {
        key: value
        for key, value in sorted(vars(args).items())
        if key not in GLOBAL_KEYS and not callable(value)
    }
    report = RunReport(
        version=__version__,
        command=args.command,
        seed=settings.seed,
        inputs=inputs,
        elapsed_seconds=elapsed,
        result=_json_result(outcome.result),
    )
    return dump_json(report.model_dump(mode="json", by_alias=True))


def emit(text: str) -> None:
    out = get_run_settings().out
    if out is None:
        sys.stdout.write(text)
        return
    try:
        with open(out, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
    except OSError as exc:
        raise InputError(f"cannot write {out}: {exc}") from exc
    logger.info("Wrote %s", out)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    if args.format is not None and args.format not in FORMATS[args.command]:
        parser.error(f"--format {args.format} is not available for {args.command}")
    set_run_settings(
        RunSettings(
            seed=args.seed,
            threads=args.threads,
            state_cap=args.state_cap,
            out=args.out,
            format=args.format,
        )
    )

    started = time.perf_counter()
    try:
        outcome = HANDLERS[args.command](args)
        emit(render(args, outcome, time.perf_counter() - started))
    except AffineWalkError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except (RuntimeError, ValueError) as exc:
        logger.error("Unexpected %s: %s", type(exc).__name__, exc)
        return 1
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
