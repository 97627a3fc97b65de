"""Command-line entry point: calibrate, simulate, compare, report."""

from __future__ import annotations

import argparse
import sys
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import NoReturn

from geokv._config import GeoKVSettings
from geokv._logger import logger, set_log_level
from geokv.cost import fit_prefill_calibration, read_observations_csv, write_calibration
from geokv.errors import ConfigError, GeoKVError
from geokv.plotting import plot_comparison
from geokv.policy import Strategy
from geokv.sim import SimConfig, load_config, run, run_strategy, run_sweep, write_event_log
from geokv.telemetry import (
    RunReport,
    compare_policies,
    export_report,
    export_ttft_csv,
    load_report,
    render_comparison,
)
from geokv.workload import SweepShape

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _strategies(value: str) -> list[Strategy]:
    try:
        return [Strategy(item.strip()) for item in value.split(",") if item.strip()]
    except ValueError as e:
        choices = ",".join(s.value for s in Strategy)
        raise argparse.ArgumentTypeError(f"{e}; choose from {choices}") from e


def _out_dir(args: argparse.Namespace, settings: GeoKVSettings) -> Path:
    out = Path(args.out) if args.out is not None else settings.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args: argparse.Namespace, settings: GeoKVSettings) -> SimConfig:
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else settings.seed
    if seed is not None:
        config = config.with_seed(seed)
    return config


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    logger.info(f"Wrote {path}")


def cmd_calibrate(args: argparse.Namespace, settings: GeoKVSettings) -> int:
    calibration = fit_prefill_calibration(read_observations_csv(args.samples))
    out = _out_dir(args, settings) / "calibration.json"
    write_calibration(out, calibration)
    print(calibration.model_dump_json(indent=2))
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, settings: GeoKVSettings) -> int:
    config = _load(args, settings)
    if args.strategy is not None:
        config = config.with_strategy(args.strategy)
    if args.check_config:
        print(f"ok {config.digest()}")
        return EXIT_OK

    out = _out_dir(args, settings)
    if config.workload is not None and isinstance(config.workload.shape, SweepShape):
        result = run_sweep(config)
        for stage in result.stages:
            _write(out / f"stage_{stage.index:02d}.json", export_report(stage.report, "json"))
        _write(out / "sweep.json", result.model_dump_json(indent=2) + "\n")
        for stage in result.stages:
            print(f"stage {stage.index} rate={stage.rate:.3f} req/s")
            print(export_report(stage.report, args.format))
        if result.stop_reason:
            print(f"stopped: {result.stop_reason}")
        return EXIT_OK

    events, report = run(config)
    write_event_log(events, out / "events.jsonl")
    _write(out / "report.json", export_report(report, "json"))
    _write(out / "report.txt", export_report(report, "table"))
    export_ttft_csv(report.traces, out / "ttft.csv")
    print(export_report(report, args.format), end="")
    return EXIT_OK


def _run_all(config: SimConfig, strategies: Sequence[Strategy], jobs: int) -> list[RunReport]:
    if jobs <= 1 or len(strategies) == 1:
        return [run_strategy(config, s) for s in strategies]
    with ProcessPoolExecutor(max_workers=min(jobs, len(strategies))) as pool:
        return list(pool.map(run_strategy, [config] * len(strategies), strategies))


def cmd_compare(args: argparse.Namespace, settings: GeoKVSettings) -> int:
    strategies: list[Strategy] = args.strategies
    if len(strategies) < 2 or len(set(strategies)) != len(strategies):
        args.parser.error("--strategies needs at least two distinct strategies")
    config = _load(args, settings)
    if args.check_config:
        print(f"ok {config.digest()}")
        return EXIT_OK
    if config.workload is not None and isinstance(config.workload.shape, SweepShape):
        raise ConfigError("compare does not run sweep workloads; use simulate")

    out = _out_dir(args, settings)
    reports = _run_all(config, strategies, args.jobs)
    for report in reports:
        run_dir = out / report.policy
        run_dir.mkdir(exist_ok=True)
        _write(run_dir / "report.json", export_report(report, "json"))
        export_ttft_csv(report.traces, run_dir / "ttft.csv")

    comparison = compare_policies(reports, baseline=strategies[0].value)
    _write(out / "comparison.json", comparison.model_dump_json(indent=2) + "\n")
    _write(out / "comparison.txt", render_comparison(comparison))
    plot_comparison(comparison, out, args.plot_format)
    if args.format == "json":
        print(comparison.model_dump_json(indent=2))
    else:
        print(render_comparison(comparison), end="")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, settings: GeoKVSettings) -> int:
    reports = [load_report(path) for path in args.reports]
    if len(reports) == 1:
        print(export_report(reports[0], args.format), end="")
        return EXIT_OK

    comparison = compare_policies(reports, baseline=args.baseline)
    if args.plot:
        plot_comparison(comparison, _out_dir(args, settings), args.plot_format)
    if args.format == "json":
        print(comparison.model_dump_json(indent=2))
    else:
        print(render_comparison(comparison), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="geokv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logs")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", help="Output directory (env GEOKV_OUT_DIR, default ./out)")
        p.add_argument("--format", choices=["json", "table"], default="table")

    p = sub.add_parser("calibrate", help="Fit the prefill model from input_tokens,ttft_ms samples")
    p.add_argument("samples", help="CSV with header input_tokens,ttft_ms")
    common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="Run one simulation")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", type=Strategy, choices=list(Strategy), help="Override the config's strategy")
    p.add_argument("--check-config", action="store_true", help="Validate the config and exit")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="Run several strategies on the identical seeded workload")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--strategies", type=_strategies, default=list(Strategy), help="Comma-separated; first is baseline")
    p.add_argument("--jobs", type=int, default=1, help="Worker processes (default 1, sequential)")
    p.add_argument("--plot-format", choices=["png", "svg"], default="png", help="Image format of the bar charts")
    p.add_argument("--check-config", action="store_true", help="Validate the config and exit")
    common(p)
    p.set_defaults(func=cmd_compare, parser=p)

    p = sub.add_parser("report", help="Render saved reports; two or more are compared")
    p.add_argument("reports", nargs="+")
    p.add_argument("--baseline", help="Policy label to compare against (default: first report)")
    p.add_argument("--plot", action="store_true", help="Also write comparison bar charts")
    p.add_argument("--plot-format", choices=["png", "svg"], default="png", help="Image format of the bar charts")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_log_level("DEBUG" if args.verbose > 1 else "INFO")
    settings = GeoKVSettings()
    try:
        return int(args.func(args, settings))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (GeoKVError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected failure in {args.command}")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
