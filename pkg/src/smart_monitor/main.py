"""Command-line entry point for smart-monitor."""

import argparse
import sys
import time
from collections.abc import Sequence
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .boundaries import BoundaryMethod, BoundarySet
from .config import Config
from .covariance import CovarianceMethod
from .errors import ArgumentError, SmartMonitorError
from .monitoring import analyze, derive_boundaries, monitor, operating_characteristics, survival_curves
from .reports import REPORT_FORMATS, ReportWriter, load_report
from .simulation import PRESET_NAMES, ScenarioConfig, calibrate_censoring, generate_trial, load_scenario
from .statistics import StatisticKind
from .trial import TIME_UNITS, SmartDesign, emit_csv, ingest_csv

UTC = timezone.utc  # datetime.UTC alias (Python 3.11+)

logger = Config.get_logger(__name__)


def _float_list(raw: str) -> list[float]:
    try:
        return [float(item) for item in raw.split(",") if item.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}") from e


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per workflow."""
    parser = argparse.ArgumentParser(
        prog="smart-monitor",
        description="Interim monitoring of SMARTs with survival outcomes.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--design", type=Path, help="JSON design file (defaults to the scenario's design)")
    common.add_argument("--stat", choices=("lr", "td"), default="lr", help="Statistic family")
    common.add_argument("--alpha", type=float, default=None, help="Overall level (default SMART_ALPHA)")
    common.add_argument("--seed", type=int, default=None, help="Root seed (default SMART_DEFAULT_SEED)")
    common.add_argument("--out", type=Path, help="Output file (default under SMART_OUTPUT_DIR)")
    common.add_argument("--format", choices=REPORT_FORMATS, default="json", help="Report format")
    common.add_argument("--time-unit", choices=tuple(TIME_UNITS), default="years", help="Unit of data and times")
    common.add_argument(
        "--assume-uniform-accrual",
        type=float,
        metavar="WINDOW",
        help="Assign enrollment evenly over [0, WINDOW] in record order",
    )

    scenario = argparse.ArgumentParser(add_help=False)
    scenario.add_argument(
        "--scenario", default="null-smart2", help=f"Preset ({', '.join(PRESET_NAMES)}) or JSON scenario file"
    )
    scenario.add_argument("--p-eta", type=float, default=0.90, help="Stage-2 advancement probability")
    scenario.add_argument("--censoring", type=float, default=0.20, help="Target censoring fraction")
    scenario.add_argument("--n", type=int, default=None, help="Override the scenario sample size")

    thresholds = argparse.ArgumentParser(add_help=False)
    thresholds.add_argument("--boundaries", type=Path, help="Boundary report (JSON) to monitor with")
    thresholds.add_argument("--thresholds", type=_float_list, help="Comma-separated thresholds b_1,...,b_M")

    subparsers = parser.add_subparsers(dest="command", required=True)

    sim = subparsers.add_parser("simulate", parents=[common, scenario], help="Simulate one trial to CSV")
    sim.add_argument("--include-latent", action="store_true", help="Also write latent event and censoring times")

    cal = subparsers.add_parser("calibrate", parents=[common, scenario], help="Calibrate the censoring bound")
    cal.add_argument("--reps", type=int, default=None, help="Subjects per calibration probe")

    bnd = subparsers.add_parser("boundaries", parents=[common, scenario], help="Derive efficacy boundaries")
    bnd.add_argument("--data", type=Path, help="CSV dataset (default: simulate a null cohort)")
    bnd.add_argument("--method", choices=[m.value for m in BoundaryMethod if m is not BoundaryMethod.CUSTOM])
    bnd.add_argument("--info", type=_float_list, default=[0.5], help="Interim information fractions")
    bnd.add_argument("--draws", type=int, default=None, help="Monte Carlo draws (default SMART_BOUNDARY_DRAWS)")
    bnd.add_argument("--oracle", action="store_true", help="Use full-data covariance at every analysis")
    bnd.set_defaults(method=BoundaryMethod.POCOCK.value)

    ana = subparsers.add_parser("analyze", parents=[common], help="Interim or final analysis of a dataset")
    ana.add_argument("data", type=Path, help="CSV dataset")
    ana.add_argument("--cutoff", type=float, default=None, help="Calendar cutoff (default: full data)")

    mon = subparsers.add_parser("monitor", parents=[common, thresholds], help="Run the sequential procedure")
    mon.add_argument("data", type=Path, help="CSV dataset")
    mon.add_argument("--times", type=_float_list, required=True, help="Comma-separated analysis calendar times")

    occ = subparsers.add_parser("oc", parents=[common, scenario, thresholds], help="Operating characteristics")
    occ.add_argument("--reps", type=int, default=1000, help="Simulated trials")
    occ.add_argument("--info", type=_float_list, default=None, help="Information fractions with --thresholds")
    occ.add_argument(
        "--covariance",
        choices=(CovarianceMethod.LINEARIZATION.value, CovarianceMethod.BOOTSTRAP.value),
        default=CovarianceMethod.LINEARIZATION.value,
    )
    occ.add_argument("--bootstrap-reps", type=int, default=None, help="Bootstrap replicates per trial")

    crv = subparsers.add_parser("curves", parents=[common], help="Weighted survival curves per regime")
    crv.add_argument("data", type=Path, help="CSV dataset")
    crv.add_argument("--cutoff", type=float, default=None, help="Calendar cutoff (default: full data)")

    return parser


class SmartMonitorApp:
    """Runs one CLI workflow and reports on it."""

    def __init__(self, args: argparse.Namespace) -> None:
        """Validate configuration and prepare the output directory.

        Raises:
            SystemExit: With code 2 if the configuration is invalid
        """
        self.args = args
        self.start_time = datetime.now(UTC)
        self.writer = ReportWriter()
        self.outputs: list[Path] = []

        errors = Config.validate()
        if errors:
            logger.error("Configuration errors:")
            for error in errors:
                logger.error("  - %s", error)
            raise SystemExit(2)
        Config.ensure_directories()

        self.seed = Config.DEFAULT_SEED if args.seed is None else args.seed
        self.time_scale = TIME_UNITS[args.time_unit]
        logger.info("smart-monitor %s (seed %d, python %s)", args.command, self.seed, sys.version.split()[0])

    def run(self) -> int:
        handler = getattr(self, f"_run_{self.args.command}")
        handler()
        self._print_final_statistics()
        return 0

    # Inputs

    def _ingest_options(self) -> dict[str, Any]:
        return {"time_unit": self.args.time_unit, "accrual_window": self.args.assume_uniform_accrual}

    def _scenario(self) -> ScenarioConfig:
        config = load_scenario(self.args.scenario, p_eta=self.args.p_eta, censoring=self.args.censoring)
        if self.args.n is not None:
            config = replace(config, n=self.args.n)
        if self.args.design is not None:
            config = replace(config, design=SmartDesign.from_file(self.args.design))
        return config

    def _design(self) -> SmartDesign:
        if self.args.design is None:
            raise ArgumentError("--design is required for this command")
        return SmartDesign.from_file(self.args.design)

    def _in_years(self, value: float | None) -> float | None:
        return None if value is None else value * self.time_scale

    def _boundary_set(self, info: Sequence[float] | None = None) -> BoundarySet:
        if self.args.boundaries is not None:
            report = load_report(self.args.boundaries)
            if not isinstance(report, dict) or report.get("report") != "boundaries":
                raise ArgumentError(f"{self.args.boundaries} is not a JSON boundary report")
            return BoundarySet.from_dict(report["result"])
        if self.args.thresholds:
            return BoundarySet.fixed(self.args.thresholds, self.args.alpha, info or ())
        raise ArgumentError("Provide --boundaries or --thresholds")

    def _emit(self, report: Any, config: dict[str, Any] | None = None, time_scale: float = 1.0) -> None:
        path = self.args.out or Config.OUTPUT_DIR / f"{self.args.command}.{self.args.format}"
        self.outputs.append(
            self.writer.write(report, path, self.args.format, seed=self.seed, config=config, time_scale=time_scale)
        )

    # Workflows

    def _run_simulate(self) -> None:
        config = self._scenario()
        records = generate_trial(config, seed=self.seed)
        path = self.args.out or Config.OUTPUT_DIR / f"{config.label}-{self.seed}.csv"
        self.outputs.append(emit_csv(records, path, self.args.time_unit, include_latent=self.args.include_latent))
        events = sum(record.delta for record in records)
        logger.info("Simulated %d subjects (%d events) from %s", len(records), events, config.label)

    def _run_calibrate(self) -> None:
        config = self._scenario()
        nu = calibrate_censoring(config, self.args.censoring, reps=self.args.reps, seed=self.seed)
        logger.info("Calibrated nu_cens=%.4f for %.0f%% censoring in %s", nu, 100 * self.args.censoring, config.label)
        self._emit(config.with_nu(nu))

    def _run_boundaries(self) -> None:
        if self.args.data is not None:
            design = self._design()
            data = ingest_csv(self.args.data, design, **self._ingest_options())
            config: dict[str, Any] = {"design": design.to_dict(), "data": str(self.args.data)}
        else:
            scenario = self._scenario()
            if self.args.n is None:
                scenario = replace(scenario, n=10_000)
            design = scenario.design
            data = generate_trial(scenario, seed=self.seed)
            config = {"scenario": scenario.to_dict()}

        result = derive_boundaries(
            data,
            design,
            kind=self.args.stat,
            method=self.args.method,
            alpha=self.args.alpha,
            interim_fractions=self.args.info,
            draws=self.args.draws,
            seed=self.seed,
            oracle=self.args.oracle,
        )
        for m, threshold in enumerate(result.thresholds, start=1):
            logger.info("  b_%d = %.4f", m, threshold)
        self._emit(result, config=config)

    def _run_analyze(self) -> None:
        design = self._design()
        summary = analyze(
            self.args.data,
            design,
            t_cal=self._in_years(self.args.cutoff),
            kind=self.args.stat,
            **self._ingest_options(),
        )
        self._emit(summary, config={"design": design.to_dict(), "data": str(self.args.data)})

    def _run_monitor(self) -> None:
        design = self._design()
        boundaries = self._boundary_set()
        decisions = monitor(
            self.args.data,
            design,
            boundaries,
            [t * self.time_scale for t in self.args.times],
            kind=self.args.stat,
            **self._ingest_options(),
        )
        logger.info("Final verdict: %s at analysis %d", decisions[-1].verdict.value, decisions[-1].analysis)
        self._emit(decisions, config={"design": design.to_dict(), "boundaries": boundaries.to_dict()})

    def _run_oc(self) -> None:
        scenario = self._scenario()
        boundaries = self._boundary_set(self.args.info)
        report = operating_characteristics(
            scenario,
            boundaries,
            kind=StatisticKind.parse(self.args.stat),
            reps=self.args.reps,
            seed=self.seed,
            covariance=self.args.covariance,
            bootstrap_reps=self.args.bootstrap_reps,
        )
        self._emit(report, config={"scenario": scenario.to_dict(), "boundaries": boundaries.to_dict()})

    def _run_curves(self) -> None:
        design = self._design()
        curves = survival_curves(
            self.args.data, design, t_cal=self._in_years(self.args.cutoff), **self._ingest_options()
        )
        for curve in curves:
            median = "undefined" if curve.median is None else f"{curve.median / self.time_scale:.1f}"
            logger.info("  %s median: %s %s", curve.dtr, median, self.args.time_unit)
        self._emit(curves, config={"design": design.to_dict()}, time_scale=1.0 / self.time_scale)

    def _print_final_statistics(self) -> None:
        elapsed = (datetime.now(UTC) - self.start_time).total_seconds()
        stats = self.writer.get_stats()
        logger.info("=" * 60)
        logger.info("  Command: %s", self.args.command)
        logger.info("  Elapsed: %s", self._format_duration(elapsed))
        logger.info("  Reports written: %d", stats["reports_written"])
        for path in self.outputs:
            logger.info("  Output: %s", path)
        logger.info("=" * 60)

    @staticmethod
    def _format_duration(seconds: float) -> str:
        hours, remainder = divmod(int(seconds), 3600)
        minutes, secs = divmod(remainder, 60)

        if hours > 0:
            return f"{hours}h {minutes}m {secs}s"
        elif minutes > 0:
            return f"{minutes}m {secs}s"
        else:
            return f"{secs}s"


def main(argv: Sequence[str] | None = None) -> None:
    """CLI entry point; exits 0 on success, 2 on invalid input, 3 on infeasible or insufficient data."""
    parser = build_parser()
    args = parser.parse_args(argv)
    Config.setup_logging()

    exit_code = 0
    start = time.time()
    try:
        exit_code = SmartMonitorApp(args).run()
    except KeyboardInterrupt:
        logger.info("Interrupted after %.1fs", time.time() - start)
        exit_code = 130
    except SmartMonitorError as e:
        logger.error("%s: %s", type(e).__name__, e)
        exit_code = e.exit_code
    except SystemExit as e:
        exit_code = e.code if isinstance(e.code, int) else 1
    except Exception as e:
        logger.exception("Critical error in %s: %s", args.command, e)
        exit_code = 1

    sys.exit(exit_code)


if __name__ == "__main__":
    main()
