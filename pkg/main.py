#!/usr/bin/env python3
"""
Main entry point for the RKESim project.
"""
import sys
import argparse
import logging
from typing import List, Optional

from core.audit import AuditReport
from core.errors import ConfigError, InvariantViolation, RkeSimError, TraceFormatError
from core.matrix import MatrixReport, run_matrix
from core.scenario import (
    ProvisionReport, ScenarioReport, audit_trace_file, run_provision_demo, run_scenario
)
from core.utils import (
    EXIT_CONFIG_ERROR, EXIT_INVARIANT_VIOLATION, EXIT_OK,
    configure_logging, get_output_dir, load_environment
)

logger = logging.getLogger('rkesim.main')


class RKESim:
    """
    Front end for the simulator: one method per CLI command.
    """

    def __init__(self, out_dir: Optional[str] = None, seed: Optional[int] = None, write_trace: bool = True):
        """
        Initialize the simulator front end.

        Args:
            out_dir: Output directory (if None, uses RKESIM_OUTPUT_DIR or output/)
            seed: Seed overriding the configuration files
            write_trace: Whether traces are written to disk
        """
        self.out_dir = get_output_dir(out_dir)
        self.seed = seed
        self.write_trace = write_trace
        logger.info(f"RKESim initialized, output in {self.out_dir}")

    def simulate(self, scenario_path: str) -> ScenarioReport:
        report = run_scenario(scenario_path, self.seed, self.out_dir, self.write_trace)
        for run in report.runs:
            status = "clean" if run.audit.clean else f"{len(run.audit.violations)} violation(s)"
            print(f"{report.scenario} seed {run.seed}: {len(run.actuators)} actuator event(s), audit {status}")
            if run.succeeded is not None:
                print(f"  attack {run.attack}: {'SUCCEEDED' if run.succeeded else 'failed'} "
                      f"({run.successes}/{run.attempts})")
        return report

    def matrix(self, config_path: str, jobs: int = 1) -> MatrixReport:
        report = run_matrix(config_path, self.seed, self.out_dir, jobs)
        for attack, order in report.ordering.items():
            rates = ", ".join(f"{c.technique}={c.successes}/{c.attempts}" for c in report.row(attack))
            print(f"{attack:>18}: {rates}")
        for problem in report.violations:
            print(f"ORDERING VIOLATION {problem}")
        return report

    def audit(self, trace_path: str) -> AuditReport:
        report = audit_trace_file(trace_path)
        print(f"{trace_path}: {report.records} records, {report.lockouts} lockout(s), "
              f"{report.jam_defenses} jam defense(s)")
        if not report.clean:
            raise InvariantViolation(report.violations)
        print("audit clean")
        return report

    def provision_demo(self, config_path: str) -> ProvisionReport:
        report = run_provision_demo(config_path, self.seed, self.out_dir)
        outcomes = ", ".join(f"{k}={v}" for k, v in sorted(report.outcomes.items()))
        print(f"{report.name}: {len(report.runs)} exchange(s): {outcomes}; "
              f"silent divergences: {report.silent_divergences}")
        return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="RKESim - remote keyless entry protocol simulator")
    parser.add_argument("--seed", type=int, help="Seed overriding the configuration file")
    parser.add_argument("--out-dir", help="Directory for traces and reports")
    parser.add_argument("--trace", dest="trace", action="store_true", default=True, help="Write trace files")
    parser.add_argument("--no-trace", dest="trace", action="store_false", help="Do not write trace files")
    parser.add_argument("--log-level", help="Log level (default: RKESIM_LOG_LEVEL or INFO)")

    commands = parser.add_subparsers(dest="command", required=True)
    simulate = commands.add_parser("simulate", help="Run a scenario file")
    simulate.add_argument("scenario", help="Path to a .scn file")
    matrix = commands.add_parser("matrix", help="Run the attack matrix")
    matrix.add_argument("config", help="Path to a matrix .cfg file")
    matrix.add_argument("--jobs", type=int, default=1, help="Worker processes for independent cells")
    audit = commands.add_parser("audit", help="Audit a trace file")
    audit.add_argument("trace_file", help="Path to a .trace file")
    provision = commands.add_parser("provision-demo", help="Run the key-exchange demonstration")
    provision.add_argument("config", help="Path to a provisioning .cfg file")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    load_environment()
    configure_logging(args.log_level)

    try:
        sim = RKESim(args.out_dir, args.seed, args.trace)
        if args.command == "simulate":
            return sim.simulate(args.scenario).exit_code
        if args.command == "matrix":
            return sim.matrix(args.config, args.jobs).exit_code
        if args.command == "audit":
            sim.audit(args.trace_file)
            return EXIT_OK
        return sim.provision_demo(args.config).exit_code
    except (ConfigError, TraceFormatError) as e:
        logger.error(str(e))
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except InvariantViolation as e:
        for violation in e.violations:
            print(violation, file=sys.stderr)
        return EXIT_INVARIANT_VIOLATION
    except RkeSimError as e:
        logger.error(str(e))
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INVARIANT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
