"""``vfpga-sim`` command line.

Each subcommand runs the lifecycle up to and including its own step:
``program`` boots first, ``overlay`` boots and programs, ``bench`` does all
three before measuring.  Exit status: 0 success, 1 user or configuration
error, 2 invariant or verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import dt
from .bench import DeviceNotEnabled, VerificationFailed
from .bitstream import BitstreamError
from .fpga_mgr import MissingFirmwareDir, ProgramStatus
from .iommu import VfioError
from .selftest import cmd_selftest
from .system import DEFAULT_SCENARIO, ScenarioError, cmd_bench, cmd_boot, cmd_overlay, cmd_program, load_scenario
from .timemodel import CalibrationError
from .vdev import VdevError

EXIT_OK, EXIT_USER, EXIT_VERIFY = 0, 1, 2

STEPS = ("boot", "program", "overlay", "bench")


class StepFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        # usage mistakes are user errors; 2 is reserved for verification failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vfpga-sim", description="virtio FPGA programming and passthrough simulator")
    p.add_argument("command", choices=STEPS + ("selftest",))
    p.add_argument("--scenario", type=Path, default=DEFAULT_SCENARIO, help="scenario JSON file")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", type=Path, default=Path("bench-out"), help="report directory for bench")
    p.add_argument("--firmware", default=None, help="firmware name to program instead of the scenario's")
    p.add_argument("--overlay", type=Path, default=None, help="overlay file instead of the scenario's")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(args: argparse.Namespace) -> int:
    if args.command == "selftest":
        return cmd_selftest(seed=args.seed or 0)
    scenario = load_scenario(args.scenario, seed=args.seed)
    last = STEPS.index(args.command)
    state = cmd_boot(scenario)
    if last >= 1:
        status = cmd_program(state, args.firmware)
        if status is not ProgramStatus.OK:
            raise StepFailed(f"programming failed with {status.name}")
    if last >= 2:
        cmd_overlay(state, args.overlay)
    if last >= 3:
        cmd_bench(state, args.out)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except VerificationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ScenarioError, dt.DtError, VfioError, BitstreamError, MissingFirmwareDir, DeviceNotEnabled,
            CalibrationError, VdevError, StepFailed, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
