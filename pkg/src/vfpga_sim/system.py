"""Scenario loading and the boot / program / overlay / bench flow."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

from . import dt
from .bench import BenchConfig, BenchRecord, BenchSystem, DeviceNotEnabled, emit_overhead_csv, emit_report, run_dmatest
from .fabric import DDR_BASE, DDR_SIZE, Fabric, XferMode
from .fpga_mgr import FpgaManager, ProgramStatus, register_manager
from .iommu import IommuContainer, Mode, VfioDevice, Window, create_container, create_passthrough, enable_device
from .timemodel import Env, TimeModel, builtin_model
from .vdev import Backend, Frontend, VfpgaDeviceConfig, backend_attach, frontend_probe
from .vq import GuestMemory

GUEST_RAM_BASE = 0x4000_0000
VQ_MEM_BASE = 0x7F00_0000
VQ_MEM_SIZE = 64 << 10
CANDIDATE_BUS = "/axi"

DATA_DIR = Path(__file__).with_name("data")
DEFAULT_SCENARIO = DATA_DIR / "cdma_demo.json"


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    base_dts: Path
    overlay: Path
    firmware_dir: Path
    firmware_name: str
    bench: BenchConfig = field(default_factory=BenchConfig)
    calibration: Union[Path, str] = "builtin"
    seed: int = 0


def load_scenario(path: Union[str, Path], seed: Optional[int] = None) -> Scenario:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    root = path.parent

    def rel(key: str, kind: str) -> Path:
        if key not in raw:
            raise ScenarioError(f"{path}: missing key {key!r}")
        p = (root / raw[key]).resolve()
        if kind == "file" and not p.is_file() or kind == "dir" and not p.is_dir():
            raise ScenarioError(f"{path}: {key} {p} is not an existing {kind}")
        return p

    bench_raw = raw.get("bench", {})
    try:
        bench = BenchConfig(
            sizes=tuple(int(s) for s in bench_raw.get("sizes", BenchConfig.sizes)),
            iterations=int(bench_raw.get("iterations", BenchConfig.iterations)),
            modes=tuple(XferMode(m) for m in bench_raw.get("modes", [m.value for m in BenchConfig.modes])),
            envs=tuple(Env(e) for e in bench_raw.get("envs", [e.value for e in BenchConfig.envs])),
        )
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{path}: bad bench section: {exc}") from exc
    cal = raw.get("calibration", "builtin")
    calibration: Union[Path, str] = cal if cal == "builtin" else rel("calibration", "file")
    name = raw.get("firmware_name")
    if not isinstance(name, str) or not name:
        raise ScenarioError(f"{path}: firmware_name must be a non-empty string")
    return Scenario(
        base_dts=rel("base_dts", "file"),
        overlay=rel("overlay", "file"),
        firmware_dir=rel("firmware_dir", "dir"),
        firmware_name=name,
        bench=bench,
        calibration=calibration,
        seed=int(raw.get("seed", 0)) if seed is None else seed,
    )


@dataclass
class SystemState:
    scenario: Scenario
    tree: dt.DtNode
    candidates: dict[str, VfioDevice]
    containers: dict[Env, IommuContainer]
    fabric: Fabric
    manager: FpgaManager
    frontend: Frontend
    backend: Backend
    model: TimeModel
    out: Callable[[str], None] = print
    records: list[BenchRecord] = field(default_factory=list)


def _read(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc


def _located(path: Path, exc: dt.DtError) -> dt.DtError:
    where = f"{path}:{exc.line}:{exc.col}" if exc.line is not None else str(path)
    msg = str(exc).split(": ", 1)[-1] if exc.line is not None else str(exc)
    return type(exc)(f"{where}: {msg}")


def load_model(scenario: Scenario) -> TimeModel:
    if scenario.calibration == "builtin":
        return builtin_model(seed=scenario.seed)
    model = TimeModel.load(scenario.calibration)
    model.seed = scenario.seed
    return model


def cmd_boot(scenario: Scenario, out: Callable[[str], None] = print) -> SystemState:
    try:
        tree = dt.parse_dts(_read(scenario.base_dts))
    except dt.DtError as exc:
        raise _located(scenario.base_dts, exc) from exc
    bus = tree.find(CANDIDATE_BUS)
    candidates = {}
    if bus is not None:
        for child in bus.children:
            if child.status == "disabled":
                path = f"{CANDIDATE_BUS}/{child.name}"
                candidates[path] = create_passthrough(tree, path)
    fabric = Fabric()
    containers = {
        Env.GUEST: create_container(Mode.DIRECT, Window(GUEST_RAM_BASE, DDR_BASE, DDR_SIZE)),
        Env.HOST: create_container(Mode.ON_DEMAND),
    }
    manager = register_manager("zynqmp-fpga", None, scenario.firmware_dir, fabric)
    config = VfpgaDeviceConfig()
    frontend = frontend_probe(config, GuestMemory(VQ_MEM_BASE, VQ_MEM_SIZE))
    backend = backend_attach(config, frontend.filename_q, frontend.status_q, manager)
    state = SystemState(scenario, tree, candidates, containers, fabric, manager, frontend, backend,
                        load_model(scenario), out)
    out(f"booted: {len(candidates)} candidate device(s) under {CANDIDATE_BUS}")
    for path, dev in candidates.items():
        regs = ", ".join(f"{b:#x}+{s:#x}" for b, s in dev.regions)
        irqs = ", ".join(str(i) for i in dev.irqs) or "-"
        out(f"  {path}: reg {regs} irq {irqs} disabled")
    return state


def cmd_program(state: SystemState, firmware_name: Optional[str] = None) -> ProgramStatus:
    status = state.frontend.firmware_store(firmware_name or state.scenario.firmware_name)
    state.out(state.frontend.log.lines[-1])
    return status


def cmd_overlay(state: SystemState, overlay_path: Optional[Path] = None) -> list[str]:
    path = Path(overlay_path) if overlay_path is not None else state.scenario.overlay
    try:
        overlay = dt.parse_overlay(_read(path))
    except dt.DtError as exc:
        raise _located(path, exc) from exc
    guards = [d.guard for d in state.candidates.values()]
    state.tree = dt.apply_overlay(state.tree, overlay, guards)
    targets = [f.target_path.rstrip("/") for f in overlay.fragments]
    enabled = []
    for cpath, dev in state.candidates.items():
        touched = any(cpath == t or cpath.startswith(t + "/") or t == "" for t in targets)
        node = state.tree.find(cpath)
        if touched and node is not None and node.status == "okay":
            enable_device(dev, state.fabric, state.tree)
            enabled.append(cpath)
    for cpath in enabled:
        state.out(f"enabled {cpath}")
    if not enabled:
        state.out("no candidate device enabled")
    return enabled


def cdma_candidate(state: SystemState) -> Optional[VfioDevice]:
    cdma = state.fabric.cdma()
    if cdma is None:
        return None
    for dev in state.candidates.values():
        if dev.regions and dev.regions[0][0] == cdma.reg_base:
            return dev
    return None


def cmd_bench(state: SystemState, out_dir: Optional[Union[str, Path]] = None) -> list[BenchRecord]:
    vfio = cdma_candidate(state)
    if vfio is None or not vfio.enabled:
        raise DeviceNotEnabled("the CDMA candidate has not been enabled by an overlay")
    system = BenchSystem(state.fabric, state.containers, vfio)
    records = run_dmatest(state.scenario.bench, state.model, system)
    state.records = records
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(emit_report(records, "markdown"))
        (out / "report.csv").write_text(emit_report(records, "csv"))
        (out / "overhead.csv").write_text(emit_overhead_csv(records))
        state.out(f"wrote report.md, report.csv, overhead.csv to {out}")
    return records
