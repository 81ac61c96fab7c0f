from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from vfpga_sim.bench import BenchSystem
from vfpga_sim.bitstream import encode_image, golden_cdma_image
from vfpga_sim.fabric import Fabric
from vfpga_sim.iommu import BasePropertyGuard, Mode, VfioDevice, Window, create_container
from vfpga_sim.system import DATA_DIR
from vfpga_sim.timemodel import Env

@pytest.fixture(scope="session")
def golden_bytes() -> bytes:
    return encode_image(golden_cdma_image())


@pytest.fixture
def firmware_dir(tmp_path: Path, golden_bytes: bytes) -> Path:
    """A firmware directory holding the golden image and a corrupt one."""
    fw = tmp_path / "firmware"
    fw.mkdir()
    (fw / "cdma_demo.vfpb").write_bytes(golden_bytes)
    bad = bytearray(golden_bytes)
    bad[-1] ^= 0xFF
    (fw / "corrupt.vfpb").write_bytes(bytes(bad))
    return fw


@pytest.fixture
def scenario_copy(tmp_path: Path) -> Path:
    """The packaged demo scenario copied next to its data files."""
    dst = tmp_path / "data"
    shutil.copytree(DATA_DIR, dst)
    return dst / "cdma_demo.json"


@pytest.fixture
def bench_system():
    """A fabric with the golden CDMA, both containers and an enabled passthrough."""
    fabric = Fabric()
    fabric.configure_region(1, golden_cdma_image())
    path = "/axi/cdma@a0000000"
    vfio = VfioDevice(path, BasePropertyGuard(path, ((0xA000_0000, 0x1000),), (4,)), enabled=True)
    containers = {Env.HOST: create_container(Mode.ON_DEMAND),
                  Env.GUEST: create_container(Mode.DIRECT, Window(0x4000_0000, fabric.ddr.base, fabric.ddr.size))}
    return BenchSystem(fabric, containers, vfio)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record and print one acceptance line; fail the test when it did not hold."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
