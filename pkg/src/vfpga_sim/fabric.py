"""Simulated programmable logic and the CDMA engine."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bitstream import BitstreamImage, DeviceRecord, DeviceType
from .iommu import Fault, IommuContainer, Perm
from .vq import GuestMemory

DDR_BASE = 0x0000_0000
DDR_SIZE = 64 << 20
DEFAULT_BANDWIDTH = 3200.0  # bytes per microsecond
POLL_COST_US = 0.1


class FabricError(Exception):
    pass


class RegionMismatch(FabricError):
    pass


class UnknownRegion(FabricError):
    pass


class UnsupportedDeviceType(FabricError):
    pass


class Busy(FabricError):
    pass


class InvalidTransfer(FabricError):
    pass


class TranslationFault(FabricError):
    def __init__(self, xfer: "DmaTransfer", fault: Fault):
        self.xfer = xfer
        self.fault = fault
        super().__init__(f"DMA translation fault: {fault}")


class SimClock:
    """Monotonic simulated time in microseconds."""

    def __init__(self, start: float = 0.0):
        self.now = float(start)

    def advance(self, dt_us: float) -> float:
        if dt_us < 0 or math.isnan(dt_us):
            raise ValueError(f"cannot advance the clock by {dt_us}")
        self.now += dt_us
        return self.now

    def advance_to(self, t_us: float) -> float:
        self.now = max(self.now, t_us)
        return self.now


class XferMode(enum.Enum):
    INTERRUPT = "interrupt"
    POLLED = "polled"


class XferResult(enum.Enum):
    PENDING = "pending"
    OK = "ok"
    FAULT = "fault"


@dataclass
class DmaTransfer:
    src_iova: int
    dst_iova: int
    len: int
    mode: XferMode = XferMode.POLLED
    result: XferResult = XferResult.PENDING


class GpioDevice:
    def __init__(self, record: DeviceRecord, fabric: "Fabric"):
        self.record = record
        self.fabric = fabric
        self.value = 0


class CdmaDevice:
    """Memory-to-memory copy engine.

    ``timing(mode, nbytes)`` gives the engine-side duration of a transfer
    in microseconds; the benchmark harness installs its calibrated model
    here.  Bytes move at submit time, completion is observed on wait.
    """

    def __init__(self, record: DeviceRecord, fabric: "Fabric"):
        self.record = record
        self.fabric = fabric
        self.busy = False
        self.poll_cost = POLL_COST_US
        self.timing: Callable[[XferMode, int], float] = lambda mode, n: n / DEFAULT_BANDWIDTH
        self.completed = 0

    @property
    def reg_base(self) -> int:
        return self.record.reg_base

    @property
    def reg_size(self) -> int:
        return self.record.reg_size

    @property
    def irq_line(self) -> Optional[int]:
        return self.record.irq_line


@dataclass
class CdmaHandle:
    dev: CdmaDevice
    xfer: DmaTransfer
    clock: SimClock
    submitted_at: float
    completes_at: float
    polls: int = 0
    on_complete: list[Callable[[DmaTransfer], None]] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.xfer.result is not XferResult.PENDING


_DEVICE_TYPES = {DeviceType.CDMA: CdmaDevice, DeviceType.GPIO: GpioDevice}


@dataclass
class FabricRegion:
    region_id: int
    configured_image: Optional[BitstreamImage] = None
    devices: list = field(default_factory=list)


class Fabric:
    def __init__(self, region_ids=(1,), ddr: Optional[GuestMemory] = None):
        self.ddr = ddr if ddr is not None else GuestMemory(DDR_BASE, DDR_SIZE)
        self.regions = {rid: FabricRegion(rid) for rid in region_ids}
        self._irq_handlers: dict[int, list[Callable[[int], None]]] = {}

    def region(self, region_id: int) -> FabricRegion:
        try:
            return self.regions[region_id]
        except KeyError:
            raise UnknownRegion(f"no fabric region {region_id}") from None

    def configure_region(self, region_id: int, image: BitstreamImage) -> None:
        region = self.region(region_id)
        if image.region_id != region_id:
            raise RegionMismatch(f"image targets region {image.region_id}, not {region_id}")
        devices = []
        for rec in image.records:
            if rec.dev_type is DeviceType.NONE:
                continue
            cls = _DEVICE_TYPES.get(rec.dev_type)
            if cls is None:
                raise UnsupportedDeviceType(f"{rec.name}: {rec.dev_type!r}")
            devices.append(cls(rec, self))
        region.devices = devices
        region.configured_image = image

    def devices(self):
        for region in self.regions.values():
            yield from region.devices

    def device_at(self, addr: int):
        for dev in self.devices():
            if dev.record.reg_base <= addr < dev.record.reg_end:
                return dev
        return None

    def cdma(self) -> Optional[CdmaDevice]:
        return next((d for d in self.devices() if isinstance(d, CdmaDevice)), None)

    def on_irq(self, line: int, cb: Callable[[int], None]) -> None:
        self._irq_handlers.setdefault(line, []).append(cb)

    def raise_irq(self, line: int) -> None:
        for cb in list(self._irq_handlers.get(line, ())):
            cb(line)


def configure_region(fabric: Fabric, region_id: int, image: BitstreamImage) -> None:
    fabric.configure_region(region_id, image)


def _gather(ddr: GuestMemory, extents: list[tuple[int, int]]) -> np.ndarray:
    if len(extents) == 1:
        return ddr.view(*extents[0])
    return np.concatenate([ddr.view(pa, n) for pa, n in extents])


def cdma_submit(dev: CdmaDevice, container: IommuContainer, xfer: DmaTransfer,
                clock: SimClock) -> CdmaHandle:
    if dev.busy:
        raise Busy(f"{dev.record.name} already has a transfer in flight")
    n = xfer.len
    if n <= 0 or n % 4:
        raise InvalidTransfer(f"length {n} must be a positive multiple of 4")
    if xfer.src_iova < xfer.dst_iova + n and xfer.dst_iova < xfer.src_iova + n:
        raise InvalidTransfer("source and destination ranges overlap")
    try:
        src = container.translate_range(xfer.src_iova, n, Perm.R)
        dst = container.translate_range(xfer.dst_iova, n, Perm.W)
    except Fault as f:
        xfer.result = XferResult.FAULT
        raise TranslationFault(xfer, f) from f
    ddr = dev.fabric.ddr
    for pa, ln in src + dst:
        if not ddr.contains(pa, ln):
            xfer.result = XferResult.FAULT
            raise TranslationFault(xfer, Fault(pa, "physical address outside DDR"))

    data = _gather(ddr, src)
    if len(dst) == 1:
        ddr.view(*dst[0])[:] = data
    else:
        pos = 0
        for pa, ln in dst:
            ddr.view(pa, ln)[:] = data[pos:pos + ln]
            pos += ln
    ddr.note_write()

    duration = float(dev.timing(xfer.mode, n))
    dev.busy = True
    return CdmaHandle(dev, xfer, clock, clock.now, clock.now + duration)


def cdma_wait(handle: CdmaHandle, mode: Optional[XferMode] = None) -> XferResult:
    """Wait for completion, charging the simulated clock.

    INTERRUPT sleeps until the engine finishes and then takes the irq.
    POLLED spins on the busy flag; the read that sees it clear costs one
    poll.
    """
    mode = handle.xfer.mode if mode is None else mode
    if mode is not handle.xfer.mode:
        raise ValueError(f"transfer was submitted as {handle.xfer.mode.value}, not {mode.value}")
    if handle.done:
        return handle.xfer.result
    dev, clock = handle.dev, handle.clock
    if mode is XferMode.POLLED:
        remaining = max(0.0, handle.completes_at - clock.now)
        handle.polls = math.ceil(remaining / dev.poll_cost) + 1
        clock.advance_to(handle.completes_at)
        clock.advance(dev.poll_cost)
    else:
        clock.advance_to(handle.completes_at)
    dev.busy = False
    dev.completed += 1
    handle.xfer.result = XferResult.OK
    if mode is XferMode.INTERRUPT and dev.irq_line is not None:
        dev.fabric.raise_irq(dev.irq_line)
    for cb in handle.on_complete:
        cb(handle.xfer)
    return handle.xfer.result
