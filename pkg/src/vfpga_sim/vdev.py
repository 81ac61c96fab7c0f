"""The paravirtual FPGA-programming device.

Two virtqueues connect the guest driver (:class:`Frontend`) with the host
device model (:class:`Backend`): the guest posts a NUL-terminated firmware
name on the filename queue, and the host answers with a little-endian u32
status in a buffer the guest pre-posted on the status queue.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Optional

from .fpga_mgr import FpgaManager, ManagerBusy, ProgramStatus
from .vq import GuestMemory, Region, Virtqueue

log = logging.getLogger(__name__)

STATUS_LEN = 4


class VdevError(Exception):
    pass


class NameTooLong(VdevError):
    pass


class InvalidName(VdevError):
    pass


class Timeout(VdevError):
    pass


@dataclass
class VfpgaDeviceConfig:
    device_type_id: int = 0x1A
    filename_queue_size: int = 8
    status_queue_size: int = 8
    max_name_len: int = 256
    timeout_s: float = 5.0
    instance: str = "fpga0"

    def __post_init__(self) -> None:
        for n in (self.filename_queue_size, self.status_queue_size):
            if n < 2 or n & (n - 1):
                raise ValueError(f"queue size {n} is not a power of two")


@dataclass
class GuestLog:
    lines: list[str] = field(default_factory=list)

    def append(self, line: str) -> None:
        self.lines.append(line)
        log.info("%s", line)


def _check_name(raw: bytes, max_len: int) -> Optional[str]:
    """Return the decoded name of a wire request, or None if malformed."""
    if len(raw) > max_len or not raw.endswith(b"\0") or raw.count(b"\0") != 1:
        return None
    body = raw[:-1]
    if not body or b"/" in body or b"\\" in body:
        return None
    try:
        return body.decode("utf-8")
    except UnicodeDecodeError:
        return None


class Backend:
    """Host device model; services the filename queue on each kick.

    By default a kick is serviced synchronously in the kicking thread.
    After :meth:`start` a worker thread does the servicing instead.
    """

    def __init__(self, config: VfpgaDeviceConfig, filename_q: Virtqueue, status_q: Virtqueue,
                 mgr: FpgaManager):
        if filename_q.mem is not status_q.mem:
            raise ValueError("both queues must live in the same guest memory")
        self.config = config
        self.filename_q = filename_q
        self.status_q = status_q
        self.mgr = mgr
        self.mem: GuestMemory = filename_q.mem
        self.serviced = 0
        self._pending: list[ProgramStatus] = []
        self._kick = threading.Event()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        filename_q.on_kick(self.notify)

    def notify(self) -> None:
        if self._thread is not None:
            self._kick.set()
        else:
            while self.service_once():
                pass

    def service_once(self) -> int:
        self._flush_pending()
        chain = self.filename_q.pop()
        if chain is None:
            return 0
        raw = b"".join(s.data.tobytes() for s in chain.readable())
        name = _check_name(raw, self.config.max_name_len)
        if name is None:
            status = ProgramStatus.EINVAL
        else:
            try:
                status = self.mgr.program_firmware(name)
            except ManagerBusy:
                status = ProgramStatus.EIO
        self.filename_q.push_used(chain.head, 0)
        self.filename_q.interrupt()
        self._pending.append(status)
        self._flush_pending()
        self.serviced += 1
        return 1

    def _flush_pending(self) -> None:
        while self._pending:
            chain = self.status_q.pop()
            if chain is None:
                return
            seg = next((s for s in chain.writable() if len(s.data) >= STATUS_LEN), None)
            if seg is None:
                self.status_q.push_used(chain.head, 0)
                continue
            status = self._pending.pop(0)
            self.mem.write(seg.addr, status.to_wire())
            self.status_q.push_used(chain.head, STATUS_LEN)
            self.status_q.interrupt()

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="vfpga-backend", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stop.set()
        self._kick.set()
        self._thread.join()
        self._thread = None

    def _run(self) -> None:
        while not self._stop.is_set():
            self._kick.wait()
            self._kick.clear()
            while not self._stop.is_set() and self.service_once():
                pass


class _Bump:
    def __init__(self, mem: GuestMemory):
        self.mem = mem
        self.next = mem.base

    def alloc(self, size: int, align: int = 16) -> int:
        addr = (self.next + align - 1) // align * align
        if addr + size > self.mem.end:
            raise MemoryError("guest memory exhausted")
        self.next = addr + size
        return addr


class Frontend:
    """Guest driver.  :meth:`firmware_store` mirrors a sysfs firmware write."""

    def __init__(self, config: VfpgaDeviceConfig, mem: GuestMemory):
        self.config = config
        self.mem = mem
        self.filename_q = Virtqueue(config.filename_queue_size, mem)
        self.status_q = Virtqueue(config.status_queue_size, mem)
        heap = _Bump(mem)
        self.name_buf = heap.alloc(config.max_name_len)
        self.status_buf = heap.alloc(STATUS_LEN)
        self.log = GuestLog()
        self._irq = threading.Event()
        self._lock = threading.Lock()
        self.status_q.on_interrupt(self._irq.set)
        self._post_status()

    def _post_status(self) -> None:
        self.status_q.add_buffer([Region(self.status_buf, STATUS_LEN, True)])

    def firmware_store(self, name: str) -> ProgramStatus:
        raw = name.encode("utf-8")
        if len(raw) + 1 > self.config.max_name_len:
            raise NameTooLong(f"firmware name is {len(raw)} bytes, limit {self.config.max_name_len - 1}")
        if not raw or b"\0" in raw or b"/" in raw or b"\\" in raw:
            raise InvalidName(f"invalid firmware name {name!r}")
        with self._lock:
            self._irq.clear()
            self.mem.write(self.name_buf, raw + b"\0")
            self.filename_q.add_buffer([Region(self.name_buf, len(raw) + 1, False)])
            self.filename_q.kick()
            if not self._irq.wait(self.config.timeout_s):
                raise Timeout(f"no status from the device after {self.config.timeout_s} s")
            if self.status_q.pop_used() is None:
                raise VdevError("status interrupt without a used status buffer")
            status = ProgramStatus.from_wire(self.mem.read(self.status_buf, STATUS_LEN))
            while self.filename_q.pop_used() is not None:
                pass
            self._post_status()
        self.log.append(f"virtio_fpga {self.config.instance}: programming {name}: {format_status(status)}")
        return status


def format_status(status: ProgramStatus) -> str:
    if status is ProgramStatus.OK:
        return "OK"
    return f"error -{int(status)} ({status.name})"


def backend_attach(config: VfpgaDeviceConfig, filename_q: Virtqueue, status_q: Virtqueue,
                   mgr: FpgaManager) -> Backend:
    return Backend(config, filename_q, status_q, mgr)


def backend_service_once(backend: Backend) -> int:
    return backend.service_once()


def frontend_probe(config: VfpgaDeviceConfig, mem: GuestMemory) -> Frontend:
    return Frontend(config, mem)


def firmware_store(frontend: Frontend, name: str) -> ProgramStatus:
    return frontend.firmware_store(name)
