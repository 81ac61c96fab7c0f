"""Host-side FPGA manager core."""

from __future__ import annotations

import enum
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

from .bitstream import BitstreamError, BitstreamImage, decode_image
from .fabric import Fabric

log = logging.getLogger(__name__)

CHUNK_SIZE = 4096
DEFAULT_FIRMWARE_DIR = "./firmware"


class MissingFirmwareDir(FileNotFoundError):
    pass


class ManagerBusy(RuntimeError):
    pass


class ManagerState(enum.Enum):
    IDLE = "idle"
    WRITE_INIT = "write_init"
    WRITING = "writing"
    COMPLETE = "complete"
    ERROR = "error"


class ProgramStatus(enum.IntEnum):
    OK = 0
    ENOENT = 2
    EIO = 5
    EINVAL = 22

    def to_wire(self) -> bytes:
        return int(self).to_bytes(4, "little")

    @classmethod
    def from_wire(cls, raw: bytes) -> "ProgramStatus":
        return cls(int.from_bytes(raw[:4], "little"))


@dataclass
class VendorDriverOps:
    """Vendor programming hooks; any exception from a hook fails the request."""

    write_init: Callable[[BitstreamImage], None]
    write: Callable[[bytes], None]
    write_complete: Callable[[], None]


class SimVendorDriver:
    """Streams an image into a buffer, then configures the fabric region."""

    def __init__(self, fabric: Fabric, region_id: int):
        self.fabric = fabric
        self.region_id = region_id
        self._image: Optional[BitstreamImage] = None
        self._buf = bytearray()

    def write_init(self, image: BitstreamImage) -> None:
        self.fabric.region(self.region_id)
        self._image = image
        self._buf.clear()

    def write(self, chunk: bytes) -> None:
        if self._image is None:
            raise RuntimeError("write before write_init")
        self._buf += chunk

    def write_complete(self) -> None:
        if self._image is None:
            raise RuntimeError("write_complete before write_init")
        image = decode_image(bytes(self._buf))
        if image != self._image:
            raise RuntimeError("streamed image differs from the announced one")
        self._image = None
        self.fabric.configure_region(self.region_id, image)

    def ops(self) -> VendorDriverOps:
        return VendorDriverOps(self.write_init, self.write, self.write_complete)


@dataclass
class FabricHandle:
    fabric: Fabric
    region_id: int = 1


class FpgaManager:
    def __init__(self, name: str, ops: VendorDriverOps, firmware_dir: Path, fabric_handle: FabricHandle):
        self.name = name
        self.ops = ops
        self.firmware_dir = firmware_dir
        self.fabric_handle = fabric_handle
        self.state = ManagerState.IDLE
        self.last_status: Optional[ProgramStatus] = None
        self._inflight = threading.Lock()

    def _fail(self, status: ProgramStatus, why: str) -> ProgramStatus:
        log.info("%s: programming failed (%s): %s", self.name, status.name, why)
        self.state = ManagerState.ERROR
        self.last_status = status
        return status

    def program_firmware(self, firmware_name: str) -> ProgramStatus:
        with self._request():
            self.state = ManagerState.WRITE_INIT
            if (not firmware_name or "/" in firmware_name or "\\" in firmware_name
                    or "\0" in firmware_name or firmware_name in (".", "..")):
                return self._fail(ProgramStatus.EINVAL, f"bad firmware name {firmware_name!r}")
            path = self.firmware_dir / firmware_name
            try:
                data = path.read_bytes()
            except FileNotFoundError:
                return self._fail(ProgramStatus.ENOENT, f"{path} not found")
            except OSError as exc:
                return self._fail(ProgramStatus.EIO, str(exc))
            return self._program(data)

    def program_buffer(self, data: bytes) -> ProgramStatus:
        with self._request():
            self.state = ManagerState.WRITE_INIT
            return self._program(bytes(data))

    @contextmanager
    def _request(self):
        if not self._inflight.acquire(blocking=False):
            raise ManagerBusy(f"{self.name} already has a request in flight")
        try:
            yield
        finally:
            self._inflight.release()

    def _program(self, data: bytes) -> ProgramStatus:
        try:
            image = decode_image(data)
        except BitstreamError as exc:
            return self._fail(ProgramStatus.EINVAL, str(exc))
        try:
            self.ops.write_init(image)
            self.state = ManagerState.WRITING
            for off in range(0, len(data), CHUNK_SIZE):
                self.ops.write(data[off:off + CHUNK_SIZE])
            self.ops.write_complete()
        except Exception as exc:  # vendor hooks may fail any way they like
            return self._fail(ProgramStatus.EIO, f"{type(exc).__name__}: {exc}")
        self.state = ManagerState.COMPLETE
        self.last_status = ProgramStatus.OK
        log.info("%s: programmed %d bytes into region %d", self.name, len(data), image.region_id)
        return ProgramStatus.OK


def register_manager(name: str, ops: Optional[VendorDriverOps], firmware_dir: Union[str, Path],
                     fabric_handle: Union[FabricHandle, Fabric]) -> FpgaManager:
    """Create a manager; ``ops=None`` selects :class:`SimVendorDriver`."""
    fw = Path(firmware_dir)
    if not fw.is_dir():
        raise MissingFirmwareDir(f"firmware directory {fw} does not exist")
    if isinstance(fabric_handle, Fabric):
        fabric_handle = FabricHandle(fabric_handle)
    if ops is None:
        ops = SimVendorDriver(fabric_handle.fabric, fabric_handle.region_id).ops()
    return FpgaManager(name, ops, fw, fabric_handle)


def program_firmware(mgr: FpgaManager, firmware_name: str) -> ProgramStatus:
    return mgr.program_firmware(firmware_name)


def program_buffer(mgr: FpgaManager, data: bytes) -> ProgramStatus:
    return mgr.program_buffer(data)


def manager_state(mgr: FpgaManager) -> ManagerState:
    return mgr.state
