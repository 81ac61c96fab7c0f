"""IOVA translation containers and the VFIO passthrough device lifecycle."""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, NamedTuple, Optional

from . import dt

if TYPE_CHECKING:
    from .fabric import Fabric

PAGE_SIZE = 4096


class IommuError(Exception):
    pass


class Overlap(IommuError):
    pass


class OutsideDirectWindow(IommuError):
    pass


class NotMapped(IommuError):
    pass


class Fault(IommuError):
    """Translation fault: the IOVA has no mapping (or lacks permission)."""

    def __init__(self, iova: int, msg: str = "unmapped IOVA"):
        self.iova = iova
        super().__init__(f"{msg} {iova:#x}")


class VfioError(Exception):
    pass


class NodeNotFound(VfioError):
    pass


class MissingReg(VfioError):
    pass


class NotDisabled(VfioError):
    pass


class NotConfigured(VfioError):
    pass


class GuardMismatch(VfioError):
    pass


class StillDisabled(VfioError):
    pass


class Mode(enum.Enum):
    ON_DEMAND = "on_demand"
    DIRECT = "direct"


class Perm(enum.IntFlag):
    R = 1
    W = 2
    RW = 3


class Mapping(NamedTuple):
    iova: int
    pa: int
    len: int
    perm: Perm

    @property
    def end(self) -> int:
        return self.iova + self.len


class Window(NamedTuple):
    iova: int
    pa: int
    len: int

    def covers(self, iova: int, length: int) -> bool:
        return self.iova <= iova and iova + length <= self.iova + self.len


class IommuContainer:
    """One IOVA address space.

    In ``ON_DEMAND`` mode every :meth:`map` installs a translation and
    bumps ``map_events``.  In ``DIRECT`` mode a single window is installed
    up front; :meth:`map` only checks the range against it and records the
    call in ``direct_maps``.
    """

    def __init__(self, mode: Mode, window: Optional[Window] = None):
        self.mode = mode
        self.map_events = 0
        self.direct_maps = 0
        self._starts: list[int] = []
        self._maps: dict[int, Mapping] = {}
        self.window: Optional[Window] = None
        if mode is Mode.DIRECT:
            if window is None or window.len <= 0:
                raise ValueError("DIRECT containers need a non-empty window")
            self.window = window
            self._insert(Mapping(window.iova, window.pa, window.len, Perm.RW))

    @property
    def mappings(self) -> list[Mapping]:
        return [self._maps[s] for s in self._starts]

    def _insert(self, m: Mapping) -> None:
        bisect.insort(self._starts, m.iova)
        self._maps[m.iova] = m

    def _remove(self, iova: int) -> Mapping:
        self._starts.pop(bisect.bisect_left(self._starts, iova))
        return self._maps.pop(iova)

    def _find(self, iova: int) -> Optional[Mapping]:
        i = bisect.bisect_right(self._starts, iova) - 1
        if i < 0:
            return None
        m = self._maps[self._starts[i]]
        return m if iova < m.end else None

    def _overlaps(self, iova: int, length: int) -> bool:
        if self._find(iova) is not None:
            return True
        i = bisect.bisect_right(self._starts, iova)
        return i < len(self._starts) and self._starts[i] < iova + length

    def map(self, iova: int, pa: int, length: int, perm: Perm = Perm.RW) -> None:
        if length <= 0:
            raise ValueError("mapping length must be positive")
        if self.mode is Mode.DIRECT:
            if not self.window.covers(iova, length) or pa != self.window.pa + (iova - self.window.iova):
                raise OutsideDirectWindow(f"[{iova:#x}, +{length:#x}) is not inside the direct window")
            self.direct_maps += 1
            return
        if self._overlaps(iova, length):
            raise Overlap(f"[{iova:#x}, +{length:#x}) overlaps an existing mapping")
        self._insert(Mapping(iova, pa, length, Perm(perm)))
        self.map_events += 1

    def unmap(self, iova: int, length: int) -> None:
        """Remove ``[iova, iova+length)``; the whole range must be mapped."""
        if length <= 0:
            raise ValueError("unmap length must be positive")
        if self.mode is Mode.DIRECT:
            if not self.window.covers(iova, length):
                raise NotMapped(f"[{iova:#x}, +{length:#x}) is not inside the direct window")
            self.direct_maps -= 1
            return
        end = iova + length
        hit = []
        cur = iova
        while cur < end:
            m = self._find(cur)
            if m is None:
                raise NotMapped(f"IOVA {cur:#x} is not mapped")
            hit.append(m)
            cur = m.end
        for m in hit:
            self._remove(m.iova)
            if m.iova < iova:
                self._insert(Mapping(m.iova, m.pa, iova - m.iova, m.perm))
            if m.end > end:
                cut = end - m.iova
                self._insert(Mapping(end, m.pa + cut, m.end - end, m.perm))

    def translate(self, iova: int, perm: Perm = Perm(0)) -> int:
        m = self._find(iova)
        if m is None:
            raise Fault(iova)
        if perm & ~m.perm:
            raise Fault(iova, "permission denied at")
        return m.pa + (iova - m.iova)

    def translate_range(self, iova: int, length: int, perm: Perm = Perm(0)) -> list[tuple[int, int]]:
        """Translate a range as physical ``(pa, len)`` extents.

        Every page touched by the range is checked; a hole anywhere raises
        :class:`Fault` before anything is returned.
        """
        out: list[tuple[int, int]] = []
        cur, end = iova, iova + length
        while cur < end:
            m = self._find(cur)
            if m is None:
                raise Fault(cur)
            if perm & ~m.perm:
                raise Fault(cur, "permission denied at")
            stop = min(m.end, end)
            pa = m.pa + (cur - m.iova)
            if out and out[-1][0] + out[-1][1] == pa:
                out[-1] = (out[-1][0], out[-1][1] + stop - cur)
            else:
                out.append((pa, stop - cur))
            cur = stop
        return out


def create_container(mode: Mode, window: Optional[Window] = None) -> IommuContainer:
    return IommuContainer(mode, window)


# -- VFIO platform passthrough ---------------------------------------------


@dataclass(frozen=True)
class BasePropertyGuard:
    path: str
    reg: tuple[tuple[int, int], ...]
    interrupts: tuple[int, ...]


@dataclass
class VfioDevice:
    node_path: str
    guard: BasePropertyGuard
    enabled: bool = False
    irq_count: dict[int, int] = field(default_factory=dict)
    irq_handlers: list[Callable[[int], None]] = field(default_factory=list)

    @property
    def regions(self) -> tuple[tuple[int, int], ...]:
        return self.guard.reg

    @property
    def irqs(self) -> tuple[int, ...]:
        return self.guard.interrupts

    def forward_irq(self, line: int) -> None:
        self.irq_count[line] = self.irq_count.get(line, 0) + 1
        for h in list(self.irq_handlers):
            h(line)


def node_reg(tree: dt.DtNode, path: str) -> list[tuple[int, int]]:
    node = tree.find(path)
    if node is None:
        raise NodeNotFound(path)
    reg = dt.cells_of(node, "reg")
    if reg is None:
        raise MissingReg(f"{path} has no reg property")
    ac, sc = dt.address_cells(tree.find(dt.parent_path(path)))
    return dt.decode_reg(reg, ac, sc)


def node_interrupts(tree: dt.DtNode, path: str) -> list[int]:
    node = tree.find(path)
    if node is None:
        raise NodeNotFound(path)
    return list(dt.cells_of(node, "interrupts") or ())


def create_passthrough(tree: dt.DtNode, node_path: str) -> VfioDevice:
    node = tree.find(node_path)
    if node is None:
        raise NodeNotFound(node_path)
    if node.status != "disabled":
        raise NotDisabled(f"{node_path} must start disabled, status is {node.status!r}")
    guard = BasePropertyGuard(node_path, tuple(node_reg(tree, node_path)),
                              tuple(node_interrupts(tree, node_path)))
    return VfioDevice(node_path, guard)


def enable_device(vdev: VfioDevice, fabric: "Fabric", tree: dt.DtNode) -> None:
    """Bind a candidate to live fabric hardware once its node is enabled.

    The fabric must host a device whose record reproduces the frozen
    ``reg`` window and interrupt line exactly.
    """
    base, size = vdev.guard.reg[0]
    dev = fabric.device_at(base)
    if dev is None:
        raise NotConfigured(f"no fabric device at {base:#x} for {vdev.node_path}")
    rec = dev.record
    want_irq = vdev.guard.interrupts[0] if vdev.guard.interrupts else None
    if len(vdev.guard.reg) != 1 or rec.reg_size != size or rec.irq_line != want_irq:
        raise GuardMismatch(
            f"{vdev.node_path}: image record {rec.name!r} reg={rec.reg_base:#x}/{rec.reg_size:#x} "
            f"irq={rec.irq_line} disagrees with bound reg={base:#x}/{size:#x} irq={want_irq}"
        )
    node = tree.find(vdev.node_path)
    if node is None:
        raise NodeNotFound(vdev.node_path)
    if (tuple(node_reg(tree, vdev.node_path)) != vdev.guard.reg
            or tuple(node_interrupts(tree, vdev.node_path)) != vdev.guard.interrupts):
        raise GuardMismatch(f"{vdev.node_path}: tree no longer matches the bound properties")
    if node.status != "okay":
        raise StillDisabled(f"{vdev.node_path} status is {node.status!r}")
    if not vdev.enabled:
        for line in vdev.guard.interrupts:
            fabric.on_irq(line, vdev.forward_irq)
    vdev.enabled = True
