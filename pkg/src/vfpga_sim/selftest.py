"""Quick built-in checks: calibration targets plus randomized invariants."""

from __future__ import annotations

import random
from typing import Callable, Iterator

from . import dt
from .bench import BenchConfig, BenchSystem, run_dmatest, overheads
from .bitstream import BitstreamError, BitstreamImage, DeviceRecord, DeviceType, decode_image, encode_image
from .fabric import Fabric, XferMode
from .iommu import (BasePropertyGuard, Fault, IommuContainer, Mode, NotMapped, Overlap, Perm, VfioDevice,
                    Window)
from .timemodel import PAGE_SIZE, Env, builtin_model
from .vq import GuestMemory, Virtqueue

Check = tuple[str, bool, str]


def _overhead_checks() -> Iterator[Check]:
    model = builtin_model().without_jitter()
    fabric = Fabric()
    rec = DeviceRecord("cdma0", DeviceType.CDMA, 0xA000_0000, 0x1000, 4)
    fabric.configure_region(1, BitstreamImage(1, "selftest", (rec,)))
    path = "/axi/cdma@a0000000"
    vfio = VfioDevice(path, BasePropertyGuard(path, ((rec.reg_base, rec.reg_size),), (4,)), enabled=True)
    containers = {Env.HOST: IommuContainer(Mode.ON_DEMAND),
                  Env.GUEST: IommuContainer(Mode.DIRECT, Window(0x4000_0000, fabric.ddr.base, fabric.ddr.size))}
    system = BenchSystem(fabric, containers, vfio)
    recs = run_dmatest(BenchConfig(sizes=(1, 64, 128, 256), iterations=2), model, system)
    ovh = overheads(recs)
    for mode, pages, want, tol in ((XferMode.POLLED, 1, 152.0, 5.0), (XferMode.POLLED, 256, 5.0, 1.0),
                                   (XferMode.INTERRUPT, 1, 112.0, 5.0), (XferMode.INTERRUPT, 256, 12.6, 1.0)):
        got = ovh[(mode, pages)]
        yield (f"overhead {mode.value} {pages * PAGE_SIZE // 1024} KiB", abs(got - want) <= tol,
               f"{got:.3f}% (want {want} +/- {tol})")
    for mode, lo, hi in ((XferMode.INTERRUPT, 12.0, 18.0), (XferMode.POLLED, 4.0, 10.0)):
        avg = sum(ovh[(mode, p)] for p in (64, 128, 256)) / 3
        yield f"band overhead {mode.value} 256 KiB-1 MiB", lo <= avg <= hi, f"{avg:.3f}% (want [{lo}, {hi}])"


def _vq_fifo(rng: random.Random) -> Check:
    for _ in range(200):
        q = Virtqueue(rng.choice([2, 4, 8]), GuestMemory(0, 4096))
        pending, expected = [], []
        for _ in range(rng.randint(1, 60)):
            if rng.random() < 0.5 and q.num_free:
                pending.append(q.add_buffer([(0, 16, False)]))
            else:
                chain = q.pop()
                if chain is not None:
                    expected.append(chain.head)
                    q.push_used(chain.head, 0)
                    q.pop_used()
            q.check_invariants()
        while (chain := q.pop()) is not None:
            expected.append(chain.head)
        if expected != pending:
            return "virtqueue FIFO", False, f"popped {expected}, added {pending}"
    return "virtqueue FIFO", True, "200 random schedules"


def _iommu_oracle(rng: random.Random) -> Check:
    for _ in range(200):
        c = IommuContainer(Mode.ON_DEMAND)
        naive: list[tuple[int, int, int]] = []
        for _ in range(30):
            iova, ln = rng.randrange(0, 64) * PAGE_SIZE, rng.randrange(1, 8) * PAGE_SIZE
            try:
                c.map(iova, iova + 0x10_0000, ln, Perm.RW)
                naive.append((iova, iova + ln, iova + 0x10_0000))
            except Overlap:
                pass
            if rng.random() < 0.3 and naive:
                lo, hi, _ = rng.choice(naive)
                try:
                    c.unmap(lo, hi - lo)
                    naive = [m for m in naive if m[0] != lo]
                except NotMapped:
                    return "IOMMU oracle", False, "unmap of a live mapping failed"
            probe = rng.randrange(0, 72 * PAGE_SIZE)
            want = next((pa + probe - lo for lo, hi, pa in naive if lo <= probe < hi), None)
            try:
                got = c.translate(probe)
            except Fault:
                got = None
            if got != want:
                return "IOMMU oracle", False, f"translate({probe:#x}) = {got}, oracle {want}"
    return "IOMMU oracle", True, "200 random sequences"


def _bitstream_roundtrip(rng: random.Random) -> Check:
    for _ in range(200):
        recs, base = [], 0
        for i in range(rng.randint(0, 4)):
            base += rng.randrange(0, 0x10000)
            size = rng.randrange(1, 0x10000)
            recs.append(DeviceRecord(f"d{i}", rng.choice(list(DeviceType)), base, size,
                                     rng.choice([None, rng.randrange(0, 128)])))
            base += size
        img = BitstreamImage(rng.randrange(0, 4), "sim", tuple(recs), rng.randbytes(rng.randrange(0, 64)))
        enc = encode_image(img)
        if decode_image(enc) != img:
            return "bitstream round trip", False, repr(img)
        pos = rng.randrange(len(enc))
        bad = bytearray(enc)
        bad[pos] ^= rng.randrange(1, 256)
        try:
            decode_image(bytes(bad))
            return "bitstream round trip", False, f"corruption at {pos} undetected"
        except BitstreamError:
            pass
    return "bitstream round trip", True, "200 images, 200 corruptions"


def _dts_roundtrip(rng: random.Random) -> Check:
    def gen(depth: int) -> dt.DtNode:
        node = dt.DtNode("")
        for i in range(rng.randint(0, 3)):
            node.props[f"p{i}"] = rng.choice([dt.EMPTY, "s\"x", dt.Cells([rng.randrange(2**32)]), b"\x01\xff"])
        if depth:
            for i in range(rng.randint(0, 3)):
                child = gen(depth - 1)
                child.name = f"n{i}@{i:x}"
                node.children.append(child)
        return node

    for _ in range(100):
        t = gen(3)
        if dt.parse_dts(dt.serialize_dts(t)) != t:
            return "DTS round trip", False, dt.serialize_dts(t)
    return "DTS round trip", True, "100 generated trees"


def run_checks(seed: int = 0) -> list[Check]:
    rng = random.Random(seed)
    checks: list[Check] = list(_overhead_checks())
    for fn in (_vq_fifo, _iommu_oracle, _bitstream_roundtrip, _dts_roundtrip):
        checks.append(fn(rng))
    return checks


def cmd_selftest(out: Callable[[str], None] = print, seed: int = 0) -> int:
    checks = run_checks(seed)
    for name, ok, detail in checks:
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in checks) else 2
