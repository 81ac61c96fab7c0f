"""dmatest-style harness: map, submit, wait, verify, unmap; then report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .fabric import (CdmaDevice, DmaTransfer, Fabric, SimClock, XferMode, XferResult, cdma_submit,
                     cdma_wait)
from .iommu import IommuContainer, Mode, Perm, VfioDevice
from .timemodel import PAGE_SIZE, TABLE_PAGES, Env, TimeModel

HOST_IOVA_BASE = 0x1_0000_0000
SRC_OFFSET = 0x0010_0000
DST_OFFSET = 0x0100_0000

CSV_HEADER = ("env", "mode", "pages", "prep_mean_us", "prep_std_us", "xfer_mean_us", "xfer_std_us",
              "overhead_pct")


class BenchError(Exception):
    pass


class DeviceNotEnabled(BenchError):
    pass


class VerificationFailed(BenchError):
    pass


@dataclass
class BenchConfig:
    sizes: tuple[int, ...] = TABLE_PAGES
    iterations: int = 500
    modes: tuple[XferMode, ...] = (XferMode.INTERRUPT, XferMode.POLLED)
    envs: tuple[Env, ...] = (Env.HOST, Env.GUEST)
    page_size: int = PAGE_SIZE

    def __post_init__(self) -> None:
        if self.iterations < 2:
            raise ValueError("iterations must be at least 2 for a standard deviation")
        if not self.sizes or min(self.sizes) < 1:
            raise ValueError("sizes must be positive page counts")


@dataclass(frozen=True)
class BenchRecord:
    env: Env
    mode: XferMode
    pages: int
    prep_mean: float
    prep_std: float
    xfer_mean: float
    xfer_std: float


class RunningStats:
    """Welford accumulator; ``std`` is the sample (n-1) deviation."""

    def __init__(self) -> None:
        self.n = 0
        self.mean = 0.0
        self._m2 = 0.0

    def push(self, x: float) -> None:
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self._m2 += d * (x - self.mean)

    @property
    def std(self) -> float:
        return math.sqrt(self._m2 / (self.n - 1)) if self.n > 1 else 0.0


def summarize(samples: Iterable[float]) -> tuple[float, float]:
    st = RunningStats()
    for x in samples:
        st.push(float(x))
    return st.mean, st.std


@dataclass
class BenchSystem:
    """What the harness needs from a booted system."""

    fabric: Fabric
    containers: dict[Env, IommuContainer]
    vfio: Optional[VfioDevice] = None
    clock: SimClock = field(default_factory=SimClock)


@dataclass
class Samples:
    prep: np.ndarray
    xfer: np.ndarray


def _iova_for(container: IommuContainer, pa: int) -> int:
    if container.mode is Mode.DIRECT:
        return container.window.iova + (pa - container.window.pa)
    return HOST_IOVA_BASE + pa


def _device_for(system: BenchSystem, env: Env) -> CdmaDevice:
    dev = system.fabric.cdma()
    if dev is None:
        raise DeviceNotEnabled("no CDMA engine is configured in the fabric")
    if env is Env.GUEST and (system.vfio is None or not system.vfio.enabled):
        raise DeviceNotEnabled("the CDMA passthrough device is not enabled in the guest")
    return dev


def measure(system: BenchSystem, model: TimeModel, env: Env, mode: XferMode, pages: int,
            iterations: int, page_size: int = PAGE_SIZE) -> Samples:
    """Run one (env, mode, size) cell and return the raw samples."""
    dev = _device_for(system, env)
    container = system.containers[env]
    ddr = system.fabric.ddr
    n = pages * page_size
    src_pa, dst_pa = ddr.base + SRC_OFFSET, ddr.base + DST_OFFSET
    src_iova, dst_iova = _iova_for(container, src_pa), _iova_for(container, dst_pa)
    src, dst = ddr.view(src_pa, n), ddr.view(dst_pa, n)

    # per-cell stream so results do not depend on the order cells run in
    rng = np.random.default_rng([model.seed, list(Env).index(env), list(XferMode).index(mode), pages])
    z_prep = rng.standard_normal(iterations)
    z_xfer = rng.standard_normal(iterations)
    sigma = model.jitter.get(env, 0.0)
    prep_base = model.prep_cost(env, pages)
    engine_base = model.engine_time(env, mode, n)

    src[:] = np.arange(n, dtype=np.uint32).astype(np.uint8) ^ (pages & 0xFF)
    words = src.view(np.uint32)
    prep = np.empty(iterations)
    xfer = np.empty(iterations)
    saved_timing = dev.timing
    try:
        for i in range(iterations):
            engine = max(engine_base * (1.0 + sigma * z_xfer[i]), 0.0)
            dev.timing = lambda _mode, _n, t=engine: t
            words[0] = words[-1] = i  # a stale destination can never verify

            # each iteration is timed from zero on its own clock
            clock = system.clock = SimClock()
            t0 = clock.now
            container.map(src_iova, src_pa, n, Perm.R)
            container.map(dst_iova, dst_pa, n, Perm.W)
            clock.advance(max(prep_base * (1.0 + sigma * z_prep[i]), 0.0))
            prep[i] = clock.now - t0

            t1 = clock.now
            handle = cdma_submit(dev, container, DmaTransfer(src_iova, dst_iova, n, mode), clock)
            result = cdma_wait(handle, mode)
            xfer[i] = clock.now - t1

            if result is not XferResult.OK or not np.array_equal(src, dst):
                raise VerificationFailed(f"{env.value}/{mode.value}/{pages}p iteration {i}: dst != src")
            container.unmap(src_iova, n)
            container.unmap(dst_iova, n)
    finally:
        dev.timing = saved_timing
    return Samples(prep, xfer)


def run_dmatest(config: BenchConfig, model: TimeModel, system: BenchSystem,
                keep_samples: Optional[dict] = None) -> list[BenchRecord]:
    """All (env, mode, size) cells in config order.

    With zero jitter every preparation sample is exactly the model value.
    """
    for env in config.envs:
        _device_for(system, env)
    records = []
    for env in config.envs:
        for mode in config.modes:
            for pages in config.sizes:
                s = measure(system, model, env, mode, pages, config.iterations, config.page_size)
                if keep_samples is not None:
                    keep_samples[(env, mode, pages)] = s
                pm, ps = summarize(s.prep)
                xm, xs = summarize(s.xfer)
                records.append(BenchRecord(env, mode, pages, pm, ps, xm, xs))
    return records


def compute_overhead(host: BenchRecord, guest: BenchRecord) -> float:
    return 100.0 * (guest.xfer_mean - host.xfer_mean) / host.xfer_mean


def overheads(records: Sequence[BenchRecord]) -> dict[tuple[XferMode, int], float]:
    host = {(r.mode, r.pages): r for r in records if r.env is Env.HOST}
    return {(r.mode, r.pages): compute_overhead(host[(r.mode, r.pages)], r)
            for r in records if r.env is Env.GUEST and (r.mode, r.pages) in host}


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _sorted(records: Sequence[BenchRecord]) -> list[BenchRecord]:
    envs, modes = list(Env), list(XferMode)
    return sorted(records, key=lambda r: (envs.index(r.env), modes.index(r.mode), r.pages))


def emit_csv(records: Sequence[BenchRecord]) -> str:
    ovh = overheads(records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in _sorted(records):
        o = ovh.get((r.mode, r.pages)) if r.env is Env.GUEST else None
        w.writerow([r.env.value, r.mode.value, r.pages, _fmt(r.prep_mean), _fmt(r.prep_std),
                    _fmt(r.xfer_mean), _fmt(r.xfer_std), "" if o is None else _fmt(o)])
    return buf.getvalue()


def emit_markdown(records: Sequence[BenchRecord]) -> str:
    recs = _sorted(records)
    pages = sorted({r.pages for r in recs})
    prep_mode = XferMode.POLLED if any(r.mode is XferMode.POLLED for r in recs) else recs[0].mode
    by = {(r.env, r.mode, r.pages): r for r in recs}
    lines = [f"## Preparation time (usec, {prep_mode.value} runs)", "",
             "| | " + " | ".join(str(p) for p in pages) + " |",
             "|---|" + "---|" * len(pages)]
    for env in Env:
        for label, attr in (("avg", "prep_mean"), ("std", "prep_std")):
            cells = [by.get((env, prep_mode, p)) for p in pages]
            if all(c is None for c in cells):
                continue
            row = " | ".join("" if c is None else _fmt(getattr(c, attr)) for c in cells)
            lines.append(f"| {env.value.capitalize()} {label} | {row} |")
    lines += ["", "Transfer size in 4KB pages.", "", "## Transfer time (usec)", "",
              "| " + " | ".join(CSV_HEADER) + " |", "|" + "---|" * len(CSV_HEADER)]
    ovh = overheads(recs)
    for r in recs:
        o = ovh.get((r.mode, r.pages)) if r.env is Env.GUEST else None
        lines.append(f"| {r.env.value} | {r.mode.value} | {r.pages} | {_fmt(r.prep_mean)} | "
                     f"{_fmt(r.prep_std)} | {_fmt(r.xfer_mean)} | {_fmt(r.xfer_std)} | "
                     f"{'' if o is None else _fmt(o)} |")
    return "\n".join(lines) + "\n"


def emit_report(records: Sequence[BenchRecord], format: str = "csv") -> str:
    if format == "csv":
        return emit_csv(records)
    if format == "markdown":
        return emit_markdown(records)
    raise ValueError(f"unknown report format {format!r}")


def emit_overhead_csv(records: Sequence[BenchRecord], page_size: int = PAGE_SIZE) -> str:
    ovh = overheads(records)
    sizes = sorted({p for _, p in ovh})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pages", "bytes", "overhead_interrupt_pct", "overhead_polled_pct"])
    for p in sizes:
        w.writerow([p, p * page_size] + ["" if (m, p) not in ovh else _fmt(ovh[(m, p)])
                                         for m in (XferMode.INTERRUPT, XferMode.POLLED)])
    return buf.getvalue()
