"""The ``.vfpb`` firmware container.

Layout, all integers little-endian::

    magic[4]="VFPB" | version:u16 | region_id:u16 | compat_len:u16 | compat
    | rec_count:u16 | records | payload_len:u32 | payload | crc32:u32

Each record is 52 bytes: ``name[32]`` (NUL padded) | ``dev_type:u8`` |
``pad:u8`` | ``irq:i16`` (-1 = none) | ``reg_base:u64`` | ``reg_size:u64``.
The CRC-32 (IEEE, reflected 0xEDB88320) covers every byte before it.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

MAGIC = b"VFPB"
VERSION = 1
EXTENSION = ".vfpb"
NAME_FIELD = 32
MAX_NAME = NAME_FIELD - 1

_HEAD = struct.Struct("<4sHHH")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_RECORD = struct.Struct("<32sBxhQQ")


class BitstreamError(ValueError):
    pass


class BadMagic(BitstreamError):
    pass


class BadVersion(BitstreamError):
    pass


class BadChecksum(BitstreamError):
    pass


class Truncated(BitstreamError):
    """Declared lengths do not match the size of the buffer."""


class OverlappingRecords(BitstreamError):
    pass


class BadRecord(BitstreamError):
    pass


class DeviceType(enum.IntEnum):
    NONE = 0
    CDMA = 1
    GPIO = 2


@dataclass(frozen=True)
class DeviceRecord:
    name: str
    dev_type: DeviceType
    reg_base: int
    reg_size: int
    irq_line: Optional[int] = None

    @property
    def reg_end(self) -> int:
        return self.reg_base + self.reg_size


@dataclass(frozen=True)
class BitstreamImage:
    region_id: int
    compatible: str
    records: tuple[DeviceRecord, ...] = ()
    payload: bytes = b""
    version: int = field(default=VERSION)

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))


def _check_records(records: tuple[DeviceRecord, ...]) -> None:
    for r in records:
        raw = r.name.encode("utf-8")
        if not raw or len(raw) > MAX_NAME or b"\0" in raw:
            raise BadRecord(f"record name {r.name!r} must be 1..{MAX_NAME} bytes without NUL")
        if r.reg_size <= 0:
            raise BadRecord(f"record {r.name!r} has non-positive reg_size")
        if r.reg_base < 0 or r.reg_end > 1 << 64:
            raise BadRecord(f"record {r.name!r} reg range exceeds 64 bits")
        if r.irq_line is not None and not 0 <= r.irq_line <= 0x7FFF:
            raise BadRecord(f"record {r.name!r} irq {r.irq_line} out of range")
    ordered = sorted(records, key=lambda r: r.reg_base)
    for a, b in zip(ordered, ordered[1:]):
        if b.reg_base < a.reg_end:
            raise OverlappingRecords(f"{a.name!r} and {b.name!r} overlap")


def encode_image(image: BitstreamImage) -> bytes:
    _check_records(image.records)
    compat = image.compatible.encode("utf-8")
    if len(compat) > 0xFFFF or len(image.records) > 0xFFFF:
        raise BadRecord("compatible string or record list too long")
    parts = [_HEAD.pack(MAGIC, image.version, image.region_id, len(compat)), compat,
             _U16.pack(len(image.records))]
    for r in image.records:
        irq = -1 if r.irq_line is None else r.irq_line
        parts.append(_RECORD.pack(r.name.encode("utf-8"), int(r.dev_type), irq, r.reg_base, r.reg_size))
    parts += [_U32.pack(len(image.payload)), bytes(image.payload)]
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def decode_image(data: bytes) -> BitstreamImage:
    data = bytes(data)
    rd = _Reader(data)
    magic = data[:4]
    if len(magic) == 4 and magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    magic, version, region_id, compat_len = _HEAD.unpack(rd.take(_HEAD.size))
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    compat_raw = rd.take(compat_len)
    (count,) = _U16.unpack(rd.take(2))
    raw_records = [_RECORD.unpack(rd.take(_RECORD.size)) for _ in range(count)]
    (payload_len,) = _U32.unpack(rd.take(4))
    payload = rd.take(payload_len)
    body_end = rd.pos
    (crc,) = _U32.unpack(rd.take(4))
    if rd.pos != len(data):
        raise Truncated(f"{len(data) - rd.pos} bytes beyond the declared end")
    if zlib.crc32(data[:body_end]) != crc:
        raise BadChecksum("CRC-32 mismatch")

    # framing and checksum are sound; anything wrong below is an encoder bug
    try:
        compatible = compat_raw.decode("utf-8")
        records = []
        for name_raw, dev_type, irq, base, size in raw_records:
            name, _, pad = name_raw.partition(b"\0")
            if pad.strip(b"\0"):
                raise BadRecord(f"garbage after NUL in record name {name_raw!r}")
            records.append(DeviceRecord(name.decode("utf-8"), DeviceType(dev_type), base, size,
                                        None if irq < 0 else irq))
    except (UnicodeDecodeError, ValueError) as exc:
        raise BadRecord(str(exc)) from exc
    records_t = tuple(records)
    _check_records(records_t)
    return BitstreamImage(region_id, compatible, records_t, payload, version)


def golden_cdma_image() -> BitstreamImage:
    """The reference CDMA design: one engine at 0xA0000000, irq 4."""
    payload = bytes((i * 131 + (i >> 8) * 7) & 0xFF for i in range(10_000))
    return BitstreamImage(
        region_id=1,
        compatible="vos,sim-cdma-design",
        records=(DeviceRecord("cdma0", DeviceType.CDMA, 0xA000_0000, 0x1000, 4),),
        payload=payload,
    )
