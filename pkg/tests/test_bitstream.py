from __future__ import annotations

import struct
import zlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vfpga_sim.bitstream import (BadChecksum, BadMagic, BadRecord, BadVersion, BitstreamError, BitstreamImage,
                                 DeviceRecord, DeviceType, OverlappingRecords, Truncated, decode_image,
                                 encode_image, golden_cdma_image)
from vfpga_sim.system import DATA_DIR


def crc32_bitwise(data: bytes) -> int:
    """Reflected CRC-32, one bit at a time."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def reference_encode(img: BitstreamImage) -> bytes:
    """Field-by-field encoder written against the layout description only."""
    out = bytearray(b"VFPB")
    out += img.version.to_bytes(2, "little") + img.region_id.to_bytes(2, "little")
    compat = img.compatible.encode()
    out += len(compat).to_bytes(2, "little") + compat
    out += len(img.records).to_bytes(2, "little")
    for r in img.records:
        out += r.name.encode().ljust(32, b"\0")
        out += bytes([int(r.dev_type), 0])
        out += (0xFFFF if r.irq_line is None else r.irq_line).to_bytes(2, "little")
        out += r.reg_base.to_bytes(8, "little") + r.reg_size.to_bytes(8, "little")
    out += len(img.payload).to_bytes(4, "little") + img.payload
    return bytes(out) + crc32_bitwise(bytes(out)).to_bytes(4, "little")


@st.composite
def images(draw) -> BitstreamImage:
    n = draw(st.integers(0, 5))
    recs, base = [], draw(st.integers(0, 1 << 40))
    for i in range(n):
        base += draw(st.integers(0, 1 << 20))
        size = draw(st.integers(1, 1 << 20))
        name = draw(st.text("abcdefghij0123_", min_size=1, max_size=31)) + str(i)
        recs.append(DeviceRecord(name[-31:], draw(st.sampled_from(list(DeviceType))), base, size,
                                 draw(st.none() | st.integers(0, 0x7FFF))))
        base += size
    return BitstreamImage(draw(st.integers(0, 0xFFFF)), draw(st.text(max_size=40)), tuple(recs),
                          draw(st.binary(max_size=300)))


class TestCrcOracle:
    @pytest.mark.parametrize("data", [b"", b"123456789", bytes(range(256))])
    def test_zlib_matches_bitwise(self, data):
        assert zlib.crc32(data) == crc32_bitwise(data)

    def test_check_value(self):
        assert crc32_bitwise(b"123456789") == 0xCBF43926


class TestEncode:
    def test_golden_matches_reference_encoder(self, golden_bytes):
        assert golden_bytes == reference_encode(golden_cdma_image())

    def test_shipped_firmware_is_golden(self, golden_bytes):
        assert (DATA_DIR / "firmware" / "cdma_demo.vfpb").read_bytes() == golden_bytes

    def test_golden_layout(self, golden_bytes):
        assert golden_bytes[:4] == b"VFPB"
        assert struct.unpack_from("<HHH", golden_bytes, 4) == (1, 1, len("vos,sim-cdma-design"))
        assert len(golden_bytes) == 10 + 19 + 2 + 52 + 4 + 10_000 + 4

    def test_overlapping_records_rejected(self):
        recs = (DeviceRecord("a", DeviceType.CDMA, 0x1000, 0x1000), DeviceRecord("b", DeviceType.GPIO, 0x1800, 16))
        with pytest.raises(OverlappingRecords):
            encode_image(BitstreamImage(1, "x", recs))

    @pytest.mark.parametrize("rec", [
        DeviceRecord("", DeviceType.CDMA, 0, 1),
        DeviceRecord("x" * 32, DeviceType.CDMA, 0, 1),
        DeviceRecord("z", DeviceType.CDMA, 0, 0),
        DeviceRecord("z", DeviceType.CDMA, (1 << 64) - 1, 2),
        DeviceRecord("z", DeviceType.CDMA, 0, 1, 0x8000),
    ])
    def test_bad_record(self, rec):
        with pytest.raises(BadRecord):
            encode_image(BitstreamImage(1, "x", (rec,)))


class TestDecode:
    def test_golden_roundtrip(self, golden_bytes):
        assert decode_image(golden_bytes) == golden_cdma_image()

    def test_first_byte_flipped(self, golden_bytes):
        bad = bytearray(golden_bytes)
        bad[0] ^= 1
        with pytest.raises(BadMagic):
            decode_image(bytes(bad))

    def test_last_payload_byte_flipped(self, golden_bytes):
        bad = bytearray(golden_bytes)
        bad[-5] ^= 0x40
        with pytest.raises(BadChecksum):
            decode_image(bytes(bad))

    def test_version(self, golden_bytes):
        bad = bytearray(golden_bytes)
        bad[4] = 2
        with pytest.raises(BadVersion):
            decode_image(bytes(bad))

    @pytest.mark.parametrize("cut", [0, 3, 12, 40, 5000])
    def test_truncated(self, golden_bytes, cut):
        with pytest.raises(Truncated):
            decode_image(golden_bytes[:cut])

    def test_trailing_garbage(self, golden_bytes):
        with pytest.raises(Truncated):
            decode_image(golden_bytes + b"\0")

    def test_every_byte_of_golden_image(self, golden_bytes):
        buf = bytearray(golden_bytes)
        for pos in range(len(buf)):
            buf[pos] ^= 0x5A
            with pytest.raises(BitstreamError):
                decode_image(buf)
            buf[pos] ^= 0x5A


class TestProperties:
    @settings(max_examples=1000, deadline=None)
    @given(img=images())
    def test_roundtrip(self, img):
        enc = encode_image(img)
        assert enc == reference_encode(img)
        assert decode_image(enc) == img

    @settings(max_examples=500, deadline=None)
    @given(img=images(), data=st.data())
    def test_single_byte_corruption_detected(self, img, data):
        enc = bytearray(encode_image(img))
        pos = data.draw(st.integers(0, len(enc) - 1))
        enc[pos] ^= data.draw(st.integers(1, 255))
        with pytest.raises(BitstreamError):
            decode_image(bytes(enc))
