from __future__ import annotations

import json

import numpy as np
import pytest

from vfpga_sim.fabric import XferMode
from vfpga_sim.timemodel import (BAND_SIZES, GUEST_PREP_AVG, HOST_PREP_AVG, LARGE_XFER, MAX_GUEST_XFER_STD,
                                 OVERHEAD_TARGETS, SMALL_XFER, TABLE_PAGES, CalibrationError, DegenerateFit, Env,
                                 TimeModel, builtin_model, calibrate_prep, calibrate_xfer)

B = 3200.0


class TestTableValues:
    def test_table(self):
        assert TABLE_PAGES == (1, 16, 32, 64, 128, 256)
        assert HOST_PREP_AVG == (6.14, 62.5, 122.3, 242.37, 474.334, 748.6)
        assert GUEST_PREP_AVG == (4.36, 42.34, 82.79, 162.8, 292.18, 411.2)
        assert MAX_GUEST_XFER_STD == 13.28

    def test_targets(self):
        assert OVERHEAD_TARGETS[XferMode.POLLED] == {"small": 1.52, "large": 0.05, "band": 0.07}
        assert OVERHEAD_TARGETS[XferMode.INTERRUPT] == {"small": 1.12, "large": 0.126, "band": 0.15}


class TestCalibratePrep:
    @pytest.mark.parametrize("row,slope", [(HOST_PREP_AVG, 2.9), (GUEST_PREP_AVG, 1.6)])
    def test_matches_polyfit(self, row, slope):
        p = calibrate_prep(zip(TABLE_PAGES, row))
        b, a = np.polyfit(TABLE_PAGES, row, 1)
        assert p.b == pytest.approx(b, rel=1e-12)
        assert p.a == pytest.approx(a, rel=1e-10)
        assert p.b == pytest.approx(slope, abs=0.05)

    def test_frozen_fit(self):
        host = calibrate_prep(zip(TABLE_PAGES, HOST_PREP_AVG))
        guest = calibrate_prep(zip(TABLE_PAGES, GUEST_PREP_AVG))
        assert host.b == pytest.approx(2.93950, abs=1e-4)
        assert guest.b == pytest.approx(1.60294, abs=1e-4)
        assert host.max_rel_residual == pytest.approx(4.7804, abs=1e-3)
        assert guest.max_rel_residual == pytest.approx(6.9750, abs=1e-3)

    def test_mapping_input(self):
        assert calibrate_prep({0: 1.0, 2: 5.0}).b == 2.0

    @pytest.mark.parametrize("pts", [[(4, 1.0), (4, 2.0)], [(1, 1.0)], []])
    def test_degenerate(self, pts):
        with pytest.raises(DegenerateFit):
            calibrate_prep(pts)


class TestCalibrateXfer:
    def test_polled_closed_form(self):
        p = calibrate_xfer((4096, 1.52), (1 << 20, 0.05), B)
        F = (0.05 * 327.68 - 1.52 * 1.28) / 1.47
        assert p.F == pytest.approx(F, rel=1e-12)
        assert p.V == pytest.approx(1.52 * (F + 1.28), rel=1e-12)
        assert p.F == pytest.approx(9.82, abs=0.01)
        assert p.V == pytest.approx(16.87, abs=0.01)
        assert p.V_byte == 0.0
        assert p.overhead(4096, B) == pytest.approx(1.52, rel=1e-12)
        assert p.overhead(1 << 20, B) == pytest.approx(0.05, rel=1e-12)

    def test_interrupt_closed_form(self):
        p = calibrate_xfer((4096, 1.12), (1 << 20, 0.126), B)
        assert p.overhead(4096, B) == pytest.approx(1.12, rel=1e-12)
        assert p.overhead(1 << 20, B) == pytest.approx(0.126, rel=1e-12)

    def test_two_point_model_misses_band(self):
        for mode, t in OVERHEAD_TARGETS.items():
            p = calibrate_xfer((SMALL_XFER, t["small"]), (LARGE_XFER, t["large"]), B)
            band = np.mean([p.overhead(s, B) for s in BAND_SIZES])
            assert abs(band - t["band"]) > 0.03

    @pytest.mark.parametrize("mode", list(XferMode))
    def test_three_point(self, mode):
        t = OVERHEAD_TARGETS[mode]
        p = calibrate_xfer((SMALL_XFER, t["small"]), (LARGE_XFER, t["large"]), B, band=(BAND_SIZES, t["band"]))
        assert p.overhead(SMALL_XFER, B) == pytest.approx(t["small"], rel=1e-9)
        assert p.overhead(LARGE_XFER, B) == pytest.approx(t["large"], rel=1e-9)
        assert np.mean([p.overhead(s, B) for s in BAND_SIZES]) == pytest.approx(t["band"], rel=1e-9)
        assert p.F > 0 and p.V > 0 and p.V_byte > 0

    @pytest.mark.parametrize("bw", [0.0, -1.0, float("nan")])
    def test_bad_bandwidth(self, bw):
        with pytest.raises(CalibrationError):
            calibrate_xfer((4096, 1.52), (1 << 20, 0.05), bw)

    def test_equal_targets(self):
        with pytest.raises(DegenerateFit):
            calibrate_xfer((4096, 0.5), (1 << 20, 0.5), B)


class TestModel:
    def test_overheads_at_targets(self):
        m = builtin_model()
        for mode, t in OVERHEAD_TARGETS.items():
            host = m.transfer_cost(Env.HOST, mode, SMALL_XFER)
            guest = m.transfer_cost(Env.GUEST, mode, SMALL_XFER)
            assert (guest - host) / host == pytest.approx(t["small"], rel=1e-9)

    def test_engine_time(self):
        m = builtin_model()
        n = 1 << 16
        assert m.engine_time(Env.GUEST, XferMode.POLLED, n) == pytest.approx(
            m.transfer_cost(Env.GUEST, XferMode.POLLED, n) - m.poll_cost)
        assert m.engine_time(Env.HOST, XferMode.INTERRUPT, n) == m.transfer_cost(Env.HOST, XferMode.INTERRUPT, n)

    def test_jitter_hits_target(self):
        m = builtin_model()
        worst = max(m.engine_time(Env.GUEST, mode, p * 4096) for mode in XferMode for p in TABLE_PAGES)
        assert m.jitter[Env.GUEST] * worst == pytest.approx(MAX_GUEST_XFER_STD)
        assert 0 < m.jitter[Env.HOST] < m.jitter[Env.GUEST]
        assert m.without_jitter().jitter == {Env.HOST: 0.0, Env.GUEST: 0.0}

    def test_json_roundtrip(self, tmp_path):
        m = builtin_model(seed=7)
        m.save(tmp_path / "cal.json")
        again = TimeModel.load(tmp_path / "cal.json")
        assert again == m
        raw = json.loads((tmp_path / "cal.json").read_text())
        assert set(raw) == {"prep", "xfer", "B", "jitter", "seed", "poll_cost"}
        assert set(raw["xfer"]["polled"]) == {"F", "V", "V_byte"}

    def test_missing_v_byte_defaults(self):
        d = builtin_model().to_dict()
        for v in d["xfer"].values():
            del v["V_byte"]
        assert all(p.V_byte == 0.0 for p in TimeModel.from_dict(d).xfer.values())

    @pytest.mark.parametrize("mutate", [
        lambda d: d.pop("B"),
        lambda d: d["prep"].pop("guest"),
        lambda d: d["xfer"]["polled"].update(F="x"),
    ])
    def test_bad_calibration(self, mutate):
        d = builtin_model().to_dict()
        mutate(d)
        with pytest.raises(CalibrationError):
            TimeModel.from_dict(d)
