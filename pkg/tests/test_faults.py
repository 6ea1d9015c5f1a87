import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftkmeans.abft import checked_gemm
from ftkmeans.faults import (
    FaultEntry,
    FaultSchedule,
    FaultSpec,
    NOOP_HOOK,
    ScheduledFaultHook,
    flip_bit,
    plan_faults,
)
from ftkmeans.gemm import gemm_tiled


class TestFlipBit:
    def test_sign_bit_single(self):
        assert flip_bit(np.float32(1.0), 31) == np.float32(-1.0)

    def test_zero_low_bit_gives_subnormal(self):
        v = flip_bit(np.float32(0.0), 0)
        assert v == np.float32(1.401298464324817e-45)

    def test_sign_bit_double(self):
        assert flip_bit(np.float64(2.5), 63) == -2.5

    @given(st.floats(allow_nan=False, width=32), st.integers(0, 31))
    @settings(max_examples=200, deadline=None)
    def test_involution_single(self, x, b):
        v = np.float32(x)
        flipped = flip_bit(np.float32(v), b)
        assert flip_bit(np.float32(flipped), b).tobytes() == v.tobytes()

    @given(st.floats(allow_nan=False), st.integers(0, 63))
    @settings(max_examples=200, deadline=None)
    def test_involution_double(self, x, b):
        v = np.float64(x)
        flipped = flip_bit(v, b)
        assert flip_bit(np.float64(flipped), b).tobytes() == v.tobytes()

    def test_bit_out_of_range(self):
        with pytest.raises(ValueError):
            flip_bit(np.float32(1.0), 32)


class TestSpecParsing:
    def test_mini_language(self):
        assert FaultSpec.parse("none").mode == "none"
        s = FaultSpec.parse("prob:0.25")
        assert s.mode == "per-tile-prob" and s.prob == 0.25
        s = FaultSpec.parse("fixed:3@sign")
        assert s.mode == "fixed-count" and s.count == 3 and s.bit_policy == "sign-only"
        s = FaultSpec.parse("fixed:1@exp")
        assert s.bit_policy == "exponent-only"
        s = FaultSpec.parse("sweep@b7")
        assert s.mode == "exhaustive-sweep" and s.chosen_bit == 7
        with pytest.raises(ValueError):
            FaultSpec.parse("bogus")
        with pytest.raises(ValueError):
            FaultSpec.parse("fixed:1@q")

    def test_validation(self):
        with pytest.raises(ValueError):
            FaultSpec(mode="per-tile-prob", prob=1.5)
        with pytest.raises(ValueError):
            FaultSpec(mode="nope")


class TestPlanning:
    def test_none_is_empty(self):
        sched = plan_faults(FaultSpec(mode="none"), 5, (4, 4), (32, 32))
        assert len(sched) == 0

    def test_fixed_count_totals(self):
        spec = FaultSpec(mode="fixed-count", count=3, seed=4)
        sched = plan_faults(spec, 2, (4, 4), (32, 32))
        assert len(sched) == 6
        seen = set()
        for e in sched.entries:
            key = (e.iteration, e.tile)
            assert key not in seen  # at most one per (iteration, tile)
            seen.add(key)

    def test_deterministic(self):
        spec = FaultSpec(mode="per-tile-prob", prob=0.3, seed=9)
        a = plan_faults(spec, 3, (5, 2), (16, 16))
        b = plan_faults(spec, 3, (5, 2), (16, 16))
        assert a.entries == b.entries

    def test_exhaustive_sweep_covers_all_bits(self):
        spec = FaultSpec(mode="exhaustive-sweep")
        sched = plan_faults(spec, 1, (1, 1), (8, 8), dtype=np.float32)
        assert len(sched) == 8 * 8 * 32
        assert len({(e.elem, e.bit) for e in sched.entries}) == len(sched)

    def test_edge_tiles_respected(self):
        spec = FaultSpec(mode="per-tile-prob", prob=1.0, seed=1)
        sched = plan_faults(spec, 1, (2, 2), (32, 32), shape=(40, 40))
        for e in sched.entries:
            mi = min(32, 40 - e.tile[0] * 32)
            nj = min(32, 40 - e.tile[1] * 32)
            assert e.elem[0] < mi and e.elem[1] < nj

    def test_bit_policies(self):
        for policy, ok in (
            ("sign-only", lambda b: b == 31),
            ("exponent-only", lambda b: 23 <= b <= 30),
            ("uniform-over-width", lambda b: 0 <= b < 32),
        ):
            spec = FaultSpec(mode="fixed-count", count=4, bit_policy=policy, seed=2)
            sched = plan_faults(spec, 4, (4, 4), (8, 8), dtype=np.float32)
            assert all(ok(e.bit) for e in sched.entries)

    def test_csv_round_trip(self, tmp_path):
        spec = FaultSpec(mode="fixed-count", count=2, seed=3)
        sched = plan_faults(spec, 3, (3, 3), (16, 16))
        p = tmp_path / "sched.csv"
        sched.to_csv(p)
        back = FaultSchedule.from_csv(p)
        assert back.entries == sched.entries


class TestHook:
    def test_empty_schedule_bit_identical(self):
        rng = np.random.default_rng(30)
        a = np.ascontiguousarray(rng.random((96, 48)), dtype=np.float32)
        b = np.ascontiguousarray(rng.random((24, 48)), dtype=np.float32)
        hook = ScheduledFaultHook(FaultSchedule([]))
        out, rep = checked_gemm(a, b, hook=hook)
        assert out.tobytes() == gemm_tiled(a, b).tobytes()
        assert rep.detections == 0
        assert hook.injected == []

    def test_noop_hook(self):
        assert NOOP_HOOK.kernel_arrays(0, np.float32) is None
        assert list(NOOP_HOOK.injected) == []

    def test_sign_flip_records_delta(self):
        sched = FaultSchedule([FaultEntry(0, (0, 0), (0, 0), 63)])
        hook = ScheduledFaultHook(sched)
        acc = np.array([[7.5, 1.0]], dtype=np.float64)
        hook.maybe_corrupt(0, (0, 0), acc)
        assert acc[0, 0] == -7.5
        assert hook.injected[0]["delta"] == -15.0

    def test_entries_are_one_shot(self):
        sched = FaultSchedule([FaultEntry(0, (0, 0), (0, 0), 63)])
        hook = ScheduledFaultHook(sched)
        acc = np.array([[7.5]], dtype=np.float64)
        hook.maybe_corrupt(0, (0, 0), acc)
        hook.maybe_corrupt(0, (0, 0), acc)
        assert acc[0, 0] == -7.5  # applied once, not twice
        assert len(hook.injected) == 1

    def test_wrong_tile_untouched(self):
        sched = FaultSchedule([FaultEntry(0, (1, 1), (0, 0), 63)])
        hook = ScheduledFaultHook(sched)
        acc = np.array([[7.5]], dtype=np.float64)
        hook.maybe_corrupt(0, (0, 0), acc)
        assert acc[0, 0] == 7.5
