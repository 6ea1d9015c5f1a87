import numpy as np
import pytest

from ftkmeans.tiles import MICRO_DOUBLE, MICRO_SINGLE, default_config, make_config
from ftkmeans.tuner import (
    ParamSpace,
    TuneTable,
    bench_shapes,
    benchmark,
    default_grid,
    enumerate_configs,
    feasible,
    m_bucket,
    select,
    shortlist,
)


class TestEnumeration:
    def test_counts_are_stable(self):
        # regression constants, computed once from the default bounds
        assert len(enumerate_configs("single").configs) == 276
        assert len(enumerate_configs("double").configs) == 336

    def test_reference_configs_are_members(self):
        space = enumerate_configs("single").configs
        assert make_config((32, 256, 16), (32, 64, 16), MICRO_SINGLE) in space
        assert make_config((256, 32, 16), (64, 32, 16), MICRO_SINGLE) in space
        assert make_config((128, 64, 16), (32, 64, 16), MICRO_SINGLE) in space
        assert make_config((64, 128, 16), (64, 32, 16), MICRO_SINGLE) in space
        space64 = enumerate_configs("double").configs
        assert make_config((128, 32, 16), (32, 32, 16), MICRO_DOUBLE) in space64
        assert make_config((64, 64, 16), (32, 32, 16), MICRO_DOUBLE) in space64

    def test_rule_violations_excluded(self):
        # sub.k != block.k never appears
        for cfg in enumerate_configs("single").configs:
            assert cfg.sub[2] == cfg.block[2]
            assert cfg.block[0] % cfg.sub[0] == 0
            assert cfg.block[1] % cfg.sub[1] == 0
            ratio = (cfg.sub[0] * cfg.sub[1]) // (cfg.micro[0] * cfg.micro[1])
            assert ratio in (8, 16)

    def test_deterministic_and_sorted(self):
        a = [c.as_tuple() for c in enumerate_configs("single").configs]
        b = [c.as_tuple() for c in enumerate_configs("single").configs]
        assert a == b
        assert a == sorted(a)

    def test_shortlists_are_valid_members(self):
        space = {c.as_tuple() for c in enumerate_configs("single").configs}
        assert all(c.as_tuple() in space for c in shortlist("single"))
        space64 = {c.as_tuple() for c in enumerate_configs("double").configs}
        assert all(c.as_tuple() in space64 for c in shortlist("double"))


class TestFeasibility:
    def test_reference_configs_fit_default_budget(self):
        shape = (4096, 64, 64)
        cu = make_config((32, 256, 16), (32, 64, 16), MICRO_SINGLE)
        p88 = make_config((256, 32, 16), (64, 32, 16), MICRO_SINGLE)
        assert feasible(cu, shape)
        assert feasible(p88, shape)

    def test_worked_example_exceeds_small_budget(self):
        # (256*32 + 32*256) * 8 bytes = 128 KiB > 64 KiB
        cfg = make_config((256, 256, 32), (32, 16, 32), MICRO_DOUBLE)
        assert not feasible(cfg, (4096, 64, 64), cache_budget=64 * 1024, precision="double")

    def test_infinite_budget_admits_everything(self):
        for cfg in enumerate_configs("single").configs:
            assert feasible(cfg, (4096, 64, 64), cache_budget=float("inf"))


class TestBenchmark:
    def test_reps_zero_rejected(self):
        with pytest.raises(ValueError):
            benchmark(default_config(np.float32), (256, 8, 8), reps=0)

    def test_repeatability_within_noise(self):
        cfg = make_config((128, 64, 16), (32, 64, 16), MICRO_SINGLE)
        shape = (8192, 32, 64)
        a = benchmark(cfg, shape, reps=5)
        b = benchmark(cfg, shape, reps=5)
        assert abs(a - b) / max(a, b) < 0.20

    def test_time_scales_linearly_in_m(self):
        cfg = make_config((128, 64, 16), (32, 64, 16), MICRO_SINGLE)
        g1 = benchmark(cfg, (8192, 32, 64), reps=5)
        g2 = benchmark(cfg, (16384, 32, 64), reps=5)
        # doubling M doubles the flops; time ratio = 2 * g1/g2 in [1.6, 2.4]
        ratio = 2.0 * g1 / g2
        assert 1.6 <= ratio <= 2.4


class TestSelect:
    def test_selected_at_least_default(self):
        space = ParamSpace("single", shortlist("single")[:5])
        shapes = [(2048, 8, 32), (2048, 32, 128)]
        table = select(shapes, space, reps=3, probe_m=2048)
        for shape in shapes:
            key = (m_bucket(shape[0]), shape[1], shape[2], "single")
            assert table.entries[key].gflops >= table.baseline[key]

    def test_error_when_nothing_feasible(self):
        space = ParamSpace("single", shortlist("single"))
        with pytest.raises(ValueError, match="no feasible"):
            select([(1024, 8, 8)], space, cache_budget=1, reps=1)

    def test_empty_shapes_rejected(self):
        with pytest.raises(ValueError):
            select([], ParamSpace("single", shortlist("single")))


class TestTable:
    def test_round_trip(self, tmp_path):
        t = TuneTable()
        cfg = make_config((128, 64, 16), (32, 64, 16), MICRO_SINGLE)
        t.put((16384, 8, 32), "single", cfg, 12.5, 10)
        t.put((131072, 128, 1024), "single", cfg, 17.25, 10)
        p = tmp_path / "table.csv"
        t.save(p)
        back = TuneTable.load(p)
        assert set(back.entries) == set(t.entries)
        for k in t.entries:
            assert back.entries[k].config == t.entries[k].config
            assert back.entries[k].gflops == t.entries[k].gflops
            assert back.entries[k].reps == t.entries[k].reps

    def test_comments_allowed(self, tmp_path):
        p = tmp_path / "table.csv"
        p.write_text(
            "# a comment\n"
            "16384,8,32,single,128,64,16,32,64,16,16,8,4,12.5,10\n"
        )
        t = TuneTable.load(p)
        assert len(t.entries) == 1

    def test_lookup_exact_and_fallback(self):
        t = TuneTable()
        c1 = make_config((128, 64, 16), (32, 64, 16), MICRO_SINGLE)
        c2 = make_config((256, 32, 16), (64, 32, 16), MICRO_SINGLE)
        t.put((16384, 8, 32), "single", c1, 10.0, 10)
        t.put((16384, 128, 1024), "single", c2, 11.0, 10)
        assert t.lookup((16384, 8, 32), np.float32) == c1
        # nearest (N, K) in log space
        assert t.lookup((999999, 8, 64), np.float32) == c1
        assert t.lookup((16384, 64, 512), np.float32) == c2
        # empty table or missing precision falls back to the default
        assert t.lookup((16384, 8, 32), np.float64) == default_config(np.float64)
        assert TuneTable().lookup((128, 8, 8), np.float32) == default_config(np.float32)

    def test_m_bucket(self):
        assert m_bucket(2**14) == 2**14
        assert m_bucket(100000) == 2**16
        assert m_bucket(1) == 1


def test_default_grid_is_32_shapes():
    grid = default_grid()
    assert len(grid) == 32
    assert (2**14, 2, 8) in grid
    assert (2**17, 128, 1024) in grid


def test_bench_shapes_rows():
    rows = bench_shapes([(2048, 8, 16)], precision="single", reps=2)
    assert len(rows) == 1
    r = rows[0]
    assert r["gflops_off"] > 0 and r["gflops_ft"] > 0
    assert "overhead_pct" in r
