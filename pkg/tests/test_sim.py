"""Cost-model tests: cycle formula, lowering, traffic, energy identities."""

from __future__ import annotations

import math
import random

import pytest

from tfxquant import nn
from tfxquant.errors import TileOverflow
from tfxquant.nn.datasets import synthetic
from tfxquant.nn.engine import calibrate
from tfxquant.nn.model import Layer, count_macs
from tfxquant.sim import (
    ArrayConfig,
    CostTable,
    MemoryConfig,
    SimReport,
    edp_sweep,
    lower_to_gemm,
    schedule_layer,
    simulate_model,
)


def tile_sum_oracle(m, k, n, rows, cols):
    """Closed-form tile sum computed the slow way: walk every tile."""
    total = 0
    for _ in range(math.ceil(m / rows)):
        for _ in range(math.ceil(n / cols)):
            total += k + rows + cols - 2
    return total


class TestSchedule:
    def test_square_tile(self):
        cycles, util = schedule_layer(16, 16, 16, ArrayConfig(16, 16))
        assert cycles == 46
        assert util == 16 * 16 * 16 / (46 * 256)

    def test_degenerate_array(self):
        cycles, util = schedule_layer(1, 1, 1, ArrayConfig(1, 1))
        assert cycles == 1 and util == 1.0

    def test_four_tiles(self):
        cycles, _ = schedule_layer(32, 16, 32, ArrayConfig(16, 16))
        assert cycles == 4 * 46

    def test_matches_tile_walk_randomized(self):
        rng = random.Random(99)
        for _ in range(50):
            m, k, n = (rng.randint(1, 300) for _ in range(3))
            rows, cols = rng.randint(1, 32), rng.randint(1, 32)
            cycles, util = schedule_layer(m, k, n, ArrayConfig(rows, cols))
            assert cycles == tile_sum_oracle(m, k, n, rows, cols)
            assert 0.0 < util <= 1.0

    def test_utilization_approaches_one(self):
        # Perfect divisibility and K >> rows+cols drives utilization up.
        _, util = schedule_layer(16, 10000, 16, ArrayConfig(16, 16))
        assert util > 0.99


class TestLowering:
    def test_dense(self):
        layer = Layer("fc", "dense", weights=__import__("numpy").zeros((10, 128), "f"))
        assert lower_to_gemm(layer, (128,), batch=1) == (10, 128, 1)

    def test_conv(self):
        import numpy as np

        layer = Layer("c", "conv2d", weights=np.zeros((32, 16, 3, 3), "f"), padding=1)
        assert lower_to_gemm(layer, (16, 8, 8), batch=1) == (32, 144, 64)

    def test_passthrough(self):
        assert lower_to_gemm(Layer("r", "relu"), (4, 4, 4)) is None


@pytest.fixture(scope="module")
def quantized_fixture():
    model = nn.build_tiny_convnet(0)
    ds = synthetic(0, 32, model.input_shape)
    stats = calibrate(model, ds.images)
    return model, nn.quantize_model(model, 8, "tfx", stats), ds


class TestSimulateModel:
    def test_compute_cycles_equal_tile_sums(self, quantized_fixture):
        model, qm, _ = quantized_fixture
        report = simulate_model(qm)
        expected = 0
        shapes = [(1, 12, 12), (8, 12, 12), (8, 12, 12), (8, 6, 6), (16, 6, 6),
                  (16, 6, 6), (16, 3, 3), (144,), (32,), (32,)]
        for layer, in_shape in zip(qm.layers, shapes):
            dims = lower_to_gemm(layer, in_shape, 1)
            if dims:
                expected += schedule_layer(*dims, ArrayConfig())[0]
        assert report.compute_cycles == expected

    def test_mac_count_matches_nn(self, quantized_fixture):
        model, qm, _ = quantized_fixture
        assert simulate_model(qm).macs == count_macs(model)

    def test_utilization_in_unit_interval(self, quantized_fixture):
        _, qm, _ = quantized_fixture
        report = simulate_model(qm)
        assert 0.0 < report.utilization <= 1.0

    def test_one_by_one_array_cycles_equal_macs(self, quantized_fixture):
        model, qm, _ = quantized_fixture
        report = simulate_model(qm, array=ArrayConfig(1, 1))
        assert report.compute_cycles == count_macs(model)

    def test_bandwidth_monotonicity(self, quantized_fixture):
        _, qm, _ = quantized_fixture
        fast = simulate_model(qm, mem=MemoryConfig(dram_bytes_per_cycle=32))
        slow = simulate_model(qm, mem=MemoryConfig(dram_bytes_per_cycle=16))
        assert slow.cycles >= fast.cycles

    def test_energy_monotone_in_coefficients(self, quantized_fixture):
        _, qm, _ = quantized_fixture
        base = simulate_model(qm, costs=CostTable())
        bumped = simulate_model(qm, costs=CostTable(fxp_mac_j=2e-12))
        assert bumped.energy > base.energy
        bumped_mem = simulate_model(qm, costs=CostTable(dram_j_per_byte=40e-12))
        assert bumped_mem.energy > base.energy

    def test_edp_definition(self, quantized_fixture):
        _, qm, _ = quantized_fixture
        report = simulate_model(qm, clock_hz=1e6)
        assert report.edp == pytest.approx(report.energy * report.cycles / 1e6)

    def test_zero_layer_model(self):
        from tfxquant.nn.quantized import QuantizedModel
        from tfxquant.formats import TfxConfig

        qm = QuantizedModel("empty", (1, 2, 2), 8, "tfx", "auto",
                            TfxConfig(8, 1, 0), [])
        report = simulate_model(qm)
        assert report == SimReport(0, 0, 0.0, 0, 0.0, 0.0, 0)

    def test_tile_overflow(self, quantized_fixture):
        _, qm, _ = quantized_fixture
        with pytest.raises(TileOverflow):
            simulate_model(qm, mem=MemoryConfig(sram_bytes=16))


class TestEdpSweep:
    def test_row_cardinality_and_ratio(self, quantized_fixture):
        model, _, ds = quantized_fixture
        costs = CostTable(fxp_mac_j=1e-12, tfx_mac_ratio=1.25,
                          sram_j_per_byte=0.0, dram_j_per_byte=0.0)
        rows = edp_sweep(model, ds, [5, 6, 7, 8], calib_size=32, costs=costs)
        assert len(rows) == 8
        by_key = {(r.format_kind, r.bits): r for r in rows}
        for bits in (5, 6, 7, 8):
            ratio = by_key[("tfx", bits)].edp / by_key[("fxp", bits)].edp
            assert abs(ratio - 1.25) < 1e-12

    def test_equal_costs_equal_edp(self, quantized_fixture):
        model, _, ds = quantized_fixture
        costs = CostTable(tfx_mac_ratio=1.0)
        rows = edp_sweep(model, ds, [8], calib_size=32, costs=costs)
        tfx, fxp = rows[0], rows[1]
        assert tfx.edp == pytest.approx(fxp.edp, rel=1e-12)

    def test_cost_table_json_roundtrip(self, tmp_path):
        path = tmp_path / "costs.json"
        path.write_text('{"fxp_mac_j": 2e-12, "tfx_mac_ratio": 1.17}')
        table = CostTable.from_json(path)
        assert table.fxp_mac_j == 2e-12
        assert table.tfx_mac_ratio == 1.17
        assert table.mac_energy("tfx", 8) == pytest.approx(2e-12 * 1.17)
        assert table.mac_energy("fxp", 4) == pytest.approx(2e-12 * 0.25)
