import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drivegaze.core import AttentionMap
from drivegaze.metrics import (
    MetricReport,
    UndefinedMetricError,
    cc,
    downsample_map,
    emd,
    entropy,
    kl,
    mean_report,
)
from ot_reference import grid_transport_cost

LN_2048 = math.log(2048)


def _random_map(rng, h=4, w=4):
    grid = rng.uniform(0.0, 1.0, size=(h, w))
    return AttentionMap(grid / grid.sum())


class TestCC:
    def test_self_correlation(self):
        rng = np.random.default_rng(0)
        p = _random_map(rng, 8, 8)
        assert cc(p, p) == pytest.approx(1.0, abs=1e-9)

    def test_affine_invariance_raw_overload(self):
        rng = np.random.default_rng(1)
        p = _random_map(rng, 8, 8)
        raw = 3.5 * p.values + 0.2  # not normalized; raw-grid overload
        assert cc(p, raw) == pytest.approx(1.0, abs=1e-9)

    def test_opposing_deltas_on_four_cells(self):
        p = AttentionMap(np.array([[1.0, 0.0, 0.0, 0.0]]))
        q = AttentionMap(np.array([[0.0, 1.0, 0.0, 0.0]]))
        # hand Pearson on four numbers: cov -1/16, var 3/16 each
        assert cc(p, q) == pytest.approx(-1.0 / 3.0, abs=1e-12)
        assert cc(p, q) == pytest.approx(np.corrcoef(p.values.ravel(), q.values.ravel())[0, 1], abs=1e-12)

    def test_constant_map_undefined(self):
        u = AttentionMap.uniform(4, 4)
        d = AttentionMap.delta(4, 4, 0, 0)
        with pytest.raises(UndefinedMetricError):
            cc(u, d)
        with pytest.raises(UndefinedMetricError):
            cc(d, u)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p, q = _random_map(rng), _random_map(rng)
            assert abs(cc(p, q) - cc(q, p)) < 1e-12

    def test_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p, q = _random_map(rng), _random_map(rng)
            assert -1.0 - 1e-9 <= cc(p, q) <= 1.0 + 1e-9


class TestKL:
    def test_identical_maps_near_zero(self):
        rng = np.random.default_rng(4)
        for p in (AttentionMap.uniform(32, 64), _random_map(rng, 32, 64), AttentionMap.delta(32, 64, 3, 5)):
            assert 0.0 <= kl(p, p) <= 2e-6

    def test_delta_truth_uniform_prediction(self):
        gt = AttentionMap.delta(32, 64, 10, 20)
        pred = AttentionMap.uniform(32, 64)
        assert kl(pred, gt) == pytest.approx(LN_2048, abs=1e-3)

    def test_two_cell_hand_value(self):
        gt = AttentionMap(np.array([[1.0, 0.0]]))
        pred = AttentionMap(np.array([[0.5, 0.5]]))
        assert kl(pred, gt) == pytest.approx(math.log(2), abs=1e-4)

    def test_moving_mass_off_support_never_decreases(self):
        gt = AttentionMap(np.array([[1.0, 0.0]]))
        xs = np.linspace(0.999, 0.001, 60)
        vals = [kl(AttentionMap(np.array([[x, 1 - x]])), gt) for x in xs]
        assert np.all(np.diff(vals) >= 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kl(AttentionMap.uniform(2, 2), AttentionMap.uniform(2, 3))

    def test_nonpositive_epsilon_rejected(self):
        with pytest.raises(ValueError):
            kl(AttentionMap.uniform(2, 2), AttentionMap.uniform(2, 2), epsilon=0.0)

    def test_clamped_non_negative(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            assert kl(_random_map(rng), _random_map(rng)) >= 0.0


class TestEntropy:
    def test_delta_zero(self):
        assert entropy(AttentionMap.delta(32, 64, 0, 0)) == 0.0

    def test_uniform_maximum(self):
        assert entropy(AttentionMap.uniform(32, 64)) == pytest.approx(LN_2048, abs=1e-9)

    def test_fair_coin(self):
        assert entropy(AttentionMap(np.array([[0.5, 0.5]]))) == pytest.approx(math.log(2), abs=1e-12)

    @settings(max_examples=50)
    @given(st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=8, max_size=8))
    def test_bounded_by_uniform(self, cells):
        grid = np.array(cells).reshape(2, 4)
        m = AttentionMap(grid / grid.sum())
        assert entropy(m) <= math.log(8) + 1e-9


class TestEMD:
    def test_identity(self):
        rng = np.random.default_rng(6)
        p = _random_map(rng)
        assert emd(p, p) == 0.0

    def test_two_cell_swap(self):
        p = AttentionMap(np.array([[1.0, 0.0]]))
        q = AttentionMap(np.array([[0.0, 1.0]]))
        assert emd(p, q) == pytest.approx(1.0, abs=1e-9)

    def test_three_cell_shift(self):
        p = AttentionMap(np.array([[0.5, 0.5, 0.0]]))
        q = AttentionMap(np.array([[0.0, 0.5, 0.5]]))
        assert emd(p, q) == pytest.approx(1.0, abs=1e-9)
        assert grid_transport_cost(p.values, q.values) == pytest.approx(1.0, abs=1e-9)

    def test_matches_reference_solver(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            p, q = _random_map(rng), _random_map(rng)
            assert emd(p, q) == pytest.approx(grid_transport_cost(p.values, q.values), abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            p, q = _random_map(rng), _random_map(rng)
            assert abs(emd(p, q) - emd(q, p)) < 1e-9

    def test_triangle_inequality_sample(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            a, b, c = (_random_map(rng) for _ in range(3))
            assert emd(a, c) <= emd(a, b) + emd(b, c) + 1e-9

    def test_large_grid_rejected(self):
        big = AttentionMap.uniform(32, 64)
        with pytest.raises(ValueError):
            emd(big, big)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            emd(AttentionMap.uniform(4, 4), AttentionMap.uniform(2, 8))


class TestDownsample:
    def test_factor_one_identity(self):
        rng = np.random.default_rng(10)
        p = _random_map(rng, 8, 16)
        assert np.array_equal(downsample_map(p, 1).values, p.values / p.values.sum())

    def test_uniform_stays_uniform(self):
        out = downsample_map(AttentionMap.uniform(32, 64), 4)
        assert out.shape == (8, 16)
        assert np.allclose(out.values, 1.0 / 128)

    def test_delta_maps_to_containing_block(self):
        d = AttentionMap.delta(32, 64, 13, 42)
        out = downsample_map(d, 4)
        assert out.argmax_cell() == (3, 10)
        assert out.values[3, 10] == pytest.approx(1.0)

    def test_mass_preserved(self):
        rng = np.random.default_rng(11)
        p = _random_map(rng, 32, 64)
        out = downsample_map(p, 4)
        assert abs(out.values.sum() - 1.0) < 1e-9
        # block sums agree with direct summation
        direct = p.values.reshape(8, 4, 16, 4).sum(axis=(1, 3))
        assert np.allclose(out.values, direct / direct.sum(), atol=1e-12)

    def test_indivisible_dimensions_rejected(self):
        with pytest.raises(ValueError):
            downsample_map(AttentionMap.uniform(6, 9), 4)


class TestReports:
    def test_report_requires_frames(self):
        with pytest.raises(ValueError):
            MetricReport(cc=0.0, kl=0.0, entropy=0.0, count=0)

    def test_mean_report_aggregates(self):
        rng = np.random.default_rng(12)
        preds = [_random_map(rng, 4, 8) for _ in range(3)]
        rep = mean_report(preds, preds)
        assert rep.count == 3
        assert rep.cc == pytest.approx(1.0, abs=1e-9)
        assert rep.kl <= 2e-6

    def test_mean_report_skips_undefined_cc(self):
        uniform = [AttentionMap.uniform(4, 8)]
        deltas = [AttentionMap.delta(4, 8, 0, 0)]
        rep = mean_report(uniform, deltas)
        assert math.isnan(rep.cc)
        assert rep.kl > 0
