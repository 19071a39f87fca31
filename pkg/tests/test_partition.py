import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from pathwise import (SampledPath, TimeChange, discrete_qv, estimate_qv, lebesgue_stopping_times,
                      qv_time_change_check, resolution_cap, wiener_calibration)
from pathwise.partition import check_level, interpolation_slack, qv_monotone_slack, qv_values
from conftest import linear_path

MODES = ["sampled", "interpolated"]
paths_st = st.lists(st.floats(-4, 4), min_size=1, max_size=80).map(
    lambda v: SampledPath.uniform([0.0] + v))


class TestStoppingTimes:
    def test_linear_path_level_one(self):
        p = lebesgue_stopping_times(linear_path(1.0, 1), 1)
        assert list(p.crossing_times) == [0.0, 0.5, 1.0]
        assert list(p.crossing_values) == [0.0, 0.5, 1.0]

    @pytest.mark.parametrize("mode", MODES)
    def test_zero_path(self, mode):
        p = lebesgue_stopping_times(SampledPath.uniform(np.zeros(5)), 7, mode)
        assert list(p.crossing_times) == [0.0]

    def test_zigzag_level_zero(self):
        p = lebesgue_stopping_times(SampledPath([0.0, 0.5, 1.0], [0.0, 1.0, 0.0]), 0)
        assert list(p.crossing_times) == [0.0, 0.5, 1.0]
        assert list(p.crossing_values) == [0.0, 1.0, 0.0]

    def test_touching_the_previous_level_is_not_a_crossing(self):
        p = lebesgue_stopping_times(SampledPath([0.0, 1.0, 2.0], [0.0, 0.5, 0.0]), 1)
        # 0 -> 0.5 crosses, returning to 0 crosses again; no crossing is counted at 0 itself
        assert list(p.crossing_values) == [0.0, 0.5, 0.0]
        q = lebesgue_stopping_times(SampledPath([0.0, 1.0, 2.0], [0.0, 0.3, 0.0]), 1)
        assert list(q.crossing_values) == [0.0]

    def test_multi_level_jump_emits_every_level(self):
        p = lebesgue_stopping_times(SampledPath([0.0, 1.0], [0.0, 1.0]), 2)
        assert list(p.crossing_values) == [0.0, 0.25, 0.5, 0.75, 1.0]
        assert np.allclose(p.crossing_times, [0.0, 0.25, 0.5, 0.75, 1.0])
        s = lebesgue_stopping_times(SampledPath([0.0, 1.0], [0.0, 1.0]), 2, "sampled")
        assert list(s.crossing_values) == [0.0, 0.25, 0.5, 0.75, 1.0]
        assert list(s.crossing_times) == [0.0, 1.0, 1.0, 1.0, 1.0]
        assert list(s.path_values) == [0.0, 1.0, 1.0, 1.0, 1.0]

    @pytest.mark.parametrize("mode", MODES)
    @given(p=paths_st, level=st.integers(0, 8))
    def test_crossing_step_property(self, mode, p, level):
        part = lebesgue_stopping_times(p, level, mode)
        d = np.abs(np.diff(part.crossing_values))
        assert np.all(d == 2.0 ** -level)
        assert np.all(np.diff(part.crossing_times) >= 0)

    @pytest.mark.parametrize("mode", MODES)
    @pytest.mark.parametrize("seed", [0, 1])
    @pytest.mark.parametrize("level", [2, 5, 7])
    def test_matches_reference_enumeration(self, brownian, mode, seed, level):
        S = brownian(seed, 4096)
        ref = oracles.crossings(list(S.times), list(S.values), 2.0 ** -level, mode == "sampled")
        part = lebesgue_stopping_times(S, level, mode)
        assert len(part) == len(ref)
        assert np.allclose(part.crossing_times, [r[0] for r in ref], rtol=0, atol=1e-12)
        assert np.array_equal(part.crossing_values, [r[1] for r in ref])
        assert np.array_equal(part.path_values, [r[2] for r in ref])


class TestDiscreteQV:
    @pytest.mark.parametrize("level", [0, 1, 3, 6])
    def test_linear_path_closed_form(self, level):
        q = discrete_qv(linear_path(1.0, 1), level, [0.0, 1.0], "interpolated")
        assert q.terminal == pytest.approx(2.0 ** -level, rel=1e-12)

    def test_zigzag_level_zero(self):
        p = SampledPath([0.0, 0.5, 1.0], [0.0, 1.0, 0.0])
        assert discrete_qv(p, 0, [0.0, 1.0]).terminal == 2.0

    @pytest.mark.parametrize("mode", MODES)
    @given(p=paths_st, level=st.integers(0, 6))
    def test_zero_at_time_zero(self, mode, p, level):
        assert qv_values(p, level, [0.0], mode)[0] == 0.0

    def test_monotone_refinement_identity(self):
        # monotone path: full crossings contribute h^2 each plus the partial remainder
        p = SampledPath([0.0, 1.0], [0.0, 0.9])
        for level in range(0, 6):
            h = 2.0 ** -level
            full = math.floor(0.9 / h)
            expect = full * h * h + (0.9 - full * h) ** 2
            got = discrete_qv(p, level, [0.0, 1.0], "interpolated").terminal
            assert got == pytest.approx(expect, rel=1e-12, abs=1e-15)

    def test_frozen_reference_values(self, brownian):
        S = brownian(11, 4096)
        assert qv_values(S, 4, [0.0, 0.5, 1.0], "sampled")[2] == pytest.approx(
            1.0346020547140236, abs=1e-13)
        assert qv_values(S, 4, [0.0, 0.5, 1.0], "interpolated")[1] == pytest.approx(
            0.36351084751357865, abs=1e-13)
        assert qv_values(S, 6, [0.0, 0.5, 1.0], "sampled")[1] == pytest.approx(
            0.5027214167911505, abs=1e-13)

    @pytest.mark.parametrize("mode", MODES)
    def test_matches_literal_sum(self, brownian, mode):
        S = brownian(2, 2048)
        et = np.linspace(0.0, 1.0, 17)
        for level in (3, 5):
            ref = [oracles.qv_at(S.times, S.values, 2.0 ** -level, mode == "sampled", w)
                   for w in et]
            assert np.allclose(qv_values(S, level, et, mode), ref, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("mode", MODES)
    def test_grid_and_time_evaluation_agree(self, brownian, mode):
        S = brownian(3, 4096)
        full = qv_values(S, 5, None, mode)
        at = qv_values(S, 5, S.times, mode)
        assert np.allclose(full, at, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("mode", MODES)
    @given(p=paths_st, level=st.integers(0, 6))
    def test_bounded_drops(self, mode, p, level):
        # the truncated last increment can shrink V^n, never by more than the slack
        v = qv_values(p, level, None, mode)
        drop = np.max(np.maximum.accumulate(v) - v)
        assert drop <= qv_monotone_slack(p, level, mode) + 1e-12

    def test_nondecreasing_along_stops(self, brownian):
        S = brownian(4, 1 << 14)
        part = lebesgue_stopping_times(S, 6, "interpolated")
        v = qv_values(S, 6, part.crossing_times, "interpolated")
        assert np.all(np.diff(v) >= -1e-15)


class TestEstimate:
    def test_linear_path_vanishing_qv(self):
        p = linear_path(1.0, 4096)
        res, gaps = estimate_qv(p, 2, 8, monitoring="interpolated")
        assert res.terminal == pytest.approx(2.0 ** -8)
        assert np.all(gaps >= 0) and gaps.size == 6

    def test_zero_path(self):
        res, gaps = estimate_qv(SampledPath.uniform(np.zeros(11)), 1, 5)
        assert np.all(gaps == 0.0) and np.all(res.values == 0.0)

    def test_gaps_match_separate_levels(self, brownian):
        S = brownian(5, 1 << 14)
        res, gaps = estimate_qv(S, 3, 7)
        levels = [qv_values(S, n) for n in range(3, 8)]
        assert np.array_equal(res.values, levels[-1])
        assert np.array_equal(gaps, [np.max(np.abs(a - b)) for a, b in zip(levels, levels[1:])])

    def test_order_and_cap(self, brownian):
        S = brownian(5, 1 << 10)
        with pytest.raises(ValueError):
            estimate_qv(S, 5, 5)
        with pytest.raises(ValueError):
            estimate_qv(S, 2, resolution_cap(S) + 1, monitoring="interpolated")


class TestLevels:
    def test_resolution_cap(self):
        p = SampledPath([0.0, 1.0, 2.0], [0.0, 0.01, 0.0])
        assert resolution_cap(p) == math.floor(-math.log2(0.04))
        assert resolution_cap(SampledPath.uniform(np.zeros(3))) == 60

    def test_check_level(self):
        p = SampledPath([0.0, 1.0], [0.0, 0.01])
        with pytest.raises(ValueError):
            check_level(p, -1)
        with pytest.raises(ValueError):
            check_level(p, 61)
        with pytest.raises(ValueError):
            check_level(p, 10, "interpolated", cap=True)
        check_level(p, 10, "sampled", cap=True)

    def test_interpolation_slack(self):
        p = SampledPath([0.0, 1.0], [0.0, 0.25])
        assert interpolation_slack(p, 3) == 4 * 0.125 * 0.25

    def test_wiener_calibration(self, brownian):
        S = brownian(0, 64)
        q = wiener_calibration(S)
        assert q.level is None and np.array_equal(q.values, S.times) and q.terminal == 1.0


class TestQVTimeChange:
    @pytest.mark.parametrize("mode", MODES)
    def test_identity_is_exact(self, brownian, mode):
        S = brownian(6, 2048)
        d = qv_time_change_check(S, TimeChange.from_table(S.times, S.times), 4, S.times,
                                 monitoring=mode)
        assert d == 0.0

    def test_doubling_on_aligned_grids(self):
        src = linear_path(2.0, 16)
        phi = TimeChange(lambda t: 2.0 * t, strictly_increasing=True)
        new = np.linspace(0.0, 1.0, 9)
        assert qv_time_change_check(src, phi, 3, new, new_times=new,
                                    monitoring="interpolated") == 0.0

    def test_grid_preimage_is_exact(self, brownian):
        S = brownian(7, 4096)
        new = np.sqrt(S.times)  # phi(t) = t^2 sends every new sample onto an old one
        phi = TimeChange.from_table(new, S.times, strictly_increasing=True)
        assert qv_time_change_check(S, phi, 5, new) == 0.0

    def test_collinear_refinement_in_interpolated_mode(self, brownian):
        S = brownian(7, 4096)
        new = np.union1d(np.sqrt(S.times), S.times)
        phi = TimeChange(lambda t: t * t, strictly_increasing=True)
        d = qv_time_change_check(S, phi, 5, S.times, new_times=new, monitoring="interpolated")
        assert d <= 1e-12

    def test_coarse_resampling_is_detected(self, brownian):
        S = brownian(7, 4096)
        phi = TimeChange(lambda t: t * t)
        assert qv_time_change_check(S, phi, 5, S.times, new_times=S.times) > 1e-3
