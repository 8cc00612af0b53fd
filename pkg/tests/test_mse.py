import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascade_iv.mse import (
    ExponentialRefinementBoundary,
    GridSizeError,
    PacketStreamBoundary,
    SequenceBoundary,
    SingleSampleBoundary,
    closed_form_single,
    closed_form_streaming,
    log_closed_form_single,
    log_closed_form_single_grid,
    log_closed_form_streaming,
    log_closed_form_streaming_grid,
    mse_at_velocity,
    solve_grid,
    write_grid_csv,
)
from cascade_iv.params import HopConvention, Velocity, make_channel_params

CH10 = make_channel_params(10.0)
PBAR = 10.0 / 11.0


def dp_reference(pbar, boundary_row, r_max, t_max):
    """Hand-rolled recursion, independent of solve_grid's lfilter path."""
    m = np.ones((r_max + 1, t_max + 2))
    m[0, 1:] = boundary_row
    for r in range(1, r_max + 1):
        for t in range(0, t_max + 1):
            m[r, t + 1] = pbar * m[r - 1, t + 1] + (1 - pbar) * m[r, t]
    return m


class TestSolveGrid:
    def test_first_column_is_one_minus_pbar_power(self):
        grid = solve_grid(CH10, SingleSampleBoundary(), 8, 5)
        for r in range(1, 9):
            assert grid.at(r, 0) == pytest.approx(1.0 - PBAR**r, rel=1e-14)

    def test_first_row_is_geometric(self):
        grid = solve_grid(CH10, SingleSampleBoundary(), 3, 12)
        for t in range(13):
            assert grid.at(1, t) == pytest.approx((1.0 / 11.0) ** (t + 1), rel=1e-13)

    def test_hand_unrolled_m21(self):
        # M_2(1) = pbar*M_1(1) + (1-pbar)*M_2(0)
        #        = (10/11)(1/121) + (1/11)(1 - 100/121)
        oracle = (10.0 / 11.0) * (1.0 / 121.0) + (1.0 / 11.0) * (1.0 - 100.0 / 121.0)
        grid = solve_grid(CH10, SingleSampleBoundary(), 2, 1)
        assert grid.at(2, 1) == pytest.approx(oracle, rel=1e-14)
        assert grid.at(2, 1) == pytest.approx(0.023291, abs=5e-7)

    def test_matches_naive_recursion(self):
        boundary = ExponentialRefinementBoundary(0.7)
        grid = solve_grid(CH10, boundary, 12, 18)
        ref = dp_reference(PBAR, boundary.profile(18), 12, 18)
        assert np.allclose(grid.values, ref, rtol=1e-13, atol=0)

    def test_initial_column_is_one(self):
        grid = solve_grid(CH10, PacketStreamBoundary(2, 3), 4, 6)
        assert (grid.values[:, 0] == 1.0).all()

    def test_recursion_identity_all_interior_cells(self):
        for boundary in (
            SingleSampleBoundary(),
            ExponentialRefinementBoundary(0.5),
            PacketStreamBoundary(2, 2),
        ):
            grid = solve_grid(CH10, boundary, 24, 40)
            m = grid.values
            resid = m[1:, 1:] - (PBAR * m[:-1, 1:] + (1 - PBAR) * m[1:, :-1])
            assert np.abs(resid).max() <= 1e-12

    def test_values_in_unit_interval_and_monotone(self):
        for boundary in (
            SingleSampleBoundary(),
            ExponentialRefinementBoundary(1.1),
            PacketStreamBoundary(3, 4),
        ):
            grid = solve_grid(CH10, boundary, 15, 30)
            v = grid.values
            assert (v >= 0).all() and (v <= 1).all()
            assert (np.diff(v, axis=1) <= 1e-15).all()  # non-increasing in t
            assert (np.diff(v[:, 1:], axis=0) >= -1e-15).all()  # non-decreasing in r

    def test_cell_cap(self):
        with pytest.raises(GridSizeError):
            solve_grid(CH10, SingleSampleBoundary(), 1000, 1000, cell_cap=1000)

    def test_bad_dimensions(self):
        with pytest.raises(ValueError):
            solve_grid(CH10, SingleSampleBoundary(), 0, 5)

    @given(
        snr=st.floats(min_value=0.05, max_value=50.0),
        rate=st.floats(min_value=0.05, max_value=2.0),
    )
    @settings(max_examples=25, deadline=None)
    def test_refinement_grid_properties(self, snr, rate):
        ch = make_channel_params(snr)
        grid = solve_grid(ch, ExponentialRefinementBoundary(rate), 8, 12)
        v = grid.values
        assert (v >= 0).all() and (v <= 1).all()
        assert (np.diff(v, axis=1) <= 1e-15).all()


class TestClosedFormSingle:
    def test_single_relay_geometric(self):
        for t in (0, 1, 5, 40):
            assert closed_form_single(CH10, 1, t) == pytest.approx(
                (1.0 / 11.0) ** (t + 1), rel=1e-12
            )

    def test_time_zero(self):
        assert closed_form_single(CH10, 3, 0) == pytest.approx(1.0 - PBAR**3, rel=1e-12)
        assert closed_form_single(CH10, 3, 0) == pytest.approx(0.24868, abs=1e-5)

    def test_matches_grid_deep_cell(self):
        grid = solve_grid(CH10, SingleSampleBoundary(), 5, 50)
        assert closed_form_single(CH10, 5, 50) == pytest.approx(grid.at(5, 50), rel=1e-9)

    def test_grid_variant_matches_scalar(self):
        log_grid = log_closed_form_single_grid(CH10, 6, 9)
        for r in (1, 3, 6):
            for t in (0, 4, 9):
                assert log_grid[r, t] == pytest.approx(
                    log_closed_form_single(CH10, r, t), rel=1e-12
                )

    def test_matches_grid_everywhere(self):
        grid = solve_grid(CH10, SingleSampleBoundary(), 40, 60)
        log_cf = log_closed_form_single_grid(CH10, 40, 60)
        rel = np.abs(np.exp(log_cf[1:]) - grid.values[1:, 1:]) / grid.values[1:, 1:]
        assert rel.max() <= 1e-9

    def test_log_domain_survives_huge_binomials(self):
        # C(400, 200) alone overflows float64; the log route must not.
        val = log_closed_form_single(CH10, 200, 200)
        assert math.isfinite(val)

    def test_rejects_bad_cells(self):
        with pytest.raises(ValueError):
            closed_form_single(CH10, 0, 3)
        with pytest.raises(ValueError):
            closed_form_single(CH10, 3, -1)


class TestClosedFormStreaming:
    def test_time_zero_boundary_contribution(self):
        # at t=0 the only boundary cell is M_0(0) = e^{-2R}, reached through
        # r relay steps: MSE_II(r, 0) = pbar^r e^{-2R}
        rate = 0.5
        for r in (1, 2, 5):
            _, mse_ii = closed_form_streaming(CH10, rate, r, 0)
            assert mse_ii == pytest.approx(PBAR**r * math.exp(-2 * rate), rel=1e-13)

    def test_term_enumeration_oracle_r1_t2(self):
        # boundary cells (0,0),(0,1),(0,2) with values e^{-2R(x+1)} reach (1,2)
        # via one relay step and 2-x time steps:
        rate = 0.5
        oracle = PBAR * (
            math.exp(-2 * rate * 3) * 1.0
            + math.exp(-2 * rate * 2) * (1.0 / 11.0)
            + math.exp(-2 * rate * 1) * (1.0 / 11.0) ** 2
        )
        _, mse_ii = closed_form_streaming(CH10, rate, 1, 2)
        assert mse_ii == pytest.approx(oracle, rel=1e-13)

    def test_total_matches_hand_unrolled_dp(self):
        rate = 0.5
        b = [math.exp(-2 * rate * (t + 1)) for t in range(3)]
        m10 = PBAR * b[0] + (1 - PBAR) * 1.0
        m11 = PBAR * b[1] + (1 - PBAR) * m10
        m12 = PBAR * b[2] + (1 - PBAR) * m11
        mse_i, mse_ii = closed_form_streaming(CH10, rate, 1, 2)
        assert mse_i + mse_ii == pytest.approx(m12, rel=1e-13)

    def test_part_one_is_single_sample_closed_form(self):
        mse_i, _ = closed_form_streaming(CH10, 0.8, 4, 7)
        assert mse_i == closed_form_single(CH10, 4, 7)

    def test_matches_grid_everywhere(self):
        rate = math.log(2.0)
        grid = solve_grid(CH10, ExponentialRefinementBoundary(rate), 40, 60)
        log_i, log_ii = log_closed_form_streaming_grid(CH10, rate, 40, 60)
        total = np.exp(np.logaddexp(log_i, log_ii))
        rel = np.abs(total[1:] - grid.values[1:, 1:]) / grid.values[1:, 1:]
        assert rel.max() <= 1e-9

    def test_grid_variant_matches_scalar(self):
        log_i, log_ii = log_closed_form_streaming_grid(CH10, 0.4, 5, 8)
        si, sii = log_closed_form_streaming(CH10, 0.4, 4, 6)
        assert log_i[4, 6] == pytest.approx(si, rel=1e-12)
        assert log_ii[4, 6] == pytest.approx(sii, rel=1e-12)


class TestBoundaries:
    def test_staircase_profile(self):
        b = PacketStreamBoundary(packet_bits=2, period=2)
        profile = b.profile(7)
        expected = [2.0 ** (-4 * (t // 2 + 1)) for t in range(8)]
        assert np.allclose(profile, expected, rtol=0, atol=0)

    def test_staircase_at_or_below_refinement_profile(self):
        # rate matched to the staircase: R = psi ln2 / T; equality at period ends
        psi, period = 2, 2
        rate = psi * math.log(2.0) / period
        stair = PacketStreamBoundary(psi, period).profile(11)
        smooth = ExponentialRefinementBoundary(rate).profile(11)
        assert (stair <= smooth + 1e-15).all()
        ends = np.arange(period - 1, 12, period)
        assert np.allclose(stair[ends], smooth[ends], rtol=1e-12)

    def test_staircase_grid_dominates_refinement_grid(self):
        psi, period = 2, 2
        rate = psi * math.log(2.0) / period
        g_stair = solve_grid(CH10, PacketStreamBoundary(psi, period), 12, 24)
        g_smooth = solve_grid(CH10, ExponentialRefinementBoundary(rate), 12, 24)
        assert (g_stair.values <= g_smooth.values + 1e-15).all()

    def test_single_sample_boundary_is_zero(self):
        assert (SingleSampleBoundary().profile(5) == 0).all()

    def test_sequence_boundary_validation_and_truncation(self):
        b = SequenceBoundary((0.8, 0.4, 0.4, 0.1))
        assert np.array_equal(b.profile(2), [0.8, 0.4, 0.4])
        with pytest.raises(ValueError):
            b.profile(5)  # shorter than requested horizon
        with pytest.raises(ValueError):
            SequenceBoundary((0.3, 0.5))  # increasing
        with pytest.raises(ValueError):
            SequenceBoundary((1.2, 0.5))  # outside [0, 1]
        grid = solve_grid(CH10, b, 3, 2)
        assert (grid.values >= 0).all() and (grid.values <= 1).all()

    def test_refinement_profile(self):
        b = ExponentialRefinementBoundary(0.25)
        assert b.profile(3)[2] == pytest.approx(math.exp(-2 * 0.25 * 3), rel=1e-15)


class TestMseAtVelocity:
    def test_infinite_velocity_hits_time_zero(self):
        grid = solve_grid(CH10, SingleSampleBoundary(), 3, 5)
        got = mse_at_velocity(grid, Velocity(1e9), 1)
        assert got == 1.0 - PBAR

    def test_unit_velocity(self):
        grid = solve_grid(CH10, SingleSampleBoundary(), 4, 4)
        assert mse_at_velocity(grid, Velocity(1.0), 4) == grid.at(4, 4)

    def test_velocity_five(self):
        grid = solve_grid(CH10, SingleSampleBoundary(), 10, 4)
        assert mse_at_velocity(grid, Velocity(5.0), 10) == grid.at(10, 2)

    def test_delayed_equals_instantaneous_after_translation(self):
        grid = solve_grid(CH10, SingleSampleBoundary(), 6, 12)
        inst = mse_at_velocity(grid, Velocity(1.0), 6)
        delayed = mse_at_velocity(grid, Velocity(0.5, HopConvention.DELAYED), 6)
        assert delayed == inst

    def test_callable_backend(self):
        got = mse_at_velocity(lambda r, t: closed_form_single(CH10, r, t), Velocity(2.0), 9)
        assert got == closed_form_single(CH10, 9, 4)

    def test_beyond_grid_rejected(self):
        grid = solve_grid(CH10, SingleSampleBoundary(), 4, 3)
        with pytest.raises(IndexError):
            mse_at_velocity(grid, Velocity(0.5), 4)


class TestGridCsv:
    def test_schema_and_order(self, tmp_path):
        grid = solve_grid(CH10, SingleSampleBoundary(), 2, 1)
        path = tmp_path / "grid.csv"
        write_grid_csv(grid, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "r,t,mse"
        assert lines[1].startswith("0,-1,1")
        # r-major then t: 3 rows per relay (t = -1, 0, 1)
        assert [ln.split(",")[0] for ln in lines[1:]] == ["0"] * 3 + ["1"] * 3 + ["2"] * 3

    def test_rerun_byte_identical(self, tmp_path):
        grid = solve_grid(CH10, PacketStreamBoundary(2, 2), 3, 4)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_grid_csv(grid, p1)
        write_grid_csv(grid, p2)
        assert p1.read_bytes() == p2.read_bytes()
