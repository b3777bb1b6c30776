"""Data pipeline: ingestion, layouts, windows, normalization, stitching."""

import math

import numpy as np
import pytest

from mtsr import datapipe as dp
from mtsr.errors import ConfigError, DataError, ShapeError


@pytest.fixture
def small_series():
    return dp.synth_series(16, 16, 30, hotspots=3, seed=2)


class TestIngest:
    def test_roundtrip_fixture(self, tmp_path):
        values = np.zeros((3, 4, 4))
        values[0, 1, 2] = 5.5
        values[1, 0, 0] = 0.25
        values[2, 3, 3] = 123.456
        series = dp.TrafficSeries(values, interval_minutes=10)
        csv_path, _ = dp.write_series(series, tmp_path / "fix.csv")
        back = dp.ingest(csv_path)
        assert back.frames == 3
        np.testing.assert_array_equal(back.values, values)

    def test_synth_emit_ingest_identical(self, small_series, tmp_path):
        csv_path, _ = dp.write_series(small_series, tmp_path / "s.csv")
        back = dp.ingest(csv_path)
        assert np.array_equal(back.values, small_series.values)
        assert back.interval_minutes == small_series.interval_minutes

    def test_duplicate_cell_names_line(self, tmp_path):
        path = tmp_path / "dup.csv"
        path.write_text("time_index,row,col,traffic_mb\n0,1,1,2.0\n0,1,1,3.0\n")
        (tmp_path / "dup.meta.json").write_text(
            '{"rows": 4, "cols": 4, "interval_minutes": 10, "frames": 1}'
        )
        with pytest.raises(DataError, match="line 3.*duplicate"):
            dp.ingest(path)

    def test_non_numeric_traffic_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time_index,row,col,traffic_mb\n0,0,0,abc\n")
        (tmp_path / "bad.meta.json").write_text(
            '{"rows": 4, "cols": 4, "interval_minutes": 10, "frames": 1}'
        )
        with pytest.raises(DataError, match="line 2"):
            dp.ingest(path)

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time_index,row,col,traffic_mb\n0,0,0,1.0\n1,2,3\n")
        (tmp_path / "bad.meta.json").write_text(
            '{"rows": 4, "cols": 4, "interval_minutes": 10, "frames": 2}'
        )
        with pytest.raises(DataError, match="line 3"):
            dp.ingest(path)

    def test_absent_cells_are_zero(self, tmp_path):
        path = tmp_path / "sparse.csv"
        path.write_text("time_index,row,col,traffic_mb\n1,2,3,9.0\n")
        (tmp_path / "sparse.meta.json").write_text(
            '{"rows": 4, "cols": 4, "interval_minutes": 10, "frames": 2}'
        )
        series = dp.ingest(path)
        assert series.values.sum() == 9.0
        assert series.values[1, 2, 3] == 9.0

    def test_milan_shaped_metadata(self):
        meta = {"rows": 100, "cols": 100, "interval_minutes": 10, "frames": 8928}
        assert meta["rows"] * meta["cols"] == 10000
        assert meta["frames"] == 8928


class TestTelecomAdapter:
    def test_sums_activity_columns_across_country_codes(self, tmp_path):
        src = tmp_path / "export.tsv"
        t0 = 1383260400000
        step = 600000
        lines = [
            f"1\t{t0}\t39\t1.0\t2.0\t\t\t10.0",
            f"1\t{t0}\t0\t\t\t\t\t5.0",
            f"102\t{t0 + step}\t39\t\t\t\t\t7.5",
        ]
        src.write_text("\n".join(lines) + "\n")
        series = dp.convert_telecom_export(src, tmp_path / "canon.csv", rows=100, cols=100)
        assert series.values[0, 0, 0] == pytest.approx(18.0)
        assert series.values[1, 1, 1] == pytest.approx(7.5)
        back = dp.ingest(tmp_path / "canon.csv")
        assert np.array_equal(back.values, series.values)


class TestSynth:
    def test_deterministic_per_seed(self):
        a = dp.synth_series(12, 12, 20, hotspots=2, seed=9)
        b = dp.synth_series(12, 12, 20, hotspots=2, seed=9)
        assert np.array_equal(a.values, b.values)
        c = dp.synth_series(12, 12, 20, hotspots=2, seed=10)
        assert not np.array_equal(a.values, c.values)

    def test_no_hotspots_no_noise_is_zero(self):
        series = dp.synth_series(8, 8, 5, hotspots=0, seed=0, noise_scale=0.0)
        assert series.values.sum() == 0.0

    def test_hotspot_peak_value_closed_form(self):
        spot = dp.Hotspot(row=5, col=6, amplitude=80.0, sigma=1.5, phase=math.pi / 2)
        series = dp.synth_series(12, 12, 40, hotspots=[spot], seed=0,
                                 noise_scale=0.0, period_frames=40)
        assert series.values.max() == pytest.approx(80.0)
        assert series.values[0, 5, 6] == pytest.approx(80.0)

    def test_small_grid_rejected(self):
        with pytest.raises(ConfigError):
            dp.synth_series(4, 4, 10)


class TestLayouts:
    def test_up2_mean(self):
        lay = dp.ProbeLayout.uniform(2, 2, 2)
        coarse = lay.aggregate(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert coarse.shape == (1, 1)
        assert coarse[0, 0] == pytest.approx(2.5)

    def test_constant_field_any_layout(self):
        for lay in (dp.ProbeLayout.uniform(4, 16, 16), dp.ProbeLayout.mixture(40, 40)):
            coarse = lay.aggregate(np.full((lay.rows, lay.cols), 3.25))
            populated = lay.probe_values(coarse)
            np.testing.assert_allclose(populated, 3.25)

    def test_up10_shape(self):
        lay = dp.ProbeLayout.uniform(10, 100, 100)
        assert lay.aggregate(np.zeros((100, 100))).shape == (10, 10)

    def test_partition_invariant(self):
        for lay in (dp.ProbeLayout.uniform(2, 12, 8), dp.ProbeLayout.mixture(40, 40)):
            assert lay.cell_counts.sum() == lay.rows * lay.cols
            assert (lay.cell_counts == lay.probe_sizes ** 2).all()

    def test_mass_consistency(self):
        rng = np.random.default_rng(3)
        frame = rng.uniform(0, 50, size=(40, 40))
        for lay in (dp.ProbeLayout.uniform(4, 40, 40), dp.ProbeLayout.mixture(40, 40)):
            coarse = lay.aggregate(frame)
            total = (lay.probe_values(coarse) * lay.cell_counts).sum()
            assert total == pytest.approx(frame.sum(), rel=1e-9)

    def test_mixture_projection_injective(self):
        lay = dp.ProbeLayout.mixture(60, 60)
        flat = lay.projection[:, 0] * lay.coarse_shape[1] + lay.projection[:, 1]
        assert len(np.unique(flat)) == lay.probe_count

    def test_mixture_has_three_probe_kinds(self):
        lay = dp.ProbeLayout.mixture(100, 100)
        kinds = sorted(set(lay.probe_sizes.tolist()))
        assert kinds == [2, 4, 10]
        shares = {k: (lay.probe_sizes == k).sum() / lay.probe_count for k in kinds}
        assert shares[2] > shares[4] > shares[10]

    def test_indivisible_grid_rejected(self):
        with pytest.raises(ConfigError):
            dp.ProbeLayout.uniform(10, 15, 20)


class TestWindows:
    def test_441_windows_on_milan_grid(self):
        frame = np.zeros((100, 100))
        wins = dp.make_windows(frame, window_side=80, offset=1)
        assert len(wins) == 441

    def test_single_window_when_equal(self):
        wins = dp.make_windows(np.zeros((8, 8)), window_side=8)
        assert len(wins) == 1 and wins[0][0] == (0, 0)

    def test_offset_enumeration(self):
        wins = dp.make_windows(np.zeros((10, 10)), window_side=8, offset=2)
        assert [o for o, _ in wins] == [(0, 0), (0, 2), (2, 0), (2, 2)]

    def test_window_larger_than_grid(self):
        with pytest.raises(ShapeError):
            dp.make_windows(np.zeros((6, 6)), window_side=8)

    def test_offset1_covers_every_cell(self):
        count = np.zeros((12, 12))
        for (r, c), win in dp.make_windows(np.zeros((12, 12)), window_side=5, offset=1):
            count[r : r + 5, c : c + 5] += 1
        assert (count > 0).all()


class TestNormalization:
    def test_inverse_pair(self, small_series):
        stats = dp.fit_norm(small_series, (0, 20))
        x = small_series.values[5]
        np.testing.assert_allclose(dp.denormalize(dp.normalize(x, stats), stats), x, atol=1e-12)

    def test_fitted_range_moments(self, small_series):
        stats = dp.fit_norm(small_series, (0, 20))
        z = dp.normalize(small_series.values[0:20], stats)
        assert abs(z.mean()) <= 1e-9
        assert abs(z.std() - 1.0) <= 1e-9

    def test_constant_series_rejected(self):
        series = dp.TrafficSeries(np.full((5, 8, 8), 2.0))
        with pytest.raises(DataError, match="constant"):
            dp.fit_norm(series, (0, 5))

    def test_stats_record_fitted_range(self, small_series):
        stats = dp.fit_norm(small_series, (0, 20))
        assert stats.fitted_on == "t[0:20)"


class TestDataset:
    def test_pair_count_with_single_window(self):
        series = dp.synth_series(8, 8, 10, hotspots=1, seed=1)
        layout = dp.ProbeLayout.uniform(2, 8, 8)
        train, val, test = dp.build_dataset(series, layout, S=3, window_side=8,
                                            offset=1, split=(8, 1, 1))
        assert len(train) + len(val) + len(test) == 8

    def test_degenerate_s1(self):
        series = dp.synth_series(8, 8, 6, hotspots=1, seed=1)
        layout = dp.ProbeLayout.uniform(2, 8, 8)
        train, _, _ = dp.build_dataset(series, layout, S=1, window_side=8,
                                       offset=1, split=(4, 1, 1))
        assert train[0].input.shape == (1, 4, 4)

    def test_supported_temporal_lengths(self, small_series):
        layout = dp.ProbeLayout.uniform(2, 16, 16)
        for s in (1, 3, 6):
            train, _, _ = dp.build_dataset(small_series, layout, S=s, window_side=16,
                                           offset=1, split=(20, 5, 5))
            assert train[0].input.shape[0] == s

    def test_temporal_integrity(self, small_series):
        layout = dp.ProbeLayout.uniform(2, 16, 16)
        win = 8
        train, _, _ = dp.build_dataset(small_series, layout, S=3, window_side=win,
                                       offset=4, split=(20, 5, 5))
        win_layout = layout.for_window(win)
        for pair in train[:20]:
            r, c = pair.window_origin
            t = pair.time_index
            np.testing.assert_array_equal(
                pair.target, small_series.values[t, r : r + win, c : c + win]
            )
            for j, tt in enumerate(range(t - 2, t + 1)):
                expected = win_layout.aggregate(small_series.values[tt, r : r + win, c : c + win])
                np.testing.assert_allclose(pair.input[j], expected, atol=1e-12)

    def test_empty_split_rejected(self, small_series):
        layout = dp.ProbeLayout.uniform(2, 16, 16)
        with pytest.raises(ConfigError, match="empty split"):
            dp.build_dataset(small_series, layout, S=3, window_side=16, split=(30, 0, 0))


class TestStitch:
    def test_single_full_window_identity(self):
        rng = np.random.default_rng(4)
        win = rng.uniform(0, 5, size=(6, 6))
        out = dp.stitch([((0, 0), win)], (6, 6))
        np.testing.assert_array_equal(out.values, win)

    def test_constant_windows(self):
        wins = [((r, c), np.full((5, 5), 2.5)) for r, c in
                dp.window_origins(8, 8, 5, 1)]
        out = dp.stitch(wins, (8, 8))
        np.testing.assert_allclose(out.values, 2.5)

    def test_half_overlap_average(self):
        a = np.full((4, 4), 1.0)
        b = np.full((4, 4), 3.0)
        out = dp.stitch([((0, 0), a), ((0, 2), b)], (4, 6))
        np.testing.assert_allclose(out.values[:, 2:4], 2.0)
        np.testing.assert_allclose(out.values[:, :2], 1.0)
        np.testing.assert_allclose(out.values[:, 4:], 3.0)

    def test_uncovered_cell_rejected(self):
        with pytest.raises(ShapeError, match="uncovered"):
            dp.stitch([((0, 0), np.ones((2, 2)))], (4, 4))

    def test_agreement_idempotence(self):
        rng = np.random.default_rng(5)
        full = rng.uniform(0, 9, size=(7, 7))
        wins = [((r, c), full[r : r + 4, c : c + 4]) for r, c in dp.window_origins(7, 7, 4, 1)]
        out = dp.stitch(wins, (7, 7))
        np.testing.assert_allclose(out.values, full, atol=1e-12)
