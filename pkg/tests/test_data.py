import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsdiffusion.data import (
    MaskSpec,
    Normalizer,
    gen_mask,
    gen_masks,
    gen_sines,
    gen_trend_season,
    load_csv,
    read_grid_csv,
    train_test_split,
    write_grid_csv,
)


def _runs(mask_col):
    """Lengths of consecutive missing runs in a 1-D observed mask."""
    runs, cur = [], 0
    for v in mask_col:
        if not v:
            cur += 1
        elif cur:
            runs.append(cur)
            cur = 0
    if cur:
        runs.append(cur)
    return runs


class TestSines:
    def test_reproducible(self):
        np.testing.assert_array_equal(gen_sines(10, 24, 3, 7), gen_sines(10, 24, 3, 7))
        assert not np.array_equal(gen_sines(10, 24, 3, 7), gen_sines(10, 24, 3, 8))

    @given(st.integers(1, 20), st.integers(2, 40), st.integers(1, 4), st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_unit_range(self, n, tau, d, seed):
        x = gen_sines(n, tau, d, seed)
        assert x.shape == (n, tau, d)
        assert x.min() >= 0.0 and x.max() <= 1.0

    def test_bin_aligned_single_dominant_bin(self):
        x = gen_sines(200, 24, 2, 3, bin_aligned=True)
        amp = np.abs(np.fft.rfft(x - x.mean(axis=1, keepdims=True), axis=1))[:, 1:, :]
        top2 = np.sort(amp, axis=1)[:, -2:, :]
        assert np.all(top2[:, 1] >= 5 * top2[:, 0])

    def test_frequency_range_validated(self):
        with pytest.raises(ValueError):
            gen_sines(4, 24, 1, 0, f_lo=0.3, f_hi=0.2)

    def test_shared_channels_are_correlated(self):
        x = gen_sines(300, 24, 2, 0, shared=True, lag=np.pi / 4)
        c = x - x.mean(axis=1, keepdims=True)
        corr = (c[..., 0] * c[..., 1]).sum() / np.sqrt((c[..., 0] ** 2).sum() * (c[..., 1] ** 2).sum())
        # over whole periods the correlation of two phase-shifted sines is cos(lag)
        assert abs(corr - np.cos(np.pi / 4)) < 0.1


class TestTrendSeason:
    def test_components_sum_to_series(self):
        b = gen_trend_season(20, 64, 0)
        np.testing.assert_array_equal(b.trend + b.season + b.noise, b.series)

    def test_pure_season_support(self):
        b = gen_trend_season(10, 64, 1, noise_std=0.0, trend_scale=0.0)
        spec = np.abs(np.fft.rfft(b.series[..., 0], axis=1))
        for i in range(10):
            support = set(np.flatnonzero(spec[i, 1:] > 1e-9 * spec[i].max()) + 1)
            assert support == set(b.frequencies[i, :, 0].tolist())

    def test_trend_is_cubic(self):
        b = gen_trend_season(5, 32, 2)
        assert np.abs(np.diff(b.trend, n=4, axis=1)).max() < 1e-10

    def test_short_window_rejected(self):
        with pytest.raises(ValueError):
            gen_trend_season(2, 8, 0)

    def test_normalized_range(self):
        b = gen_trend_season(50, 64, 3)
        assert b.series.min() >= -1e-12 and b.series.max() <= 1 + 1e-12


class TestCsv:
    def test_exact_length_single_window(self, tmp_path, rng):
        grid = rng.normal(size=(24, 3))
        write_grid_csv(tmp_path / "a.csv", grid)
        w, _ = load_csv(tmp_path / "a.csv", 24, stride=1)
        assert w.shape == (1, 24, 3)

    def test_window_count_with_stride(self, tmp_path, rng):
        write_grid_csv(tmp_path / "a.csv", rng.normal(size=(100, 2)))
        w, _ = load_csv(tmp_path / "a.csv", 24, stride=5)
        assert len(w) == (100 - 24) // 5 + 1

    def test_constant_column(self, tmp_path, rng, caplog):
        grid = np.column_stack([rng.normal(size=30), np.full(30, 7.0)])
        write_grid_csv(tmp_path / "a.csv", grid)
        with caplog.at_level(logging.WARNING):
            w, _ = load_csv(tmp_path / "a.csv", 10)
        assert np.all(w[..., 1] == 0.5)
        assert "zero range" in caplog.text

    @pytest.mark.parametrize("kind", ["minmax", "zscore"])
    def test_normalize_round_trip(self, rng, kind):
        x = rng.normal(3.0, 10.0, size=(200, 4))
        norm = Normalizer.fit(x, kind)
        np.testing.assert_allclose(norm.denormalize(norm.normalize(x)), x, atol=1e-9)
        back = Normalizer.from_dict(norm.to_dict())
        np.testing.assert_array_equal(back.normalize(x), norm.normalize(x))

    def test_minmax_range(self, rng):
        x = rng.normal(size=(100, 3))
        y = Normalizer.fit(x).normalize(x)
        np.testing.assert_allclose(y.min(axis=0), 0.0)
        np.testing.assert_allclose(y.max(axis=0), 1.0)

    def test_non_numeric(self, tmp_path):
        (tmp_path / "a.csv").write_text("a,b\n1,2\n3,x\n")
        with pytest.raises(ValueError, match="non-numeric"):
            read_grid_csv(tmp_path / "a.csv")

    def test_too_few_rows(self, tmp_path, rng):
        write_grid_csv(tmp_path / "a.csv", rng.normal(size=(5, 1)))
        with pytest.raises(ValueError, match="fewer"):
            load_csv(tmp_path / "a.csv", 10)

    def test_write_read_round_trip(self, tmp_path, rng):
        grid = rng.normal(size=(7, 2))
        write_grid_csv(tmp_path / "a.csv", grid, ["x", "y"], fmt="%.17g")
        header, back = read_grid_csv(tmp_path / "a.csv")
        assert header == ["x", "y"]
        np.testing.assert_array_equal(back, grid)

    def test_split_sizes(self, rng):
        x = np.arange(100).reshape(100, 1, 1)
        tr, te = train_test_split(x, rng)
        assert len(tr) == 90 and len(te) == 10
        assert sorted(np.concatenate([tr, te]).ravel()) == list(range(100))


class TestMasks:
    def test_ratio_large_grid(self):
        m = gen_mask(MaskSpec("geometric", 0.5, mean_missing_length=5), 10_000, 1, 0)
        assert 0.45 <= 1 - m.mean() <= 0.55

    @pytest.mark.parametrize("r", [0.2, 0.7])
    def test_ratio_other_levels(self, r):
        m = gen_mask(MaskSpec("geometric", r), 20_000, 2, 1)
        assert abs((1 - m.mean()) - r) < 0.1 * r + 0.02

    def test_missing_run_lengths_are_geometric(self):
        m = gen_mask(MaskSpec("geometric", 0.5, mean_missing_length=5), 50_000, 1, 2)
        runs = np.array(_runs(m[:, 0]))
        # geometric with success probability 1/5 has mean 5 and variance 20
        assert abs(runs.mean() - 5.0) < 4 * np.sqrt(20.0 / len(runs))

    def test_reproducible(self):
        spec = MaskSpec("geometric", 0.3)
        np.testing.assert_array_equal(gen_mask(spec, 48, 3, 5), gen_mask(spec, 48, 3, 5))

    def test_forecast_semantics(self):
        m = gen_mask(MaskSpec("forecast", horizon=24), 48, 3, 0)
        assert m[:24].all() and not m[24:].any()

    def test_forecast_full_horizon_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            m = gen_mask(MaskSpec("forecast", horizon=24), 24, 2, 0)
        assert m.all()
        assert "nothing to predict" in caplog.text

    @pytest.mark.parametrize("r", [0.0, 1.0, -0.1, 1.5])
    def test_invalid_ratio(self, r):
        with pytest.raises(ValueError):
            MaskSpec("geometric", r)

    def test_all_missing_windows_are_rare(self, caplog):
        masks = gen_masks(MaskSpec("geometric", 0.5, mean_missing_length=5), 1000, 24, 1, 3)
        n_empty = int((~masks.reshape(1000, -1).any(axis=1)).sum())
        if n_empty:
            logging.getLogger(__name__).warning("%d all-missing windows out of 1000", n_empty)
        assert n_empty < 50
