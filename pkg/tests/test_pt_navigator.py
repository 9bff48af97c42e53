"""Tests for Pilot Tone channel scoring and selection."""

import math

import numpy as np
import pytest

from respbin.pt_navigator import (
    MultiChannelSignal,
    best_channel,
    channel_snr,
    detrend_and_shift,
    load_pt_csv,
    median_filter_zero_padded,
    save_pt_csv,
    score_channel,
    select_best_channel,
    slice_navigator_values,
)
from respbin.scan_model import SliceParseError


def window_median_oracle(x, kernel):
    """Centered running median with zero padding, by sorting each window."""
    half = kernel // 2
    padded = np.concatenate([np.zeros(half), x, np.zeros(half)])
    return np.array([np.sort(padded[i : i + kernel])[half] for i in range(len(x))])


def sinusoid(n=200, period=40.0, amplitude=1.0):
    return amplitude * np.sin(2 * np.pi * np.arange(n) / period)


class TestDetrend:
    """Test linear detrending with min-shift."""

    def test_line_becomes_zero(self):
        out = detrend_and_shift(3.0 * np.arange(10) + 7.0)
        np.testing.assert_allclose(out, 0.0, atol=1e-9)

    def test_min_zero_and_idempotent(self):
        """Output minimum is 0 and a second pass changes nothing."""
        rng = np.random.default_rng(1)
        for _ in range(1000):
            x = rng.normal(size=int(rng.integers(2, 60))) * rng.uniform(0.1, 100)
            once = detrend_and_shift(x)
            assert abs(once.min()) <= 1e-12
            np.testing.assert_allclose(detrend_and_shift(once), once, atol=1e-9)

    def test_too_short(self):
        with pytest.raises(ValueError):
            detrend_and_shift([1.0])

    def test_non_finite(self):
        with pytest.raises(ValueError):
            detrend_and_shift([1.0, float("nan"), 2.0])


class TestMedianFilter:
    """Test the zero-padded running median."""

    def test_matches_window_sort_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            x = rng.normal(size=int(rng.integers(1, 40)))
            np.testing.assert_array_equal(median_filter_zero_padded(x, 5), window_median_oracle(x, 5))

    def test_constant_signal(self):
        """With kernel 5 every window has at least 3 samples inside, so the constant survives."""
        out = median_filter_zero_padded(np.full(10, 4.0), 5)
        assert out.tolist() == [4.0] * 10

    def test_short_signal_edges_take_zero_majority(self):
        out = median_filter_zero_padded(np.full(2, 4.0), 5)
        assert out.tolist() == [0.0, 0.0]

    @pytest.mark.parametrize("kernel", [0, 2, 4, -1])
    def test_even_or_non_positive_kernel(self, kernel):
        with pytest.raises(ValueError, match="odd"):
            median_filter_zero_padded(np.ones(5), kernel)


class TestChannelSnr:
    """Test the SNR formula."""

    def test_closed_form(self):
        assert channel_snr([2, 2, 2], [1, 1, 1]) == pytest.approx(math.log10(2.0), abs=1e-12)

    def test_noise_floor_clamp(self):
        assert channel_snr([2, 2], [2, 2]) == pytest.approx(math.log10(2.0 / 1e-12), abs=1e-9)

    def test_arithmetic_oracle(self):
        rng = np.random.default_rng(3)
        c = rng.uniform(0.5, 2.0, size=50)
        d = c + rng.normal(scale=0.1, size=50)
        expected = math.log10(np.mean(c) / np.mean(np.abs(c - d)))
        assert channel_snr(c, d) == pytest.approx(expected, abs=1e-12)

    def test_non_positive_mean_is_undefined(self):
        assert channel_snr([0.0, 0.0], [0.0, 0.0]) == -math.inf

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            channel_snr([1.0, 2.0], [1.0])


class TestSelectBestChannel:
    """Test channel selection."""

    def test_single_channel(self):
        multi = MultiChannelSignal(sinusoid())
        assert select_best_channel(multi).channel_index == 0

    def test_clean_beats_noisy(self):
        rng = np.random.default_rng(4)
        clean = sinusoid()
        noisy = clean + rng.normal(scale=0.5, size=clean.size)
        assert select_best_channel(MultiChannelSignal(np.column_stack([noisy, clean]))).channel_index == 1

    def test_drift_is_removed(self):
        """A drifting sinusoid still beats a flat noisy channel."""
        rng = np.random.default_rng(5)
        n = 200
        drifting = sinusoid(n) + 0.05 * np.arange(n)
        flat_noise = rng.normal(scale=0.5, size=n)
        multi = MultiChannelSignal(np.column_stack([flat_noise, drifting]))
        assert select_best_channel(multi).channel_index == 1

    def test_clean_channel_found_among_four(self):
        """On seeded 4-channel synthetics the constructed clean channel wins."""
        for seed in range(50):
            rng = np.random.default_rng(seed)
            clean_index = int(rng.integers(0, 4))
            base = sinusoid(240, period=float(rng.uniform(30, 60)))
            columns = []
            for c in range(4):
                if c == clean_index:
                    columns.append(base)
                else:
                    columns.append(base + rng.normal(scale=rng.uniform(0.3, 0.8), size=base.size))
            multi = MultiChannelSignal(np.column_stack(columns))
            assert select_best_channel(multi).channel_index == clean_index

    def test_permutation_and_scaling_invariance(self):
        rng = np.random.default_rng(6)
        base = sinusoid(120)
        columns = np.column_stack([base + rng.normal(scale=s, size=120) for s in (0.4, 0.05, 0.9)])
        best = select_best_channel(MultiChannelSignal(columns)).channel_index
        perm = [2, 0, 1]
        permuted = select_best_channel(MultiChannelSignal(columns[:, perm])).channel_index
        assert perm[permuted] == best
        assert select_best_channel(MultiChannelSignal(7.5 * columns)).channel_index == best

    def test_ties_go_to_lowest_index(self):
        scores = [score_channel(sinusoid(), i) for i in range(3)]
        assert best_channel(scores).channel_index == 0

    def test_empty_score_list(self):
        with pytest.raises(ValueError):
            best_channel([])


class TestSliceNavigatorValues:
    """Test nearest-sample lookup."""

    def test_nearest_sample(self):
        values = slice_navigator_values([1.0, 2.0, 3.0], [0.0, 10.0, 20.0], [-5.0, 4.0, 6.0, 25.0])
        assert values.tolist() == [1.0, 1.0, 2.0, 3.0]

    def test_midpoint_picks_earlier_sample(self):
        assert slice_navigator_values([1.0, 2.0], [0.0, 10.0], [5.0]).tolist() == [1.0]

    def test_single_sample(self):
        assert slice_navigator_values([4.0], [0.0], [1.0, 2.0]).tolist() == [4.0, 4.0]


class TestPtCsv:
    """Test PT CSV ingestion."""

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        multi = MultiChannelSignal(rng.normal(size=(20, 3)))
        path = tmp_path / "pt.csv"
        save_pt_csv(multi, path)
        loaded = load_pt_csv(path)
        np.testing.assert_array_equal(loaded.samples, multi.samples)
        assert path.read_text().splitlines()[0] == "sample_index,ch0,ch1,ch2"

    def test_bad_header(self, tmp_path):
        path = tmp_path / "pt.csv"
        path.write_text("i,a\n0,1\n1,2\n")
        with pytest.raises(SliceParseError):
            load_pt_csv(path)

    def test_non_finite_rejected(self, tmp_path):
        path = tmp_path / "pt.csv"
        path.write_text("sample_index,ch0\n0,1.0\n1,inf\n")
        with pytest.raises(ValueError, match="non-finite"):
            load_pt_csv(path)
