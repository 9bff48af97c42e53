"""Tests for evaluation metrics."""

import math

import numpy as np
import pytest

from respbin.binning_optimizer import bin_scan
from respbin.eval_metrics import (
    PhaseRow,
    RoiSample,
    cov,
    inter_subject_cov,
    load_roi_csv,
    missing_pct,
    missing_report,
    phase_table,
    reduction_pct,
    rmse,
    roi_statistics,
    two_proportion_ztest_one_sided,
    wasserstein_1d,
)
from respbin.scan_model import SliceParseError
from respbin.slice_sharing import share_scan


class TestMissingAccounting:
    """Test missing-slice percentages and reductions."""

    def test_reduction_examples(self):
        assert reduction_pct(44, 4) == pytest.approx(90.909, abs=1e-3)
        assert reduction_pct(68, 10) == pytest.approx(85.294, abs=1e-3)
        assert reduction_pct(5, 5) == 0.0

    @pytest.mark.parametrize("before,after", [(0, 0), (-1, 0), (5, 6), (5, -1)])
    def test_reduction_domain(self, before, after):
        with pytest.raises(ValueError):
            reduction_pct(before, after)

    def test_missing_pct(self):
        assert missing_pct(4, 3, 6, 42) == pytest.approx(0.529, abs=1e-3)

    def test_missing_report(self, keyed_scan_factory, protocol_factory):
        protocol = protocol_factory(S=2, b_values=(50, 400))
        scan = keyed_scan_factory(
            [0.0, 0.1, 0.2, 1.0, 1.1, 1.2],
            [(50, 0), (50, 1), (400, 0), (50, 0), (400, 0), (400, 1)],
            protocol,
        )
        binning = bin_scan(scan, 2, "standard")
        report = missing_report(binning, protocol, 2)
        assert report.expected_total == 8
        assert report.missing_count == 2
        assert report.per_bin == (1, 1)
        assert report.missing_pct == pytest.approx(25.0)


class TestZTest:
    """Test the one-sided pooled two-proportion z-test."""

    def test_against_formula(self):
        z, p = two_proportion_ztest_one_sided(8, 100, 2, 100)
        pooled = 10 / 200
        expected_z = (0.08 - 0.02) / math.sqrt(pooled * (1 - pooled) * (2 / 100))
        assert z == pytest.approx(expected_z, rel=1e-12)
        assert p == pytest.approx(0.5 * math.erfc(expected_z / math.sqrt(2)), rel=1e-9)
        assert p < 0.05

    def test_equal_proportions(self):
        z, p = two_proportion_ztest_one_sided(5, 50, 5, 50)
        assert z == 0.0
        assert p == pytest.approx(0.5)

    def test_degenerate_pool(self):
        assert two_proportion_ztest_one_sided(0, 10, 0, 20) == (0.0, 0.5)

    def test_direction(self):
        _, p_more = two_proportion_ztest_one_sided(20, 100, 5, 100)
        _, p_less = two_proportion_ztest_one_sided(5, 100, 20, 100)
        assert p_more < 0.5 < p_less

    @pytest.mark.parametrize("args", [(1, 0, 1, 5), (6, 5, 1, 5), (-1, 5, 1, 5)])
    def test_bad_counts(self, args):
        with pytest.raises(ValueError):
            two_proportion_ztest_one_sided(*args)

    def test_monotonic_in_x1(self):
        for n1, x2, n2 in [(30, 4, 50), (100, 50, 100), (7, 7, 7), (40, 0, 10)]:
            results = [two_proportion_ztest_one_sided(x1, n1, x2, n2) for x1 in range(n1 + 1)]
            z = [r[0] for r in results]
            p = [r[1] for r in results]
            assert all(b >= a for a, b in zip(z, z[1:])), (n1, x2, n2)
            assert all(b <= a for a, b in zip(p, p[1:])), (n1, x2, n2)


class TestAdcStatistics:
    """Test CoV, Wasserstein distance and RMSE."""

    def test_cov_uses_population_std(self):
        assert cov([1.0, 2.0, 3.0]) == pytest.approx(100 * math.sqrt(2 / 3) / 2)

    def test_cov_scale_invariant(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(0.5, 2.0, size=25)
        for scale in (1e-3, 0.5, 7.0, 1e4):
            assert cov(scale * x) == pytest.approx(cov(x), rel=1e-12)

    def test_cov_undefined(self):
        with pytest.raises(ValueError):
            cov([])
        with pytest.raises(ValueError):
            cov([-1.0, 1.0])

    def test_inter_subject_cov(self):
        assert inter_subject_cov([1e-3, 1e-3]) == 0.0
        with pytest.raises(ValueError):
            inter_subject_cov([1e-3])

    def test_wasserstein_matches_sorted_difference(self):
        """For equal sizes W1 is the mean gap between sorted samples."""
        rng = np.random.default_rng(20)
        for _ in range(50):
            n = int(rng.integers(1, 40))
            a, b = rng.normal(size=n), rng.normal(1.0, 2.0, size=n)
            expected = np.mean(np.abs(np.sort(a) - np.sort(b)))
            assert wasserstein_1d(a, b) == pytest.approx(expected, rel=1e-9, abs=1e-12)

    def test_wasserstein_unequal_sizes_match_cdf_integral(self):
        """W1 is the integral of |F_a - F_b| over the pooled support."""
        rng = np.random.default_rng(21)
        for _ in range(100):
            a = rng.normal(size=int(rng.integers(1, 30)))
            b = rng.normal(0.5, 1.5, size=int(rng.integers(1, 30)))
            grid = np.sort(np.concatenate([a, b]))
            cdf_a = np.searchsorted(np.sort(a), grid[:-1], side="right") / a.size
            cdf_b = np.searchsorted(np.sort(b), grid[:-1], side="right") / b.size
            expected = float(np.sum(np.abs(cdf_a - cdf_b) * np.diff(grid)))
            assert wasserstein_1d(a, b) == pytest.approx(expected, rel=1e-9, abs=1e-12)

    def test_wasserstein_is_a_metric(self):
        rng = np.random.default_rng(22)
        for _ in range(100):
            a, b, c = (rng.normal(rng.uniform(-1, 1), 1.0, size=int(rng.integers(1, 25))) for _ in range(3))
            assert wasserstein_1d(a, b) == pytest.approx(wasserstein_1d(b, a), rel=1e-12, abs=1e-15)
            assert wasserstein_1d(a, c) <= wasserstein_1d(a, b) + wasserstein_1d(b, c) + 1e-12

    def test_wasserstein_bounded_by_rmse(self):
        """Paired samples: W1 <= mean |a - b| <= RMSE."""
        rng = np.random.default_rng(23)
        for _ in range(100):
            n = int(rng.integers(1, 40))
            a, b = rng.normal(size=n), rng.normal(0.3, 1.2, size=n)
            assert wasserstein_1d(a, b) <= rmse(a, b) + 1e-12

    def test_wasserstein_shift(self):
        assert wasserstein_1d([0.0, 1.0, 2.0], [0.5, 1.5]) == pytest.approx(0.5)

    def test_wasserstein_empty(self):
        with pytest.raises(ValueError):
            wasserstein_1d([], [1.0])

    def test_rmse(self):
        assert rmse([1.0, 2.0], [1.0, 4.0]) == pytest.approx(math.sqrt(2.0))
        with pytest.raises(ValueError):
            rmse([1.0], [1.0, 2.0])


class TestPhaseTable:
    """Test the method comparison row."""

    def test_row_from_results(self, keyed_scan_factory):
        t = [0.0, 0.1, 0.55, 0.6, 1.0, 1.1]
        keys = [(50, 0), (50, 2), (50, 1), (50, 0), (50, 2), (50, 2)]
        scan = keyed_scan_factory(t, keys)
        standard = bin_scan(scan, 2, "standard")
        optimal = bin_scan(scan, 2)
        row = phase_table(standard, optimal, share_scan(scan, optimal), scan.protocol)
        assert row.expected_total == 6
        assert row.standard >= row.phase1 >= row.phase2

    def test_k_mismatch(self, keyed_scan_factory):
        scan = keyed_scan_factory([0.0, 1.0, 2.0], [(50, 0)] * 3)
        with pytest.raises(ValueError, match="differ in k"):
            phase_table(bin_scan(scan, 1), bin_scan(scan, 2), share_scan(scan, bin_scan(scan, 2)), scan.protocol)

    def test_as_dict(self):
        row = PhaseRow(k=6, expected_total=756, standard=44, phase1=10, phase2=4)
        data = row.as_dict()
        assert data["reduction_pct"] == pytest.approx(90.909, abs=1e-3)
        assert data["phase2_pct"] == pytest.approx(0.529, abs=1e-3)
        assert PhaseRow(1, 10, 0, 0, 0).as_dict()["reduction_pct"] is None


class TestRoiFiles:
    """Test ROI CSV loading and per-label statistics."""

    def test_load_groups_by_label(self, tmp_path):
        path = tmp_path / "roi.csv"
        path.write_text("label,value\nliver,0.001\nspleen,0.0008\nliver,0.0012\n\n")
        samples = load_roi_csv(path)
        assert [s.label for s in samples] == ["liver", "spleen"]
        assert samples[0].values.tolist() == [0.001, 0.0012]

    @pytest.mark.parametrize(
        "content",
        ["", "name,value\nliver,1\n", "label,value\nheart,1\n", "label,value\nliver,abc\n", "label,value\nliver\n"],
    )
    def test_malformed(self, tmp_path, content):
        path = tmp_path / "roi.csv"
        path.write_text(content)
        with pytest.raises(SliceParseError):
            load_roi_csv(path)

    def test_roi_sample_validation(self):
        with pytest.raises(ValueError):
            RoiSample("liver", np.array([]))
        with pytest.raises(ValueError):
            RoiSample("liver", np.array([1.0, np.nan]))

    def test_statistics_with_reference(self):
        samples = [RoiSample("liver", np.array([1.0, 3.0])), RoiSample("kidney", np.array([2.0, 2.0, 2.0]))]
        reference = [RoiSample("liver", np.array([1.0, 1.0])), RoiSample("kidney", np.array([2.0]))]
        rows = {row["label"]: row for row in roi_statistics(samples, reference)}
        assert set(rows) == {"liver", "kidney", "all"}
        assert rows["liver"]["cov_pct"] == pytest.approx(50.0)
        assert rows["liver"]["rmse"] == pytest.approx(math.sqrt(2.0))
        assert rows["kidney"]["rmse"] is None
        assert rows["kidney"]["wasserstein"] == 0.0
        assert rows["all"]["n"] == 5

    def test_statistics_single_label(self):
        rows = roi_statistics([RoiSample("liver", np.array([1.0, 1.0]))])
        assert [row["label"] for row in rows] == ["liver"]
        assert "wasserstein" not in rows[0]
