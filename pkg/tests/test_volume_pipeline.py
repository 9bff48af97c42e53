"""Tests for slice assembly, SI alignment, bin averaging and ADC fitting."""

import numpy as np
import pytest

from respbin.binning_optimizer import bin_scan
from respbin.scan_model import INTERPOLATED, ScanValidationError, VolumeStack
from respbin.sim_phantom import default_phantom, roi_masks
from respbin.slice_sharing import SharedAssignment, SharingResult
from respbin.volume_pipeline import (
    EXPIRATION_HIGH_T,
    AssembledVolumes,
    align_bins_si_shift,
    assemble,
    average_bins,
    best_si_shift,
    fit_adc,
    pick_reference_bin,
    roi_values,
    shift_volume,
    uncorrected_volumes,
)

B_VALUES = (50.0, 400.0, 800.0)


def no_sharing(binning):
    return SharingResult((), binning.missing, 0.1)


def flat(value, shape=(2, 2)):
    return np.full(shape, float(value))


@pytest.fixture
def pixel_scan(keyed_scan_factory, protocol_factory):
    """Build a 2x2-pixel scan from (t, s, value) triples at b=50."""

    def _create(rows, S):
        protocol = protocol_factory(S=S, rows=2, cols=2)
        t = [r[0] for r in rows]
        keys = [(50, r[1]) for r in rows]
        pixels = [flat(r[2]) for r in rows]
        return keyed_scan_factory(t, keys, protocol, pixels)

    return _create


class TestAssemble:
    """Test per-(bin, b, s) slice assembly."""

    def test_duplicates_averaged_and_shared_counted_twice(self, pixel_scan):
        scan = pixel_scan(
            [
                (0.0, 0, 1), (0.1, 1, 2), (0.2, 2, 3), (0.3, 0, 5),
                (1.0, 0, 10), (1.1, 2, 20), (1.2, 2, 30), (1.3, 0, 40),
            ],
            S=3,
        )
        binning = bin_scan(scan, 2, "standard")
        assert binning.missing == ((1, 50.0, 1),)
        sharing = SharingResult((SharedAssignment(1, 0, 1, 0.8),), (), 0.1)

        vols = assemble(scan, binning, sharing)
        stack = vols.stack
        assert stack.volume(0, 50)[:, 0, 0].tolist() == [3.0, 2.0, 3.0]
        assert stack.volume(1, 50)[:, 0, 0].tolist() == [25.0, 2.0, 25.0]
        assert stack.fill_provenance[(0, 50.0, 0)] == "averaged(2)"
        assert stack.fill_provenance[(0, 50.0, 1)] == "acquired"
        assert stack.fill_provenance[(1, 50.0, 1)] == "acquired"
        assert vols.reference_bin == 0

    def test_interior_gap_interpolated(self, pixel_scan):
        scan = pixel_scan([(0.0, 0, 2), (0.1, 2, 6)], S=3)
        binning = bin_scan(scan, 1)
        stack = assemble(scan, binning, no_sharing(binning)).stack
        assert stack.volume(0, 50)[:, 1, 1].tolist() == [2.0, 4.0, 6.0]
        assert stack.fill_provenance[(0, 50.0, 1)] == INTERPOLATED

    def test_edge_gap_copies_neighbor(self, pixel_scan):
        scan = pixel_scan([(0.0, 1, 5), (0.1, 2, 7)], S=3)
        binning = bin_scan(scan, 1)
        stack = assemble(scan, binning, no_sharing(binning)).stack
        assert stack.volume(0, 50)[:, 0, 0].tolist() == [5.0, 5.0, 7.0]
        assert stack.fill_provenance[(0, 50.0, 0)] == INTERPOLATED

    def test_consecutive_gaps_rejected(self, pixel_scan):
        scan = pixel_scan([(0.0, 0, 1), (0.1, 3, 1)], S=4)
        binning = bin_scan(scan, 1)
        with pytest.raises(ScanValidationError, match="consecutive"):
            assemble(scan, binning, no_sharing(binning))

    def test_edge_without_neighbor_rejected(self, pixel_scan):
        # slots 0 and 1 empty: the edge has nothing to copy
        scan = pixel_scan([(0.0, 2, 1), (0.1, 3, 1)], S=4)
        binning = bin_scan(scan, 1)
        with pytest.raises(ScanValidationError, match="edge slot .* and its neighbor are both empty"):
            assemble(scan, binning, no_sharing(binning))

    def test_empty_volume_rejected(self, keyed_scan_factory, protocol_factory):
        protocol = protocol_factory(S=1, b_values=(50, 400), rows=2, cols=2)
        scan = keyed_scan_factory([0.0], [(50, 0)], protocol, [flat(1)])
        binning = bin_scan(scan, 1)
        with pytest.raises(ScanValidationError, match="no slices"):
            assemble(scan, binning, no_sharing(binning))

    def test_metadata_only_scan(self, keyed_scan_factory):
        scan = keyed_scan_factory([0.0, 1.0], [(50, 0), (50, 1)])
        binning = bin_scan(scan, 1)
        with pytest.raises(ValueError, match="pixel data"):
            assemble(scan, binning, no_sharing(binning))

    def test_shared_slice_must_match_primary_bin(self, pixel_scan):
        scan = pixel_scan([(0.0, 0, 1), (0.1, 1, 1), (1.0, 0, 1), (1.1, 1, 1)], S=2)
        binning = bin_scan(scan, 2, "standard")
        sharing = SharingResult((SharedAssignment(0, 1, 0, 0.5),), (), 0.1)
        with pytest.raises(ScanValidationError, match="not in bin 1"):
            assemble(scan, binning, sharing)

    def test_reference_bin_follows_orientation(self, pixel_scan):
        scan = pixel_scan([(0.0, 0, 1), (1.0, 0, 1), (2.0, 0, 1)], S=1)
        binning = bin_scan(scan, 3)
        assert pick_reference_bin(binning) == 0
        assert pick_reference_bin(binning, EXPIRATION_HIGH_T) == 2
        with pytest.raises(ValueError):
            pick_reference_bin(binning, "sideways")


class TestShift:
    """Test slice-axis shifting and shift search."""

    def test_shift_volume_repeats_edges(self):
        vol = np.arange(5, dtype=float)[:, None, None]
        assert shift_volume(vol, 1)[:, 0, 0].tolist() == [0, 0, 1, 2, 3]
        assert shift_volume(vol, -2)[:, 0, 0].tolist() == [2, 3, 4, 4, 4]
        assert shift_volume(vol, 0)[:, 0, 0].tolist() == [0, 1, 2, 3, 4]

    @pytest.mark.parametrize("displacement", [-3, -1, 0, 2, 3])
    def test_recovers_known_displacement(self, displacement):
        rng = np.random.default_rng(10)
        reference = rng.normal(size=(12, 4, 4))
        floating = shift_volume(reference, displacement)
        assert best_si_shift(floating, reference, max_shift=5) == -displacement

    def test_equal_scores_prefer_the_negative_shift(self):
        # shifts -1 and +1 both line the reference peak up with one of the two floating peaks
        reference = np.array([0.0, 0.0, 1.0, 0.0, 0.0])[:, None, None]
        floating = np.array([0.0, 1.0, 0.0, 1.0, 0.0])[:, None, None]
        assert best_si_shift(floating, reference, max_shift=2) == -1

    def test_flat_volume_gets_zero(self):
        rng = np.random.default_rng(11)
        assert best_si_shift(np.ones((6, 2, 2)), rng.normal(size=(6, 2, 2))) == 0

    def test_align_bins(self, protocol_factory):
        rng = np.random.default_rng(12)
        protocol = protocol_factory(S=10, rows=3, cols=3)
        reference = rng.normal(size=(10, 3, 3))
        moved = shift_volume(reference, 2)
        data, provenance = {}, {}
        for s in range(10):
            for j, vol in ((0, reference), (1, moved)):
                data[(j, 50.0, s)] = vol[s]
                provenance[(j, 50.0, s)] = "acquired"
        vols = AssembledVolumes(VolumeStack(protocol, 2, data, provenance), reference_bin=0)

        aligned = align_bins_si_shift(vols)
        assert aligned.shifts == {(0, 50.0): 0, (1, 50.0): -2}
        np.testing.assert_array_equal(aligned.volume(1, 50)[:8], reference[:8])
        np.testing.assert_array_equal(aligned.volume(0, 50), reference)
        assert aligned.stack.fill_provenance == provenance


class TestAverageAndUncorrected:
    """Test bin averaging and the respiration-blind comparison."""

    def test_average_bins(self, protocol_factory):
        protocol = protocol_factory(S=1, rows=2, cols=2)
        data = {(0, 50.0, 0): flat(1), (1, 50.0, 0): flat(3)}
        provenance = {key: "acquired" for key in data}
        vols = AssembledVolumes(VolumeStack(protocol, 2, data, provenance), reference_bin=0)
        out = average_bins(vols)
        assert list(out) == [50.0]
        np.testing.assert_array_equal(out[50.0], np.full((1, 2, 2), 2.0))

    def test_uncorrected(self, pixel_scan):
        scan = pixel_scan([(0.0, 0, 1), (5.0, 0, 3), (2.0, 1, 7)], S=3)
        out = uncorrected_volumes(scan)[50.0]
        assert out[:2, 0, 0].tolist() == [2.0, 7.0]
        assert np.isnan(out[2]).all()

    def test_uncorrected_needs_pixels(self, keyed_scan_factory):
        with pytest.raises(ValueError):
            uncorrected_volumes(keyed_scan_factory([0.0], [(50, 0)]))


class TestFitAdc:
    """Test the voxelwise mono-exponential fit."""

    def test_exact_recovery(self):
        s0 = np.array([[100.0, 800.0], [1000.0, 50.0]])
        adc = np.array([[1.1e-3, 0.8e-3], [2.0e-3, 3.0e-3]])
        signals = {b: s0 * np.exp(-b * adc) for b in B_VALUES}
        fit = fit_adc(signals, B_VALUES)
        np.testing.assert_allclose(fit.adc, adc, rtol=1e-9)
        np.testing.assert_allclose(fit.s0, s0, rtol=1e-9)
        assert fit.valid_mask.all()

    def test_constant_signal(self):
        fit = fit_adc({b: np.full((1, 3), 42.0) for b in B_VALUES}, B_VALUES)
        np.testing.assert_allclose(fit.adc, 0.0, atol=1e-15)

    def test_matches_closed_form_regression(self):
        """Slope of ln S on b, from sums, equals -ADC."""
        rng = np.random.default_rng(13)
        values = rng.uniform(10, 1000, size=(3, 20))
        fit = fit_adc({b: values[i] for i, b in enumerate(B_VALUES)}, B_VALUES)
        b = np.array(B_VALUES)
        y = np.log(values)
        slope = ((b - b.mean())[:, None] * (y - y.mean(axis=0))).sum(axis=0) / ((b - b.mean()) ** 2).sum()
        np.testing.assert_allclose(fit.adc_unclamped, -slope, rtol=1e-9, atol=1e-15)
        np.testing.assert_allclose(fit.adc, np.maximum(-slope, 0.0), rtol=1e-9, atol=1e-15)

    def test_rising_signal_clamped(self):
        signals = {50.0: np.array([1.0]), 400.0: np.array([2.0]), 800.0: np.array([4.0])}
        fit = fit_adc(signals, B_VALUES)
        assert fit.adc[0] == 0.0
        assert fit.adc_unclamped[0] < 0

    def test_invalid_voxels(self):
        signals = {b: np.array([100.0, 100.0, 100.0]) for b in B_VALUES}
        signals[400.0] = np.array([100.0, 0.0, np.nan])
        fit = fit_adc(signals, B_VALUES)
        assert fit.valid_mask.tolist() == [True, False, False]
        assert np.isnan(fit.adc[1:]).all()
        assert np.isnan(fit.s0[1:]).all()

    def test_needs_two_b_values(self):
        with pytest.raises(ValueError):
            fit_adc({50.0: np.ones(2)}, (50.0, 50.0))

    def test_roi_values_skip_invalid(self):
        signals = {b: np.array([[100.0, 100.0], [100.0, 100.0]]) for b in B_VALUES}
        signals[800.0] = np.array([[50.0, 0.0], [100.0, 100.0]])
        fit = fit_adc(signals, B_VALUES)
        mask = np.array([[True, True], [False, False]])
        values = roi_values(fit, mask)
        assert values.shape == (1,)
        with pytest.raises(ValueError):
            roi_values(fit, np.ones((3, 3), dtype=bool))


class TestPipelineOnSimulation:
    """Run the whole volume chain on a simulated scan."""

    @pytest.mark.slow
    def test_mild_motion_keeps_truth(self, synthetic_scan):
        """One-slice motion leaves the uncorrected ROI medians near the phantom ADCs."""
        sim = synthetic_scan("calm")
        fit = fit_adc(uncorrected_volumes(sim.scan), sim.scan.protocol.b_values)
        truth = sim.phantom.truth()
        for label, mask in roi_masks(sim.phantom).items():
            assert np.median(roi_values(fit, mask)) == pytest.approx(truth[label]["adc"], rel=0.2)


class TestAdcRecoveryOnPhantom:
    """Fit the static phantom directly."""

    def test_noiseless_voxelwise(self):
        phantom = default_phantom()
        _, true_adc = phantom.parameter_volumes()
        fit = fit_adc({b: phantom.signal(b) for b in B_VALUES}, B_VALUES)
        np.testing.assert_allclose(fit.adc, true_adc, rtol=1e-6)

    def test_noisy_roi_means(self):
        """1% of S0 Gaussian noise keeps 64-voxel ROI means within 5%."""
        phantom = default_phantom()
        s0, _ = phantom.parameter_volumes()
        rng = np.random.default_rng(42)
        signals = {b: phantom.signal(b) + 0.01 * s0 * rng.standard_normal(s0.shape) for b in B_VALUES}
        fit = fit_adc(signals, B_VALUES)
        truth = phantom.truth()
        for label, mask in roi_masks(phantom).items():
            assert roi_values(fit, mask).mean() == pytest.approx(truth[label]["adc"], rel=0.05)
