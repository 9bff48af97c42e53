"""
From binned slices to ADC maps.

The pipeline mirrors how binned free-breathing data is reconstructed:

1. assemble(): one slice per (bin, b, s) - duplicates averaged, shared slices
   counted in both bins, remaining gaps linearly interpolated
2. align_bins_si_shift(): rigid integer shift along the slice axis of every
   bin onto the end-expiration reference bin (a stand-in for non-rigid
   registration)
3. average_bins(): one volume per b-value
4. fit_adc(): voxelwise mono-exponential fit, ln S(b) = ln S0 - b * ADC

uncorrected_volumes() produces the comparison volume that ignores
respiration altogether.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .binning_optimizer import BinningResult
from .scan_model import (
    INTERPOLATED,
    Scan,
    ScanValidationError,
    VolumeKey,
    VolumeStack,
    averaged,
    format_b,
)
from .slice_sharing import SharingResult

logger = logging.getLogger(__name__)

EXPIRATION_LOW_T = "expiration_low_t"
EXPIRATION_HIGH_T = "expiration_high_t"
ORIENTATIONS = (EXPIRATION_LOW_T, EXPIRATION_HIGH_T)

DEFAULT_MAX_SHIFT = 5
SIGNAL_FLOOR = 1e-9

# b-value -> S x rows x cols volume
BValueVolumes = Dict[float, np.ndarray]


@dataclass(frozen=True)
class AssembledVolumes:
    """
    Per-(bin, b) volumes ready for alignment.

    Attributes:
        stack: One slice per (bin, b, s)
        reference_bin: End-expiration bin the others are aligned to
        shifts: Slice-axis shift applied to each (bin, b) volume (empty before alignment)
    """

    stack: VolumeStack
    reference_bin: int
    shifts: Mapping[Tuple[int, float], int] = field(default_factory=dict)

    def volume(self, bin_index: int, b: float) -> np.ndarray:
        return self.stack.volume(bin_index, b)


@dataclass(frozen=True)
class AdcMap:
    """
    Voxelwise mono-exponential fit.

    Attributes:
        adc: S x rows x cols, mm^2/s, clamped at 0, NaN where invalid
        s0: S x rows x cols fitted signal at b = 0, NaN where invalid
        valid_mask: Voxels where every b-value signal exceeded the floor
        adc_unclamped: Fitted ADC before clamping, for diagnostics
    """

    adc: np.ndarray
    s0: np.ndarray
    valid_mask: np.ndarray
    adc_unclamped: np.ndarray


def pick_reference_bin(binning: BinningResult, orientation: str = EXPIRATION_LOW_T) -> int:
    """End-expiration bin: 0 when expiration is the low navigator end, else k - 1."""
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {orientation!r}")
    return 0 if orientation == EXPIRATION_LOW_T else binning.k - 1


def _members_by_key(
    scan: Scan, binning: BinningResult, sharing: SharingResult
) -> Dict[VolumeKey, List[int]]:
    members: Dict[VolumeKey, List[int]] = {}
    for pos, rec in enumerate(scan.slices):
        members.setdefault((binning.labels[pos], rec.b, rec.s), []).append(pos)
    for assignment in sharing.assignments:
        pos = scan.position_of(assignment.slice_acq_index)
        rec = scan.slices[pos]
        if binning.labels[pos] != assignment.primary_bin:
            raise ScanValidationError(
                [f"shared slice acq_index={rec.acq_index} is not in bin {assignment.primary_bin}"]
            )
        members.setdefault((assignment.secondary_bin, rec.b, rec.s), []).append(pos)
    return members


def assemble(
    scan: Scan,
    binning: BinningResult,
    sharing: SharingResult,
    orientation: str = EXPIRATION_LOW_T,
) -> AssembledVolumes:
    """
    Build one slice per (bin, b, s).

    Member slices (primary plus shared) are averaged pixelwise. An empty
    interior slot becomes the mean of its s - 1 and s + 1 neighbors; an empty
    edge slot copies its single neighbor.

    Raises:
        ValueError: If the scan has no pixel data
        ScanValidationError: An empty edge slot whose single neighbor is also
            empty, two consecutive empty interior slots, or an empty volume
    """
    if not scan.has_pixels:
        raise ValueError("assembly needs pixel data for every slice")
    protocol = scan.protocol
    S = protocol.S
    members = _members_by_key(scan, binning, sharing)

    data: Dict[VolumeKey, np.ndarray] = {}
    provenance: Dict[VolumeKey, str] = {}
    for j in range(binning.k):
        for b in protocol.b_values:
            acquired = {}
            for s in range(S):
                positions = members.get((j, b, s))
                if positions:
                    stacked = np.stack([scan.slices[pos].pixels for pos in positions])
                    acquired[s] = stacked.mean(axis=0)
                    data[(j, b, s)] = acquired[s]
                    provenance[(j, b, s)] = averaged(len(positions))
            if not acquired:
                raise ScanValidationError([f"volume (bin={j}, b={format_b(b)}) has no slices"])

            for s in range(S):
                if s in acquired:
                    continue
                key = (j, b, s)
                if s == 0 or s == S - 1:
                    neighbor = 1 if s == 0 else S - 2
                    if neighbor not in acquired:
                        raise ScanValidationError(
                            [f"edge slot {key} and its neighbor are both empty; nothing to copy"]
                        )
                    data[key] = acquired[neighbor].copy()
                elif (s - 1) in acquired and (s + 1) in acquired:
                    data[key] = 0.5 * (acquired[s - 1] + acquired[s + 1])
                else:
                    raise ScanValidationError(
                        [f"slot {key} has an empty neighbor; consecutive gaps cannot be interpolated"]
                    )
                provenance[key] = INTERPOLATED

    stack = VolumeStack(protocol=protocol, k=binning.k, data=data, fill_provenance=provenance)
    interpolated = sum(1 for p in provenance.values() if p == INTERPOLATED)
    logger.info("assembled %d bins x %d b-values (%d slots interpolated)", binning.k, protocol.n_b, interpolated)
    return AssembledVolumes(stack=stack, reference_bin=pick_reference_bin(binning, orientation))


def shift_volume(volume: np.ndarray, shift: int) -> np.ndarray:
    """out[s] = volume[s - shift]; slices shifted in from outside repeat the nearest edge."""
    S = volume.shape[0]
    source = np.clip(np.arange(S) - shift, 0, S - 1)
    return volume[source]


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = float(np.sqrt(np.sum(a * a) * np.sum(b * b)))
    if denom == 0.0:
        return 0.0
    return float(np.sum(a * b)) / denom


def best_si_shift(floating: np.ndarray, reference: np.ndarray, max_shift: int = DEFAULT_MAX_SHIFT) -> int:
    """
    Integer slice-axis shift of ``floating`` maximizing normalized cross-correlation
    with ``reference``. Ties prefer the smallest |shift|, then the negative one.
    Zero-variance volumes get shift 0.
    """
    if np.std(floating) == 0 or np.std(reference) == 0:
        return 0
    # candidate order encodes the tie-break: 0, -1, +1, -2, +2, ...
    order = [0]
    for step in range(1, max_shift + 1):
        order.extend((-step, step))
    best_shift, best_score = 0, -np.inf
    for shift in order:
        score = _ncc(shift_volume(floating, shift), reference)
        if score > best_score + 1e-12:
            best_shift, best_score = shift, score
    return best_shift


def align_bins_si_shift(vols: AssembledVolumes, max_shift: int = DEFAULT_MAX_SHIFT) -> AssembledVolumes:
    """Shift every non-reference (bin, b) volume onto the reference bin along the slice axis."""
    stack = vols.stack
    protocol = stack.protocol
    data = dict(stack.data)
    shifts: Dict[Tuple[int, float], int] = {}
    for b in protocol.b_values:
        reference = stack.volume(vols.reference_bin, b)
        for j in range(stack.k):
            if j == vols.reference_bin:
                shifts[(j, b)] = 0
                continue
            volume = stack.volume(j, b)
            shift = best_si_shift(volume, reference, max_shift)
            shifts[(j, b)] = shift
            if shift:
                moved = shift_volume(volume, shift)
                for s in range(protocol.S):
                    data[(j, b, s)] = moved[s]
            logger.debug("bin %d, b=%s: SI shift %+d", j, format_b(b), shift)
    aligned = VolumeStack(protocol, stack.k, data, dict(stack.fill_provenance))
    return AssembledVolumes(aligned, vols.reference_bin, shifts)


def average_bins(vols: AssembledVolumes) -> BValueVolumes:
    """Equal-weight mean over bins for each b-value."""
    stack = vols.stack
    return {
        b: np.mean([stack.volume(j, b) for j in range(stack.k)], axis=0)
        for b in stack.protocol.b_values
    }


def uncorrected_volumes(scan: Scan) -> BValueVolumes:
    """Mean of every slice per (b, s), ignoring respiratory state."""
    if not scan.has_pixels:
        raise ValueError("uncorrected volumes need pixel data for every slice")
    protocol = scan.protocol
    shape = (protocol.S, protocol.rows, protocol.cols)
    sums = {b: np.zeros(shape) for b in protocol.b_values}
    counts = {b: np.zeros(protocol.S) for b in protocol.b_values}
    for rec in scan.slices:
        sums[rec.b][rec.s] += rec.pixels
        counts[rec.b][rec.s] += 1
    out = {}
    for b in protocol.b_values:
        with np.errstate(invalid="ignore", divide="ignore"):
            out[b] = sums[b] / counts[b][:, None, None]
    return out


def fit_adc(signals: Mapping[float, np.ndarray], b_values: Sequence[float]) -> AdcMap:
    """
    Least-squares fit of ln S(b) = ln S0 - b * ADC at every voxel.

    The design matrix is solved once with SVD-based lstsq for all voxels.
    Voxels with any signal <= 1e-9 (or NaN) are invalid; negative ADC is clamped to 0.

    Raises:
        ValueError: If fewer than 2 distinct b-values are given
    """
    b_values = [float(b) for b in b_values]
    if len(set(b_values)) < 2:
        raise ValueError(f"ADC fitting needs >= 2 distinct b-values, got {b_values}")
    stack = np.stack([np.asarray(signals[b], dtype=np.float64) for b in b_values])
    shape = stack.shape[1:]
    flat = stack.reshape(len(b_values), -1)

    with np.errstate(invalid="ignore"):
        valid = np.all(flat > SIGNAL_FLOOR, axis=0)
    log_signal = np.zeros_like(flat)
    log_signal[:, valid] = np.log(flat[:, valid])

    design = np.column_stack([np.ones(len(b_values)), -np.asarray(b_values)])
    coef, *_ = np.linalg.lstsq(design, log_signal, rcond=None)
    s0 = np.exp(coef[0])
    adc_raw = coef[1]

    adc = np.where(valid, np.maximum(adc_raw, 0.0), np.nan)
    s0 = np.where(valid, s0, np.nan)
    adc_raw = np.where(valid, adc_raw, np.nan)
    return AdcMap(
        adc=adc.reshape(shape),
        s0=s0.reshape(shape),
        valid_mask=valid.reshape(shape),
        adc_unclamped=adc_raw.reshape(shape),
    )


def roi_values(adc_map: AdcMap, mask: np.ndarray) -> np.ndarray:
    """Valid ADC values inside a boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != adc_map.adc.shape:
        raise ValueError(f"mask shape {mask.shape} does not match ADC map {adc_map.adc.shape}")
    return adc_map.adc[mask & adc_map.valid_mask]
