"""
Evaluation metrics: missing-slice accounting, significance test, ADC stability.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import norm, wasserstein_distance

from .binning_optimizer import BinningResult
from .scan_model import PathLike, ScanProtocol, SliceParseError
from .slice_sharing import SharingResult

logger = logging.getLogger(__name__)

ROI_LABELS = ("spleen", "liver", "kidney", "other")


@dataclass(frozen=True)
class MissingReport:
    """
    Missing-slice count against the B * k * S expected slices.

    Attributes:
        expected_total: B * k * S
        missing_count: (bin, b, s) triples with no slice
        missing_pct: 100 * missing_count / expected_total
        per_bin: Missing count of each bin
    """

    expected_total: int
    missing_count: int
    missing_pct: float
    per_bin: Tuple[int, ...]


@dataclass(frozen=True)
class RoiSample:
    """ADC values (mm^2/s) of the voxels in one region of interest."""

    label: str
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError(f"ROI '{self.label}' must hold a non-empty 1D set of values")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"ROI '{self.label}' contains non-finite values")
        object.__setattr__(self, "values", values)


def missing_report(
    result: Union[BinningResult, SharingResult], protocol: ScanProtocol, k: int
) -> MissingReport:
    """Count the gaps left after a binning (phase 1 / standard) or after sharing."""
    missing = result.missing
    expected = protocol.n_b * k * protocol.S
    per_bin = [0] * k
    for bin_index, _, _ in missing:
        per_bin[bin_index] += 1
    count = len(missing)
    return MissingReport(
        expected_total=expected,
        missing_count=count,
        missing_pct=100.0 * count / expected,
        per_bin=tuple(per_bin),
    )


def missing_pct(missing_count: int, n_b: int, k: int, S: int) -> float:
    return 100.0 * missing_count / (n_b * k * S)


def reduction_pct(before: int, after: int) -> float:
    """
    Percentage of missing slices removed: 100 * (before - after) / before.

    Raises:
        ValueError: If before <= 0 or after is outside [0, before]
    """
    if before <= 0:
        raise ValueError(f"reduction is undefined for before={before}")
    if not 0 <= after <= before:
        raise ValueError(f"after={after} must lie in [0, {before}]")
    return 100.0 * (before - after) / before


def two_proportion_ztest_one_sided(x1: int, n1: int, x2: int, n2: int) -> Tuple[float, float]:
    """
    Pooled two-proportion z-test, H1: x1/n1 > x2/n2.

    Returns:
        (z, p) with p the standard-normal upper tail at z
    """
    if n1 <= 0 or n2 <= 0:
        raise ValueError(f"sample sizes must be positive, got n1={n1}, n2={n2}")
    if not (0 <= x1 <= n1 and 0 <= x2 <= n2):
        raise ValueError(f"counts must lie in [0, n]: x1={x1}/{n1}, x2={x2}/{n2}")
    p1, p2 = x1 / n1, x2 / n2
    pooled = (x1 + x2) / (n1 + n2)
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    if se == 0.0:
        if p1 == p2:
            z = 0.0
        else:
            z = math.inf if p1 > p2 else -math.inf
    else:
        z = (p1 - p2) / se
    return z, float(norm.sf(z))


def cov(values: Sequence[float]) -> float:
    """
    Coefficient of variation in percent: 100 * population std / mean.

    Raises:
        ValueError: If values is empty or its mean is 0
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("CoV of an empty sample is undefined")
    mean = float(np.mean(x))
    if mean == 0.0:
        raise ValueError("CoV is undefined for a zero mean")
    return 100.0 * float(np.std(x)) / mean


def inter_subject_cov(roi_means: Sequence[float]) -> float:
    """CoV across per-subject ROI means; needs at least two subjects."""
    if len(roi_means) < 2:
        raise ValueError(f"inter-subject CoV needs >= 2 subjects, got {len(roi_means)}")
    return cov(roi_means)


def wasserstein_1d(a: Sequence[float], b: Sequence[float]) -> float:
    """First Wasserstein distance between two empirical distributions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("Wasserstein distance needs two non-empty samples")
    return float(wasserstein_distance(a, b))


def rmse(a: Sequence[float], b: Sequence[float]) -> float:
    """Root-mean-square difference of two voxel-aligned samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"RMSE needs equal lengths, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise ValueError("RMSE of empty samples is undefined")
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class PhaseRow:
    """One line of the missing-slice comparison across methods."""

    k: int
    expected_total: int
    standard: int
    phase1: int
    phase2: int

    @property
    def standard_pct(self) -> float:
        return 100.0 * self.standard / self.expected_total

    @property
    def phase1_pct(self) -> float:
        return 100.0 * self.phase1 / self.expected_total

    @property
    def phase2_pct(self) -> float:
        return 100.0 * self.phase2 / self.expected_total

    @property
    def phase1_reduction(self) -> Optional[float]:
        return reduction_pct(self.standard, self.phase1) if self.standard else None

    @property
    def reduction(self) -> Optional[float]:
        return reduction_pct(self.standard, self.phase2) if self.standard else None

    def as_dict(self) -> Dict[str, object]:
        return {
            "k": self.k,
            "expected_total": self.expected_total,
            "standard": self.standard,
            "standard_pct": self.standard_pct,
            "phase1": self.phase1,
            "phase1_pct": self.phase1_pct,
            "phase2": self.phase2,
            "phase2_pct": self.phase2_pct,
            "phase1_reduction_pct": self.phase1_reduction,
            "reduction_pct": self.reduction,
        }


def phase_table(
    standard: BinningResult, phase1: BinningResult, phase2: SharingResult, protocol: ScanProtocol
) -> PhaseRow:
    """Missing slices after equal-count binning, optimal binning, and sharing (same k)."""
    if standard.k != phase1.k:
        raise ValueError(f"standard (k={standard.k}) and phase 1 (k={phase1.k}) differ in k")
    return PhaseRow(
        k=phase1.k,
        expected_total=protocol.n_b * phase1.k * protocol.S,
        standard=standard.total_cost,
        phase1=phase1.total_cost,
        phase2=len(phase2.residual_missing),
    )


def load_roi_csv(path: PathLike) -> List[RoiSample]:
    """
    Read an ROI CSV (header ``label,value``, one voxel per row), grouped by label
    in order of first appearance.
    """
    reader = csv.reader(io.StringIO(Path(path).read_text(encoding="utf-8")))
    try:
        header = [cell.strip() for cell in next(reader)]
    except StopIteration:
        raise SliceParseError(f"{path}: empty file") from None
    if header != ["label", "value"]:
        raise SliceParseError(f"{path}: header must be label,value, got {','.join(header)}")
    grouped: Dict[str, List[float]] = {}
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 2:
            raise SliceParseError(f"{path}:{line_no}: expected 2 fields, got {len(row)}")
        label = row[0].strip()
        if label not in ROI_LABELS:
            raise SliceParseError(f"{path}:{line_no}: unknown ROI label {label!r}")
        try:
            grouped.setdefault(label, []).append(float(row[1]))
        except ValueError as e:
            raise SliceParseError(f"{path}:{line_no}: {e}") from e
    return [RoiSample(label, np.array(values)) for label, values in grouped.items()]


def roi_statistics(
    samples: Sequence[RoiSample],
    reference: Optional[Sequence[RoiSample]] = None,
) -> List[Dict[str, object]]:
    """
    Per-label CoV, mean and size, plus an ``all`` row pooling every label.

    With a reference set (same labels), also the Wasserstein distance and,
    when the two ROIs have equal voxel counts, the RMSE against it.
    """
    by_label: Dict[str, np.ndarray] = {s.label: s.values for s in samples}
    ref_by_label: Mapping[str, np.ndarray] = {s.label: s.values for s in (reference or [])}
    labels = list(by_label)
    if len(labels) > 1:
        by_label["all"] = np.concatenate([by_label[label] for label in labels])
        if ref_by_label and all(label in ref_by_label for label in labels):
            ref_by_label = dict(ref_by_label)
            ref_by_label["all"] = np.concatenate([ref_by_label[label] for label in labels])

    rows = []
    for label, values in by_label.items():
        row: Dict[str, object] = {
            "label": label,
            "n": int(values.size),
            "mean": float(np.mean(values)),
            "cov_pct": cov(values),
        }
        ref = ref_by_label.get(label)
        if ref is not None:
            row["wasserstein"] = wasserstein_1d(values, ref)
            row["rmse"] = rmse(values, ref) if ref.shape == values.shape else None
        rows.append(row)
    return rows
