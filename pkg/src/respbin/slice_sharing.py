"""
Probabilistic slice sharing.

After rigid binning some (bin, b, s) combinations are still empty. A slice
acquired with the same (b, s) in a neighboring bin can be shared: it stays
in its own bin and also fills the gap.

Each bin gets a Gaussian over navigator values. A slice's membership in bin j
is the weighted posterior

    p(i, j) = w_j * PD(i, j) / sum_k w_k * PD(i, k)

with w_j the bin's slice count, and its share metric toward gap bin b is
SM = p(i, b) / p(i, a) for its own bin a. Gaps are filled greedily by best
share metric above a threshold T; consecutive gaps and edge gaps are then
force-filled so later interpolation always has two neighbors.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .binning_optimizer import (
    BinningResult,
    MissingSlot,
    SortedScanView,
    build_prefix,
    dp_optimal_bins,
    reconstruct_partition,
    sort_by_pt,
)
from .parallel import ordered_map
from .scan_model import Scan, ScanValidationError, SliceKey

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD_T = 0.1
DEFAULT_MISSING_FRACTION = 0.02
SM_GUARD = 1e-300


@dataclass(frozen=True)
class BinGaussianModel:
    """Navigator-value Gaussian of one bin, weighted by its slice count."""

    mean: float
    std: float
    weight: int

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"std must be > 0, got {self.std}")
        if self.weight < 1:
            raise ValueError(f"weight must be >= 1, got {self.weight}")


@dataclass(frozen=True)
class Membership:
    """probs[i, j] = p(i, j); rows are aligned with ``scan.slices``."""

    probs: np.ndarray

    @property
    def k(self) -> int:
        return int(self.probs.shape[1])


@dataclass(frozen=True)
class SharedAssignment:
    """
    A slice assigned to its primary bin and to one adjacent bin.

    Attributes:
        slice_acq_index: acq_index of the shared slice
        primary_bin: Bin from rigid binning (bin a)
        secondary_bin: Gap bin it fills (bin b), |a - b| == 1
        share_metric: p(i, b) / p(i, a)
        forced: Filled by the consecutive/edge guarantee with SM <= T
    """

    slice_acq_index: int
    primary_bin: int
    secondary_bin: int
    share_metric: float
    forced: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "acq_index": self.slice_acq_index,
            "primary_bin": self.primary_bin,
            "secondary_bin": self.secondary_bin,
            "sm": self.share_metric,
            "forced": self.forced,
        }


@dataclass(frozen=True)
class SharingResult:
    """
    Outcome of slice sharing.

    Attributes:
        assignments: Shared slices, in fill order
        residual_missing: Gaps still empty after sharing, sorted
        threshold: Share-metric threshold T
        infeasible: Gaps the consecutive/edge guarantee could not fill
            (no unused candidate existed)
    """

    assignments: Tuple[SharedAssignment, ...]
    residual_missing: Tuple[MissingSlot, ...]
    threshold: float
    infeasible: Tuple[MissingSlot, ...] = ()

    @property
    def missing(self) -> Tuple[MissingSlot, ...]:
        return self.residual_missing

    def to_dict(self) -> Dict[str, Any]:
        return {
            "threshold": self.threshold,
            "assignments": [a.to_dict() for a in self.assignments],
            "residual_missing": [{"bin": j, "b": b, "s": s} for j, b, s in self.residual_missing],
            "infeasible": [{"bin": j, "b": b, "s": s} for j, b, s in self.infeasible],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], binning: BinningResult) -> "SharingResult":
        """
        Rebuild a sharing result and check it against the binning it refines.

        Every shared slice must fill one missing slot of that binning, and no
        slice may be shared twice.

        Raises:
            ScanValidationError: If assignments or the residual ledger are inconsistent
        """
        try:
            assignments = tuple(
                SharedAssignment(
                    slice_acq_index=int(item["acq_index"]),
                    primary_bin=int(item["primary_bin"]),
                    secondary_bin=int(item["secondary_bin"]),
                    share_metric=float(item["sm"]),
                    forced=bool(item.get("forced", False)),
                )
                for item in data["assignments"]
            )
            residual = tuple(
                sorted((int(m["bin"]), float(m["b"]), int(m["s"])) for m in data["residual_missing"])
            )
            infeasible = tuple(
                sorted((int(m["bin"]), float(m["b"]), int(m["s"])) for m in data.get("infeasible", []))
            )
            threshold = float(data["threshold"])
        except (KeyError, TypeError, ValueError) as e:
            raise ScanValidationError([f"malformed sharing result: {e!r}"]) from e

        position = {acq: pos for pos, acq in enumerate(binning.acq_indices)}
        filled = set()
        gaps = set(binning.missing)
        seen: Set[int] = set()
        problems = []
        for a in assignments:
            pos = position.get(a.slice_acq_index)
            if pos is None:
                problems.append(f"shared slice acq_index={a.slice_acq_index} is not in the binning")
                continue
            if binning.labels[pos] != a.primary_bin:
                problems.append(f"acq_index={a.slice_acq_index}: primary bin mismatch")
            if abs(a.primary_bin - a.secondary_bin) != 1:
                problems.append(f"acq_index={a.slice_acq_index}: bins are not adjacent")
            key = binning.keys[pos]
            slot = (a.secondary_bin, key.b, key.s)
            if a.slice_acq_index in seen:
                problems.append(f"acq_index={a.slice_acq_index} fills more than one gap")
            seen.add(a.slice_acq_index)
            if slot not in gaps:
                problems.append(f"acq_index={a.slice_acq_index}: {slot} is not a missing slot of the binning")
            elif slot in filled:
                problems.append(f"{slot} is filled more than once")
            filled.add(slot)
        expected = tuple(sorted(gaps - filled))
        if expected != residual:
            problems.append("residual_missing does not match binning.missing minus shared fills")
        if problems:
            raise ScanValidationError(problems)
        return cls(assignments, residual, threshold, infeasible)


@dataclass(frozen=True)
class OptimalK:
    """
    Result of the automatic bin-count search.

    Attributes:
        k: Chosen number of bins
        binning: Optimal rigid binning at k
        sharing: Slice sharing at k
        fallback: True when no k met the missing-fraction rule and k=1 was returned
        residual_fractions: Residual missing fraction for k = 1..k_max
    """

    k: int
    binning: BinningResult
    sharing: SharingResult
    fallback: bool
    residual_fractions: Tuple[float, ...]


def _t_by_position(view: SortedScanView) -> np.ndarray:
    t = np.empty(view.N, dtype=np.float64)
    t[view.order] = view.t_sorted
    return t


def sigma_floor(t: np.ndarray) -> float:
    span = float(np.max(t) - np.min(t)) if t.size else 0.0
    return 1e-6 * span if span > 0 else 1e-12


def fit_bin_gaussians(view: SortedScanView, result: BinningResult) -> List[BinGaussianModel]:
    """
    Mean, population std (floored) and slice count of each bin.

    Raises:
        ValueError: If a bin has no slices
    """
    t = _t_by_position(view)
    labels = np.asarray(result.labels, dtype=np.int64)
    floor = sigma_floor(t)
    models = []
    for j in range(result.k):
        members = t[labels == j]
        if members.size == 0:
            raise ValueError(f"bin {j} is empty")
        models.append(
            BinGaussianModel(
                mean=float(np.mean(members)),
                std=max(float(np.std(members)), floor),
                weight=int(members.size),
            )
        )
    return models


def membership(view: SortedScanView, models: Sequence[BinGaussianModel]) -> Membership:
    """Weighted Gaussian membership of every slice in every bin, evaluated in log space."""
    if not models:
        raise ValueError("need at least one bin model")
    t = _t_by_position(view)[:, None]
    means = np.array([m.mean for m in models])
    stds = np.array([m.std for m in models])
    log_w = np.log(np.array([m.weight for m in models], dtype=np.float64))

    log_joint = log_w + norm.logpdf(t, loc=means, scale=stds)
    log_total = logsumexp(log_joint, axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        probs = np.exp(log_joint - log_total)

    dead = ~np.isfinite(log_total[:, 0])
    if np.any(dead):
        nearest = np.argmin(np.abs(t[dead] - means), axis=1)
        probs[dead] = 0.0
        probs[np.flatnonzero(dead), nearest] = 1.0
    probs.setflags(write=False)
    return Membership(probs)


def _key_index(result: BinningResult) -> Dict[SliceKey, List[int]]:
    index: Dict[SliceKey, List[int]] = defaultdict(list)
    for pos, key in enumerate(result.keys):
        index[key].append(pos)
    return index


def _candidate_positions(
    result: BinningResult, slot: MissingSlot, index: Optional[Dict[SliceKey, List[int]]] = None
) -> List[int]:
    bin_index, b, s = slot
    index = index if index is not None else _key_index(result)
    neighbors = {j for j in (bin_index - 1, bin_index + 1) if 0 <= j < result.k}
    return [pos for pos in index.get(SliceKey(float(b), int(s)), []) if result.labels[pos] in neighbors]


def find_candidates(result: BinningResult, missing: MissingSlot) -> List[int]:
    """
    acq_index of every slice that could fill a gap: same (b, s), primary bin
    adjacent to the gap's bin.

    Raises:
        ValueError: If the slot is not one of the result's missing slices
    """
    slot = (int(missing[0]), float(missing[1]), int(missing[2]))
    if slot not in set(result.missing):
        raise ValueError(f"{slot} is not a missing slot of this binning")
    return [result.acq_indices[pos] for pos in _candidate_positions(result, slot)]


def share_metric(probs: Membership, i: int, a: int, b: int) -> float:
    """
    p(i, b) / p(i, a) for the slice in row i, own bin a, gap bin b.

    Raises:
        ValueError: If a and b are not adjacent
    """
    if abs(a - b) != 1:
        raise ValueError(f"bins {a} and {b} are not adjacent")
    return float(probs.probs[i, b]) / max(float(probs.probs[i, a]), SM_GUARD)


class _Filler:
    """Bookkeeping for one fill_missing() run."""

    def __init__(self, result: BinningResult, probs: Membership, T: float):
        self.result = result
        self.T = T
        self.used: Set[int] = set()
        self.assignments: List[SharedAssignment] = []
        self.residual: Set[MissingSlot] = set(result.missing)
        index = _key_index(result)
        self.ranked: Dict[MissingSlot, List[Tuple[float, int]]] = {}
        for slot in result.missing:
            scored = [
                (share_metric(probs, pos, result.labels[pos], slot[0]), pos)
                for pos in _candidate_positions(result, slot, index)
            ]
            scored.sort(key=lambda item: (-item[0], item[1]))
            self.ranked[slot] = scored

    def best_available(self, slot: MissingSlot) -> Optional[Tuple[float, int]]:
        for sm, pos in self.ranked[slot]:
            if pos not in self.used:
                return sm, pos
        return None

    def fill(self, slot: MissingSlot, candidate: Tuple[float, int]) -> None:
        sm, pos = candidate
        self.used.add(pos)
        self.residual.discard(slot)
        self.assignments.append(
            SharedAssignment(
                slice_acq_index=self.result.acq_indices[pos],
                primary_bin=self.result.labels[pos],
                secondary_bin=slot[0],
                share_metric=sm,
                forced=not sm > self.T,
            )
        )


def fill_missing(result: BinningResult, probs: Membership, T: float = DEFAULT_THRESHOLD_T) -> SharingResult:
    """
    Fill gaps with shared slices from adjacent bins.

    1. Gaps are visited by descending best share metric (ties by (bin, b, s));
       each takes its best unused candidate if that candidate's SM > T.
    2. In every (bin, b) volume, each remaining pair of consecutive gaps is
       broken by force-filling the gap whose best unused candidate has the
       higher SM (the lower s on ties), until no fixable pair is left.
    3. Remaining gaps at s = 0 or s = S - 1 are force-filled when a candidate exists.

    A candidate fills at most one gap. Gaps the guarantees could not fill are
    reported in ``infeasible``.

    Raises:
        ValueError: If T is negative
    """
    if T < 0:
        raise ValueError(f"share-metric threshold T must be >= 0, got {T}")
    S = result.protocol.S
    filler = _Filler(result, probs, T)

    def initial_best(slot: MissingSlot) -> float:
        ranked = filler.ranked[slot]
        return ranked[0][0] if ranked else -np.inf

    for slot in sorted(result.missing, key=lambda slot: (-initial_best(slot), slot)):
        candidate = filler.best_available(slot)
        if candidate is not None and candidate[0] > T:
            filler.fill(slot, candidate)
    thresholded = len(filler.assignments)

    infeasible: Set[MissingSlot] = set()
    volumes = sorted({(j, b) for j, b, _ in result.missing})
    for j, b in volumes:
        blocked: Set[int] = set()
        while True:
            pair_start = next(
                (
                    s
                    for s in range(S - 1)
                    if s not in blocked
                    and (j, b, s) in filler.residual
                    and (j, b, s + 1) in filler.residual
                ),
                None,
            )
            if pair_start is None:
                break
            lo, hi = (j, b, pair_start), (j, b, pair_start + 1)
            cand_lo, cand_hi = filler.best_available(lo), filler.best_available(hi)
            if cand_lo is None and cand_hi is None:
                blocked.add(pair_start)
                infeasible.update((lo, hi))
                continue
            if cand_hi is None or (cand_lo is not None and cand_lo[0] >= cand_hi[0]):
                filler.fill(lo, cand_lo)
            else:
                filler.fill(hi, cand_hi)

    for slot in sorted(filler.residual):
        if slot[2] in (0, S - 1):
            candidate = filler.best_available(slot)
            if candidate is None:
                infeasible.add(slot)
            else:
                filler.fill(slot, candidate)

    infeasible &= filler.residual
    if infeasible:
        logger.warning(
            "%d gap(s) left unfilled by the consecutive/edge guarantee: no candidate slice",
            len(infeasible),
        )
    logger.info(
        "slice sharing: %d gaps, %d filled above T=%g, %d forced, %d remain",
        len(result.missing),
        thresholded,
        T,
        len(filler.assignments) - thresholded,
        len(filler.residual),
    )
    return SharingResult(
        assignments=tuple(filler.assignments),
        residual_missing=tuple(sorted(filler.residual)),
        threshold=float(T),
        infeasible=tuple(sorted(infeasible)),
    )


def share_binning(view: SortedScanView, binning: BinningResult, T: float = DEFAULT_THRESHOLD_T) -> SharingResult:
    """Fit bin Gaussians, compute membership and fill gaps for one binning."""
    models = fit_bin_gaussians(view, binning)
    return fill_missing(binning, membership(view, models), T)


def share_scan(scan: Scan, binning: BinningResult, T: float = DEFAULT_THRESHOLD_T) -> SharingResult:
    return share_binning(sort_by_pt(scan), binning, T)


def select_optimal_k(
    scan: Scan,
    k_max: int,
    T: float = DEFAULT_THRESHOLD_T,
    threshold: float = DEFAULT_MISSING_FRACTION,
) -> OptimalK:
    """
    Largest k in 1..k_max whose residual missing fraction after sharing,
    residual / (B * k * S), is strictly below ``threshold``.

    One DP fill serves every k. When no k qualifies, k = 1 is returned with
    ``fallback`` set.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"missing-fraction threshold must lie in (0, 1), got {threshold}")
    view = sort_by_pt(scan)
    tables = dp_optimal_bins(view, build_prefix(view, scan.protocol), k_max)
    combos = scan.protocol.combos

    def run(k: int) -> Tuple[BinningResult, SharingResult]:
        binning = reconstruct_partition(tables, k, scan, view)
        return binning, share_binning(view, binning, T)

    runs = ordered_map(run, range(1, k_max + 1))
    fractions = tuple(len(sharing.residual_missing) / (combos * k) for k, (_, sharing) in enumerate(runs, 1))
    for k, fraction in enumerate(fractions, 1):
        logger.debug("k=%d: residual missing fraction %.4f", k, fraction)

    qualifying = [k for k, fraction in enumerate(fractions, 1) if fraction < threshold]
    if qualifying:
        k = max(qualifying)
        fallback = False
    else:
        k = 1
        fallback = True
        logger.warning(
            "no k in 1..%d keeps missing slices below %.2f%%; falling back to k=1",
            k_max,
            100 * threshold,
        )
    binning, sharing = runs[k - 1]
    return OptimalK(k, binning, sharing, fallback, fractions)
