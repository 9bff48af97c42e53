"""
Optimal respiratory binning.

Slices are sorted by navigator value and cut into K contiguous, non-empty
bins. A (bin, b, s) combination with no slice is a missing slice; the
optimizer minimizes their total with a bottom-up dynamic program over

    F(k, n) = min_i  F(k - 1, i) + R(i, n)

where F(k, n) is the best cost for the first n sorted slices in k bins and
R(i, n) counts the (b, s) keys absent from sorted slices [i, n). R is read
from a prefix-count array in O(B * S) per query.

The equal-count baseline (every bin gets N/K slices) is computed here too,
with the same missing-slice accounting.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .scan_model import Scan, ScanProtocol, ScanValidationError, SliceKey

logger = logging.getLogger(__name__)

METHODS = ("dp", "standard")

MissingSlot = Tuple[int, float, int]

# Large enough to never win a min, small enough that INFEASIBLE + R cannot overflow.
INFEASIBLE = np.iinfo(np.int64).max // 4


@dataclass(frozen=True)
class SortedScanView:
    """
    Slices in ascending navigator order (ties by acq_index).

    Attributes:
        protocol: Scan geometry
        order: Positions into ``scan.slices``, in sorted order
        acq_order: acq_index of each sorted slice
        t_sorted: Non-decreasing navigator values
        keys_sorted: (b, s) key of each sorted slice
    """

    protocol: ScanProtocol
    order: np.ndarray
    acq_order: np.ndarray
    t_sorted: np.ndarray
    keys_sorted: Tuple[SliceKey, ...]

    @property
    def N(self) -> int:
        return int(self.order.size)

    def key_codes(self) -> np.ndarray:
        """Flat (b_index * S + s) code for each sorted slice."""
        S = self.protocol.S
        return np.array(
            [self.protocol.b_index(key.b) * S + key.s for key in self.keys_sorted],
            dtype=np.int64,
        )


@dataclass(frozen=True)
class PrefixCoverage:
    """counts[i, b, s]: slices with key (b, s) among the first i sorted slices."""

    counts: np.ndarray

    @property
    def N(self) -> int:
        return int(self.counts.shape[0] - 1)

    @property
    def flat(self) -> np.ndarray:
        return self.counts.reshape(self.counts.shape[0], -1)


@dataclass(frozen=True)
class DpTables:
    """
    Filled dynamic-programming tables.

    Rows are indexed by the number of bins: row 0 is the zero-bin sentinel
    (only cost[0, 0] is feasible) and row 1 is the single-bin case, so
    cost[1, n] == R(0, n). Cells that admit no non-empty partition hold
    INFEASIBLE; arg holds -1 there.
    """

    cost: np.ndarray
    arg: np.ndarray

    @property
    def k_max(self) -> int:
        return int(self.cost.shape[0] - 1)

    @property
    def N(self) -> int:
        return int(self.cost.shape[1] - 1)

    def best_cost(self, k: int) -> int:
        """Minimum missing count for all N slices in k bins."""
        value = int(self.cost[k, self.N])
        if value >= INFEASIBLE:
            raise ValueError(f"no partition of {self.N} slices into {k} non-empty bins")
        return value


@dataclass(frozen=True)
class BinningResult:
    """
    A partition of the sorted slices into k contiguous bins.

    Attributes:
        k: Number of bins
        boundaries: k - 1 strictly increasing cut indices into the sorted order;
            bin j holds sorted slices [boundaries[j-1], boundaries[j])
        labels: Primary bin of each slice, aligned with ``scan.slices``
        missing: (bin, b, s) triples with zero coverage, sorted
        total_cost: len(missing)
        protocol: Scan geometry
        acq_indices: acq_index of each slice, aligned with ``labels``
        keys: (b, s) key of each slice, aligned with ``labels``
        method: "dp" or "standard"
    """

    k: int
    boundaries: Tuple[int, ...]
    labels: Tuple[int, ...]
    missing: Tuple[MissingSlot, ...]
    total_cost: int
    protocol: ScanProtocol
    acq_indices: Tuple[int, ...]
    keys: Tuple[SliceKey, ...]
    method: str = "dp"

    @property
    def N(self) -> int:
        return len(self.labels)

    def bin_sizes(self) -> List[int]:
        return np.bincount(np.asarray(self.labels, dtype=np.int64), minlength=self.k).tolist()

    def members(self, bin_index: int) -> List[int]:
        """Slice positions whose primary bin is bin_index."""
        return [pos for pos, label in enumerate(self.labels) if label == bin_index]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "method": self.method,
            "boundaries": list(self.boundaries),
            "labels": list(self.labels),
            "acq_indices": list(self.acq_indices),
            "missing": [{"bin": j, "b": b, "s": s} for j, b, s in self.missing],
            "total_cost": self.total_cost,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], scan: Scan) -> "BinningResult":
        """
        Rebuild a result written by to_dict() against the scan it was computed on.

        The ledger is recounted from the labels and must match the stored one.
        Labels must follow the boundaries once the scan is sorted by navigator value.

        Raises:
            ScanValidationError: If the file does not describe this scan
        """
        try:
            k = int(data["k"])
            labels = tuple(int(v) for v in data["labels"])
            boundaries = tuple(int(v) for v in data["boundaries"])
            stored_cost = int(data["total_cost"])
        except (KeyError, TypeError, ValueError) as e:
            raise ScanValidationError([f"malformed binning result: {e!r}"]) from e
        if len(labels) != scan.N:
            raise ScanValidationError(
                [f"binning has {len(labels)} labels but the scan has {scan.N} slices"]
            )
        acq = tuple(int(v) for v in data.get("acq_indices", scan.acq_indices().tolist()))
        if acq != tuple(scan.acq_indices().tolist()):
            raise ScanValidationError(["binning acq_indices do not match the scan"])
        if any(not (0 <= label < k) for label in labels):
            raise ScanValidationError([f"labels must lie in [0, {k - 1}]"])
        cuts = np.asarray(boundaries, dtype=np.int64)
        if cuts.size != k - 1 or np.any(cuts <= 0) or np.any(cuts >= scan.N) or np.any(np.diff(cuts) <= 0):
            raise ScanValidationError([f"boundaries must be {k - 1} strictly increasing cuts in (0, {scan.N})"])
        sorted_labels = np.asarray(labels, dtype=np.int64)[sort_by_pt(scan).order]
        if not np.array_equal(sorted_labels, np.searchsorted(cuts, np.arange(scan.N), side="right")):
            raise ScanValidationError(["labels disagree with the boundaries over the navigator-sorted slices"])
        keys = tuple(scan.keys())
        missing = recount_missing(labels, keys, k, scan.protocol)
        if len(missing) != stored_cost:
            raise ScanValidationError(
                [f"stored total_cost {stored_cost} != recount {len(missing)}"]
            )
        return cls(
            k=k,
            boundaries=boundaries,
            labels=labels,
            missing=tuple(missing),
            total_cost=len(missing),
            protocol=scan.protocol,
            acq_indices=acq,
            keys=keys,
            method=str(data.get("method", "dp")),
        )


def sort_by_pt(scan: Scan) -> SortedScanView:
    """
    Stable ascending sort by navigator value; equal values keep acq_index order.

    Raises:
        ValueError: If the scan is empty
    """
    if scan.N == 0:
        raise ValueError("cannot sort an empty scan")
    t = scan.t_values()
    acq = scan.acq_indices()
    order = np.lexsort((acq, t))
    keys = scan.keys()
    return SortedScanView(
        protocol=scan.protocol,
        order=order,
        acq_order=acq[order],
        t_sorted=t[order],
        keys_sorted=tuple(keys[pos] for pos in order),
    )


def build_prefix(view: SortedScanView, protocol: Optional[ScanProtocol] = None) -> PrefixCoverage:
    """Prefix counts of (b, s) keys over the sorted slices, shape (N+1) x B x S."""
    protocol = protocol or view.protocol
    B, S = protocol.n_b, protocol.S
    onehot = np.zeros((view.N + 1, B * S), dtype=np.int32)
    if view.N:
        onehot[np.arange(1, view.N + 1), view.key_codes()] = 1
    counts = np.cumsum(onehot, axis=0, dtype=np.int32).reshape(view.N + 1, B, S)
    return PrefixCoverage(counts)


def range_missing(prefix: PrefixCoverage, i: int, n: int) -> int:
    """
    R(i, n): number of (b, s) keys with no slice among sorted slices [i, n).

    Raises:
        ValueError: Unless 0 <= i <= n <= N
    """
    if not (0 <= i <= n <= prefix.N):
        raise ValueError(f"range [{i}, {n}) invalid for N={prefix.N}")
    flat = prefix.flat
    return int(np.count_nonzero(flat[n] == flat[i]))


def range_missing_column(prefix: PrefixCoverage, n: int) -> np.ndarray:
    """R(i, n) for every i in 0..n, one O(B * S) query per i."""
    flat = prefix.flat
    return np.count_nonzero(flat[: n + 1] == flat[n], axis=1).astype(np.int64)


def dp_optimal_bins(view: SortedScanView, prefix: PrefixCoverage, k_max: int) -> DpTables:
    """
    Fill F(k, n) and the optimal last cut for every k <= k_max and n <= N.

    Ties between cut positions go to the smallest i. One fill answers every
    k up to k_max.

    Raises:
        ValueError: If k_max < 1 or k_max > N
    """
    N = prefix.N
    if k_max < 1:
        raise ValueError(f"k must be >= 1, got {k_max}")
    if k_max > N:
        raise ValueError(f"k_max={k_max} exceeds the number of slices N={N}")

    cost = np.full((k_max + 1, N + 1), INFEASIBLE, dtype=np.int64)
    arg = np.full((k_max + 1, N + 1), -1, dtype=np.int64)
    cost[0, 0] = 0

    # n outer so each R column is computed once and shared by every k.
    for n in range(1, N + 1):
        right = range_missing_column(prefix, n)[:n]
        for k in range(1, min(k_max, n) + 1):
            # bins 1..k-1 need at least k-1 slices, so i >= k-1
            candidates = cost[k - 1, k - 1 : n] + right[k - 1 :]
            best = int(np.argmin(candidates))
            cost[k, n] = candidates[best]
            arg[k, n] = best + k - 1

    logger.debug("filled DP tables for N=%d, k_max=%d", N, k_max)
    return DpTables(cost=cost, arg=arg)


def recount_missing(
    labels: Sequence[int],
    keys: Sequence[SliceKey],
    k: int,
    protocol: ScanProtocol,
) -> List[MissingSlot]:
    """From-scratch list of (bin, b, s) triples that no slice covers."""
    S = protocol.S
    covered = np.zeros((k, protocol.n_b, S), dtype=bool)
    for label, key in zip(labels, keys):
        covered[label, protocol.b_index(key.b), key.s] = True
    bins, b_idx, s_idx = np.nonzero(~covered)
    missing = [
        (int(j), protocol.b_values[int(bi)], int(s)) for j, bi, s in zip(bins, b_idx, s_idx)
    ]
    missing.sort()
    return missing


def _result_from_boundaries(
    boundaries: Sequence[int], k: int, scan: Scan, view: SortedScanView, method: str
) -> BinningResult:
    sorted_labels = np.searchsorted(np.asarray(boundaries, dtype=np.int64), np.arange(view.N), side="right")
    labels = np.empty(view.N, dtype=np.int64)
    labels[view.order] = sorted_labels
    keys = tuple(scan.keys())
    missing = recount_missing(labels.tolist(), keys, k, scan.protocol)
    return BinningResult(
        k=k,
        boundaries=tuple(int(c) for c in boundaries),
        labels=tuple(labels.tolist()),
        missing=tuple(missing),
        total_cost=len(missing),
        protocol=scan.protocol,
        acq_indices=tuple(scan.acq_indices().tolist()),
        keys=keys,
        method=method,
    )


def reconstruct_partition(
    tables: DpTables, k: int, scan: Scan, view: SortedScanView
) -> BinningResult:
    """
    Walk the arg table back from (k, N) to recover the k - 1 cuts.

    Raises:
        ValueError: If k < 1, k > N or k exceeds the filled tables
    """
    N = view.N
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > N:
        raise ValueError(f"k={k} exceeds the number of slices N={N}")
    if k > tables.k_max:
        raise ValueError(f"k={k} exceeds the filled tables (k_max={tables.k_max})")

    cuts = []
    n = N
    for kk in range(k, 1, -1):
        n = int(tables.arg[kk, n])
        cuts.append(n)
    boundaries = cuts[::-1]

    result = _result_from_boundaries(boundaries, k, scan, view, "dp")
    expected = tables.best_cost(k)
    if result.total_cost != expected:
        raise RuntimeError(
            f"reconstructed partition costs {result.total_cost}, tables say {expected}"
        )
    return result


def standard_equal_count_bins(view: SortedScanView, scan: Scan, k: int) -> BinningResult:
    """
    Equal-count baseline: contiguous runs of floor(N/k) or ceil(N/k) slices,
    the first N mod k bins taking the larger size.

    Raises:
        ValueError: If k < 1 or k > N
    """
    N = view.N
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > N:
        raise ValueError(f"k={k} exceeds the number of slices N={N}")
    q, r = divmod(N, k)
    sizes = [q + 1] * r + [q] * (k - r)
    boundaries = np.cumsum(sizes)[:-1].tolist()
    return _result_from_boundaries(boundaries, k, scan, view, "standard")


def bin_scan(scan: Scan, k: int, method: str = "dp") -> BinningResult:
    """Sort, then bin with the optimizer ("dp") or the equal-count baseline ("standard")."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    view = sort_by_pt(scan)
    if method == "standard":
        return standard_equal_count_bins(view, scan, k)
    tables = dp_optimal_bins(view, build_prefix(view, scan.protocol), k)
    return reconstruct_partition(tables, k, scan, view)
