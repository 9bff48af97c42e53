"""
respbin - Respiratory-phase binning for free-breathing diffusion MRI.

Free-breathing DW-MRI slices are grouped into respiratory bins by their
Pilot Tone navigator value. respbin picks bin boundaries that minimize the
number of missing (bin, b-value, slice-position) combinations, shares
slices across adjacent bins to fill the gaps that remain, and takes the
result through volume assembly to ADC maps.

Example:
    from respbin import bin_scan, load_protocol, load_slices, share_scan

    protocol = load_protocol("protocol.json")
    scan = load_slices("slices.csv", protocol)
    binning = bin_scan(scan, k=6)
    sharing = share_scan(scan, binning, T=0.1)
    print(binning.total_cost, len(sharing.residual_missing))
"""

__version__ = "0.1.0"

from .binning_optimizer import (
    BinningResult,
    bin_scan,
    build_prefix,
    dp_optimal_bins,
    reconstruct_partition,
    sort_by_pt,
    standard_equal_count_bins,
)
from .eval_metrics import (
    MissingReport,
    PhaseRow,
    missing_report,
    phase_table,
    reduction_pct,
    two_proportion_ztest_one_sided,
)
from .pt_navigator import MultiChannelSignal, load_pt_csv, select_best_channel
from .scan_model import (
    Scan,
    ScanProtocol,
    ScanValidationError,
    SliceKey,
    SliceParseError,
    SliceRecord,
    VolumeStack,
    load_protocol,
    load_slices,
    save_slices,
)
from .sim_phantom import PRESETS, SimulatedAcquisition, simulate_preset
from .slice_sharing import OptimalK, SharingResult, select_optimal_k, share_scan
from .volume_pipeline import align_bins_si_shift, assemble, average_bins, fit_adc

__all__ = [
    # Scan data
    "Scan",
    "ScanProtocol",
    "SliceKey",
    "SliceRecord",
    "VolumeStack",
    "SliceParseError",
    "ScanValidationError",
    "load_protocol",
    "load_slices",
    "save_slices",
    # Navigator
    "MultiChannelSignal",
    "load_pt_csv",
    "select_best_channel",
    # Binning
    "BinningResult",
    "bin_scan",
    "build_prefix",
    "dp_optimal_bins",
    "reconstruct_partition",
    "sort_by_pt",
    "standard_equal_count_bins",
    # Sharing
    "OptimalK",
    "SharingResult",
    "select_optimal_k",
    "share_scan",
    # Volumes
    "assemble",
    "align_bins_si_shift",
    "average_bins",
    "fit_adc",
    # Evaluation
    "MissingReport",
    "PhaseRow",
    "missing_report",
    "phase_table",
    "reduction_pct",
    "two_proportion_ztest_one_sided",
    # Simulation
    "PRESETS",
    "SimulatedAcquisition",
    "simulate_preset",
    # Version
    "__version__",
]
