"""
respbin CLI - command-line interface for respiratory binning of DW-MRI scans.

Every subcommand reads and writes the documented file formats only, so the
steps compose: simulate -> select-channel -> bin -> share -> assemble ->
adc-fit -> evaluate / evaluate-adc. Each run also writes a JSON manifest
(inputs with checksums, configuration, package versions, seed) next to its
outputs.
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy
from rich.console import Console
from rich.table import Table

from . import __version__
from .binning_optimizer import METHODS, BinningResult, bin_scan
from .eval_metrics import (
    PhaseRow,
    RoiSample,
    inter_subject_cov,
    load_roi_csv,
    missing_report,
    phase_table,
    reduction_pct,
    roi_statistics,
    two_proportion_ztest_one_sided,
)
from .parallel import THREADS_ENV, ordered_map
from .pt_navigator import (
    DEFAULT_KERNEL,
    ChannelScore,
    best_channel,
    load_pt_csv,
    score_channels,
    slice_navigator_values,
)
from .scan_model import (
    PathLike,
    Scan,
    ScanProtocol,
    ScanValidationError,
    SliceParseError,
    atomic_write_json,
    atomic_write_text,
    attach_slice_pixels,
    load_protocol,
    load_slices,
    load_volume_stack,
    read_volume_file,
    save_slices,
    save_volume_stack,
    with_t_values,
    write_volume_file,
)
from .sim_phantom import PRESETS, RoiBox, SimulatedAcquisition, roi_masks, simulate_preset, write_simulation
from .slice_sharing import (
    DEFAULT_MISSING_FRACTION,
    DEFAULT_THRESHOLD_T,
    SharingResult,
    select_optimal_k,
    share_scan,
)
from .volume_pipeline import (
    DEFAULT_MAX_SHIFT,
    EXPIRATION_LOW_T,
    ORIENTATIONS,
    AdcMap,
    AssembledVolumes,
    align_bins_si_shift,
    assemble,
    average_bins,
    fit_adc,
    roi_values,
    uncorrected_volumes,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2
EXIT_USAGE = 64

ALIGN_MODES = ("si_shift", "none")
ROI_FRAMES = ("reference", "static")
TRACE_HEADER = ("acq_index", "t", "primary_bin", "secondary_bin")
ADC_QUANTITY = "adc_mm2_per_s"

# The missing-slice benchmark runs on SYNC_PRESET; the ADC comparison runs
# on MOTION_PRESET against the shallow-breathing CALM_PRESET.
SYNC_PRESET = "synchronized"
MOTION_PRESET = "deep"
CALM_PRESET = "calm"


@dataclass(frozen=True)
class RunConfig:
    """
    Validated settings of one CLI run.

    Attributes:
        command: Subcommand name
        inputs: Input role -> path
        k: Number of bins (bin)
        k_max: Largest bin count tried by auto-k
        T: Share-metric threshold
        threshold: Residual missing fraction auto-k must stay under
        method: "dp" or "standard"
        orientation: Which navigator end is end-expiration
        align: "si_shift" or "none"
        max_shift: Largest slice-axis shift tried during alignment
        seed: Simulator seed
        subjects: Simulated subjects in the ADC comparison (seeds seed, seed + 1, ...)
        output: Output file or directory
    """

    command: str
    inputs: Mapping[str, str] = field(default_factory=dict)
    k: Optional[int] = None
    k_max: int = 12
    T: float = DEFAULT_THRESHOLD_T
    threshold: float = DEFAULT_MISSING_FRACTION
    method: str = "dp"
    orientation: str = EXPIRATION_LOW_T
    align: str = "si_shift"
    max_shift: int = DEFAULT_MAX_SHIFT
    seed: int = 42
    subjects: int = 3
    output: Optional[str] = None

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.k_max < 1:
            raise ValueError(f"max-k must be >= 1, got {self.k_max}")
        if not self.T >= 0:
            raise ValueError(f"T must be >= 0, got {self.T}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"missing-fraction threshold must lie in (0, 1), got {self.threshold}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}")
        if self.align not in ALIGN_MODES:
            raise ValueError(f"align must be one of {ALIGN_MODES}, got {self.align!r}")
        if self.max_shift < 0:
            raise ValueError(f"max-shift must be >= 0, got {self.max_shift}")
        if self.subjects < 1:
            raise ValueError(f"subjects must be >= 1, got {self.subjects}")

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        """Collect every flag a subcommand declared; unset ones keep their defaults."""
        inputs = {
            role: str(getattr(args, role))
            for role in (
                "slices",
                "protocol",
                "pixels",
                "pt",
                "binning",
                "sharing",
                "volumes",
                "before",
                "after",
                "standard",
                "roi",
                "reference",
                "ground_truth",
            )
            if getattr(args, role, None) is not None
        }
        values = {
            name: getattr(args, name)
            for name in (
                "k", "k_max", "T", "threshold", "method", "orientation", "align", "max_shift", "seed", "subjects"
            )
            if getattr(args, name, None) is not None
        }
        output = getattr(args, "out", None) or getattr(args, "out_dir", None)
        return cls(command=args.command, inputs=inputs, output=str(output) if output else None, **values)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["inputs"] = dict(self.inputs)
        return data


def _sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    path: PathLike,
    config: RunConfig,
    argv: Sequence[str],
    outputs: Sequence[PathLike],
    results: Optional[Mapping[str, Any]] = None,
) -> None:
    """Record everything needed to rerun ``config`` and check that it reproduces."""
    manifest = {
        "command": config.command,
        "argv": list(argv),
        "config": config.to_dict(),
        "inputs": {
            role: {"path": p, "sha256": _sha256(p)}
            for role, p in config.inputs.items()
            if Path(p).is_file()
        },
        "outputs": [str(p) for p in outputs],
        "seed": config.seed,
        "versions": {
            "respbin": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "results": dict(results or {}),
    }
    atomic_write_json(path, manifest)


def _manifest_path(out: PathLike) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(f"{out.stem}.manifest.json")


def _load_scan(args: argparse.Namespace, pixels: bool = False) -> Scan:
    """Slices CSV plus protocol.json (default: next to the CSV), optionally with pixels."""
    slices = Path(args.slices)
    protocol_path = Path(args.protocol) if getattr(args, "protocol", None) else slices.with_name("protocol.json")
    scan = load_slices(slices, load_protocol(protocol_path))
    if pixels:
        pixel_path = Path(args.pixels) if getattr(args, "pixels", None) else slices.with_name("slice_pixels.json")
        scan = attach_slice_pixels(scan, pixel_path)
    return scan


def _read_json(path: PathLike) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SliceParseError(f"{path}: {e}") from e


def _load_binning(path: PathLike, scan: Scan) -> BinningResult:
    return BinningResult.from_dict(_read_json(path), scan)


def _load_sharing(path: PathLike, binning: BinningResult) -> SharingResult:
    return SharingResult.from_dict(_read_json(path), binning)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_assignment_trace(scan: Scan, binning: BinningResult, sharing: SharingResult, out: PathLike) -> None:
    """
    Write the per-slice assignment trace behind a navigator-vs-bin plot.

    One row per slice in scan order: acq_index, navigator value, primary bin
    and, for shared slices, the secondary bin (empty otherwise).
    """
    secondary = {a.slice_acq_index: a.secondary_bin for a in sharing.assignments}
    rows = [
        (rec.acq_index, repr(rec.t), label, _fmt(secondary.get(rec.acq_index)))
        for rec, label in zip(scan.slices, binning.labels)
    ]
    atomic_write_text(out, _csv_text(TRACE_HEADER, rows))


def save_snr_table(scores: Sequence[ChannelScore], selected: int, out: PathLike) -> None:
    rows = [
        (s.channel_index, "" if s.undefined else repr(s.snr), int(s.channel_index == selected))
        for s in scores
    ]
    atomic_write_text(out, _csv_text(("channel", "snr", "selected"), rows))


def save_adc_map(adc_map: AdcMap, protocol: ScanProtocol, out: PathLike) -> None:
    """AdcMap in the volume container: per slice position an adc, s0 and valid map."""
    header = {
        "rows": protocol.rows,
        "cols": protocol.cols,
        "S": protocol.S,
        "b_values": list(protocol.b_values),
        "quantity": ADC_QUANTITY,
    }
    entries = []
    for s in range(protocol.S):
        entries.append(({"map": "adc", "s": s}, adc_map.adc[s]))
        entries.append(({"map": "s0", "s": s}, adc_map.s0[s]))
        entries.append(({"map": "valid", "s": s}, adc_map.valid_mask[s].astype(np.float64)))
    write_volume_file(out, header, entries)


def load_adc_map(path: PathLike) -> AdcMap:
    header, entries = read_volume_file(path)
    if header.get("quantity") != ADC_QUANTITY:
        raise SliceParseError(f"{path}: not an ADC map (quantity={header.get('quantity')!r})")
    shape = (int(header["S"]), int(header["rows"]), int(header["cols"]))
    maps = {name: np.full(shape, np.nan) for name in ("adc", "s0", "valid")}
    for key, arr in entries:
        maps[str(key["map"])][int(key["s"])] = arr
    adc = maps["adc"]
    return AdcMap(adc=adc, s0=maps["s0"], valid_mask=maps["valid"] > 0.5, adc_unclamped=adc.copy())


def _roi_boxes(ground_truth: Mapping[str, Any], frame: str) -> List[RoiBox]:
    key = "roi_reference" if frame == "reference" else "roi_static"
    try:
        return [RoiBox(r["label"], int(r["slice"]), int(r["row0"]), int(r["col0"])) for r in ground_truth[key]]
    except (KeyError, TypeError) as e:
        raise SliceParseError(f"ground truth has no usable {key} list: {e!r}") from e


def save_roi_csv(adc_map: AdcMap, boxes: Sequence[RoiBox], out: PathLike) -> Dict[str, np.ndarray]:
    """Write valid ADC values inside each ROI box as ``label,value`` rows."""
    shape = adc_map.adc.shape
    values = {}
    rows = []
    for box in boxes:
        if not 0 <= box.slice_index < shape[0]:
            raise ValueError(f"ROI '{box.label}' slice {box.slice_index} is outside the volume")
        vals = roi_values(adc_map, box.mask(shape[1], shape[2], shape[0]))
        values[box.label] = vals
        rows.extend((box.label, repr(float(v))) for v in vals)
    atomic_write_text(out, _csv_text(("label", "value"), rows))
    return values


def _console() -> Console:
    return Console(highlight=False)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_version(args: argparse.Namespace) -> int:
    """Show version information."""
    print(f"respbin {__version__}")
    return EXIT_OK


def cmd_select_channel(args: argparse.Namespace) -> int:
    """Score every PT channel; optionally rewrite slice navigator values from the best one."""
    config = RunConfig.from_args(args)
    multi = load_pt_csv(args.pt)
    scores = score_channels(multi, args.kernel)
    best = best_channel(scores)
    outputs: List[PathLike] = [args.out]
    save_snr_table(scores, best.channel_index, args.out)

    if args.slices is not None:
        if args.slices_out is None:
            raise ValueError("--slices needs --slices-out for the rewritten slice table")
        scan = _load_scan(args)
        acq = scan.acq_indices()
        if acq.size and int(acq.max()) >= multi.n_samples:
            raise ValueError(
                f"PT stream has {multi.n_samples} samples but slices reach acq_index {int(acq.max())}"
            )
        t = slice_navigator_values(best.detrended, np.arange(multi.n_samples), acq)
        save_slices(with_t_values(scan, t), args.slices_out)
        outputs.append(args.slices_out)

    table = Table(title="PT channel SNR")
    table.add_column("channel", justify="right")
    table.add_column("SNR", justify="right")
    table.add_column("")
    for s in scores:
        table.add_row(
            str(s.channel_index),
            "undefined" if s.undefined else f"{s.snr:.4f}",
            "selected" if s.channel_index == best.channel_index else "",
        )
    _console().print(table)
    write_manifest(
        _manifest_path(args.out), config, args.argv, outputs, {"selected_channel": best.channel_index}
    )
    return EXIT_OK


def cmd_bin(args: argparse.Namespace) -> int:
    """Bin slices into k contiguous navigator ranges."""
    config = RunConfig.from_args(args)
    scan = _load_scan(args)
    result = bin_scan(scan, config.k, config.method)
    atomic_write_json(args.out, result.to_dict())
    report = missing_report(result, scan.protocol, result.k)
    print(f"k={result.k} method={result.method} missing={report.missing_count} ({report.missing_pct:.3f}%)")
    write_manifest(
        _manifest_path(args.out), config, args.argv, [args.out], {"total_cost": result.total_cost}
    )
    return EXIT_OK


def cmd_share(args: argparse.Namespace) -> int:
    """Fill the gaps of a binning with slices from adjacent bins."""
    config = RunConfig.from_args(args)
    scan = _load_scan(args)
    binning = _load_binning(args.binning, scan)
    sharing = share_scan(scan, binning, config.T)
    atomic_write_json(args.out, sharing.to_dict())
    outputs: List[PathLike] = [args.out]
    if args.trace is not None:
        emit_assignment_trace(scan, binning, sharing, args.trace)
        outputs.append(args.trace)
    print(
        f"shared={len(sharing.assignments)} missing {binning.total_cost} -> "
        f"{len(sharing.residual_missing)} (infeasible {len(sharing.infeasible)})"
    )
    write_manifest(
        _manifest_path(args.out),
        config,
        args.argv,
        outputs,
        {"before": binning.total_cost, "after": len(sharing.residual_missing)},
    )
    return EXIT_OK


def cmd_auto_k(args: argparse.Namespace) -> int:
    """Pick the largest bin count whose residual missing fraction stays under the threshold."""
    config = RunConfig.from_args(args)
    scan = _load_scan(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chosen = select_optimal_k(scan, config.k_max, config.T, config.threshold)

    paths = {
        "binning": out_dir / "binning.json",
        "sharing": out_dir / "sharing.json",
        "fractions": out_dir / "auto_k.csv",
        "trace": out_dir / "trace.csv",
    }
    atomic_write_json(paths["binning"], chosen.binning.to_dict())
    atomic_write_json(paths["sharing"], chosen.sharing.to_dict())
    atomic_write_text(
        paths["fractions"],
        _csv_text(
            ("k", "residual_fraction"),
            [(k, repr(f)) for k, f in enumerate(chosen.residual_fractions, 1)],
        ),
    )
    emit_assignment_trace(scan, chosen.binning, chosen.sharing, paths["trace"])
    print(f"k={chosen.k}" + (" (fallback)" if chosen.fallback else ""))
    write_manifest(
        out_dir / "manifest.json",
        config,
        args.argv,
        list(paths.values()),
        {"k": chosen.k, "fallback": chosen.fallback},
    )
    return EXIT_OK


def cmd_assemble(args: argparse.Namespace) -> int:
    """Build one volume per (bin, b), interpolate residual gaps, align bins."""
    config = RunConfig.from_args(args)
    scan = _load_scan(args, pixels=True)
    binning = _load_binning(args.binning, scan)
    sharing = _load_sharing(args.sharing, binning)
    vols = assemble(scan, binning, sharing, config.orientation)
    if config.align == "si_shift":
        vols = align_bins_si_shift(vols, config.max_shift)
    save_volume_stack(vols.stack, args.out)
    shifts = [
        {"bin": j, "b": b, "shift": shift} for (j, b), shift in sorted(vols.shifts.items())
    ]
    print(f"assembled k={binning.k}, reference bin {vols.reference_bin}")
    write_manifest(
        _manifest_path(args.out),
        config,
        args.argv,
        [args.out],
        {"reference_bin": vols.reference_bin, "shifts": shifts},
    )
    return EXIT_OK


def cmd_adc_fit(args: argparse.Namespace) -> int:
    """Average bins per b-value and fit ADC; --uncorrected fits the all-slices average instead."""
    config = RunConfig.from_args(args)
    if args.uncorrected:
        if args.slices is None:
            raise ValueError("--uncorrected needs --slices")
        scan = _load_scan(args, pixels=True)
        protocol = scan.protocol
        signals = uncorrected_volumes(scan)
    else:
        if args.volumes is None:
            raise ValueError("adc-fit needs --volumes (or --uncorrected with --slices)")
        protocol_path = Path(args.protocol) if args.protocol else Path(args.volumes).with_name("protocol.json")
        protocol = load_protocol(protocol_path)
        stack = load_volume_stack(args.volumes, protocol)
        signals = average_bins(AssembledVolumes(stack, reference_bin=0))
    adc_map = fit_adc(signals, protocol.b_values)
    save_adc_map(adc_map, protocol, args.out)
    outputs: List[PathLike] = [args.out]

    results: Dict[str, Any] = {"valid_voxels": int(adc_map.valid_mask.sum())}
    if args.ground_truth is not None:
        if args.roi_out is None:
            raise ValueError("--ground-truth needs --roi-out")
        boxes = _roi_boxes(_read_json(args.ground_truth), args.roi_frame)
        values = save_roi_csv(adc_map, boxes, args.roi_out)
        outputs.append(args.roi_out)
        results["roi_mean"] = {label: float(np.mean(v)) if v.size else None for label, v in values.items()}
    print(f"fitted ADC: {results['valid_voxels']} valid voxels")
    write_manifest(_manifest_path(args.out), config, args.argv, outputs, results)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Missing-slice report before and after sharing, optionally against the equal-count baseline."""
    config = RunConfig.from_args(args)
    scan = _load_scan(args)
    before = _load_binning(args.before, scan)
    after = _load_sharing(args.after, before)
    protocol = scan.protocol

    rows: List[Tuple[str, int, int, float, Optional[float]]] = []
    results: Dict[str, Any] = {}
    if args.standard is not None:
        standard = _load_binning(args.standard, scan)
        row = phase_table(standard, before, after, protocol)
        rows.append(("standard", row.standard, row.expected_total, row.standard_pct, None))
        rows.append(("phase1", row.phase1, row.expected_total, row.phase1_pct, row.phase1_reduction))
        rows.append(("phase2", row.phase2, row.expected_total, row.phase2_pct, row.reduction))
        z, p = two_proportion_ztest_one_sided(row.standard, row.expected_total, row.phase2, row.expected_total)
        results.update(z=z, p=p)
    else:
        phase1 = missing_report(before, protocol, before.k)
        phase2 = missing_report(after, protocol, before.k)
        reduction = (
            reduction_pct(phase1.missing_count, phase2.missing_count) if phase1.missing_count else None
        )
        rows.append(("phase1", phase1.missing_count, phase1.expected_total, phase1.missing_pct, None))
        rows.append(("phase2", phase2.missing_count, phase2.expected_total, phase2.missing_pct, reduction))

    header = ("stage", "k", "missing", "expected_total", "missing_pct", "reduction_pct")
    atomic_write_text(
        args.out,
        _csv_text(header, [(stage, before.k, m, e, repr(pct), _fmt(red)) for stage, m, e, pct, red in rows]),
    )
    table = Table(title=f"Missing slices (k={before.k})")
    table.add_column("stage")
    for name in header[2:]:
        table.add_column(name, justify="right")
    for stage, m, e, pct, red in rows:
        table.add_row(stage, str(m), str(e), f"{pct:.3f}", "" if red is None else f"{red:.2f}")
    _console().print(table)
    if "z" in results:
        print(f"z={results['z']:.4f} p={results['p']:.3g}")
    write_manifest(_manifest_path(args.out), config, args.argv, [args.out], results)
    return EXIT_OK


def _roi_table(title: str, rows: Sequence[Mapping[str, Any]]) -> Table:
    table = Table(title=title)
    columns = ["method", "label", "n", "mean", "cov_pct", "wasserstein", "rmse"]
    for name in columns:
        table.add_column(name, justify="left" if name in ("method", "label") else "right")
    for row in rows:
        cells = []
        for name in columns:
            value = row.get(name)
            if value is None:
                cells.append("")
            elif name == "mean" or name in ("wasserstein", "rmse"):
                cells.append(f"{value:.3e}")
            elif name == "cov_pct":
                cells.append(f"{value:.2f}")
            else:
                cells.append(str(value))
        table.add_row(*cells)
    return table


ROI_COLUMNS = ("label", "n", "mean", "cov_pct", "wasserstein", "rmse")


def cmd_evaluate_adc(args: argparse.Namespace) -> int:
    """CoV per ROI, plus W1 and RMSE against a reference ROI set."""
    config = RunConfig.from_args(args)
    samples = load_roi_csv(args.roi)
    reference = load_roi_csv(args.reference) if args.reference is not None else None
    rows = roi_statistics(samples, reference)
    atomic_write_text(
        args.out, _csv_text(ROI_COLUMNS, [[_fmt(row.get(c)) for c in ROI_COLUMNS] for row in rows])
    )
    _console().print(_roi_table("ADC stability", rows))
    write_manifest(_manifest_path(args.out), config, args.argv, [args.out])
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    """Generate a synthetic free-breathing scan from a preset."""
    config = RunConfig.from_args(args)
    sim = simulate_preset(args.preset, config.seed)
    paths = write_simulation(sim, args.out_dir)
    print(f"simulated {args.preset}: N={sim.scan.N} slices -> {args.out_dir}")
    write_manifest(
        Path(args.out_dir) / "manifest.json",
        config,
        args.argv,
        list(paths.values()),
        {"preset": args.preset, "N": sim.scan.N},
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# reproduce
# ---------------------------------------------------------------------------


def navigator_scan(sim: SimulatedAcquisition, kernel: int = DEFAULT_KERNEL) -> Tuple[Scan, ChannelScore]:
    """Replace the simulated navigator with the detrended best PT channel."""
    best = best_channel(score_channels(sim.pt, kernel))
    t = slice_navigator_values(best.detrended, np.arange(sim.pt.n_samples), sim.scan.acq_indices())
    return with_t_values(sim.scan, t), best


@dataclass(frozen=True)
class BenchmarkRow:
    """Missing-slice comparison on one simulated scan."""

    preset: str
    seed: int
    channel: int
    fallback: bool
    row: PhaseRow
    z: float
    p: float

    def as_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"preset": self.preset, "seed": self.seed, "channel": self.channel}
        data.update(self.row.as_dict())
        data.update(z=self.z, p=self.p, fallback=self.fallback)
        return data


def run_missing_benchmark(
    preset: str, seed: int, config: RunConfig
) -> Tuple[BenchmarkRow, Scan, BinningResult, SharingResult]:
    """Standard vs optimal binning vs optimal binning with sharing, at the auto-selected k."""
    sim = simulate_preset(preset, seed)
    scan, best = navigator_scan(sim)
    chosen = select_optimal_k(scan, config.k_max, config.T, config.threshold)
    standard = bin_scan(scan, chosen.k, "standard")
    row = phase_table(standard, chosen.binning, chosen.sharing, scan.protocol)
    z, p = two_proportion_ztest_one_sided(row.standard, row.expected_total, row.phase2, row.expected_total)
    bench = BenchmarkRow(preset, seed, best.channel_index, chosen.fallback, row, z, p)
    return bench, scan, chosen.binning, chosen.sharing


def corrected_adc(sim: SimulatedAcquisition, config: RunConfig) -> AdcMap:
    """Full pipeline: channel selection, auto-k, sharing, assembly, alignment, bin average, fit."""
    scan, _ = navigator_scan(sim)
    k_max = config.k_max
    while True:
        chosen = select_optimal_k(scan, k_max, config.T, config.threshold)
        try:
            vols = assemble(scan, chosen.binning, chosen.sharing, config.orientation)
            break
        except ScanValidationError as e:
            # k = 1 covers every acquired (b, s), so this terminates
            if chosen.k == 1:
                raise
            logger.warning("k=%d cannot be assembled (%s); retrying with max k %d", chosen.k, e, chosen.k - 1)
            k_max = chosen.k - 1
    if config.align == "si_shift":
        vols = align_bins_si_shift(vols, config.max_shift)
    return fit_adc(average_bins(vols), scan.protocol.b_values)


def uncorrected_adc(sim: SimulatedAcquisition) -> AdcMap:
    return fit_adc(uncorrected_volumes(sim.scan), sim.scan.protocol.b_values)


def run_adc_benchmark(seed: int, config: RunConfig) -> List[Dict[str, Any]]:
    """
    ROI statistics of the corrected and uncorrected pipelines on the motion
    preset, each compared against the calm (shallow-breathing) scan, plus the
    calm scan's own ROI statistics.
    """
    moving = simulate_preset(MOTION_PRESET, seed)
    calm = simulate_preset(CALM_PRESET, seed)
    truth = moving.phantom.truth()

    static = roi_masks(moving.phantom)
    reference = roi_masks(moving.phantom, moving.reference_shift)

    def samples(adc_map: AdcMap, masks: Mapping[str, np.ndarray]) -> List[RoiSample]:
        return [RoiSample(label, roi_values(adc_map, mask)) for label, mask in masks.items()]

    calm_samples = samples(uncorrected_adc(calm), roi_masks(calm.phantom))
    rows = []
    for method, stats_rows in (
        ("corrected", roi_statistics(samples(corrected_adc(moving, config), reference), calm_samples)),
        ("uncorrected", roi_statistics(samples(uncorrected_adc(moving), static), calm_samples)),
        (CALM_PRESET, roi_statistics(calm_samples)),
    ):
        for stats in stats_rows:
            label = str(stats["label"])
            true_adc = truth.get(label, {}).get("adc")
            rows.append(dict(stats, seed=seed, method=method, true_adc=true_adc))
    return rows


def inter_subject_rows(adc_rows: Sequence[Mapping[str, Any]]) -> List[Dict[str, Any]]:
    """
    CoV of the per-subject ROI means for every (method, label), in first-seen order.

    Raises:
        ValueError: If a (method, label) pair was measured on fewer than two subjects
    """
    means: Dict[Tuple[str, str], List[float]] = {}
    for row in adc_rows:
        means.setdefault((str(row["method"]), str(row["label"])), []).append(float(row["mean"]))
    return [
        {
            "method": method,
            "label": label,
            "subjects": len(values),
            "mean": float(np.mean(values)),
            "inter_cov_pct": inter_subject_cov(values),
        }
        for (method, label), values in means.items()
    ]


BENCHMARK_COLUMNS = (
    "preset",
    "seed",
    "channel",
    "k",
    "expected_total",
    "standard",
    "standard_pct",
    "phase1",
    "phase1_pct",
    "phase2",
    "phase2_pct",
    "phase1_reduction_pct",
    "reduction_pct",
    "z",
    "p",
    "fallback",
)
ADC_COLUMNS = ("seed", "method", "label", "n", "mean", "true_adc", "cov_pct", "wasserstein", "rmse")
INTER_SUBJECT_COLUMNS = ("method", "label", "subjects", "mean", "inter_cov_pct")


def cmd_reproduce(args: argparse.Namespace) -> int:
    """
    Run the synthetic benchmark end to end: benchmark.csv, adc_table.csv (one
    block per subject), inter_subject.csv (two or more subjects) and trace.csv.
    """
    config = RunConfig.from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    console = _console()

    bench, scan, binning, sharing = run_missing_benchmark(SYNC_PRESET, config.seed, config)
    paths = {
        "benchmark": out_dir / "benchmark.csv",
        "adc_table": out_dir / "adc_table.csv",
        "trace": out_dir / "trace.csv",
    }
    data = bench.as_dict()
    atomic_write_text(paths["benchmark"], _csv_text(BENCHMARK_COLUMNS, [[_fmt(data[c]) for c in BENCHMARK_COLUMNS]]))
    emit_assignment_trace(scan, binning, sharing, paths["trace"])

    row = bench.row
    table = Table(title=f"Missing slices, {SYNC_PRESET} preset (seed {config.seed}, k={row.k})")
    for name in ("method", "missing", "%", "reduction %"):
        table.add_column(name, justify="left" if name == "method" else "right")
    table.add_row("standard", str(row.standard), f"{row.standard_pct:.2f}", "")
    table.add_row(
        "optimal bins",
        str(row.phase1),
        f"{row.phase1_pct:.2f}",
        "" if row.phase1_reduction is None else f"{row.phase1_reduction:.2f}",
    )
    table.add_row(
        "optimal bins + sharing",
        str(row.phase2),
        f"{row.phase2_pct:.2f}",
        "" if row.reduction is None else f"{row.reduction:.2f}",
    )
    console.print(table)
    console.print(f"one-sided z-test standard > shared: z={bench.z:.3f}, p={bench.p:.3g}")

    seeds = range(config.seed, config.seed + config.subjects)
    adc_rows = [r for rows in ordered_map(lambda s: run_adc_benchmark(s, config), seeds) for r in rows]
    atomic_write_text(
        paths["adc_table"], _csv_text(ADC_COLUMNS, [[_fmt(r.get(c)) for c in ADC_COLUMNS] for r in adc_rows])
    )
    console.print(
        _roi_table(
            f"ADC stability, {MOTION_PRESET} preset vs {CALM_PRESET} (seed {config.seed})",
            [r for r in adc_rows if r["seed"] == config.seed],
        )
    )

    if config.subjects > 1:
        spread = inter_subject_rows(adc_rows)
        paths["inter_subject"] = out_dir / "inter_subject.csv"
        atomic_write_text(
            paths["inter_subject"],
            _csv_text(INTER_SUBJECT_COLUMNS, [[_fmt(r[c]) for c in INTER_SUBJECT_COLUMNS] for r in spread]),
        )
        table = Table(title=f"Inter-subject CoV of ROI means ({config.subjects} subjects)")
        for name in INTER_SUBJECT_COLUMNS:
            table.add_column(name, justify="left" if name in ("method", "label") else "right")
        for r in spread:
            table.add_row(r["method"], r["label"], str(r["subjects"]), f"{r['mean']:.3e}", f"{r['inter_cov_pct']:.2f}")
        console.print(table)
    else:
        logger.info("one subject: inter-subject CoV skipped")

    write_manifest(
        out_dir / "manifest.json",
        config,
        args.argv,
        list(paths.values()),
        {"benchmark": data},
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits with EXIT_USAGE on bad flags or subcommands."""

    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_scan_args(parser: argparse.ArgumentParser, pixels: bool = False) -> None:
    parser.add_argument("--slices", required=True, help="Slice metadata CSV (acq_index,t,b,s)")
    parser.add_argument("--protocol", help="protocol.json (default: next to the slices CSV)")
    if pixels:
        parser.add_argument("--pixels", help="Slice pixel container (default: slice_pixels.json next to the CSV)")


def _add_sharing_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--t", dest="T", type=float, default=DEFAULT_THRESHOLD_T, help="Share-metric threshold (default: 0.1)"
    )


def _add_alignment_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--orientation", choices=ORIENTATIONS, default=EXPIRATION_LOW_T)
    parser.add_argument("--align", choices=ALIGN_MODES, default="si_shift")
    parser.add_argument("--max-shift", type=int, default=DEFAULT_MAX_SHIFT)


def _add_auto_k_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--max-k", dest="k_max", type=int, default=12, help="Largest k to try (default: 12)")
    _add_sharing_args(parser)
    parser.add_argument(
        "--threshold",
        type=float,
        default=DEFAULT_MISSING_FRACTION,
        help="Residual missing fraction to stay under (default: 0.02)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="respbin",
        description="Respiratory-phase binning for free-breathing diffusion MRI",
        epilog=f"{THREADS_ENV} caps internal parallelism (0 or unset = CPU count).",
    )
    parser.add_argument("-V", "--version", action="store_true", help="Show version and exit")
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="Log progress (-v) or debug detail (-vv) to stderr"
    )

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    version_parser = subparsers.add_parser("version", help="Show version information")
    version_parser.set_defaults(func=cmd_version)

    p = subparsers.add_parser("select-channel", help="Pick the PT channel with the highest SNR")
    p.add_argument("--pt", required=True, help="PT CSV (sample_index,ch0,ch1,...)")
    p.add_argument("--out", required=True, help="Per-channel SNR table (CSV)")
    p.add_argument("--kernel", type=int, default=DEFAULT_KERNEL, help="Median filter width (odd, default: 5)")
    p.add_argument("--slices", help="Slice CSV whose navigator values are replaced (sample i = acq_index i)")
    p.add_argument("--protocol", help="protocol.json (default: next to the slices CSV)")
    p.add_argument("--slices-out", help="Where to write the rewritten slice CSV")
    p.set_defaults(func=cmd_select_channel)

    p = subparsers.add_parser("bin", help="Bin slices by navigator value")
    _add_scan_args(p)
    p.add_argument("--k", type=int, required=True, help="Number of bins")
    p.add_argument("--method", choices=METHODS, default="dp", help="dp (optimal) or standard (equal count)")
    p.add_argument("--out", required=True, help="Binning JSON")
    p.set_defaults(func=cmd_bin)

    p = subparsers.add_parser("share", help="Share slices between adjacent bins to fill gaps")
    _add_scan_args(p)
    p.add_argument("--binning", required=True, help="Binning JSON from 'bin'")
    _add_sharing_args(p)
    p.add_argument("--out", required=True, help="Sharing JSON")
    p.add_argument("--trace", help="Also write the per-slice assignment trace (CSV)")
    p.set_defaults(func=cmd_share)

    p = subparsers.add_parser("auto-k", help="Choose the number of bins automatically")
    _add_scan_args(p)
    _add_auto_k_args(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_auto_k)

    p = subparsers.add_parser("assemble", help="Assemble and align per-bin volumes")
    _add_scan_args(p, pixels=True)
    p.add_argument("--binning", required=True)
    p.add_argument("--sharing", required=True)
    _add_alignment_args(p)
    p.add_argument("--out", required=True, help="Volume container sidecar (.json)")
    p.set_defaults(func=cmd_assemble)

    p = subparsers.add_parser("adc-fit", help="Fit ADC maps")
    p.add_argument("--volumes", help="Assembled volume container from 'assemble'")
    p.add_argument("--protocol", help="protocol.json (default: next to the inputs)")
    p.add_argument("--uncorrected", action="store_true", help="Fit the all-slices average instead")
    p.add_argument("--slices", help="Slice CSV (with --uncorrected)")
    p.add_argument("--pixels", help="Slice pixel container (with --uncorrected)")
    p.add_argument("--ground-truth", help="ground_truth.json with ROI boxes")
    p.add_argument("--roi-frame", choices=ROI_FRAMES, default="reference")
    p.add_argument("--roi-out", help="ROI CSV (label,value) for evaluate-adc")
    p.add_argument("--out", required=True, help="ADC map container sidecar (.json)")
    p.set_defaults(func=cmd_adc_fit)

    p = subparsers.add_parser("evaluate", help="Missing-slice report")
    _add_scan_args(p)
    p.add_argument("--before", required=True, help="Binning JSON")
    p.add_argument("--after", required=True, help="Sharing JSON")
    p.add_argument("--standard", help="Equal-count binning JSON at the same k")
    p.add_argument("--out", required=True, help="Report CSV")
    p.set_defaults(func=cmd_evaluate)

    p = subparsers.add_parser("evaluate-adc", help="ADC CoV / Wasserstein / RMSE per ROI")
    p.add_argument("--roi", required=True, help="ROI CSV (label,value)")
    p.add_argument("--reference", help="Reference ROI CSV (e.g. the calm scan)")
    p.add_argument("--out", required=True, help="Statistics CSV")
    p.set_defaults(func=cmd_evaluate_adc)

    p = subparsers.add_parser("simulate", help="Generate a synthetic scan")
    p.add_argument("--preset", choices=sorted(PRESETS), required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = subparsers.add_parser("reproduce", help="Run the synthetic benchmark end to end")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument(
        "--subjects", type=int, default=3, help="Simulated subjects for the ADC comparison (default: 3)"
    )
    _add_auto_k_args(p)
    _add_alignment_args(p)
    p.add_argument("--out-dir", default=".", help="Where to write the tables (default: .)")
    p.set_defaults(func=cmd_reproduce)

    return parser


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_respbin", False):
            root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._respbin = True  # type: ignore[attr-defined]
    root.addHandler(handler)
    root.setLevel(level)


def main(argv: Optional[list] = None) -> int:
    """Main entry point for the respbin CLI."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    configure_logging(args.verbose)

    if args.version:
        return cmd_version(args)

    if args.command is None:
        parser.print_help()
        return EXIT_OK

    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except (ScanValidationError, SliceParseError, ValueError) as e:
        print(f"respbin: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"respbin: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
