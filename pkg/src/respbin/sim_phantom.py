"""
Synthetic free-breathing DW-MRI acquisitions.

A simulated acquisition has four parts:
- a breathing trace (jittered sinusoid + drift + noise) sampled at each slice
- an acquisition schedule: b-value x average x direction volumes of S slices,
  one slice every TR / S
- a digital phantom of labeled ellipsoids, each with its own S0 and ADC, rigidly
  shifted along the slice (superior-inferior) axis by the breathing motion
- multi-channel Pilot Tone streams, channel 0 the cleanest

Everything is driven by one seed, so a preset + seed reproduces bit-identically.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .pt_navigator import MultiChannelSignal, save_pt_csv
from .scan_model import (
    PathLike,
    Scan,
    ScanProtocol,
    SliceRecord,
    atomic_write_json,
    save_protocol,
    save_slice_pixels,
    save_slices,
    write_volume_file,
)
from .volume_pipeline import EXPIRATION_LOW_T, shift_volume

logger = logging.getLogger(__name__)

ASCENDING = "ascending"
INTERLEAVED = "interleaved"
SLICE_ORDERS = (ASCENDING, INTERLEAVED)

ROI_SIZE = 8  # 8 x 8 in-plane box, 64 voxels


@dataclass(frozen=True)
class BreathingModel:
    """
    Respiratory trace parameters.

    Attributes:
        period_s: Nominal breathing period in seconds
        amplitude: Peak navigator excursion (arbitrary units); 0 means no motion
        drift_per_min: Linear navigator drift per minute
        noise_sigma: Std of additive Gaussian navigator noise
        irregularity: Per-cycle period jitter as a fraction of period_s (uniform +/-)
        phase_jitter: Per-cycle shift of each cycle start as a fraction of period_s
            (uniform +/-); unlike irregularity it does not accumulate
        seed: RNG seed for jitter and noise
    """

    period_s: float
    amplitude: float
    drift_per_min: float = 0.0
    noise_sigma: float = 0.0
    irregularity: float = 0.0
    phase_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.period_s > 0:
            raise ValueError(f"period_s must be > 0, got {self.period_s}")
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 <= self.irregularity < 1:
            raise ValueError(f"irregularity must lie in [0, 1), got {self.irregularity}")
        if not 0 <= self.phase_jitter < (1.0 - self.irregularity) / 2:
            # consecutive shifted starts must stay ordered
            raise ValueError(
                f"phase_jitter must lie in [0, (1 - irregularity) / 2), got {self.phase_jitter}"
            )


@dataclass(frozen=True)
class AcquisitionSchedule:
    """
    Timing and (b, s) of every slice event, in acquisition order.

    Attributes:
        protocol: Acquisition geometry
        slice_order: "ascending" or "interleaved"
        event_times_ms: Strictly increasing timestamps
        event_b: b-value of each event
        event_s: Slice position of each event
    """

    protocol: ScanProtocol
    slice_order: str
    event_times_ms: np.ndarray
    event_b: np.ndarray
    event_s: np.ndarray

    @property
    def N(self) -> int:
        return int(self.event_times_ms.size)


@dataclass(frozen=True)
class Ellipsoid:
    """Labeled ellipsoid; center and semi-axes in (row, col, slice) voxel units."""

    label: str
    center: Tuple[float, float, float]
    semi_axes: Tuple[float, float, float]
    s0: float
    adc: float

    def mask(self, rows: int, cols: int, S: int) -> np.ndarray:
        s, r, c = np.meshgrid(np.arange(S), np.arange(rows), np.arange(cols), indexing="ij")
        (cr, cc, cs), (ar, ac, as_) = self.center, self.semi_axes
        return ((r - cr) / ar) ** 2 + ((c - cc) / ac) ** 2 + ((s - cs) / as_) ** 2 <= 1.0


@dataclass(frozen=True)
class RoiBox:
    """64-voxel in-plane ROI: rows [row0, row0 + 8), cols [col0, col0 + 8) on one slice."""

    label: str
    slice_index: int
    row0: int
    col0: int

    def mask(self, rows: int, cols: int, S: int) -> np.ndarray:
        out = np.zeros((S, rows, cols), dtype=bool)
        out[self.slice_index, self.row0 : self.row0 + ROI_SIZE, self.col0 : self.col0 + ROI_SIZE] = True
        return out


@dataclass(frozen=True)
class Phantom:
    """
    Digital abdomen: background tissue plus ellipsoids painted in order
    (later ellipsoids win where they overlap).
    """

    rows: int
    cols: int
    S: int
    ellipsoids: Tuple[Ellipsoid, ...]
    background_s0: float = 300.0
    background_adc: float = 3.0e-3
    rois: Tuple[RoiBox, ...] = ()

    def __post_init__(self):
        for e in self.ellipsoids:
            if not 1e-4 <= e.adc <= 5e-3:
                raise ValueError(f"{e.label}: ADC {e.adc} outside [1e-4, 5e-3] mm^2/s")
        if not 1e-4 <= self.background_adc <= 5e-3:
            raise ValueError(f"background ADC {self.background_adc} outside [1e-4, 5e-3] mm^2/s")

    @property
    def labels(self) -> List[str]:
        return ["background"] + [e.label for e in self.ellipsoids]

    def label_volume(self) -> np.ndarray:
        """S x rows x cols array of indices into ``labels``."""
        out = np.zeros((self.S, self.rows, self.cols), dtype=np.int64)
        for i, e in enumerate(self.ellipsoids, start=1):
            out[e.mask(self.rows, self.cols, self.S)] = i
        return out

    def parameter_volumes(self) -> Tuple[np.ndarray, np.ndarray]:
        """(S0, ADC) volumes."""
        labels = self.label_volume()
        s0 = np.array([self.background_s0] + [e.s0 for e in self.ellipsoids])[labels]
        adc = np.array([self.background_adc] + [e.adc for e in self.ellipsoids])[labels]
        return s0, adc

    def signal(self, b: float) -> np.ndarray:
        s0, adc = self.parameter_volumes()
        return s0 * np.exp(-float(b) * adc)

    def truth(self) -> Dict[str, Dict[str, float]]:
        out = {"background": {"s0": self.background_s0, "adc": self.background_adc}}
        for e in self.ellipsoids:
            out[e.label] = {"s0": e.s0, "adc": e.adc}
        return out


def roi_masks(phantom: Phantom, frame_shift: int = 0) -> Dict[str, np.ndarray]:
    """ROI masks of the phantom displaced by ``frame_shift`` slices."""
    return {
        roi.label: shift_volume(roi.mask(phantom.rows, phantom.cols, phantom.S), frame_shift)
        for roi in phantom.rois
    }


def default_phantom(rows: int = 48, cols: int = 48, S: int = 24) -> Phantom:
    """
    Liver, spleen, kidney and a small lesion, laid out on a rows x cols x S grid.

    ROI boxes sit inside each organ, offset toward its superior pole so that
    through-plane motion mixes tissue into them.
    """
    fr, fc, fs = rows / 48.0, cols / 48.0, S / 24.0

    def place(r, c, s):
        return (r * fr, c * fc, s * fs)

    ellipsoids = (
        Ellipsoid("liver", place(20, 16, 12), place(12, 12, 8), s0=800.0, adc=1.1e-3),
        Ellipsoid("spleen", place(20, 34, 12), place(9, 9, 6), s0=1000.0, adc=0.8e-3),
        Ellipsoid("kidney", place(34, 30, 11), place(8, 8, 5), s0=900.0, adc=2.0e-3),
        Ellipsoid("lesion", place(14, 12, 10), place(2, 2, 2), s0=1100.0, adc=0.7e-3),
    )
    half = ROI_SIZE // 2
    rois = (
        RoiBox("liver", int(round(16 * fs)), int(round(22 * fr)) - half, int(round(18 * fc)) - half),
        RoiBox("spleen", int(round(15 * fs)), int(round(20 * fr)) - half, int(round(34 * fc)) - half),
        RoiBox("kidney", int(round(13 * fs)), int(round(34 * fr)) - half, int(round(30 * fc)) - half),
    )
    return Phantom(rows, cols, S, ellipsoids, rois=rois)


def gen_navigator(model: BreathingModel, times_ms) -> np.ndarray:
    """
    Breathing trace sampled at ``times_ms``.

    Each cycle draws its own period, period_s * (1 + irregularity * U(-1, 1)).
    Every cycle start is then moved by phase_jitter * period_s * U(-1, 1);
    that offset does not carry into later cycles, so with irregularity 0 the
    trace stays phase-locked to the nominal period. Within a cycle the trace
    is amplitude * sin(2 pi * phase). Linear drift and Gaussian noise are
    added on top.
    """
    times_s = np.asarray(times_ms, dtype=np.float64) / 1000.0
    rng = np.random.default_rng(model.seed)
    if times_s.size == 0:
        return times_s.copy()

    horizon = float(times_s.max())
    starts = [0.0]
    while starts[-1] <= horizon:
        period = model.period_s * (1.0 + model.irregularity * rng.uniform(-1.0, 1.0))
        starts.append(starts[-1] + period)
    bounds = np.asarray(starts)
    if model.phase_jitter > 0:
        bounds = bounds + model.phase_jitter * model.period_s * rng.uniform(-1.0, 1.0, bounds.size)
    starts_arr = bounds[:-1]
    periods_arr = np.diff(bounds)

    cycle = np.clip(np.searchsorted(starts_arr, times_s, side="right") - 1, 0, None)
    phase = (times_s - starts_arr[cycle]) / periods_arr[cycle]
    trace = model.amplitude * np.sin(2.0 * np.pi * phase)
    trace = trace + model.drift_per_min * times_s / 60.0
    if model.noise_sigma > 0:
        trace = trace + model.noise_sigma * rng.standard_normal(times_s.size)
    return trace


def slice_positions(S: int, slice_order: str) -> List[int]:
    """Slice position acquired in each TR slot."""
    if slice_order == ASCENDING:
        return list(range(S))
    if slice_order == INTERLEAVED:
        return list(range(0, S, 2)) + list(range(1, S, 2))
    raise ValueError(f"slice_order must be one of {SLICE_ORDERS}, got {slice_order!r}")


def gen_schedule(protocol: ScanProtocol, slice_order: str = ASCENDING) -> AcquisitionSchedule:
    """
    Loop b-values, then averages, then directions; each pass acquires one
    volume of S slices spaced TR / S apart.
    """
    positions = slice_positions(protocol.S, slice_order)
    slot_ms = protocol.tr_ms / protocol.S
    times, bs, ss = [], [], []
    volume = 0
    for b, n_avg in zip(protocol.b_values, protocol.averages_per_b):
        for _ in range(n_avg):
            for _ in range(protocol.n_directions):
                for slot, s in enumerate(positions):
                    times.append(volume * protocol.tr_ms + slot * slot_ms)
                    bs.append(b)
                    ss.append(s)
                volume += 1
    return AcquisitionSchedule(
        protocol=protocol,
        slice_order=slice_order,
        event_times_ms=np.asarray(times, dtype=np.float64),
        event_b=np.asarray(bs, dtype=np.float64),
        event_s=np.asarray(ss, dtype=np.int64),
    )


@dataclass(frozen=True)
class SimulatedAcquisition:
    """
    A generated scan and everything needed to judge results against truth.

    Attributes:
        scan: Slices with navigator values and pixels
        pt: Multi-channel Pilot Tone stream sampled at the slice event times
        schedule: Acquisition timing
        phantom: Ground-truth anatomy
        displacement: Slice-axis shift (slices) applied at each event
        reference_shift: Displacement of the end-expiration state
        orientation: Which navigator end is expiration
    """

    scan: Scan
    pt: MultiChannelSignal
    schedule: AcquisitionSchedule
    phantom: Phantom
    displacement: np.ndarray
    reference_shift: int
    orientation: str = EXPIRATION_LOW_T
    preset: Optional[str] = None
    seed: Optional[int] = None

    def ground_truth(self) -> Dict[str, Any]:
        rois = [
            {"label": roi.label, "slice": roi.slice_index, "row0": roi.row0, "col0": roi.col0, "size": ROI_SIZE}
            for roi in self.phantom.rois
        ]
        return {
            "preset": self.preset,
            "seed": self.seed,
            "orientation": self.orientation,
            "labels": self.phantom.truth(),
            "displacement_per_event": self.displacement.tolist(),
            "event_times_ms": self.schedule.event_times_ms.tolist(),
            "reference_shift": self.reference_shift,
            "roi_static": rois,
            "roi_reference": [dict(roi, slice=roi["slice"] + self.reference_shift) for roi in rois],
        }


def _pt_channels(motion_trace: np.ndarray, times_ms: np.ndarray, model: BreathingModel, n_channels: int) -> np.ndarray:
    """Channel 0 is the navigator itself; later channels lose gain and gain drift/noise."""
    rng = np.random.default_rng(model.seed + 7919)
    minutes = times_ms / 60000.0
    scale = max(model.amplitude, 1e-3)
    columns = [motion_trace]
    for c in range(1, n_channels):
        gain = max(1.0 - 0.2 * c, 0.1)
        drift = 0.2 * c * scale
        noise = (model.noise_sigma + 0.15 * c * scale) * rng.standard_normal(times_ms.size)
        columns.append(gain * (motion_trace - model.drift_per_min * minutes) + drift * minutes + noise)
    return np.column_stack(columns)


def gen_scan(
    model: BreathingModel,
    schedule: AcquisitionSchedule,
    phantom: Phantom,
    pt_channels: int = 4,
    image_noise: float = 0.0,
    peak_displacement: float = 3.0,
) -> SimulatedAcquisition:
    """
    Acquire every scheduled slice from the moving phantom.

    Displacement is round(navigator value x gain), gain = peak_displacement /
    amplitude, taken on the respiratory part of the navigator: the same cycles
    and phase jitter, without drift and noise. Drift and noise model the PT
    measurement, not the anatomy, so they change t but never which source
    slice is sampled. Each slice's navigator value t is the full trace. Image
    noise is Gaussian with std ``image_noise * 1000`` signal units.
    """
    protocol = schedule.protocol
    if (phantom.rows, phantom.cols, phantom.S) != (protocol.rows, protocol.cols, protocol.S):
        raise ValueError("phantom grid does not match the protocol")
    if pt_channels < 1:
        raise ValueError(f"need at least one PT channel, got {pt_channels}")

    times = schedule.event_times_ms
    navigator = gen_navigator(model, times)
    motion = gen_navigator(replace(model, noise_sigma=0.0, drift_per_min=0.0), times)
    gain = peak_displacement / model.amplitude if model.amplitude > 0 else 0.0
    displacement = np.round(motion * gain).astype(np.int64)
    limit = protocol.S - 1
    if np.any(np.abs(displacement) > limit):
        logger.warning("displacement exceeds the %d-slice grid; clamping to +/-%d", protocol.S, limit)
        displacement = np.clip(displacement, -limit, limit)

    signals = {b: phantom.signal(b) for b in protocol.b_values}
    rng = np.random.default_rng(model.seed + 104729)
    sigma = image_noise * 1000.0
    records = []
    for i in range(schedule.N):
        b = float(schedule.event_b[i])
        s = int(schedule.event_s[i])
        source = int(np.clip(s - displacement[i], 0, protocol.S - 1))
        pixels = signals[b][source]
        if sigma > 0:
            pixels = pixels + sigma * rng.standard_normal(pixels.shape)
        records.append(SliceRecord(acq_index=i, t=float(navigator[i]), b=b, s=s, pixels=pixels))

    pt = MultiChannelSignal(_pt_channels(navigator, times, model, pt_channels), 1000.0 * protocol.S / protocol.tr_ms)
    reference_shift = -int(round(peak_displacement)) if model.amplitude > 0 else 0
    return SimulatedAcquisition(
        scan=Scan(protocol, tuple(records)),
        pt=pt,
        schedule=schedule,
        phantom=phantom,
        displacement=displacement,
        reference_shift=reference_shift,
    )


@dataclass(frozen=True)
class Preset:
    """A named simulation setup."""

    name: str
    model: BreathingModel
    protocol: ScanProtocol
    slice_order: str = ASCENDING
    image_noise: float = 0.01
    peak_displacement: float = 3.0
    pt_channels: int = 4
    description: str = ""


def _preset_protocol(S: int = 24, rows: int = 48, cols: int = 48) -> ScanProtocol:
    return ScanProtocol(
        S=S,
        b_values=(50.0, 400.0, 800.0),
        averages_per_b=(3, 3, 4),
        n_directions=6,
        tr_ms=5200.0,
        rows=rows,
        cols=cols,
    )


PRESETS: Mapping[str, Preset] = {
    "calm": Preset(
        "calm",
        BreathingModel(period_s=4.3, amplitude=1.0, drift_per_min=0.05, noise_sigma=0.02, irregularity=0.1),
        _preset_protocol(),
        peak_displacement=1.0,
        description="shallow, regular breathing",
    ),
    "deep": Preset(
        "deep",
        BreathingModel(period_s=5.5, amplitude=1.0, drift_per_min=0.1, noise_sigma=0.03, irregularity=0.15),
        _preset_protocol(),
        peak_displacement=3.0,
        description="deep breathing, 3-slice excursion",
    ),
    "irregular": Preset(
        "irregular",
        BreathingModel(period_s=4.6, amplitude=1.0, drift_per_min=0.1, noise_sigma=0.03, irregularity=0.4),
        _preset_protocol(),
        slice_order=INTERLEAVED,
        peak_displacement=2.0,
        description="strongly varying cycle length",
    ),
    "synchronized": Preset(
        "synchronized",
        BreathingModel(period_s=5.2, amplitude=1.0, drift_per_min=0.05, noise_sigma=0.05, phase_jitter=0.35),
        _preset_protocol(),
        peak_displacement=3.0,
        description="breathing period equal to TR: each slice position stays near one respiratory phase",
    ),
}


def simulate_preset(name: str, seed: int = 42) -> SimulatedAcquisition:
    """Generate a preset acquisition with the given seed."""
    try:
        preset = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    model = replace(preset.model, seed=seed)
    protocol = preset.protocol
    schedule = gen_schedule(protocol, preset.slice_order)
    phantom = default_phantom(protocol.rows, protocol.cols, protocol.S)
    sim = gen_scan(model, schedule, phantom, preset.pt_channels, preset.image_noise, preset.peak_displacement)
    logger.info("simulated preset %r (seed %d): N=%d slices", name, seed, sim.scan.N)
    return replace(sim, preset=name, seed=seed)


def write_simulation(sim: SimulatedAcquisition, out_dir: PathLike) -> Dict[str, Path]:
    """
    Write slices.csv, slice_pixels.json/.raw, pt.csv, protocol.json,
    phantom.json/.raw (noiseless static signal per b) and ground_truth.json.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    protocol = sim.scan.protocol
    paths = {
        "slices": out / "slices.csv",
        "pixels": out / "slice_pixels.json",
        "pt": out / "pt.csv",
        "protocol": out / "protocol.json",
        "phantom": out / "phantom.json",
        "ground_truth": out / "ground_truth.json",
    }
    save_slices(sim.scan, paths["slices"])
    save_slice_pixels(sim.scan, paths["pixels"])
    save_pt_csv(sim.pt, paths["pt"])
    save_protocol(protocol, paths["protocol"])
    header = {
        "rows": protocol.rows,
        "cols": protocol.cols,
        "S": protocol.S,
        "k": 1,
        "b_values": list(protocol.b_values),
        "content": "phantom",
    }
    entries = []
    for b in protocol.b_values:
        signal = sim.phantom.signal(b)
        entries.extend(({"bin": 0, "b": b, "s": s, "provenance": "acquired"}, signal[s]) for s in range(protocol.S))
    write_volume_file(paths["phantom"], header, entries)
    atomic_write_json(paths["ground_truth"], sim.ground_truth())
    return paths
