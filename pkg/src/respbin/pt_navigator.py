"""
Pilot Tone channel selection.

Each receive channel carries a copy of the respiratory navigator with its own
gain, drift and noise. A channel is scored by:

1. removing the least-squares line and shifting the minimum to 0 (signal C)
2. denoising C with a zero-padded median filter, kernel 5 (signal D)
3. SNR = log10(mean(C) / mean(|C - D|))

and the highest-scoring channel becomes the navigator.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy.ndimage import median_filter
from scipy.signal import detrend

from .parallel import ordered_map
from .scan_model import PathLike, SliceParseError, atomic_write_text

logger = logging.getLogger(__name__)

DEFAULT_KERNEL = 5
NOISE_FLOOR = 1e-12


@dataclass(frozen=True)
class MultiChannelSignal:
    """
    Raw navigator samples for every receive channel.

    Attributes:
        samples: n_samples x n_channels array
        sample_rate_hz: Informational only; processing works on sample index
    """

    samples: np.ndarray
    sample_rate_hz: float = 1.0

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise ValueError(f"samples must be 2D (n_samples x n_channels), got {arr.ndim}D")
        if arr.shape[0] < 2:
            raise ValueError(f"need at least 2 samples, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples contain non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.samples.shape[1])

    def channel(self, index: int) -> np.ndarray:
        return self.samples[:, index]


@dataclass(frozen=True)
class ChannelScore:
    """SNR of one channel together with the signals it was computed from."""

    channel_index: int
    snr: float
    detrended: np.ndarray
    denoised: np.ndarray

    @property
    def undefined(self) -> bool:
        return self.snr == -math.inf


def detrend_and_shift(signal: Sequence[float]) -> np.ndarray:
    """
    Subtract the least-squares line (abscissa = sample index) and shift min to 0.

    Raises:
        ValueError: If the signal has fewer than 2 samples or non-finite values
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError(f"detrending needs a 1D signal of length >= 2, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite values")
    residual = detrend(x, type="linear")
    return residual - residual.min()


def median_filter_zero_padded(signal: Sequence[float], kernel: int = DEFAULT_KERNEL) -> np.ndarray:
    """
    Centered running median; samples outside the signal count as 0.

    Raises:
        ValueError: If kernel is not a positive odd integer
    """
    if int(kernel) != kernel or kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be a positive odd integer, got {kernel}")
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    return median_filter(x, size=int(kernel), mode="constant", cval=0.0)


def channel_snr(c: Sequence[float], d: Sequence[float]) -> float:
    """
    log10(mean(C) / max(mean(|C - D|), 1e-12)).

    Returns -inf when mean(C) <= 0; such a channel is undefined and ranks last.
    """
    c = np.asarray(c, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if c.shape != d.shape or c.size < 1:
        raise ValueError(f"C and D must have equal non-zero length, got {c.shape} and {d.shape}")
    mu_c = float(np.mean(c))
    if not mu_c > 0:
        return -math.inf
    mu_noise = max(float(np.mean(np.abs(c - d))), NOISE_FLOOR)
    return math.log10(mu_c / mu_noise)


def score_channel(signal: Sequence[float], index: int = 0, kernel: int = DEFAULT_KERNEL) -> ChannelScore:
    c = detrend_and_shift(signal)
    d = median_filter_zero_padded(c, kernel)
    snr = channel_snr(c, d)
    if snr == -math.inf:
        logger.warning("channel %d is undefined (mean of detrended signal is 0)", index)
    return ChannelScore(channel_index=index, snr=snr, detrended=c, denoised=d)


def score_channels(multi: MultiChannelSignal, kernel: int = DEFAULT_KERNEL) -> List[ChannelScore]:
    """Score every channel; the list is in channel order."""
    return ordered_map(
        lambda i: score_channel(multi.channel(i), i, kernel), range(multi.n_channels)
    )


def select_best_channel(multi: MultiChannelSignal, kernel: int = DEFAULT_KERNEL) -> ChannelScore:
    """
    Pick the channel with the highest SNR; ties go to the lowest index.

    Raises:
        ValueError: If the signal has no channels
    """
    if multi.n_channels < 1:
        raise ValueError("no channels to select from")
    best = best_channel(score_channels(multi, kernel))
    logger.info("selected PT channel %d (SNR %.4f)", best.channel_index, best.snr)
    return best


def best_channel(scores: Sequence[ChannelScore]) -> ChannelScore:
    """Highest SNR among already-scored channels; the first one wins ties."""
    if not scores:
        raise ValueError("no channels to select from")
    best = scores[0]
    for score in scores[1:]:
        if score.snr > best.snr:
            best = score
    return best


def slice_navigator_values(
    signal: Sequence[float],
    sample_times_ms: Sequence[float],
    slice_times_ms: Sequence[float],
) -> np.ndarray:
    """Navigator value for each slice, taken from the nearest sample in time."""
    signal = np.asarray(signal, dtype=np.float64)
    sample_times = np.asarray(sample_times_ms, dtype=np.float64)
    slice_times = np.asarray(slice_times_ms, dtype=np.float64)
    if signal.shape != sample_times.shape or signal.size == 0:
        raise ValueError("signal and sample times must be non-empty and aligned")
    if sample_times.size == 1:
        return np.full(slice_times.shape, signal[0])
    right = np.clip(np.searchsorted(sample_times, slice_times), 1, sample_times.size - 1)
    left = right - 1
    pick_left = np.abs(slice_times - sample_times[left]) <= np.abs(sample_times[right] - slice_times)
    return signal[np.where(pick_left, left, right)]


def load_pt_csv(path: PathLike, sample_rate_hz: Optional[float] = None) -> MultiChannelSignal:
    """
    Read a PT CSV with header ``sample_index,ch0,ch1,...``.

    Raises:
        SliceParseError: Bad header or non-numeric cell
        ValueError: Fewer than 2 samples or non-finite values
    """
    reader = csv.reader(io.StringIO(Path(path).read_text(encoding="utf-8")))
    try:
        header = [cell.strip() for cell in next(reader)]
    except StopIteration:
        raise SliceParseError(f"{path}: empty file") from None
    expected = ["sample_index"] + [f"ch{i}" for i in range(len(header) - 1)]
    if len(header) < 2 or header != expected:
        raise SliceParseError(f"{path}: header must be sample_index,ch0,ch1,..., got {','.join(header)}")

    rows = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise SliceParseError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
        try:
            rows.append([float(cell) for cell in row[1:]])
        except ValueError as e:
            raise SliceParseError(f"{path}:{line_no}: {e}") from e
    return MultiChannelSignal(np.array(rows), sample_rate_hz or 1.0)


def save_pt_csv(multi: MultiChannelSignal, path: PathLike) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_index"] + [f"ch{i}" for i in range(multi.n_channels)])
    for i, row in enumerate(multi.samples):
        writer.writerow([i] + [repr(float(v)) for v in row])
    atomic_write_text(path, buf.getvalue())
