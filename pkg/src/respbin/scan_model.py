"""
Scan model: slice metadata, protocol geometry, volumes and their file formats.

This module provides:
- ScanProtocol / SliceRecord / SliceKey / Scan: immutable acquisition types
- VolumeStack: assembled per-(bin, b, s) slices with fill provenance
- CSV ingestion/emission for slice metadata, JSON for the protocol
- The JSON sidecar + raw float32 container used for every image volume

Every writer goes through atomic_write_bytes(), so a crashed run never
leaves a half-written file behind.
"""

import csv
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

PathLike = Union[str, "os.PathLike[str]"]

SLICE_CSV_HEADER = ("acq_index", "t", "b", "s")

ACQUIRED = "acquired"
INTERPOLATED = "interpolated"
MISSING = "missing"


class SliceParseError(ValueError):
    """Raised when a slice, protocol or volume file cannot be parsed."""


class ScanValidationError(ValueError):
    """
    Raised when scan data violates a type invariant.

    Attributes:
        violations: Human-readable description of every violation found
    """

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        summary = "; ".join(self.violations[:5])
        if len(self.violations) > 5:
            summary += f"; ... ({len(self.violations) - 5} more)"
        super().__init__(f"invalid scan: {summary}")


def averaged(n: int) -> str:
    """Provenance label for a slot built from n acquired slices."""
    return ACQUIRED if n == 1 else f"averaged({n})"


def format_b(b: float) -> str:
    """Shortest exact text for a b-value ("50" rather than "50.0")."""
    b = float(b)
    return str(int(b)) if b.is_integer() else repr(b)


@dataclass(frozen=True)
class ScanProtocol:
    """
    Acquisition geometry and timing.

    Attributes:
        S: Number of slice positions along the superior-inferior axis
        b_values: Ordered, distinct diffusion weightings (s/mm^2)
        averages_per_b: Repetitions per b-value (aligned with b_values)
        n_directions: Diffusion directions per average
        tr_ms: Repetition time in milliseconds
        rows: Pixel rows per slice
        cols: Pixel columns per slice
    """

    S: int
    b_values: Tuple[float, ...]
    averages_per_b: Tuple[int, ...]
    n_directions: int = 1
    tr_ms: float = 5200.0
    rows: int = 1
    cols: int = 1

    def __post_init__(self):
        object.__setattr__(self, "b_values", tuple(float(b) for b in self.b_values))
        object.__setattr__(self, "averages_per_b", tuple(int(a) for a in self.averages_per_b))
        problems = []
        if int(self.S) < 1:
            problems.append(f"S must be >= 1 (got {self.S})")
        if not self.b_values:
            problems.append("b_values must not be empty")
        if len(set(self.b_values)) != len(self.b_values):
            problems.append(f"b_values must be distinct (got {list(self.b_values)})")
        if any(not (b > 0 and math.isfinite(b)) for b in self.b_values):
            problems.append(f"b_values must be positive (got {list(self.b_values)})")
        if len(self.averages_per_b) != len(self.b_values):
            problems.append(
                f"averages_per_b has {len(self.averages_per_b)} entries for "
                f"{len(self.b_values)} b-values"
            )
        if any(a < 1 for a in self.averages_per_b):
            problems.append("averages_per_b entries must be >= 1")
        if int(self.n_directions) < 1:
            problems.append("n_directions must be >= 1")
        if not (self.tr_ms > 0):
            problems.append(f"tr_ms must be > 0 (got {self.tr_ms})")
        if int(self.rows) < 1 or int(self.cols) < 1:
            problems.append(f"pixel grid must be positive (got {self.rows}x{self.cols})")
        if problems:
            raise ScanValidationError(problems)

    @property
    def n_b(self) -> int:
        return len(self.b_values)

    @property
    def combos(self) -> int:
        """B * S, the number of (b, s) keys one bin must cover."""
        return self.n_b * self.S

    def b_index(self, b: float) -> int:
        """
        Position of a b-value in the protocol.

        b-values are protocol members, so the comparison is exact.

        Raises:
            ValueError: If b is not one of the protocol's b-values
        """
        try:
            return self.b_values.index(float(b))
        except ValueError:
            raise ValueError(
                f"b={format_b(b)} is not in the protocol b-values "
                f"{[format_b(v) for v in self.b_values]}"
            ) from None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "S": self.S,
            "b_values": list(self.b_values),
            "averages_per_b": list(self.averages_per_b),
            "n_directions": self.n_directions,
            "tr_ms": self.tr_ms,
            "rows": self.rows,
            "cols": self.cols,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScanProtocol":
        try:
            return cls(
                S=int(data["S"]),
                b_values=tuple(data["b_values"]),
                averages_per_b=tuple(data.get("averages_per_b", [1] * len(data["b_values"]))),
                n_directions=int(data.get("n_directions", 1)),
                tr_ms=float(data.get("tr_ms", 5200.0)),
                rows=int(data.get("rows", 1)),
                cols=int(data.get("cols", 1)),
            )
        except (KeyError, TypeError) as e:
            raise SliceParseError(f"malformed protocol: {e!r}") from e


@dataclass(frozen=True, order=True)
class SliceKey:
    """A (b-value, slice position) combination."""

    b: float
    s: int


@dataclass(frozen=True, eq=False)
class SliceRecord:
    """
    One acquired 2D slice.

    Attributes:
        acq_index: Acquisition order, unique within a scan
        t: Pilot Tone navigator value at acquisition time (arbitrary units)
        b: b-value (s/mm^2), a member of the protocol's set
        s: Slice position, 0..S-1
        pixels: Optional rows x cols image; absent for metadata-only work
    """

    acq_index: int
    t: float
    b: float
    s: int
    pixels: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "t", float(self.t))
        if self.pixels is not None:
            arr = np.array(self.pixels, dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, "pixels", arr)

    @property
    def key(self) -> SliceKey:
        return SliceKey(self.b, self.s)

    def without_pixels(self) -> "SliceRecord":
        return SliceRecord(self.acq_index, self.t, self.b, self.s)


@dataclass(frozen=True)
class Scan:
    """
    All slices of one acquisition.

    Construction does not validate; use validate_scan() or load_slices(),
    which refuses invalid input.
    """

    protocol: ScanProtocol
    slices: Tuple[SliceRecord, ...]
    _positions: Dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "slices", tuple(self.slices))
        object.__setattr__(
            self, "_positions", {rec.acq_index: pos for pos, rec in enumerate(self.slices)}
        )

    @property
    def N(self) -> int:
        return len(self.slices)

    @property
    def has_pixels(self) -> bool:
        return self.N > 0 and all(rec.pixels is not None for rec in self.slices)

    def keys(self) -> List[SliceKey]:
        return [rec.key for rec in self.slices]

    def t_values(self) -> np.ndarray:
        return np.array([rec.t for rec in self.slices], dtype=np.float64)

    def acq_indices(self) -> np.ndarray:
        return np.array([rec.acq_index for rec in self.slices], dtype=np.int64)

    def position_of(self, acq_index: int) -> int:
        """Index into ``slices`` of the record with this acquisition index."""
        try:
            return self._positions[acq_index]
        except KeyError:
            raise ValueError(f"no slice with acq_index={acq_index}") from None

    def metadata_only(self) -> "Scan":
        return Scan(self.protocol, tuple(rec.without_pixels() for rec in self.slices))


VolumeKey = Tuple[int, float, int]


@dataclass(frozen=True)
class VolumeStack:
    """
    Assembled slices keyed by (bin, b, s), one 2D array per key.

    Attributes:
        protocol: Geometry the arrays conform to
        k: Number of bins
        data: (bin, b, s) -> rows x cols array
        fill_provenance: (bin, b, s) -> acquired | averaged(n) | interpolated | missing
    """

    protocol: ScanProtocol
    k: int
    data: Mapping[VolumeKey, np.ndarray]
    fill_provenance: Mapping[VolumeKey, str]

    def __post_init__(self):
        shape = (self.protocol.rows, self.protocol.cols)
        problems = []
        for key, arr in self.data.items():
            if arr.shape != shape:
                problems.append(f"slice {key} has shape {arr.shape}, expected {shape}")
            if key not in self.fill_provenance:
                problems.append(f"slice {key} has no provenance")
        if problems:
            raise ScanValidationError(problems)

    def volume(self, bin_index: int, b: float) -> np.ndarray:
        """Stack the S slices of one (bin, b) volume into an S x rows x cols array."""
        b = float(b)
        shape = (self.protocol.rows, self.protocol.cols)
        out = np.full((self.protocol.S,) + shape, np.nan)
        for s in range(self.protocol.S):
            arr = self.data.get((bin_index, b, s))
            if arr is not None:
                out[s] = arr
        return out

    def missing_keys(self) -> List[VolumeKey]:
        return sorted(key for key, prov in self.fill_provenance.items() if prov == MISSING)


def validate_scan(scan: Scan) -> List[str]:
    """
    Check every Scan / SliceRecord invariant.

    Returns:
        One description per violation; empty when the scan is valid
    """
    violations: List[str] = []
    protocol = scan.protocol
    allowed_b = set(protocol.b_values)
    shape = (protocol.rows, protocol.cols)
    seen: Dict[int, int] = {}

    for pos, rec in enumerate(scan.slices):
        where = f"slice #{pos} (acq_index={rec.acq_index})"
        if not isinstance(rec.acq_index, (int, np.integer)) or rec.acq_index < 0:
            violations.append(f"{where}: acq_index must be a non-negative integer")
        elif rec.acq_index in seen:
            violations.append(
                f"{where}: duplicate acq_index (also slice #{seen[rec.acq_index]})"
            )
        else:
            seen[rec.acq_index] = pos
        if not math.isfinite(rec.t):
            violations.append(f"{where}: t is not finite ({rec.t})")
        if rec.b not in allowed_b:
            violations.append(f"{where}: b={format_b(rec.b)} not in protocol b-values")
        if not (0 <= rec.s < protocol.S):
            violations.append(f"{where}: s={rec.s} outside [0, {protocol.S - 1}]")
        if rec.pixels is not None and rec.pixels.shape != shape:
            violations.append(f"{where}: pixels shape {rec.pixels.shape}, expected {shape}")

    return violations


def atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    """Write payload to path via a temporary file in the same directory + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: PathLike, data: Any) -> None:
    atomic_write_text(path, json.dumps(data, indent=2) + "\n")


def load_protocol(path: PathLike) -> ScanProtocol:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SliceParseError(f"{path}: invalid JSON ({e})") from e
    return ScanProtocol.from_dict(data)


def save_protocol(protocol: ScanProtocol, path: PathLike) -> None:
    atomic_write_json(path, protocol.to_dict())


def _parse_row(row: List[str], line_no: int, path: PathLike) -> SliceRecord:
    if len(row) != len(SLICE_CSV_HEADER):
        raise SliceParseError(
            f"{path}:{line_no}: expected {len(SLICE_CSV_HEADER)} fields, got {len(row)}"
        )
    acq_text, t_text, b_text, s_text = (cell.strip() for cell in row)
    try:
        return SliceRecord(
            acq_index=int(acq_text),
            t=float(t_text),
            b=float(b_text),
            s=int(s_text),
        )
    except ValueError as e:
        raise SliceParseError(f"{path}:{line_no}: {e}") from e


def load_slices(path: PathLike, protocol: ScanProtocol) -> Scan:
    """
    Read a slice metadata CSV (header ``acq_index,t,b,s``).

    Row order is preserved.

    Raises:
        SliceParseError: Missing/unknown header or a malformed row
        ScanValidationError: Rows that violate the protocol (s range, b set, ...)
    """
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SliceParseError(f"{path}: empty file (missing header)") from None
    if tuple(cell.strip() for cell in header) != SLICE_CSV_HEADER:
        raise SliceParseError(
            f"{path}: header must be {','.join(SLICE_CSV_HEADER)}, got {','.join(header)}"
        )

    records = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        records.append(_parse_row(row, line_no, path))

    scan = Scan(protocol, tuple(records))
    violations = validate_scan(scan)
    if violations:
        raise ScanValidationError(violations)
    logger.debug("loaded %d slices from %s", scan.N, path)
    return scan


def save_slices(scan: Scan, path: PathLike) -> None:
    """Write slice metadata; load_slices() reads it back bit-exactly."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SLICE_CSV_HEADER)
    for rec in scan.slices:
        writer.writerow([rec.acq_index, repr(rec.t), format_b(rec.b), rec.s])
    atomic_write_text(path, buf.getvalue())


def _raw_path(sidecar: PathLike) -> Path:
    return Path(sidecar).with_suffix(".raw")


def write_volume_file(
    path: PathLike,
    header: Mapping[str, Any],
    entries: Iterable[Tuple[Mapping[str, Any], np.ndarray]],
) -> None:
    """
    Write the sidecar + raw container.

    The sidecar at ``path`` holds ``header`` plus a ``keys`` list; the raw file
    next to it (same stem, ``.raw``) holds the arrays as little-endian float32,
    concatenated in key order, row-major within each slice.

    Args:
        path: Sidecar path (``*.json``)
        header: Must contain ``rows`` and ``cols``
        entries: (key dict, rows x cols array) pairs
    """
    rows, cols = int(header["rows"]), int(header["cols"])
    keys = []
    chunks = []
    for key, arr in entries:
        arr = np.asarray(arr)
        if arr.shape != (rows, cols):
            raise ValueError(f"array for {dict(key)} has shape {arr.shape}, expected {(rows, cols)}")
        keys.append(dict(key))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    sidecar = dict(header)
    sidecar["keys"] = keys
    atomic_write_bytes(_raw_path(path), b"".join(chunks))
    atomic_write_json(path, sidecar)


def read_volume_file(path: PathLike) -> Tuple[Dict[str, Any], List[Tuple[Dict[str, Any], np.ndarray]]]:
    """
    Read a container written by write_volume_file().

    Returns:
        (sidecar header without ``keys``, list of (key dict, float64 array))
    """
    try:
        sidecar = json.loads(Path(path).read_text(encoding="utf-8"))
        rows, cols = int(sidecar["rows"]), int(sidecar["cols"])
        keys = sidecar.pop("keys")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise SliceParseError(f"{path}: malformed volume sidecar ({e!r})") from e

    raw = np.frombuffer(_raw_path(path).read_bytes(), dtype="<f4")
    expected = len(keys) * rows * cols
    if raw.size != expected:
        raise SliceParseError(
            f"{_raw_path(path)}: holds {raw.size} floats, sidecar describes {expected}"
        )
    arrays = raw.astype(np.float64).reshape(len(keys), rows, cols)
    return sidecar, [(key, arrays[i]) for i, key in enumerate(keys)]


def save_volume_stack(stack: VolumeStack, path: PathLike) -> None:
    protocol = stack.protocol
    header = {
        "rows": protocol.rows,
        "cols": protocol.cols,
        "S": protocol.S,
        "k": stack.k,
        "b_values": list(protocol.b_values),
    }
    entries = [
        ({"bin": key[0], "b": key[1], "s": key[2], "provenance": stack.fill_provenance[key]},
         stack.data[key])
        for key in sorted(stack.data)
    ]
    write_volume_file(path, header, entries)


def load_volume_stack(path: PathLike, protocol: ScanProtocol) -> VolumeStack:
    header, entries = read_volume_file(path)
    if (int(header["rows"]), int(header["cols"]), int(header["S"])) != (
        protocol.rows,
        protocol.cols,
        protocol.S,
    ):
        raise ScanValidationError([f"{path}: geometry does not match the protocol"])
    data = {}
    provenance = {}
    for key, arr in entries:
        vkey = (int(key["bin"]), float(key["b"]), int(key["s"]))
        data[vkey] = arr
        provenance[vkey] = str(key["provenance"])
    return VolumeStack(protocol, int(header["k"]), data, provenance)


def save_slice_pixels(scan: Scan, path: PathLike) -> None:
    """Write every slice's pixels to the volume container, keyed by acq_index."""
    if not scan.has_pixels:
        raise ValueError("scan has no pixel data to write")
    protocol = scan.protocol
    header = {"rows": protocol.rows, "cols": protocol.cols, "S": protocol.S, "content": "slices"}
    entries = [
        ({"acq_index": rec.acq_index, "b": rec.b, "s": rec.s}, rec.pixels) for rec in scan.slices
    ]
    write_volume_file(path, header, entries)


def attach_slice_pixels(scan: Scan, path: PathLike) -> Scan:
    """
    Return a copy of ``scan`` carrying the pixels stored at ``path``.

    Raises:
        ScanValidationError: If the file's slices do not match the scan's metadata
    """
    header, entries = read_volume_file(path)
    protocol = scan.protocol
    if (int(header["rows"]), int(header["cols"])) != (protocol.rows, protocol.cols):
        raise ScanValidationError([f"{path}: pixel grid does not match the protocol"])
    pixels = {}
    for key, arr in entries:
        pixels[int(key["acq_index"])] = (float(key["b"]), int(key["s"]), arr)
    records = []
    problems = []
    for rec in scan.slices:
        stored = pixels.get(rec.acq_index)
        if stored is None:
            problems.append(f"acq_index={rec.acq_index} has no pixels in {path}")
            continue
        b, s, arr = stored
        if (b, s) != (rec.b, rec.s):
            problems.append(f"acq_index={rec.acq_index}: key mismatch between metadata and pixels")
            continue
        records.append(SliceRecord(rec.acq_index, rec.t, rec.b, rec.s, arr))
    if problems:
        raise ScanValidationError(problems)
    return Scan(protocol, tuple(records))


def with_t_values(scan: Scan, t_values: Sequence[float]) -> Scan:
    """Copy of ``scan`` with navigator values replaced (aligned with ``scan.slices``)."""
    if len(t_values) != scan.N:
        raise ValueError(f"got {len(t_values)} navigator values for {scan.N} slices")
    return Scan(
        scan.protocol,
        tuple(
            SliceRecord(rec.acq_index, float(t), rec.b, rec.s, rec.pixels)
            for rec, t in zip(scan.slices, t_values)
        ),
    )
