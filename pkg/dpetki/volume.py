"""Dynamic volumes, masks, time-activity curves and their file formats.

In memory every array is indexed ``[x, y, z]`` or ``[x, y, z, t]``; on disk
voxels are stored x-fastest (Fortran order). Times on curves are minutes
from injection, frame durations are seconds.
"""
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import nibabel as nib
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import (
    BadMagic,
    CropOutOfBounds,
    EmptySchedule,
    GridMismatch,
    NonMonotonicTimes,
    ParseError,
    SchedulingMismatch,
    Truncated,
    UnsupportedDatatype,
    VolumeFormatError,
    VolumeIOError,
)
from .terminal import warn

RAW_FORMAT = "dpetki-raw"
RAW_VERSION = 1
TAC_COLUMNS = ("time_min", "activity_kBq_per_mL")

# NIfTI-1 datatype codes accepted by load_nifti
NIFTI_DATATYPES = {16: "float32", 4: "int16", 512: "uint16"}
NIFTI_HEADER_SIZE = 348


def _frozen(array, dtype=np.float64):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# Frame schedule
# ---------------------------------------------------------------------------

def frame_mid_times(schedule, offset_s=0.0):
    """Mid-frame times in minutes.

    Args:
        schedule: A FrameSchedule or a sequence of frame durations in seconds
        offset_s: Start of the first frame when a plain sequence is given

    Returns:
        numpy array of mid times (minutes), one per frame

    Raises:
        EmptySchedule: If there are no frames
    """
    if isinstance(schedule, FrameSchedule):
        durations, offset_s = np.asarray(schedule.durations_s), schedule.offset_s
    else:
        durations = np.asarray(list(schedule), dtype=np.float64)
    if durations.size == 0:
        raise EmptySchedule("frame schedule is empty")
    starts = offset_s + np.concatenate(([0.0], np.cumsum(durations)[:-1]))
    return (starts + durations / 2.0) / 60.0


@dataclass(frozen=True)
class FrameSchedule:
    """Frame durations (seconds) and the start of the first frame."""
    durations_s: tuple
    offset_s: float = 0.0

    def __post_init__(self):
        durations = tuple(float(d) for d in self.durations_s)
        if not durations:
            raise EmptySchedule("frame schedule is empty")
        if any(not math.isfinite(d) or d <= 0 for d in durations):
            raise ValueError(f"frame durations must be positive: {durations}")
        if not math.isfinite(self.offset_s) or self.offset_s < 0:
            raise ValueError(f"offset_s must be >= 0: {self.offset_s}")
        object.__setattr__(self, "durations_s", durations)
        object.__setattr__(self, "offset_s", float(self.offset_s))

    def __len__(self):
        return len(self.durations_s)

    @property
    def mid_times(self):
        return frame_mid_times(self)

    @classmethod
    def from_blocks(cls, blocks, offset_s=0.0):
        """Build from ``[(count, duration_s), ...]`` blocks."""
        durations = []
        for count, duration in blocks:
            durations.extend([duration] * int(count))
        return cls(tuple(durations), offset_s)


# ---------------------------------------------------------------------------
# Boxes
# ---------------------------------------------------------------------------

class Box(BaseModel):
    """Axis-aligned voxel box, bounds inclusive on both ends."""
    model_config = ConfigDict(frozen=True)

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    @model_validator(mode="after")
    def _ordered(self):
        if any(a < 0 or a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"box bounds must satisfy 0 <= lo <= hi: {self.lo} {self.hi}")
        return self

    @property
    def slices(self):
        return tuple(slice(a, b + 1) for a, b in zip(self.lo, self.hi))

    @property
    def shape(self):
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    def within(self, dims):
        return all(b < n for b, n in zip(self.hi, dims))

    def check_within(self, dims):
        if not self.within(dims):
            raise CropOutOfBounds(f"box {self.lo}-{self.hi} exceeds volume {tuple(dims)}")

    def overlaps(self, other):
        return all(a1 <= b2 and a2 <= b1
                   for a1, b1, a2, b2 in zip(self.lo, self.hi, other.lo, other.hi))


# ---------------------------------------------------------------------------
# Volumes and masks
# ---------------------------------------------------------------------------

def sanitize(data):
    """Zero non-finite values and clamp negatives.

    Returns:
        (array, clamped, nonfinite) with the counts of each correction
    """
    data = np.array(data, dtype=np.float64, copy=True)
    bad = ~np.isfinite(data)
    nonfinite = int(bad.sum())
    data[bad] = 0.0
    negative = data < 0
    clamped = int(negative.sum())
    data[negative] = 0.0
    return data, clamped, nonfinite


@dataclass(frozen=True)
class DynVolume:
    """A 4-D dynamic PET volume.

    Attributes:
        data: float64 array (nx, ny, nz, nt) in kBq/mL, read-only
        voxel_mm: voxel size per spatial axis in mm
        schedule: frame schedule, one entry per frame
        clamped: number of negative voxels set to zero when loaded
        nonfinite: number of NaN/inf voxels set to zero when loaded
    """
    data: np.ndarray
    voxel_mm: tuple
    schedule: FrameSchedule
    clamped: int = 0
    nonfinite: int = 0

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 4:
            raise VolumeFormatError(f"dynamic volume must be 4-D, got shape {data.shape}")
        if data.shape[3] != len(self.schedule):
            raise SchedulingMismatch(
                f"{data.shape[3]} frames but schedule has {len(self.schedule)} entries")
        voxel = tuple(float(v) for v in self.voxel_mm)
        if len(voxel) != 3 or any(v <= 0 for v in voxel):
            raise VolumeFormatError(f"voxel_mm must be 3 positive sizes: {self.voxel_mm}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_mm", voxel)

    @classmethod
    def from_array(cls, data, voxel_mm, schedule):
        """Build a volume, zeroing non-finite and clamping negative voxels."""
        clean, clamped, nonfinite = sanitize(data)
        return cls(clean, voxel_mm, schedule, clamped, nonfinite)

    @property
    def dims(self):
        return self.data.shape

    @property
    def spatial_dims(self):
        return self.data.shape[:3]

    @property
    def nt(self):
        return self.data.shape[3]

    @property
    def mid_times(self):
        return self.schedule.mid_times

    def frame(self, index):
        return self.data[..., index]

    def tac(self, x, y, z):
        return TAC(self.mid_times, self.data[x, y, z, :])

    def __repr__(self):
        return f"DynVolume(dims={self.dims}, voxel_mm={self.voxel_mm})"


@dataclass(frozen=True)
class Mask:
    """Boolean 3-D voxel set."""
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, dtype=bool)
        if data.ndim != 3:
            raise VolumeFormatError(f"mask must be 3-D, got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        return self.data.shape

    @property
    def count(self):
        return int(self.data.sum())

    def __repr__(self):
        return f"Mask(dims={self.dims}, count={self.count})"


@dataclass(frozen=True)
class Region:
    """Entry of a label table."""
    name: str
    size: int
    side: Optional[str] = None


@dataclass(frozen=True)
class LabeledMask:
    """Integer label volume with its label table.

    Label 0 is background. Every nonzero label in the volume has a table
    entry whose size matches its voxel count.
    """
    labels: np.ndarray
    table: dict = field(default_factory=dict)

    def __post_init__(self):
        labels = _frozen(self.labels, dtype=np.int32)
        if labels.ndim != 3:
            raise VolumeFormatError(f"label volume must be 3-D, got shape {labels.shape}")
        if labels.size and labels.min() < 0:
            raise VolumeFormatError("labels must be non-negative")
        counts = np.bincount(labels.ravel()) if labels.size else np.zeros(1, int)
        present = {int(i) for i in np.nonzero(counts)[0] if i != 0}
        missing = present - set(self.table)
        if missing:
            raise VolumeFormatError(f"labels without table entries: {sorted(missing)}")
        for rid, region in self.table.items():
            size = int(counts[rid]) if rid < counts.size else 0
            if region.size != size:
                raise VolumeFormatError(
                    f"label {rid} ({region.name}) has {size} voxels, table says {region.size}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "table", dict(sorted(self.table.items())))

    @classmethod
    def from_labels(cls, labels, names=None, sides=None):
        """Build the table from the label volume.

        Args:
            labels: integer array (nx, ny, nz)
            names: optional {id: name}; defaults to ``region_<id>``
            sides: optional {id: side tag}
        """
        labels = np.asarray(labels, dtype=np.int32)
        counts = np.bincount(labels.ravel())
        names, sides = names or {}, sides or {}
        table = {int(i): Region(names.get(int(i), f"region_{int(i)}"), int(counts[i]),
                                sides.get(int(i)))
                 for i in np.nonzero(counts)[0] if i != 0}
        return cls(labels, table)

    @property
    def dims(self):
        return self.labels.shape

    @property
    def ids(self):
        return list(self.table)

    def region_mask(self, rid):
        return Mask(self.labels == rid)

    def to_mask(self):
        return Mask(self.labels > 0)

    def __repr__(self):
        return f"LabeledMask(dims={self.dims}, regions={len(self.table)})"


# ---------------------------------------------------------------------------
# Time-activity curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TAC:
    """Time-activity curve: times in minutes, values in kBq/mL."""
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times, values = _frozen(self.times), _frozen(self.values)
        if times.ndim != 1 or times.shape != values.shape:
            raise ValueError(f"times {times.shape} and values {values.shape} differ")
        if times.size == 0:
            raise ValueError("TAC has no samples")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ValueError("TAC contains non-finite values")
        if np.any(np.diff(times) <= 0):
            raise NonMonotonicTimes("TAC times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.times.size

    def with_origin(self):
        """Times and values with the first sample held back to t = 0."""
        if self.times[0] > 0:
            return (np.concatenate(([0.0], self.times)),
                    np.concatenate(([self.values[0]], self.values)))
        return self.times, self.values

    def to_frame(self):
        return pd.DataFrame({TAC_COLUMNS[0]: self.times, TAC_COLUMNS[1]: self.values})

    def __repr__(self):
        return f"TAC(n={len(self)}, peak={self.values.max():.4g})"


def tac_to_csv(tac, path):
    """Write a TAC as CSV with 9 significant digits."""
    buffer = io.StringIO()
    tac.to_frame().to_csv(buffer, index=False, float_format="%.9g", lineterminator="\n")
    atomic_write(path, buffer.getvalue())


def tac_from_csv(path):
    """Read a TAC written by tac_to_csv.

    Raises:
        VolumeIOError: If the file cannot be read
        ParseError: If a cell is missing or not a number (row is 1-based)
        NonMonotonicTimes: If times are not strictly increasing
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except OSError as e:
        raise VolumeIOError(path, e) from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"{path}: {e}") from e
    if tuple(frame.columns) != TAC_COLUMNS:
        raise ParseError(f"{path}: expected columns {TAC_COLUMNS}, got {tuple(frame.columns)}")
    if frame.empty:
        raise ParseError(f"{path}: no data rows")
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1) | ~np.isfinite(numeric.to_numpy(dtype=float)).all(axis=1)
    if bad.any():
        row = int(np.argmax(bad.to_numpy())) + 1
        raise ParseError(f"{path}: not a number: {list(frame.iloc[row - 1])}", row=row)
    return TAC(numeric[TAC_COLUMNS[0]].to_numpy(float), numeric[TAC_COLUMNS[1]].to_numpy(float))


# ---------------------------------------------------------------------------
# Raw + JSON format
# ---------------------------------------------------------------------------

def atomic_write(path, data):
    """Write text or bytes to path via a temporary file in the same directory.

    Raises:
        VolumeIOError: If the file cannot be written
    """
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    tmp = None
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)
        raise VolumeIOError(path, e) from e


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, ensure_ascii=False) + "\n")


def _base(path):
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".raw", ".json") else path


def _raw_paths(path):
    base = _base(path)
    return base.with_name(base.name + ".raw"), base.with_name(base.name + ".json")


def write_raw(path, array, sidecar):
    """Write ``<base>.raw`` (float32 LE, x-fastest) and ``<base>.json``."""
    raw_path, json_path = _raw_paths(path)
    array = np.asarray(array)
    payload = array.astype("<f4").tobytes(order="F")
    header = {"format": RAW_FORMAT, "version": RAW_VERSION, "dims": list(array.shape)}
    header.update(sidecar)
    atomic_write(raw_path, payload)
    write_json(json_path, header)
    return raw_path, json_path


def read_raw(path, kind=None):
    """Read a raw volume and its sidecar.

    Returns:
        (float64 array in [x, y, z(, t)] order, sidecar dict)
    """
    raw_path, json_path = _raw_paths(path)
    try:
        sidecar = json.loads(json_path.read_text(encoding="utf-8"))
        payload = raw_path.read_bytes()
    except OSError as e:
        raise VolumeIOError(e.filename or path, e.strerror or e) from e
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"{json_path}: invalid JSON: {e}") from e
    if sidecar.get("format") != RAW_FORMAT:
        raise VolumeFormatError(f"{json_path}: not a {RAW_FORMAT} sidecar")
    if kind is not None and sidecar.get("kind", "volume") != kind:
        raise VolumeFormatError(f"{json_path}: expected kind {kind!r}, got {sidecar.get('kind')!r}")
    try:
        dims = tuple(int(d) for d in sidecar["dims"])
    except (KeyError, TypeError, ValueError) as e:
        raise VolumeFormatError(f"{json_path}: missing or bad 'dims'") from e
    expected = int(np.prod(dims)) * 4
    if len(payload) < expected:
        raise Truncated(f"{raw_path}: {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise VolumeFormatError(f"{raw_path}: {len(payload)} bytes, expected {expected}")
    array = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F").astype(np.float64)
    return array, sidecar


def _schedule_from_sidecar(sidecar, source):
    try:
        durations = sidecar["frame_durations_s"]
    except KeyError as e:
        raise VolumeFormatError(f"{source}: sidecar has no 'frame_durations_s'") from e
    return FrameSchedule(tuple(durations), float(sidecar.get("offset_s", 0.0)))


def _report_corrections(vol, source, file):
    if vol.nonfinite:
        warn(f"{source}: {vol.nonfinite} non-finite voxels set to 0", file=file)
    if vol.clamped:
        warn(f"{source}: {vol.clamped} negative voxels clamped to 0", file=file)


def save_volume(vol, path):
    """Save a DynVolume as raw + JSON sidecar."""
    return write_raw(path, vol.data, {
        "kind": "volume",
        "voxel_mm": list(vol.voxel_mm),
        "frame_durations_s": list(vol.schedule.durations_s),
        "offset_s": vol.schedule.offset_s,
    })


def load_volume(path, *, file=sys.stderr):
    """Load a DynVolume from raw + JSON or from NIfTI-1 (``.nii``)."""
    if Path(path).suffix == ".nii":
        return load_nifti(path, file=file)
    array, sidecar = read_raw(path, kind="volume")
    if array.ndim != 4:
        raise VolumeFormatError(f"{path}: expected 4-D dims, got {array.shape}")
    schedule = _schedule_from_sidecar(sidecar, path)
    if len(schedule) != array.shape[3]:
        raise SchedulingMismatch(
            f"{path}: {array.shape[3]} frames but {len(schedule)} frame durations")
    vol = DynVolume.from_array(array, sidecar.get("voxel_mm", (1.0, 1.0, 1.0)), schedule)
    _report_corrections(vol, path, file)
    return vol


def read_nifti(path):
    """Decode a single-file NIfTI-1 image.

    Returns:
        (float64 array with scaling applied, voxel sizes in mm)

    Raises:
        BadMagic, UnsupportedDatatype, Truncated, VolumeIOError
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise VolumeIOError(path, e.strerror or e) from e
    if len(raw) < NIFTI_HEADER_SIZE:
        raise Truncated(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header")
    hdr = nib.Nifti1Header(raw[:NIFTI_HEADER_SIZE], check=False)
    magic = bytes(hdr["magic"].item())
    if magic != b"n+1":
        raise BadMagic(f"{path}: magic {magic!r} is not b'n+1'")
    code = int(hdr["datatype"])
    if code not in NIFTI_DATATYPES:
        raise UnsupportedDatatype(f"{path}: datatype {code} not in {sorted(NIFTI_DATATYPES)}")
    dim = hdr["dim"]
    ndim = int(dim[0])
    if ndim not in (3, 4):
        raise VolumeFormatError(f"{path}: {ndim}-D images are not supported")
    shape = tuple(int(d) for d in dim[1:ndim + 1])
    dtype = hdr.get_data_dtype()
    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    if len(raw) - offset < count * dtype.itemsize:
        raise Truncated(
            f"{path}: payload has {max(len(raw) - offset, 0)} bytes, "
            f"expected {count * dtype.itemsize}")
    array = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    array = array.reshape(shape, order="F").astype(np.float64)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    # slope 0 or NaN means the payload is stored unscaled
    if math.isfinite(slope) and slope != 0:
        array = array * slope + (inter if math.isfinite(inter) else 0.0)
    voxel = tuple(float(p) for p in hdr["pixdim"][1:4])
    return array, voxel


def load_nifti(path, schedule=None, *, file=sys.stderr):
    """Load a NIfTI-1 dynamic volume.

    The frame schedule is taken from ``schedule`` or, if omitted, from the
    ``<stem>.json`` sidecar next to the image.
    """
    array, voxel = read_nifti(path)
    if array.ndim == 3:
        array = array[..., np.newaxis]
    if schedule is None:
        sidecar_path = Path(path).with_suffix(".json")
        try:
            sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        except OSError as e:
            raise VolumeIOError(sidecar_path, e.strerror or e) from e
        schedule = _schedule_from_sidecar(sidecar, sidecar_path)
    if len(schedule) != array.shape[3]:
        raise SchedulingMismatch(
            f"{path}: {array.shape[3]} frames but {len(schedule)} frame durations")
    voxel = tuple(v if v > 0 else 1.0 for v in voxel)
    vol = DynVolume.from_array(array, voxel, schedule)
    _report_corrections(vol, path, file)
    return vol


def save_nifti(vol, path):
    """Save a DynVolume as single-file NIfTI-1 float32 plus ``<stem>.json``.

    The sidecar carries the frame schedule, which NIfTI cannot hold.
    """
    path = Path(path)
    img = nib.Nifti1Image(vol.data.astype(np.float32), np.diag([*vol.voxel_mm, 1.0]))
    img.header.set_xyzt_units("mm", "sec")
    atomic_write(path, img.to_bytes())
    sidecar_path = path.with_suffix(".json")
    write_json(sidecar_path, {
        "frame_durations_s": list(vol.schedule.durations_s),
        "offset_s": vol.schedule.offset_s,
    })
    return path, sidecar_path


def _read_3d(path, kind):
    if Path(path).suffix == ".nii":
        array, voxel = read_nifti(path)
        return (array[..., 0] if array.ndim == 4 else array), {"voxel_mm": list(voxel)}
    array, sidecar = read_raw(path, kind=kind)
    if array.ndim != 3:
        raise VolumeFormatError(f"{path}: expected 3-D dims, got {array.shape}")
    return array, sidecar


def save_mask(mask, path, voxel_mm=(1.0, 1.0, 1.0)):
    return write_raw(path, mask.data, {"kind": "mask", "voxel_mm": list(voxel_mm)})


def load_mask(path):
    array, _ = _read_3d(path, "mask")
    return Mask(array > 0.5)


def save_labels(labeled, path, voxel_mm=(1.0, 1.0, 1.0)):
    labels = [{"id": rid, "name": r.name, "side": r.side} for rid, r in labeled.table.items()]
    return write_raw(path, labeled.labels, {
        "kind": "labels", "voxel_mm": list(voxel_mm), "labels": labels})


def load_labels(path):
    array, sidecar = _read_3d(path, "labels")
    labels = np.rint(array).astype(np.int32)
    entries = sidecar.get("labels", [])
    names = {int(e["id"]): e["name"] for e in entries}
    sides = {int(e["id"]): e.get("side") for e in entries}
    return LabeledMask.from_labels(labels, names, sides)


def check_same_grid(dims, other, what):
    """Raise GridMismatch unless the spatial dims agree."""
    if tuple(dims[:3]) != tuple(other[:3]):
        raise GridMismatch(f"{what}: {tuple(dims[:3])} vs {tuple(other[:3])}")
