"""File formats: uncompressed NIfTI-1 volumes and CSV tables.

Only single-file ``.nii`` is supported. Convert ``.nii.gz`` with
``gunzip`` first; reading compressed data is left to dedicated tools.
"""
from __future__ import annotations

import csv
import math
import struct
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    IngestionError,
    LabelValidationError,
    ParseError,
    SchemaError,
    UnsupportedFormatError,
)
from .pipeline import ClinicalRecord, FeatureTable
from .survstat import SurvivalRecord
from .volume import LabelVolume, ScalarVolume

__all__ = [
    "read_nifti",
    "write_nifti",
    "read_clinical_csv",
    "write_clinical_csv",
    "write_feature_table",
    "read_feature_table",
    "write_labels",
    "read_labels",
    "write_csv",
    "read_csv_rows",
    "format_float",
]

HEADER_SIZE = 348
DATA_OFFSET = 352

# NIfTI datatype code -> numpy dtype (without byte order)
_DATATYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}
_CODES = {np.dtype(v): k for k, v in _DATATYPES.items()}


def _header_fields(raw: bytes, endian: str):
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(endian + "2h", raw[70:74])
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(endian + "3f", raw[108:120])
    qoffset = struct.unpack(endian + "3f", raw[268:280])
    return dim, datatype, bitpix, pixdim, vox_offset, scl_slope, scl_inter, qoffset


def read_nifti(path, kind: str = "scalar"):
    """Read a NIfTI-1 file as a :class:`ScalarVolume` or :class:`LabelVolume`.

    Parameters
    ----------
    path : str or Path
    kind : {'scalar', 'label'}

    Byte order is detected from ``dim[0]``: a value outside 1..7 means the
    file was written on a machine of the other endianness.
    """
    if kind not in ("scalar", "label"):
        raise ValueError("kind must be 'scalar' or 'label'")
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    if data[344:348] != b"n+1\x00":
        raise FormatError(f"{path}: bad magic {data[344:348]!r}, expected single-file NIfTI-1 'n+1'")

    endian = "<"
    (dim0,) = struct.unpack("<h", data[40:42])
    if not 1 <= dim0 <= 7:
        endian = ">"
        (dim0,) = struct.unpack(">h", data[40:42])
        if not 1 <= dim0 <= 7:
            raise FormatError(f"{path}: dim[0] out of range in either byte order")
    dim, datatype, bitpix, pixdim, vox_offset, slope, inter, qoffset = _header_fields(data, endian)

    if datatype not in _DATATYPES:
        raise UnsupportedFormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    if dim0 < 3 or any(d > 1 for d in dim[4:dim0 + 1]):
        raise UnsupportedFormatError(f"{path}: only 3-D volumes are supported (dim={dim[:dim0 + 1]})")
    shape = tuple(int(d) for d in dim[1:4])
    dtype = np.dtype(_DATATYPES[datatype]).newbyteorder(endian)
    offset = int(vox_offset)
    count = int(np.prod(shape))
    if offset < HEADER_SIZE or len(data) < offset + count * dtype.itemsize:
        raise FormatError(f"{path}: voxel data truncated")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    arr = arr.astype(dtype.newbyteorder("="), copy=True).reshape(shape, order="F")

    spacing = tuple(float(abs(p)) for p in pixdim[1:4])
    origin = tuple(float(q) for q in qoffset)
    if kind == "label":
        if arr.dtype.kind == "f":
            if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
                raise LabelValidationError(f"{path}: label volume holds non-integer values")
        ints = arr.astype(np.int64)
        bad = np.setdiff1d(np.unique(ints), (0, 1, 2))
        if bad.size:
            raise LabelValidationError(f"{path}: label value {int(bad[0])} outside {{0, 1, 2}}")
        return LabelVolume(ints, spacing, origin)
    values = arr.astype(float)
    # slope 0 means "no scaling" in NIfTI-1
    if math.isfinite(slope) and slope != 0.0 and (slope, inter) != (1.0, 0.0):
        values = values * slope + inter
    return ScalarVolume(values, spacing, origin)


def _build_header(shape, spacing, origin, datatype, bitpix, endian="<") -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into(endian + "i", hdr, 0, HEADER_SIZE)
    struct.pack_into(endian + "8h", hdr, 40, 3, *shape, 1, 1, 1, 1)
    struct.pack_into(endian + "2h", hdr, 70, datatype, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into(endian + "3f", hdr, 108, float(DATA_OFFSET), 0.0, 0.0)
    hdr[123] = 10  # xyzt_units: mm, seconds
    struct.pack_into(endian + "2h", hdr, 252, 1, 0)  # qform_code scanner, sform_code unset
    struct.pack_into(endian + "3f", hdr, 256, 0.0, 0.0, 0.0)
    struct.pack_into(endian + "3f", hdr, 268, *origin)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(volume, path, dtype=None, endian: str = "<") -> None:
    """Write a volume as single-file NIfTI-1.

    Scalars default to float32 and labels to uint8. ``endian='>'`` writes a
    big-endian file.
    """
    if isinstance(volume, LabelVolume):
        arr = volume.labels
        dtype = np.dtype(dtype or np.uint8)
    elif isinstance(volume, ScalarVolume):
        arr = volume.values
        dtype = np.dtype(dtype or np.float32)
    else:
        raise TypeError("expected a ScalarVolume or LabelVolume")
    if dtype not in _CODES:
        raise UnsupportedFormatError(f"cannot write dtype {dtype}")
    header = _build_header(volume.dims, volume.spacing, volume.origin, _CODES[dtype], dtype.itemsize * 8, endian)
    payload = np.asarray(arr, dtype=dtype.newbyteorder(endian)).tobytes(order="F")
    Path(path).write_bytes(header + b"\x00" * (DATA_OFFSET - HEADER_SIZE) + payload)


# --- CSV ---------------------------------------------------------------------

def format_float(x: float) -> str:
    """Shortest round-tripping text for a float."""
    return repr(float(x))


def write_csv(path, header, rows, provenance: dict | None = None) -> None:
    """Write rows with optional ``# key=value`` provenance comment lines."""
    with open(path, "w", newline="") as fh:
        if provenance:
            for key in sorted(provenance):
                fh.write(f"# {key}={provenance[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])


def read_csv_rows(path):
    """Return ``(header, rows, line_numbers)`` skipping ``#`` comment lines."""
    with open(path, newline="") as fh:
        lines = [(i, line) for i, line in enumerate(fh, start=1)
                 if line.strip() and not line.lstrip().startswith("#")]
    if not lines:
        raise SchemaError(f"{path}: empty CSV")
    reader = csv.reader([line for _, line in lines])
    rows = list(reader)
    return [h.strip() for h in rows[0]], rows[1:], [i for i, _ in lines[1:]]


CLINICAL_REQUIRED = ("patient_id", "gender", "age", "tobacco", "alcohol", "performance_status",
                     "hpv_status", "surgery", "chemotherapy")
OUTCOME_COLUMNS = ("rfs_time", "relapse")


def _optional_float(text, column, line):
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN"):
        return None
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"column {column!r}: non-numeric value {text!r}", line) from None


def read_clinical_csv(path, require_outcome: bool = True) -> list[ClinicalRecord]:
    """Parse the clinical sheet; empty cells become ``None``.

    Required columns are ``patient_id, gender, age, tobacco, alcohol,
    performance_status, hpv_status, surgery, chemotherapy`` plus
    ``rfs_time`` (months, > 0) and ``relapse`` (0/1) when
    ``require_outcome`` is set.
    """
    header, rows, lines = read_csv_rows(path)
    required = CLINICAL_REQUIRED + (OUTCOME_COLUMNS if require_outcome else ())
    absent = [c for c in required if c not in header]
    if absent:
        raise SchemaError(f"{path}: missing required column(s): {', '.join(absent)}")
    col = {name: i for i, name in enumerate(header)}
    records, seen = [], set()
    for row, line in zip(rows, lines):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
        get = lambda name: row[col[name]] if name in col else ""  # noqa: E731
        pid = get("patient_id").strip()
        if not pid:
            raise ParseError("empty patient_id", line)
        if pid in seen:
            raise IngestionError(f"line {line}: duplicate patient id {pid!r}")
        seen.add(pid)
        values = {name: _optional_float(get(name), name, line) for name in CLINICAL_REQUIRED[3:]}
        time = _optional_float(get("rfs_time"), "rfs_time", line)
        relapse = _optional_float(get("relapse"), "relapse", line)
        if require_outcome:
            if time is None or relapse is None:
                raise ParseError("missing RFS outcome", line)
            if not time > 0:
                raise ParseError(f"rfs_time must be > 0, got {time}", line)
            if relapse not in (0.0, 1.0):
                raise ParseError(f"relapse must be 0 or 1, got {relapse}", line)
        gender = get("gender").strip() or None
        records.append(ClinicalRecord(
            patient_id=pid,
            gender=gender,
            age=_optional_float(get("age"), "age", line),
            time=time,
            event=None if relapse is None else bool(relapse),
            **values,
        ))
    return records


def write_clinical_csv(path, records, provenance: dict | None = None) -> None:
    """Inverse of :func:`read_clinical_csv`; ``None`` is written as an empty cell."""
    header = list(CLINICAL_REQUIRED + OUTCOME_COLUMNS)
    rows = []
    for r in records:
        row = [r.patient_id, r.gender or "", "" if r.age is None else r.age]
        row += ["" if getattr(r, c) is None else getattr(r, c) for c in CLINICAL_REQUIRED[3:]]
        row += ["" if r.time is None else r.time, "" if r.event is None else int(r.event)]
        rows.append(row)
    write_csv(path, header, rows, provenance)


def write_feature_table(table: FeatureTable, path, provenance: dict | None = None) -> None:
    rows = [[pid, *map(float, row)] for pid, row in zip(table.patient_ids, table.values)]
    prov = dict(provenance or {})
    prov["modality"] = table.modality
    write_csv(path, ["patient_id", *table.feature_names], rows, prov)


def read_feature_table(path, modality: str | None = None) -> FeatureTable:
    header, rows, lines = read_csv_rows(path)
    if not header or header[0] != "patient_id":
        raise SchemaError(f"{path}: first column must be patient_id")
    if modality is None:
        modality = _read_provenance(path).get("modality", "clinical")
    values = []
    for row, line in zip(rows, lines):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ParseError(str(exc), line) from None
    ids = [r[0] for r in rows]
    return FeatureTable(ids, header[1:], np.array(values, dtype=float).reshape(len(ids), len(header) - 1), modality)


def _read_provenance(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            out[key.strip()] = value.strip()
    return out


read_provenance = _read_provenance


def write_labels(path, records: dict, has_gtvp: dict | None = None, provenance: dict | None = None) -> None:
    """Survival labels CSV: ``patient_id,time,event[,has_gtvp]``."""
    header = ["patient_id", "time", "event"] + (["has_gtvp"] if has_gtvp is not None else [])
    rows = []
    for pid in records:
        r = records[pid]
        row = [pid, float(r.time), int(r.event)]
        if has_gtvp is not None:
            row.append(int(bool(has_gtvp.get(pid, True))))
        rows.append(row)
    write_csv(path, header, rows, provenance)


def read_labels(path):
    """Return ``(records, has_gtvp)`` keyed by patient id, in file order."""
    header, rows, lines = read_csv_rows(path)
    for c in ("patient_id", "time", "event"):
        if c not in header:
            raise SchemaError(f"{path}: missing column {c!r}")
    col = {name: i for i, name in enumerate(header)}
    records, has_gtvp = {}, {}
    for row, line in zip(rows, lines):
        pid = row[col["patient_id"]]
        if pid in records:
            raise IngestionError(f"line {line}: duplicate patient id {pid!r}")
        try:
            time = float(row[col["time"]])
            event = int(float(row[col["event"]]))
        except ValueError as exc:
            raise ParseError(str(exc), line) from None
        if event not in (0, 1):
            raise ParseError(f"event must be 0 or 1, got {event}", line)
        if not time > 0:
            raise ParseError(f"time must be > 0, got {time}", line)
        records[pid] = SurvivalRecord(time, bool(event))
        has_gtvp[pid] = bool(int(float(row[col["has_gtvp"]]))) if "has_gtvp" in col else True
    return records, has_gtvp
