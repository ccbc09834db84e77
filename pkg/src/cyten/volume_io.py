"""Bit-exact persistence: volumes, cohort manifests, and checkpoints.

MVOL container: magic ``MVOL1\\n``, u32 little-endian header length, UTF-8
JSON header ``{"dims":[D,H,W],"spacing_mm":[sx,sy,sz],"dtype":"f32",
"modality":...,"orientation":"RAS"}``, then D*H*W float32 little-endian
voxels, W fastest.

Checkpoint container: magic ``CYCK1\\n``, u32 header length, JSON index of
named tensors (name, shape, dtype, offset, length) plus metadata, then the
concatenated little-endian payloads.

Manifest: CSV with the exact header
``subject_id,session_id,modality,path,ce_label,aht_label,fss_score``;
empty cells mean "absent".
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

MVOL_MAGIC = b"MVOL1\n"
CKPT_MAGIC = b"CYCK1\n"
CKPT_VERSION = 1
MANIFEST_HEADER = ["subject_id", "session_id", "modality", "path", "ce_label", "aht_label", "fss_score"]
MODALITIES = ("DWI", "ADC")
VOLUME_MODALITIES = ("DWI", "ADC", "MASK")

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class Volume:
    """3D scalar field with voxel spacing and a modality tag."""

    voxels: np.ndarray  # [D,H,W] float32, row-major, W fastest
    spacing_mm: tuple
    modality: str
    orientation: str = "RAS"

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValidationError("shape mismatch", f"volume must be 3D, got shape {list(self.voxels.shape)}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValidationError("bad spacing", f"spacing must be three positive reals, got {self.spacing_mm}")
        if self.modality not in VOLUME_MODALITIES:
            raise ValidationError("unknown modality", f"modality must be one of {VOLUME_MODALITIES}, got {self.modality!r}")
        if not np.isfinite(self.voxels).all():
            raise ValidationError("non-finite voxels", "volume contains NaN or Inf")

    @property
    def dims(self):
        return self.voxels.shape


def write_mvol(volume, path):
    header = {
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing_mm),
        "dtype": "f32",
        "modality": volume.modality,
        "orientation": volume.orientation,
    }
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MVOL_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())


def read_mvol(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:6] != MVOL_MAGIC:
        raise FormatError("bad magic", f"{path}: bad magic {raw[:6]!r}")
    if len(raw) < 10:
        raise FormatError("truncated header", f"{path}: file too short for header length")
    (hlen,) = struct.unpack("<I", raw[6:10])
    if len(raw) < 10 + hlen:
        raise FormatError("truncated header", f"{path}: header claims {hlen} bytes, file ends early")
    try:
        header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("bad header", f"{path}: header is not valid JSON ({exc})") from exc
    for key in ("dims", "spacing_mm", "dtype", "modality", "orientation"):
        if key not in header:
            raise FormatError("bad header", f"{path}: header missing {key!r}")
    if header["dtype"] != "f32":
        raise FormatError("bad header", f"{path}: unsupported dtype {header['dtype']!r}")
    dims = header["dims"]
    if len(dims) != 3 or any(int(x) <= 0 for x in dims):
        raise FormatError("bad header", f"{path}: bad dims {dims}")
    count = int(dims[0]) * int(dims[1]) * int(dims[2])
    payload = raw[10 + hlen:]
    if len(payload) != count * 4:
        raise FormatError("payload length mismatch",
                          f"{path}: header claims {count} voxels, payload has {len(payload) // 4}")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return Volume(voxels=voxels.copy(), spacing_mm=header["spacing_mm"],
                  modality=header["modality"], orientation=header["orientation"])


# ---------------------------------------------------------------------------
# cohort manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScanRecord:
    subject_id: str
    session_id: str
    modality: str
    path: str
    ce_label: int | None = None
    aht_label: int | None = None
    fss_score: int | None = None

    @property
    def key(self):
        return (self.subject_id, self.session_id, self.modality, self.path)


@dataclass
class CohortManifest:
    records: list = field(default_factory=list)

    def subjects(self):
        seen = []
        for r in self.records:
            if r.subject_id not in seen:
                seen.append(r.subject_id)
        return seen

    def by_subject(self):
        out = {}
        for r in self.records:
            out.setdefault(r.subject_id, []).append(r)
        return out

    def filter(self, subjects=None, modality=None):
        recs = self.records
        if subjects is not None:
            keep = set(subjects)
            recs = [r for r in recs if r.subject_id in keep]
        if modality is not None:
            recs = [r for r in recs if r.modality == modality]
        return CohortManifest(records=list(recs))


def _parse_binary(cell, column, lineno):
    if cell == "":
        return None
    if cell not in ("0", "1"):
        raise FormatError("bad label", f"line {lineno}: {column} must be 0, 1 or empty, got {cell!r}")
    return int(cell)


def read_manifest(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return parse_manifest(fh, source=str(path))


def parse_manifest(fh, source="<manifest>"):
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("bad header", f"{source}: empty manifest") from None
    if header != MANIFEST_HEADER:
        raise FormatError("bad header", f"{source}: header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
    records = []
    keys = set()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise FormatError("bad row", f"{source} line {lineno}: expected {len(MANIFEST_HEADER)} cells, got {len(row)}")
        subject_id, session_id, modality, vpath, ce, aht, fss = row
        if modality not in MODALITIES:
            raise FormatError("unknown modality", f"{source} line {lineno}: unknown modality {modality!r}")
        if not subject_id or not session_id or not vpath:
            raise FormatError("bad row", f"{source} line {lineno}: subject_id, session_id and path are required")
        if fss == "":
            fss_val = None
        else:
            try:
                fss_val = int(fss)
            except ValueError:
                raise FormatError("bad fss", f"{source} line {lineno}: fss_score must be an integer, got {fss!r}") from None
            if fss_val < 0:
                raise FormatError("bad fss", f"{source} line {lineno}: fss_score must be >= 0, got {fss_val}")
        rec = ScanRecord(subject_id, session_id, modality, vpath,
                         _parse_binary(ce, "ce_label", lineno),
                         _parse_binary(aht, "aht_label", lineno),
                         fss_val)
        if rec.key in keys:
            raise FormatError("duplicate record", f"{source} line {lineno}: duplicate key {rec.key}")
        keys.add(rec.key)
        records.append(rec)
    return CohortManifest(records=records)


def write_manifest(manifest, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow([
                r.subject_id, r.session_id, r.modality, r.path,
                "" if r.ce_label is None else r.ce_label,
                "" if r.aht_label is None else r.aht_label,
                "" if r.fss_score is None else r.fss_score,
            ])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    network_kind: str
    tensors: dict  # name -> np.ndarray
    metadata: dict = field(default_factory=dict)
    format_version: int = CKPT_VERSION


def save_checkpoint(ckpt, path):
    names = sorted(ckpt.tensors)
    entries = []
    offset = 0
    payloads = []
    for name in names:
        arr = ckpt.tensors[name]
        dtype = "f32" if arr.dtype == np.float32 else "f64"
        if np.dtype(_DTYPES[dtype]) != arr.dtype.newbyteorder("<"):
            arr = arr.astype(_DTYPES[dtype])
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "length": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format_version": ckpt.format_version,
        "network_kind": ckpt.network_kind,
        "metadata": ckpt.metadata,
        "tensors": entries,
    }
    hbytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:6] != CKPT_MAGIC:
        raise FormatError("bad magic", f"{path}: bad magic {raw[:6]!r}")
    if len(raw) < 10:
        raise FormatError("truncated header", f"{path}: file too short for header length")
    (hlen,) = struct.unpack("<I", raw[6:10])
    if len(raw) < 10 + hlen:
        raise FormatError("truncated header", f"{path}: header claims {hlen} bytes, file ends early")
    try:
        header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("bad header", f"{path}: header is not valid JSON ({exc})") from exc
    if header.get("format_version") != CKPT_VERSION:
        raise FormatError("version mismatch", f"{path}: format_version {header.get('format_version')} != {CKPT_VERSION}")
    payload = raw[10 + hlen:]
    tensors = {}
    seen = set()
    for entry in header["tensors"]:
        name = entry["name"]
        if name in seen:
            raise FormatError("duplicate tensor", f"{path}: duplicate tensor name {name!r}")
        seen.add(name)
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise FormatError("bad header", f"{path}: unsupported tensor dtype {entry['dtype']!r}")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if entry["length"] != count * dt.itemsize:
            raise FormatError("payload length mismatch",
                              f"{path}: tensor {name!r} claims shape {entry['shape']} but {entry['length']} bytes")
        chunk = payload[entry["offset"]:entry["offset"] + entry["length"]]
        if len(chunk) != entry["length"]:
            raise FormatError("truncated payload", f"{path}: tensor {name!r} extends past end of file")
        tensors[name] = np.frombuffer(chunk, dtype=dt).reshape(entry["shape"]).copy()
    return Checkpoint(network_kind=header["network_kind"], tensors=tensors,
                      metadata=header.get("metadata", {}), format_version=header["format_version"])


def manifest_to_csv_bytes(manifest):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in manifest.records:
        writer.writerow([r.subject_id, r.session_id, r.modality, r.path,
                         "" if r.ce_label is None else r.ce_label,
                         "" if r.aht_label is None else r.aht_label,
                         "" if r.fss_score is None else r.fss_score])
    return buf.getvalue().encode("utf-8")
