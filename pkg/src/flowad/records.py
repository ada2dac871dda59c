"""Bit-exact file formats: PFLE embedding records, PGM images, manifests,
and the checkpoint container.

Everything is little-endian with explicitly packed headers, so files are
platform-independent and round-trip byte-for-byte.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

PFLE_MAGIC = b"PFLE"
PFLE_VERSION = 1
PFLE_HEADER = struct.Struct("<4sHIHHHIH")  # magic, version, C, L, H, W, D_raw, flags
FLAG_ROW_MAJOR = 0x0001
FLAG_PRE_FINAL_NORM = 0x0002  # extractor: features taken before any final norm

CHECKPOINT_MAGIC = b"PFLC"
CHECKPOINT_VERSION = 1

MASK_THRESHOLD = 127  # PGM mask pixels above this are anomalous


@dataclass
class EmbeddingRecord:
    """One image's frozen-encoder output: class token plus L patch grids.

    `x_cls` is (D_raw,) float32; `layers` is (L, H*W, D_raw) float32 with
    patch rows in row-major (top-left to bottom-right) order.
    """

    joint_dim: int
    grid_h: int
    grid_w: int
    raw_dim: int
    x_cls: np.ndarray
    layers: np.ndarray
    flags: int = FLAG_ROW_MAJOR

    @property
    def n_layers(self):
        return self.layers.shape[0]


def write_record(path, record):
    x_cls = np.ascontiguousarray(record.x_cls, dtype="<f4")
    layers = np.ascontiguousarray(record.layers, dtype="<f4")
    n_layers, hw, raw_dim = layers.shape
    if hw != record.grid_h * record.grid_w or raw_dim != record.raw_dim:
        raise DataError("record payload does not match its own header fields", code="shape_mismatch")
    if x_cls.shape != (record.raw_dim,):
        raise DataError("x_cls length does not match D_raw", code="shape_mismatch")
    header = PFLE_HEADER.pack(
        PFLE_MAGIC, PFLE_VERSION, record.joint_dim, n_layers,
        record.grid_h, record.grid_w, record.raw_dim, record.flags,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(x_cls.tobytes())
        fh.write(layers.tobytes())


def read_record_header(path):
    """Parse and validate the fixed header; returns the unpacked fields."""
    with open(path, "rb") as fh:
        blob = fh.read(PFLE_HEADER.size)
    if len(blob) < PFLE_HEADER.size:
        raise DataError(
            f"{path}: truncated header at byte {len(blob)} (need {PFLE_HEADER.size})",
            code="truncated",
        )
    magic, version, joint_dim, n_layers, grid_h, grid_w, raw_dim, flags = PFLE_HEADER.unpack(blob)
    if magic != PFLE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte 0", code="bad_magic")
    if version != PFLE_VERSION:
        raise DataError(f"{path}: unsupported version {version}", code="version")
    return {
        "joint_dim": joint_dim,
        "n_layers": n_layers,
        "grid_h": grid_h,
        "grid_w": grid_w,
        "raw_dim": raw_dim,
        "flags": flags,
    }


def expected_record_size(header):
    payload = header["raw_dim"] + header["n_layers"] * header["grid_h"] * header["grid_w"] * header["raw_dim"]
    return PFLE_HEADER.size + 4 * payload


def read_record(path):
    header = read_record_header(path)
    expected = expected_record_size(header)
    data = Path(path).read_bytes()
    if len(data) != expected:
        raise DataError(
            f"{path}: truncated payload at byte {len(data)} (expected {expected} bytes)",
            code="truncated",
        )
    raw_dim = header["raw_dim"]
    off = PFLE_HEADER.size
    x_cls = np.frombuffer(data, dtype="<f4", count=raw_dim, offset=off)
    off += 4 * raw_dim
    n = header["n_layers"] * header["grid_h"] * header["grid_w"] * raw_dim
    layers = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(
        header["n_layers"], header["grid_h"] * header["grid_w"], raw_dim
    )
    return EmbeddingRecord(
        joint_dim=header["joint_dim"],
        grid_h=header["grid_h"],
        grid_w=header["grid_w"],
        raw_dim=raw_dim,
        x_cls=x_cls.copy(),
        layers=layers.copy(),
        flags=header["flags"],
    )


# -- PGM (binary, "P5") --------------------------------------------------------


def write_pgm(path, values):
    """Write a (h, w) uint8 array as binary PGM with maxval 255."""
    arr = np.ascontiguousarray(values, dtype=np.uint8)
    if arr.ndim != 2:
        raise DataError("PGM payload must be 2-D", code="shape_mismatch")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    stream = io.BytesIO(data)

    def token():
        # skip whitespace and '#' comments
        out = b""
        while True:
            ch = stream.read(1)
            if not ch:
                raise DataError(f"{path}: truncated PGM header", code="truncated")
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = stream.read(1)
                continue
            if ch.isspace():
                if out:
                    return out
                continue
            out += ch

    if token() != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file", code="bad_magic")
    width, height, maxval = int(token()), int(token()), int(token())
    if maxval != 255:
        raise DataError(f"{path}: unsupported PGM maxval {maxval}", code="version")
    body = stream.read()
    if len(body) < width * height:
        raise DataError(
            f"{path}: truncated PGM payload at byte {len(data) - (width * height - len(body))}",
            code="truncated",
        )
    return np.frombuffer(body[: width * height], dtype=np.uint8).reshape(height, width).copy()


def map_to_pgm(path, anomaly_map):
    """Export an anomaly map in [0, 1] as 8-bit PGM (round(255 * M))."""
    arr = np.clip(np.asarray(anomaly_map, dtype=np.float64), 0.0, 1.0)
    write_pgm(path, np.round(255.0 * arr).astype(np.uint8))


def read_mask(path):
    """Binary ground-truth mask from PGM: > MASK_THRESHOLD means anomalous."""
    return (read_pgm(path) > MASK_THRESHOLD).astype(np.uint8)


# -- dataset manifest -----------------------------------------------------------


@dataclass
class ManifestEntry:
    category: str
    split: str  # train | val | test
    record: str  # path relative to the manifest
    label: int  # 0 normal, 1 anomalous
    mask: str | None  # PGM path relative to the manifest, or None
    height: int
    width: int


class Manifest:
    def __init__(self, entries, root):
        self.entries = list(entries)
        self.root = Path(root)

    def record_path(self, entry):
        return self.root / entry.record

    def mask_path(self, entry):
        return None if entry.mask is None else self.root / entry.mask

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def categories(self, split=None):
        names = []
        for e in self.entries:
            if split is not None and e.split != split:
                continue
            if e.category not in names:
                names.append(e.category)
        return names


def write_manifest(path, entries):
    doc = {
        "version": 1,
        "entries": [
            {
                "category": e.category,
                "split": e.split,
                "record": e.record,
                "label": e.label,
                "mask": e.mask,
                "height": e.height,
                "width": e.width,
            }
            for e in entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_manifest(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}", code="missing_file")
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid manifest JSON ({exc})", code="bad_magic")
    entries = [ManifestEntry(**item) for item in doc["entries"]]
    return Manifest(entries, path.parent)


def validate_manifest(manifest):
    """Check referenced files and their consistency.

    Raises DataError with code "missing_file", "label_mask_contradiction", or
    "shape_mismatch" on the first offending entry.
    """
    for e in manifest.entries:
        rec_path = manifest.record_path(e)
        if not rec_path.exists():
            raise DataError(f"missing record file: {rec_path}", code="missing_file")
        header = read_record_header(rec_path)
        if rec_path.stat().st_size != expected_record_size(header):
            raise DataError(
                f"{rec_path}: size does not match header", code="shape_mismatch"
            )
        if e.mask is not None:
            mask_path = manifest.mask_path(e)
            if not mask_path.exists():
                raise DataError(f"missing mask file: {mask_path}", code="missing_file")
            mask = read_mask(mask_path)
            if mask.shape != (e.height, e.width):
                raise DataError(
                    f"{mask_path}: mask shape {mask.shape} != declared {(e.height, e.width)}",
                    code="shape_mismatch",
                )
            if e.label == 0 and mask.any():
                raise DataError(
                    f"{mask_path}: normal image (label 0) has anomalous mask pixels",
                    code="label_mask_contradiction",
                )
    return True


@dataclass
class LoadedImage:
    """One manifest entry with its record payload and mask in memory."""

    category: str
    label: int
    layers: np.ndarray  # (L, HW, D_raw) float32
    x_cls: np.ndarray  # (D_raw,) float32
    mask: np.ndarray  # (h, w) uint8 binary; all-zero when no mask file
    grid_h: int
    grid_w: int
    out_h: int
    out_w: int
    joint_dim: int
    raw_dim: int
    record: str


def load_images(manifest, split):
    """Materialize every entry of one split (records are small at desk scale)."""
    out = []
    for e in manifest.split(split):
        rec = read_record(manifest.record_path(e))
        mask_path = manifest.mask_path(e)
        mask = read_mask(mask_path) if mask_path else np.zeros((e.height, e.width), dtype=np.uint8)
        if mask.shape != (e.height, e.width):
            raise DataError(
                f"{mask_path}: mask shape {mask.shape} != declared {(e.height, e.width)}",
                code="shape_mismatch",
            )
        out.append(
            LoadedImage(
                category=e.category,
                label=e.label,
                layers=rec.layers,
                x_cls=rec.x_cls,
                mask=mask,
                grid_h=rec.grid_h,
                grid_w=rec.grid_w,
                out_h=e.height,
                out_w=e.width,
                joint_dim=rec.joint_dim,
                raw_dim=rec.raw_dim,
                record=e.record,
            )
        )
    return out


# -- checkpoint container --------------------------------------------------------


def save_checkpoint(path, named_params, meta):
    """Versioned binary container: meta key/value text block + named f64 blobs."""
    lines = [f"{k} = {v}" for k, v in meta.items()]
    meta_blob = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(named_params)))
        for name in sorted(named_params):
            data = np.asarray(named_params[name], dtype="<f8", order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(data.tobytes())


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic at byte 0", code="bad_magic")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}", code="version")
    (meta_len,) = struct.unpack_from("<I", data, 6)
    off = 10
    meta_blob = data[off : off + meta_len].decode("utf-8")
    off += meta_len
    meta = {}
    for line in meta_blob.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = []
        for _ in range(ndim):
            (d,) = struct.unpack_from("<I", data, off)
            off += 4
            shape.append(d)
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(data):
            raise DataError(
                f"{path}: truncated checkpoint at byte {len(data)} (need {off + 8 * n})",
                code="truncated",
            )
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        params[name] = arr.copy()
    return params, meta
