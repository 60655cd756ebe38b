"""On-disk formats: a versioned little-endian array container, and CSV helpers.

Binary layout (all integers little-endian)::

    magic      8 bytes  b"SDATARR\\x00"
    version    u16      currently 1
    kind       u16      1 = MLP parameters, 2 = dataset
    flags      u32      bit 0: parameters are frozen
    count      u32      number of arrays
    table      count x (u16 name length, name utf-8, u8 ndim, ndim x u64 dims)
    payload    every array as float64 '<f8', row-major, in table order
    crc32      u32      of every preceding byte
"""
from __future__ import annotations

import csv
import hashlib
import struct
import zlib
from pathlib import Path

import numpy as np

from .numerics import MlpParams
from .testbed import TargetDataset

MAGIC = b"SDATARR\x00"
VERSION = 1
KIND_PARAMS = 1
KIND_DATASET = 2
FLAG_FROZEN = 1


class FormatError(ValueError):
    """File is truncated, corrupt, or not the expected kind."""


def pack_arrays(arrays: dict[str, np.ndarray], kind: int, flags: int = 0) -> bytes:
    head = [MAGIC, struct.pack("<HHII", VERSION, kind, flags, len(arrays))]
    body = []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f8")
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
        head.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        body.append(a.tobytes())
    blob = b"".join(head + body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def unpack_arrays(blob: bytes):
    """Returns ``(kind, flags, {name: array})``."""
    if len(blob) < len(MAGIC) + 16 or blob[: len(MAGIC)] != MAGIC:
        raise FormatError("not an SDAT array file (bad magic)")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("checksum mismatch; file is corrupt")
    pos = len(MAGIC)
    version, kind, flags, count = struct.unpack_from("<HHII", blob, pos)
    pos += 12
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    table = []
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            table.append((name, shape))
        arrays = {}
        for name, shape in table:
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + size > len(blob) - 4:
                raise FormatError("payload truncated")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed shape table: {exc}") from exc
    if pos != len(blob) - 4:
        raise FormatError("trailing bytes after payload")
    return kind, flags, arrays


def params_to_bytes(params: MlpParams) -> bytes:
    arrays = {}
    for i, (w, b) in enumerate(params.layers):
        arrays[f"layer{i}.weight"] = w
        arrays[f"layer{i}.bias"] = b
    return pack_arrays(arrays, KIND_PARAMS, FLAG_FROZEN if params.frozen else 0)


def params_from_bytes(blob: bytes) -> MlpParams:
    kind, flags, arrays = unpack_arrays(blob)
    if kind != KIND_PARAMS:
        raise FormatError(f"expected a parameter file, found kind {kind}")
    n = len(arrays) // 2
    try:
        layers = [(arrays[f"layer{i}.weight"], arrays[f"layer{i}.bias"]) for i in range(n)]
    except KeyError as exc:
        raise FormatError(f"missing array {exc}") from exc
    if 2 * n != len(arrays) or n == 0:
        raise FormatError("parameter file has an unexpected array set")
    try:
        return MlpParams(layers, frozen=bool(flags & FLAG_FROZEN))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_params(params: MlpParams, path) -> Path:
    path = Path(path)
    path.write_bytes(params_to_bytes(params))
    return path


def load_params(path) -> MlpParams:
    return params_from_bytes(Path(path).read_bytes())


def save_dataset(ds: TargetDataset, path) -> Path:
    path = Path(path)
    blob = pack_arrays(
        {
            "samples": ds.samples,
            "labels": ds.labels.astype(np.float64),
            "declared_weights": np.asarray(ds.declared_weights),
        },
        KIND_DATASET,
    )
    path.write_bytes(blob)
    return path


def load_dataset(path) -> TargetDataset:
    kind, _, arrays = unpack_arrays(Path(path).read_bytes())
    if kind != KIND_DATASET:
        raise FormatError(f"expected a dataset file, found kind {kind}")
    try:
        labels = arrays["labels"].astype(np.intp)
        return TargetDataset(arrays["samples"], labels, tuple(arrays["declared_weights"].tolist()))
    except KeyError as exc:
        raise FormatError(f"missing array {exc}") from exc


def write_points_csv(path, points, labels) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "label"])
        for (px, py), lab in zip(np.asarray(points), np.asarray(labels)):
            w.writerow([repr(float(px)), repr(float(py)), int(lab)])
    return path


def read_histograms_csv(path) -> np.ndarray:
    """Rows of K probabilities; a non-numeric first row is taken as a header."""
    with Path(path).open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise FormatError(f"{path}: no rows")
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        rows = rows[1:]
    try:
        data = [[float(c) for c in r] for r in rows]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not data or len({len(r) for r in data}) != 1:
        raise FormatError(f"{path}: rows have differing column counts")
    return np.asarray(data, dtype=np.float64)


def write_rows_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return path


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
