"""VOL3 volume/field files and fiducial CSV files.

VOL3 layout::

    VOL3 1
    dims=<nx> <ny> <nz>
    spacing=<sx> <sy> <sz>
    origin=<ox> <oy> <oz>
    channels=<1|3>
    dtype=f32le
    <blank line>
    <raw little-endian float32, x fastest, channels interleaved per voxel>
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .errors import FormatError
from .volume import DisplacementField, ScalarVolume

MAGIC = "VOL3 1"
FIDUCIAL_HEADER = ("id", "x_mm", "y_mm", "z_mm")


def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


def vol3_bytes(obj) -> bytes:
    if isinstance(obj, DisplacementField):
        channels = 3
        # (3, nx, ny, nz) -> (nz, ny, nx, 3): x fastest, components interleaved
        raw = np.transpose(obj.data, (3, 2, 1, 0))
    elif isinstance(obj, ScalarVolume):
        channels = 1
        raw = np.transpose(obj.data, (2, 1, 0))
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")
    nx, ny, nz = obj.dims
    header = (
        f"{MAGIC}\n"
        f"dims={nx} {ny} {nz}\n"
        f"spacing={_fmt(obj.spacing)}\n"
        f"origin={_fmt(obj.origin)}\n"
        f"channels={channels}\n"
        "dtype=f32le\n"
        "\n"
    )
    return header.encode("ascii") + np.ascontiguousarray(raw, dtype="<f4").tobytes()


def write_vol3(path, obj) -> None:
    path = Path(path)
    try:
        path.write_bytes(vol3_bytes(obj))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_vol3(path):
    """Read a VOL3 file as ScalarVolume (channels=1) or DisplacementField (3)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    end = blob.find(b"\n\n")
    if end < 0 or not blob.startswith(MAGIC.encode() + b"\n"):
        raise FormatError(f"{path}: not a VOL3 file")
    lines = blob[:end].decode("ascii").split("\n")[1:]
    meta = {}
    for line in lines:
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: bad header line {line!r}")
        meta[key.strip()] = value.strip()
    try:
        dims = tuple(int(v) for v in meta["dims"].split())
        spacing = tuple(float(v) for v in meta["spacing"].split())
        origin = tuple(float(v) for v in meta["origin"].split())
        channels = int(meta["channels"])
        dtype = meta["dtype"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete header ({exc})") from exc
    if dtype != "f32le" or channels not in (1, 3) or len(dims) != 3:
        raise FormatError(f"{path}: unsupported dtype/channels/dims")
    payload = blob[end + 2:]
    count = dims[0] * dims[1] * dims[2] * channels
    if len(payload) != 4 * count:
        raise FormatError(f"{path}: expected {4 * count} data bytes, found {len(payload)}")
    raw = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    nx, ny, nz = dims
    if channels == 1:
        return ScalarVolume(raw.reshape(nz, ny, nx).transpose(2, 1, 0), spacing, origin)
    return DisplacementField(raw.reshape(nz, ny, nx, 3).transpose(3, 2, 1, 0), spacing, origin)


def fiducials_csv(fiducials) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FIDUCIAL_HEADER)
    for fid in fiducials:
        x, y, z = fid.position
        writer.writerow([fid.id, f"{x:.6f}", f"{y:.6f}", f"{z:.6f}"])
    return buf.getvalue()


def write_fiducials(path, fiducials) -> None:
    path = Path(path)
    try:
        path.write_text(fiducials_csv(fiducials), newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_fiducials(path):
    from .phantom import Fiducial, FiducialSet

    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != FIDUCIAL_HEADER:
        raise FormatError(f"{path}: missing header {','.join(FIDUCIAL_HEADER)}")
    try:
        entries = [Fiducial(int(r[0]), (float(r[1]), float(r[2]), float(r[3])))
                   for r in rows[1:] if r]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: bad fiducial row ({exc})") from exc
    return FiducialSet(tuple(entries))
