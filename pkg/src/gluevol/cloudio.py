"""Point-cloud file formats.

Text format ``.xyz``: one ``x y z`` triple per line (mm), ``#`` comment
lines. Metadata rides in header comments as ``# meta key=<json>`` so a scan
round-trips with its provenance. Floats are written with shortest
round-trip formatting, so read(write(cloud)) is bit-exact.

Binary format ``GGPC1``: magic ``GGPC1``, u32 point count, then
little-endian f64 xyz triples.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geom3d import PointCloud

GGPC_MAGIC = b"GGPC1"


class CloudFormatError(ValueError):
    """Malformed point-cloud file."""


def write_xyz(cloud: PointCloud, path) -> None:
    lines = []
    for key in sorted(cloud.meta):
        lines.append(f"# meta {key}={json.dumps(cloud.meta[key], sort_keys=True)}\n")
    for x, y, z in cloud.xyz:
        lines.append(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
    Path(path).write_text("".join(lines))


def read_xyz(path) -> PointCloud:
    meta = {}
    rows = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("meta "):
                key, _, value = body[5:].partition("=")
                meta[key.strip()] = json.loads(value)
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CloudFormatError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        rows.append([float(p) for p in parts])
    return PointCloud(np.asarray(rows, dtype=np.float64).reshape(-1, 3), meta)


def write_ggpc(cloud: PointCloud, path) -> None:
    with open(path, "wb") as fh:
        fh.write(GGPC_MAGIC)
        fh.write(struct.pack("<I", len(cloud)))
        fh.write(np.ascontiguousarray(cloud.xyz, dtype="<f8").tobytes())


def read_ggpc(path) -> PointCloud:
    data = Path(path).read_bytes()
    if data[:5] != GGPC_MAGIC:
        raise CloudFormatError(f"{path}: bad magic {data[:5]!r}")
    (count,) = struct.unpack_from("<I", data, 5)
    expected = 9 + count * 24
    if len(data) != expected:
        raise CloudFormatError(f"{path}: expected {expected} bytes, got {len(data)}")
    xyz = np.frombuffer(data, dtype="<f8", offset=9).reshape(count, 3)
    return PointCloud(xyz.astype(np.float64))


def read_cloud(path) -> PointCloud:
    """Dispatch on the GGPC1 magic, otherwise parse as .xyz text."""
    with open(path, "rb") as fh:
        magic = fh.read(5)
    if magic == GGPC_MAGIC:
        return read_ggpc(path)
    return read_xyz(path)
