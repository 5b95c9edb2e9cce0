"""Binary snapshot format for torus fields.

One record per field:

    magic   4 bytes  b"NSKF"
    version u16      currently 1
    d       u16      spatial dimension
    ncomp   u16      number of stacked components
    N       d * u32  points per axis
    L       d * f64  period per axis
    values  ncomp * prod(N) * f64, C order, component-major

All integers and floats little-endian. A file may hold several records back to
back (used for time series of control fields).
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import ParseError
from .spectral import SpectralField, TorusGrid

MAGIC = b"NSKF"
VERSION = 1


def write_record(fh: BinaryIO, field: SpectralField) -> None:
    g = field.grid
    fh.write(MAGIC)
    fh.write(struct.pack("<HHH", VERSION, g.d, field.ncomp))
    fh.write(struct.pack(f"<{g.d}I", *g.N))
    fh.write(struct.pack(f"<{g.d}d", *g.L))
    values = np.ascontiguousarray(field.grid_values(real=True), dtype="<f8")
    fh.write(values.tobytes())


def read_record(fh: BinaryIO) -> SpectralField | None:
    """Read one record; None at a clean end of file."""
    head = fh.read(4)
    if head == b"":
        return None
    if head != MAGIC:
        raise ParseError(f"bad snapshot magic {head!r}")
    version, d, ncomp = struct.unpack("<HHH", _exactly(fh, 6))
    if version != VERSION:
        raise ParseError(f"unsupported snapshot version {version}")
    if not 1 <= d <= 3 or ncomp < 1:
        raise ParseError(f"implausible snapshot header: d={d}, ncomp={ncomp}")
    N = struct.unpack(f"<{d}I", _exactly(fh, 4 * d))
    L = struct.unpack(f"<{d}d", _exactly(fh, 8 * d))
    grid = TorusGrid(L, N)
    count = ncomp * grid.npoints
    raw = _exactly(fh, 8 * count)
    values = np.frombuffer(raw, dtype="<f8").reshape(ncomp, *N)
    return SpectralField.from_grid_values(grid, values)


def _exactly(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ParseError(f"truncated snapshot record: wanted {n} bytes, got {len(data)}")
    return data


def write_fields(path, fields) -> None:
    with open(path, "wb") as fh:
        for field in fields:
            write_record(fh, field)


def read_fields(path) -> list[SpectralField]:
    out = []
    with open(path, "rb") as fh:
        while True:
            rec = read_record(fh)
            if rec is None:
                return out
            out.append(rec)
