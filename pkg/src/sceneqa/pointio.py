"""Point-cloud files: a minimal PLY subset and raw float32 ``.xyz`` triplets.

PLY support covers a single ``vertex`` element with float/double ``x y z``
and optional uchar ``red green blue``, in ``ascii`` or
``binary_little_endian`` encoding.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .pointcloud import PointCloud

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "ushort": "<u2", "int": "<i4", "uint": "<u4",
    "int32": "<i4", "uint32": "<u4", "int16": "<i2", "uint16": "<u2",
}


class PLYFormatError(ValueError):
    """Malformed or unsupported PLY content; message carries the header line."""


def _fail(line_no: int, msg: str):
    raise PLYFormatError(f"header line {line_no}: {msg}")


def _parse_header(blob: bytes):
    end = blob.find(b"end_header")
    if end < 0:
        raise PLYFormatError("header: missing end_header")
    nl = blob.find(b"\n", end)
    if nl < 0:
        raise PLYFormatError("header: end_header not terminated by a newline")
    lines = blob[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        _fail(1, "file does not start with 'ply'")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    current = None
    for no, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) != 3 or parts[2] != "1.0":
                _fail(no, f"bad format line {raw!r}")
            if parts[1] not in ("ascii", "binary_little_endian"):
                _fail(no, f"unsupported encoding {parts[1]!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                _fail(no, f"bad element line {raw!r}")
            current = parts[1]
            if current == "vertex":
                if count is not None:
                    _fail(no, "duplicate vertex element")
                count = int(parts[2])
            elif int(parts[2]) != 0:
                _fail(no, f"unsupported non-empty element {current!r}")
        elif parts[0] == "property":
            if current is None:
                _fail(no, "property before any element")
            if len(parts) != 3 or parts[1] == "list":
                _fail(no, f"unsupported property {raw!r}")
            if parts[1] not in _PLY_TYPES:
                _fail(no, f"unknown property type {parts[1]!r}")
            if current == "vertex":
                props.append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            _fail(no, f"unrecognised keyword {parts[0]!r}")
    if fmt is None:
        raise PLYFormatError("header: missing format line")
    if count is None:
        raise PLYFormatError("header: missing 'element vertex'")
    names = [n for n, _ in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise PLYFormatError(f"header: vertex element lacks property {axis!r}")
    return fmt, count, props, nl + 1


def read_ply(path: str | Path) -> PointCloud:
    blob = Path(path).read_bytes()
    fmt, count, props, offset = _parse_header(blob)
    names = [n for n, _ in props]
    if fmt == "ascii":
        rows = blob[offset:].decode("ascii").split("\n")
        rows = [r for r in rows if r.strip()]
        if len(rows) < count:
            raise PLYFormatError(f"body: expected {count} vertex rows, found {len(rows)}")
        table = np.empty((count, len(props)), dtype=np.float64)
        for i, row in enumerate(rows[:count]):
            vals = row.split()
            if len(vals) != len(props):
                raise PLYFormatError(f"body row {i}: expected {len(props)} values, got {len(vals)}")
            table[i] = [float(v) for v in vals]
        columns = {n: table[:, j] for j, n in enumerate(names)}
    else:
        dtype = np.dtype([(n, t) for n, t in props])
        need = dtype.itemsize * count
        if len(blob) - offset < need:
            raise PLYFormatError(f"body: expected {need} bytes of vertex data, found {len(blob) - offset}")
        rec = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        columns = {n: rec[n].astype(np.float64) for n in names}
    pts = np.stack([columns["x"], columns["y"], columns["z"]], axis=1)
    colors = None
    if all(c in columns for c in ("red", "green", "blue")):
        colors = np.stack([columns["red"], columns["green"], columns["blue"]], axis=1) / 255.0
    return PointCloud(pts, colors)


def write_ply(path: str | Path, pc: PointCloud, binary: bool = True) -> None:
    n = len(pc)
    has_color = pc.colors is not None
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}", "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    pts = pc.points.astype("<f4")
    rgb = np.rint(pc.colors * 255).astype("u1") if has_color else None
    if binary:
        fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
        if has_color:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        rec = np.empty(n, dtype=np.dtype(fields))
        rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
        if has_color:
            rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
        body = rec.tobytes()
    else:
        lines = []
        for i in range(n):
            row = " ".join(repr(float(v)) for v in pts[i])
            if has_color:
                row += " " + " ".join(str(int(v)) for v in rgb[i])
            lines.append(row)
        body = ("\n".join(lines) + "\n").encode("ascii")
    Path(path).write_bytes(head + body)


def read_xyz(path: str | Path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % 12:
        raise PLYFormatError(f"xyz: byte length {len(raw)} is not a positive multiple of 12")
    return PointCloud(np.frombuffer(raw, dtype="<f4").reshape(-1, 3).astype(np.float64))


def write_xyz(path: str | Path, pc: PointCloud) -> None:
    Path(path).write_bytes(pc.points.astype("<f4").tobytes())


def read_cloud(path: str | Path) -> PointCloud:
    path = Path(path)
    if path.suffix == ".xyz":
        return read_xyz(path)
    return read_ply(path)
