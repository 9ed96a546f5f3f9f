"""ASCII PLY and XYZ point-cloud readers/writers.

Loaders keep file order as point order. Writers print 9 significant digits so
that output bytes are stable across platforms.
"""

from pathlib import Path

import numpy as np

from .geometry import PointCloud


def _fmt(v):
    return format(float(v), ".9g")


def read_xyz(path, frame_id="object"):
    rows = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected at least 3 columns")
            rows.append([float(x) for x in parts[:3]])
    return PointCloud(np.asarray(rows, dtype=np.float64), frame_id)


def write_xyz(path, cloud):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for x, y, z in cloud.points:
            fh.write(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n")


def read_ply(path, frame_id="object"):
    with open(path, "rb") as fh:
        raw = fh.read()
    text = raw.decode("ascii")
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vertex = None
    elements = []  # (name, count, props)
    body_start = None
    for i, line in enumerate(lines[1:], 1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported, got {tok[1]}")
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise ValueError(f"{path}: property before element")
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[-1]))
            else:
                elements[-1][2].append((tok[1], tok[2]))
        elif tok[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None:
        raise ValueError(f"{path}: missing end_header")
    row = body_start
    points = None
    for name, count, eprops in elements:
        if name != "vertex":
            row += count
            continue
        names = [p[1] for p in eprops]
        if any(p[0] == "list" for p in eprops):
            raise ValueError(f"{path}: list properties on vertex are not supported")
        try:
            cols = [names.index(c) for c in ("x", "y", "z")]
        except ValueError:
            raise ValueError(f"{path}: vertex element needs x, y, z properties") from None
        block = lines[row : row + count]
        if len(block) != count:
            raise ValueError(f"{path}: expected {count} vertices, found {len(block)}")
        data = np.array([ln.split() for ln in block], dtype=np.float64)
        points = data[:, cols]
        n_vertex = count
        break
    if points is None or n_vertex is None:
        raise ValueError(f"{path}: no vertex element")
    return PointCloud(points, frame_id)


def write_ply(path, cloud):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {cloud.n_points}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for x, y, z in cloud.points:
            fh.write(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n")


def read_cloud(path, frame_id="object"):
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path, frame_id)
    return read_xyz(path, frame_id)


def write_cloud(path, cloud):
    path = Path(path)
    if path.suffix.lower() == ".ply":
        write_ply(path, cloud)
    else:
        write_xyz(path, cloud)
