"""Mesh and point cloud file I/O.

Supported formats:
  * OBJ         : `v` and `f` lines; polygons are fan-triangulated.
  * PLY         : ASCII and binary_little_endian; vertex x/y/z with optional
                  nx/ny/nz (float32 or float64), faces as `uchar count`
                  followed by signed or unsigned 32-bit indices.
  * .tet        : plain text volume mesh: first line `V T`, then V lines
                  `x y z`, then T lines `i j k l` (0-based).

Surface loaders prune vertices referenced by no face (order of the kept
vertices is preserved) so the result always satisfies the TriMesh
invariants.  Parse failures raise ParseError naming the file position.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError
from .geometry import PointCloud, TetMesh, TriMesh, orient_tets

_PLY_SCALARS = {
    "char": "<i1", "int8": "<i1",
    "uchar": "<u1", "uint8": "<u1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
}


def load_mesh(path) -> TriMesh:
    """Load a triangle mesh from an OBJ or PLY file."""
    path = Path(path)
    if not path.exists():
        raise ParseError("mesh file not found", path=path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        vertices, faces = _read_obj(path)
    elif suffix == ".ply":
        vertices, _, faces = _read_ply(path, need_faces=True)
    else:
        raise ParseError(f"unsupported mesh format '{suffix}'", path=path)
    vertices, faces = _prune_unreferenced(vertices, faces)
    return TriMesh(vertices, faces)


def load_cloud_ply(path) -> PointCloud:
    """Load a point cloud (vertex element, optional normals) from PLY."""
    path = Path(path)
    if not path.exists():
        raise ParseError("point cloud file not found", path=path)
    vertices, normals, _ = _read_ply(path, need_faces=False)
    return PointCloud(vertices, normals)


def load_tet(path) -> TetMesh:
    """Load a .tet volume mesh, fixing element orientation."""
    path = Path(path)
    if not path.exists():
        raise ParseError("tet file not found", path=path)
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty .tet file", path=path, line=1)
    head = lines[0].split()
    if len(head) != 2:
        raise ParseError("first line must be 'V T'", path=path, line=1)
    try:
        nv, nt = int(head[0]), int(head[1])
    except ValueError:
        raise ParseError("first line must hold two integers", path=path, line=1)
    if len(lines) < 1 + nv + nt:
        raise ParseError(
            f"expected {1 + nv + nt} lines, file has {len(lines)}", path=path,
            line=len(lines),
        )
    try:
        vertices = np.array(
            [[float(x) for x in lines[1 + i].split()] for i in range(nv)]
        ).reshape(nv, 3)
    except ValueError:
        raise ParseError("malformed vertex line", path=path)
    try:
        tets = np.array(
            [[int(x) for x in lines[1 + nv + i].split()] for i in range(nt)]
        ).reshape(nt, 4)
    except ValueError:
        raise ParseError("malformed tetrahedron line", path=path)
    if len(tets) and (tets.min() < 0 or tets.max() >= nv):
        bad = int(np.flatnonzero((tets < 0) | (tets >= nv)).ravel()[0] // 4)
        raise ParseError(
            f"tet {bad} references vertex out of range [0, {nv})",
            path=path, line=2 + nv + bad,
        )
    return TetMesh(vertices, orient_tets(vertices, tets))


def save_tet(path, mesh: TetMesh) -> None:
    with open(path, "w") as fh:
        fh.write(f"{mesh.num_vertices} {mesh.num_tets}\n")
        for v in mesh.vertices:
            fh.write(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in mesh.tets:
            fh.write(f"{int(t[0])} {int(t[1])} {int(t[2])} {int(t[3])}\n")


def save_mesh_ply(path, mesh: TriMesh, normals=None, binary=True, dtype="float32"):
    """Write a triangle mesh as PLY (binary little-endian by default)."""
    _write_ply(path, mesh.vertices, normals, mesh.faces, binary, dtype)


def save_cloud_ply(path, cloud: PointCloud, binary=True, dtype="float64"):
    """Write a point cloud as PLY. float64 keeps sample round-trips bit-exact."""
    _write_ply(path, cloud.points, cloud.normals, None, binary, dtype)


# ---------------------------------------------------------------------------
# OBJ

def _read_obj(path: Path):
    vertices = []
    faces = []
    with open(path, "r", errors="replace") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ParseError("vertex line needs 3 coordinates", path=path, line=ln)
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError:
                    raise ParseError("malformed vertex coordinate", path=path, line=ln)
            elif parts[0] == "f":
                if len(parts) < 4:
                    raise ParseError("face needs at least 3 vertices", path=path, line=ln)
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise ParseError(f"malformed face token '{token}'", path=path, line=ln)
                    if i < 1 or i > len(vertices):
                        raise ParseError(
                            f"face vertex index {i} out of range [1, {len(vertices)}]",
                            path=path, line=ln,
                        )
                    idx.append(i - 1)
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
            # all other directives (vn, vt, usemtl, ...) are ignored
    if not vertices:
        raise ParseError("OBJ contains no vertices", path=path)
    if not faces:
        raise ParseError("OBJ contains no faces", path=path)
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64)


# ---------------------------------------------------------------------------
# PLY

class _PlyProperty:
    __slots__ = ("name", "dtype", "is_list", "count_dtype")

    def __init__(self, name, dtype, is_list=False, count_dtype=None):
        self.name = name
        self.dtype = dtype
        self.is_list = is_list
        self.count_dtype = count_dtype


def _parse_ply_header(path: Path):
    """Returns (fmt, elements, body_offset, header_lines).

    elements is a list of (name, count, [_PlyProperty]).
    """
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic.strip() != b"ply":
            raise ParseError("missing 'ply' magic", path=path, line=1)
        fmt = None
        elements = []
        ln = 1
        while True:
            raw = fh.readline()
            if not raw:
                raise ParseError("header ended before end_header", path=path, line=ln)
            ln += 1
            line = raw.decode("ascii", errors="replace").strip()
            if not line or line.startswith("comment") or line.startswith("obj_info"):
                continue
            parts = line.split()
            if parts[0] == "format":
                if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                    raise ParseError(
                        f"unsupported PLY format '{line}'", path=path, line=ln
                    )
                fmt = parts[1]
            elif parts[0] == "element":
                if len(parts) != 3:
                    raise ParseError("malformed element line", path=path, line=ln)
                try:
                    elements.append((parts[1], int(parts[2]), []))
                except ValueError:
                    raise ParseError("element count not an integer", path=path, line=ln)
            elif parts[0] == "property":
                if not elements:
                    raise ParseError("property before any element", path=path, line=ln)
                props = elements[-1][2]
                if parts[1] == "list":
                    if len(parts) != 5:
                        raise ParseError("malformed list property", path=path, line=ln)
                    if parts[2] not in _PLY_SCALARS or parts[3] not in _PLY_SCALARS:
                        raise ParseError(
                            f"unsupported list property types '{parts[2]} {parts[3]}'",
                            path=path, line=ln,
                        )
                    props.append(
                        _PlyProperty(parts[4], _PLY_SCALARS[parts[3]], True,
                                     _PLY_SCALARS[parts[2]])
                    )
                else:
                    if len(parts) != 3 or parts[1] not in _PLY_SCALARS:
                        raise ParseError(
                            f"unsupported property '{line}'", path=path, line=ln
                        )
                    props.append(_PlyProperty(parts[2], _PLY_SCALARS[parts[1]]))
            elif parts[0] == "end_header":
                if fmt is None:
                    raise ParseError("no format line in header", path=path, line=ln)
                return fmt, elements, fh.tell(), ln
            else:
                raise ParseError(f"unknown header line '{line}'", path=path, line=ln)


def _read_ply(path: Path, need_faces: bool):
    fmt, elements, body_offset, header_lines = _parse_ply_header(path)
    vertex_el = next((e for e in elements if e[0] == "vertex"), None)
    if vertex_el is None:
        raise ParseError("no vertex element", path=path, line=header_lines)
    face_el = next((e for e in elements if e[0] == "face"), None)
    if need_faces and face_el is None:
        raise ParseError("no face element", path=path, line=header_lines)

    if fmt == "ascii":
        vertices, normals, faces = _read_ply_ascii(
            path, elements, face_el is not None
        )
    else:
        vertices, normals, faces = _read_ply_binary(
            path, elements, body_offset, face_el is not None
        )
    if face_el is not None and len(faces):
        nv = len(vertices)
        bad = (faces < 0) | (faces >= nv)
        if np.any(bad):
            el = int(np.flatnonzero(bad.any(axis=1))[0])
            raise ParseError(
                f"face {el} references vertex {int(faces[el][bad[el]][0])} "
                f"out of range [0, {nv})", path=path,
            )
    return vertices, normals, faces


def _extract_vertex_columns(path, records: np.ndarray, props):
    names = [p.name for p in props]
    for c in ("x", "y", "z"):
        if c not in names:
            raise ParseError(f"vertex element missing '{c}' property", path=path)
    vertices = np.stack(
        [records[c].astype(np.float64) for c in ("x", "y", "z")], axis=1
    )
    normals = None
    if all(c in names for c in ("nx", "ny", "nz")):
        normals = np.stack(
            [records[c].astype(np.float64) for c in ("nx", "ny", "nz")], axis=1
        )
    return vertices, normals


def _read_ply_ascii(path: Path, elements, want_faces):
    with open(path, "r", errors="replace") as fh:
        lines = fh.read().splitlines()
    ln = 0
    while lines[ln].strip() != "end_header":
        ln += 1
    cursor = ln + 1
    vertices = normals = None
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        if cursor + count > len(lines):
            raise ParseError(
                f"element '{name}' declares {count} rows but file ends early",
                path=path, line=len(lines),
            )
        if name == "vertex":
            scalar_names = [p.name for p in props]
            if any(p.is_list for p in props):
                raise ParseError("list property in vertex element", path=path)
            rows = np.empty((count, len(props)), dtype=np.float64)
            for r in range(count):
                toks = lines[cursor + r].split()
                if len(toks) != len(props):
                    raise ParseError(
                        f"vertex row has {len(toks)} values, expected {len(props)}",
                        path=path, line=cursor + r + 1,
                    )
                try:
                    rows[r] = [float(t) for t in toks]
                except ValueError:
                    raise ParseError("malformed vertex value", path=path,
                                     line=cursor + r + 1)
            records = {n: rows[:, i] for i, n in enumerate(scalar_names)}
            vertices, normals = _extract_vertex_columns(path, records, props)
        elif name == "face" and want_faces:
            tris = []
            for r in range(count):
                toks = lines[cursor + r].split()
                try:
                    vals = [int(t) for t in toks]
                except ValueError:
                    raise ParseError("malformed face value", path=path,
                                     line=cursor + r + 1)
                if not vals or len(vals) != vals[0] + 1 or vals[0] < 3:
                    raise ParseError("face count does not match row", path=path,
                                     line=cursor + r + 1)
                idx = vals[1:]
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
            faces = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
        cursor += count
    return vertices, normals, faces


def _read_ply_binary(path: Path, elements, body_offset, want_faces):
    with open(path, "rb") as fh:
        fh.seek(body_offset)
        data = fh.read()
    pos = 0
    vertices = normals = None
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        if name == "vertex":
            if any(p.is_list for p in props):
                raise ParseError("list property in vertex element", path=path)
            rec_dtype = np.dtype([(p.name, p.dtype) for p in props])
            need = rec_dtype.itemsize * count
            if pos + need > len(data):
                raise ParseError(
                    f"vertex element needs {need} bytes, {len(data) - pos} left",
                    path=path, offset=body_offset + pos,
                )
            records = np.frombuffer(data, dtype=rec_dtype, count=count, offset=pos)
            vertices, normals = _extract_vertex_columns(path, records, props)
            pos += need
        elif name == "face":
            if len(props) != 1 or not props[0].is_list:
                raise ParseError(
                    "face element must hold a single list property", path=path
                )
            prop = props[0]
            cnt_dt = np.dtype(prop.count_dtype)
            idx_dt = np.dtype(prop.dtype)
            # Fast path: every face is a triangle (the common case).
            rec = cnt_dt.itemsize + 3 * idx_dt.itemsize
            if pos + rec * count <= len(data):
                block = np.frombuffer(data, dtype=np.uint8, count=rec * count,
                                      offset=pos)
                block = block.reshape(count, rec)
                counts = block[:, : cnt_dt.itemsize].copy().view(cnt_dt).ravel()
                if count and np.all(counts == 3):
                    faces = (
                        block[:, cnt_dt.itemsize:].copy().view(idx_dt)
                        .reshape(count, 3).astype(np.int64)
                    )
                    pos += rec * count
                    continue
            faces, pos = _read_ply_faces_slow(
                path, data, pos, body_offset, count, cnt_dt, idx_dt
            )
        else:
            # skip unknown scalar-only elements
            if any(p.is_list for p in props):
                raise ParseError(
                    f"cannot skip element '{name}' with list properties", path=path
                )
            pos += sum(np.dtype(p.dtype).itemsize for p in props) * count
    if want_faces and len(faces) == 0 and vertices is None:
        raise ParseError("no data in PLY body", path=path, offset=body_offset)
    return vertices, normals, faces


def _read_ply_faces_slow(path, data, pos, body_offset, count, cnt_dt, idx_dt):
    tris = []
    for fi in range(count):
        if pos + cnt_dt.itemsize > len(data):
            raise ParseError(f"face {fi} truncated", path=path,
                             offset=body_offset + pos)
        n = int(np.frombuffer(data, dtype=cnt_dt, count=1, offset=pos)[0])
        pos += cnt_dt.itemsize
        if n < 3:
            raise ParseError(f"face {fi} has {n} vertices", path=path,
                             offset=body_offset + pos)
        need = n * idx_dt.itemsize
        if pos + need > len(data):
            raise ParseError(f"face {fi} truncated", path=path,
                             offset=body_offset + pos)
        idx = np.frombuffer(data, dtype=idx_dt, count=n, offset=pos).astype(np.int64)
        pos += need
        for k in range(1, n - 1):
            tris.append([idx[0], idx[k], idx[k + 1]])
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3), pos


def _prune_unreferenced(vertices: np.ndarray, faces: np.ndarray):
    referenced = np.zeros(len(vertices), dtype=bool)
    referenced[faces.ravel()] = True
    if referenced.all():
        return vertices, faces
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[referenced] = np.arange(int(referenced.sum()))
    return vertices[referenced], remap[faces]


def _write_ply(path, points, normals, faces, binary, dtype):
    if dtype not in ("float32", "float64"):
        raise ValueError(f"dtype must be float32 or float64, got {dtype}")
    ply_type = "float" if dtype == "float32" else "double"
    np_type = "<f4" if dtype == "float32" else "<f8"
    header = ["ply"]
    header.append(
        "format binary_little_endian 1.0" if binary else "format ascii 1.0"
    )
    header.append(f"element vertex {len(points)}")
    for c in ("x", "y", "z"):
        header.append(f"property {ply_type} {c}")
    if normals is not None:
        for c in ("nx", "ny", "nz"):
            header.append(f"property {ply_type} {c}")
    if faces is not None:
        header.append(f"element face {len(faces)}")
        header.append("property list uchar int vertex_indices")
    header.append("end_header")

    cols = [np.asarray(points, dtype=np.float64)]
    if normals is not None:
        cols.append(np.asarray(normals, dtype=np.float64))
    table = np.hstack(cols).astype(np_type)

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(table.tobytes())
            if faces is not None:
                f32 = np.asarray(faces, dtype="<i4")
                rec = np.empty(
                    len(f32), dtype=np.dtype([("n", "<u1"), ("idx", "<i4", (3,))])
                )
                rec["n"] = 3
                rec["idx"] = f32
                fh.write(rec.tobytes())
        else:
            for row in table:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))
            if faces is not None:
                for f in np.asarray(faces, dtype=np.int64):
                    fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))
