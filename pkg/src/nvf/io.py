"""File formats: OBJ/PLY meshes and the little-endian NVFQ/NVFG/NVFW binaries."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import PointCloud, QueryBatch, TriangleMesh

QUERY_MAGIC = b"NVFQ"
GRID_MAGIC = b"NVFG"
WEIGHTS_MAGIC = b"NVFW"

_QUERY_DTYPE = np.dtype([("q", "<f8", 3), ("t", "<f8", 3), ("v", "<f8", 3), ("tier", "u1")])


class FormatError(ValueError):
    pass


# ------------------------------------------------------------------ OBJ / PLY


def read_obj(path) -> TriangleMesh:
    """ASCII OBJ; polygons are fan-triangulated, texture/normal indices ignored."""
    verts, faces = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise FormatError(f"{path}: no vertices")
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def write_points_obj(path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in cloud.points:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        if cloud.normals is not None:
            for x, y, z in cloud.normals:
                fh.write(f"vn {x:.17g} {y:.17g} {z:.17g}\n")


def read_points(path) -> PointCloud:
    """Point cloud from OBJ ``v``/``vn`` lines or a PLY vertex element."""
    if str(path).lower().endswith(".ply"):
        return PointCloud(read_ply(path).vertices)
    pts, nrm = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts and parts[0] == "v":
                pts.append([float(x) for x in parts[1:4]])
            elif parts and parts[0] == "vn":
                nrm.append([float(x) for x in parts[1:4]])
    if not pts:
        raise FormatError(f"{path}: no points")
    return PointCloud(np.array(pts), np.array(nrm) if len(nrm) == len(pts) else None)


def read_mesh(path) -> TriangleMesh:
    return read_ply(path) if str(path).lower().endswith(".ply") else read_obj(path)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def read_ply(path) -> TriangleMesh:
    """Binary little-endian PLY with a vertex element and optional face lists."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[data.index(b"\n", end) + 1 :]
    if "format binary_little_endian 1.0" not in [h.strip() for h in header]:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported")
    elements = []
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            elements[-1][2].append(tok[1:])
    verts = faces = None
    off = 0
    for name, count, props in elements:
        if any(p[0] == "list" for p in props):
            if len(props) != 1:
                raise FormatError("mixed list/scalar face properties are not supported")
            cnt_t, idx_t = np.dtype(_PLY_TYPES[props[0][1]]), np.dtype(_PLY_TYPES[props[0][2]])
            rows = []
            for _ in range(count):
                k = int(np.frombuffer(body, cnt_t, 1, off)[0])
                off += cnt_t.itemsize
                idx = np.frombuffer(body, idx_t, k, off).astype(np.int64)
                off += k * idx_t.itemsize
                rows += [[idx[0], idx[j], idx[j + 1]] for j in range(1, k - 1)]
            if name == "face":
                faces = np.array(rows, dtype=np.int64).reshape(-1, 3)
        else:
            dt = np.dtype([(p[1], _PLY_TYPES[p[0]]) for p in props])
            arr = np.frombuffer(body, dt, count, off)
            off += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
    if verts is None:
        raise FormatError(f"{path}: no vertex element")
    return TriangleMesh(verts, faces if faces is not None else np.zeros((0, 3), np.int64))


def write_ply(path, mesh: TriangleMesh) -> None:
    head = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\nproperty double x\nproperty double y\nproperty double z\n"
        f"element face {len(mesh.faces)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    face_dt = np.dtype([("n", "u1"), ("i", "<i4", 3)])
    f = np.zeros(len(mesh.faces), face_dt)
    f["n"] = 3
    f["i"] = mesh.faces
    Path(path).write_bytes(head.encode("ascii") + mesh.vertices.astype("<f8").tobytes() + f.tobytes())


# ------------------------------------------------------------------ NVFQ


def query_batch_bytes(batch: QueryBatch) -> bytes:
    rec = np.zeros(len(batch), _QUERY_DTYPE)
    rec["q"], rec["t"], rec["v"], rec["tier"] = batch.queries, batch.targets, batch.displacements, batch.tiers
    return QUERY_MAGIC + struct.pack("<I", len(batch)) + rec.tobytes()


def write_query_batch(path, batch: QueryBatch) -> None:
    Path(path).write_bytes(query_batch_bytes(batch))


def read_query_batch(path) -> QueryBatch:
    data = Path(path).read_bytes()
    if data[:4] != QUERY_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    (n,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + n * _QUERY_DTYPE.itemsize:
        raise FormatError(f"{path}: truncated query batch")
    rec = np.frombuffer(data, _QUERY_DTYPE, n, 8)
    return QueryBatch(rec["q"].copy(), rec["t"].copy(), rec["v"].copy(), rec["tier"].copy())


# ------------------------------------------------------------------ NVFG


def write_grid(path, resolution: int, bounds, v: np.ndarray) -> None:
    """Bounds are stored as (xmin, ymin, zmin, xmax, ymax, zmax); ``v`` is x-fastest."""
    b = np.asarray(bounds, dtype="<f8").reshape(6)
    v = np.asarray(v, dtype="<f8").reshape(resolution**3, 3)
    Path(path).write_bytes(GRID_MAGIC + struct.pack("<I", resolution) + b.tobytes() + v.tobytes())


def read_grid(path):
    data = Path(path).read_bytes()
    if data[:4] != GRID_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    (res,) = struct.unpack_from("<I", data, 4)
    bounds = np.frombuffer(data, "<f8", 6, 8).reshape(2, 3).copy()
    v = np.frombuffer(data, "<f8", res**3 * 3, 56).reshape(res, res, res, 3).copy()
    return res, bounds, v


# ------------------------------------------------------------------ NVFW


def write_weights(path, tensors) -> None:
    out = [WEIGHTS_MAGIC, struct.pack("<I", len(tensors))]
    for t in tensors:
        t = np.asarray(t, dtype="<f8")
        out.append(struct.pack("<I", t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(t.tobytes())
    Path(path).write_bytes(b"".join(out))


def read_weights(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    (count,) = struct.unpack_from("<I", data, 4)
    off = 8
    tensors = []
    for _ in range(count):
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        tensors.append(np.frombuffer(data, "<f8", n, off).reshape(shape).copy())
        off += 8 * n
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes in weight file")
    return tensors
