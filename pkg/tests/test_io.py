import struct

import numpy as np
import pytest

from nvf.geometry import PointCloud, QueryBatch, TriangleMesh, box_mesh, icosphere
from nvf.io import (
    FormatError,
    query_batch_bytes,
    read_grid,
    read_mesh,
    read_obj,
    read_points,
    read_query_batch,
    read_weights,
    write_grid,
    write_obj,
    write_ply,
    write_points_obj,
    write_query_batch,
    write_weights,
)


def test_obj_roundtrip_is_bit_exact(tmp_path):
    m = icosphere(0.4, 2)
    write_obj(tmp_path / "s.obj", m)
    r = read_obj(tmp_path / "s.obj")
    assert r.vertices.tobytes() == m.vertices.tobytes()
    np.testing.assert_array_equal(r.faces, m.faces)


def test_obj_polygons_and_negative_indices(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\nf -4 -3 -2\n")
    m = read_obj(p)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3], [0, 1, 2]])
    (tmp_path / "e.obj").write_text("# nothing\n")
    with pytest.raises(FormatError):
        read_obj(tmp_path / "e.obj")


def test_ply_roundtrip(tmp_path):
    m = box_mesh()
    write_ply(tmp_path / "b.ply", m)
    r = read_mesh(tmp_path / "b.ply")
    assert r.vertices.tobytes() == m.vertices.tobytes()
    np.testing.assert_array_equal(r.faces, m.faces)


def test_ply_float_vertices_and_quads(tmp_path):
    head = ("ply\nformat binary_little_endian 1.0\nelement vertex 4\nproperty float x\nproperty float y\n"
            "property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n")
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], "<f4")
    body = v.tobytes() + struct.pack("<B4i", 4, 0, 1, 2, 3)
    (tmp_path / "q.ply").write_bytes(head.encode() + body)
    m = read_mesh(tmp_path / "q.ply")
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3]])
    (tmp_path / "a.ply").write_text("ply\nformat ascii 1.0\nend_header\n")
    with pytest.raises(FormatError):
        read_mesh(tmp_path / "a.ply")


def test_points_obj_with_normals(tmp_path):
    pc = PointCloud(np.random.default_rng(0).random((10, 3)), np.tile([0.0, 0, 1], (10, 1)))
    write_points_obj(tmp_path / "c.obj", pc)
    r = read_points(tmp_path / "c.obj")
    assert r.points.tobytes() == pc.points.tobytes()
    np.testing.assert_array_equal(r.normals, pc.normals)


def _batch(n=7):
    rng = np.random.default_rng(1)
    q, t = rng.random((n, 3)), rng.random((n, 3))
    return QueryBatch(q, t, t - q, rng.integers(0, 3, n).astype(np.uint8))


def test_query_batch_layout_and_roundtrip(tmp_path):
    b = _batch()
    raw = query_batch_bytes(b)
    assert raw[:4] == b"NVFQ"
    assert struct.unpack_from("<I", raw, 4)[0] == 7
    assert len(raw) == 8 + 7 * 73  # 9 doubles + 1 tier byte per record
    rec0 = struct.unpack_from("<9dB", raw, 8)
    np.testing.assert_array_equal(rec0[:3], b.queries[0])
    assert rec0[9] == b.tiers[0]
    write_query_batch(tmp_path / "b.nvfq", b)
    r = read_query_batch(tmp_path / "b.nvfq")
    for x, y in ((r.queries, b.queries), (r.targets, b.targets), (r.displacements, b.displacements)):
        assert x.tobytes() == y.tobytes()
    np.testing.assert_array_equal(r.tiers, b.tiers)


def test_query_batch_rejects_corruption(tmp_path):
    raw = query_batch_bytes(_batch())
    (tmp_path / "t.nvfq").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        read_query_batch(tmp_path / "t.nvfq")
    (tmp_path / "m.nvfq").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_query_batch(tmp_path / "m.nvfq")


def test_grid_roundtrip(tmp_path):
    v = np.random.default_rng(2).random((4, 4, 4, 3))
    write_grid(tmp_path / "g.nvfg", 4, [[-0.5] * 3, [0.5] * 3], v)
    res, bounds, r = read_grid(tmp_path / "g.nvfg")
    assert res == 4
    np.testing.assert_array_equal(bounds, [[-0.5] * 3, [0.5] * 3])
    assert r.tobytes() == v.tobytes()


def test_weights_roundtrip(tmp_path):
    ts = [np.arange(6.0).reshape(2, 3), np.array(3.5), np.zeros((2, 0, 4)), np.ones(5)]
    write_weights(tmp_path / "w.nvfw", ts)
    r = read_weights(tmp_path / "w.nvfw")
    assert [x.shape for x in r] == [x.shape for x in ts]
    for a, b in zip(r, ts):
        assert a.tobytes() == b.tobytes()
    raw = (tmp_path / "w.nvfw").read_bytes()
    (tmp_path / "x.nvfw").write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_weights(tmp_path / "x.nvfw")
