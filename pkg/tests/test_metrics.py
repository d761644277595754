import itertools
import json

import numpy as np
import pytest
from scipy.optimize import linprog

from nvf.fields import Sphere, curl
from nvf.geometry import PointCloud, icosphere
from nvf.metrics import (
    CONVENTIONS,
    MetricReport,
    chamfer,
    chamfer_raw,
    compare_clouds,
    curl_magnitude,
    emd,
    emd_raw,
    evaluate_meshes,
    fscore,
    normal_error,
)


def _cloud(rng, n, normals=True):
    p = rng.uniform(-0.5, 0.5, (n, 3))
    if not normals:
        return PointCloud(p)
    nv = rng.standard_normal((n, 3))
    return PointCloud(p, nv / np.linalg.norm(nv, axis=1, keepdims=True))


# ------------------------------------------------------------------ brute-force oracles


def _nn_loop(A, B):
    # outer loop over A, inner scan over B vectorized; same squared-distance expression
    idx, dist = [], []
    for a in A:
        d = B - a
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        j = int(np.argmin(d2))
        idx.append(j)
        dist.append(d2[j])
    return np.array(idx), np.array(dist)


def test_chamfer_examples():
    a = np.zeros((1, 3))
    assert chamfer(a, a) == 0.0
    b = np.array([[0.003, 0.0, 0.0]])
    assert chamfer_raw(a, b) == pytest.approx(9e-6, rel=1e-12)
    assert chamfer(a, b) == pytest.approx(0.9, rel=1e-12)


def test_fscore_examples():
    a = np.zeros((1, 3))
    assert fscore(a, a, 1e-5) == 100.0
    assert fscore(a, np.array([[1.0, 0, 0]]), 1e-5) == 0.0


def test_normal_examples():
    rng = np.random.default_rng(0)
    c = _cloud(rng, 50)
    assert normal_error(c, c) == 0.0
    rot = PointCloud(c.points, np.c_[-c.normals[:, 1], c.normals[:, 0], np.zeros(50)]
                     / np.linalg.norm(c.normals[:, :2], axis=1, keepdims=True))
    flat = PointCloud(c.points, np.c_[c.normals[:, :2], np.zeros(50)]
                      / np.linalg.norm(c.normals[:, :2], axis=1, keepdims=True))
    assert normal_error(flat, rot) == pytest.approx(1.0, abs=1e-12)
    flipped = PointCloud(c.points, -c.normals)
    assert normal_error(c, flipped) == 0.0  # orientation-free
    with pytest.raises(ValueError):
        normal_error(PointCloud(c.points), c)


def test_emd_examples():
    rng = np.random.default_rng(1)
    a = rng.random((30, 3))
    assert emd(a, a[rng.permutation(30)]) == 0.0
    assert emd_raw(np.zeros((1, 3)), np.array([[0.0, 1.0, 0.0]])) == 1.0
    with pytest.raises(ValueError):
        emd(a, a[:10])


def test_metrics_match_double_loop():
    rng = np.random.default_rng(2)
    for trial in range(100):
        na, nb = rng.integers(1, 40, 2)
        A, B = _cloud(rng, na), _cloud(rng, nb)
        ia, da = _nn_loop(A.points, B.points)
        ib, db = _nn_loop(B.points, A.points)
        assert chamfer_raw(A, B) == 0.5 * (float(np.mean(da)) + float(np.mean(db)))
        tau = float(rng.choice([1e-3, 1e-2, 5e-2]))
        p, r = np.mean(da < tau), np.mean(db < tau)
        f = 0.0 if p + r == 0 else 100 * 2 * p * r / (p + r)
        assert fscore(A, B, tau) == f
        ca = [1 - abs(float(A.normals[i] @ B.normals[ia[i]])) for i in range(na)]
        cb = [1 - abs(float(B.normals[i] @ A.normals[ib[i]])) for i in range(nb)]
        assert abs(normal_error(A, B) - 0.5 * (np.mean(ca) + np.mean(cb))) < 1e-15


def test_chamfer_large_cloud_matches_loop():
    rng = np.random.default_rng(3)
    A, B = _cloud(rng, 2000, False), _cloud(rng, 1500, False)
    _, da = _nn_loop(A.points, B.points)
    _, db = _nn_loop(B.points, A.points)
    assert chamfer_raw(A, B) == 0.5 * (float(np.mean(da)) + float(np.mean(db)))


def test_emd_vs_exhaustive_small():
    rng = np.random.default_rng(4)
    for n in range(1, 9):
        A, B = rng.random((n, 3)), rng.random((n, 3))
        cost = np.linalg.norm(A[:, None] - B[None], axis=-1)
        perms = np.array(list(itertools.permutations(range(n))))
        best = cost[np.arange(n), perms].sum(axis=1).min() / n
        assert abs(emd_raw(A, B) - best) < 1e-12


def test_emd_vs_lp_n64():
    rng = np.random.default_rng(5)
    n = 64
    A, B = rng.random((n, 3)), rng.random((n, 3))
    cost = np.linalg.norm(A[:, None] - B[None], axis=-1)
    rows = np.kron(np.eye(n), np.ones(n))
    cols = np.kron(np.ones(n), np.eye(n))
    lp = linprog(cost.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.ones(2 * n), bounds=(0, None), method="highs")
    assert lp.status == 0
    assert abs(emd_raw(A, B) - lp.fun / n) < 1e-6


def test_curl_metric():
    q = np.random.default_rng(6).uniform(-0.5, 0.5, (300, 3))
    q = q[(np.linalg.norm(q, axis=1) > 0.2)]
    assert curl_magnitude(Sphere(), q) < 1e-5
    rot = lambda p: np.stack([-p[:, 1], p[:, 0], 0 * p[:, 0]], axis=1)  # noqa: E731
    # dyadic points and step keep every stencil difference exact
    far = np.array([[0.25, 0.125, 0.0], [-0.375, 0.5, 0.25], [0.0, -0.25, 0.5]])
    assert curl_magnitude(rot, far, h=2.0**-10) == 2.0
    keep = q[np.linalg.norm(Sphere()(q), axis=1) > 3e-3]
    assert curl_magnitude(Sphere(), q) == float(np.mean(np.linalg.norm(curl(Sphere(), keep, 1e-3), axis=1)))
    with pytest.raises(ValueError):
        curl_magnitude(Sphere(), np.array([[0.4, 0, 0]]))
    # true distances override the field's own length
    assert curl_magnitude(rot, far, h=2.0**-10, dist=np.ones(len(far))) == 2.0


def test_report_json_shape():
    rng = np.random.default_rng(7)
    a = _cloud(rng, 100)
    rep = compare_clouds(a, a)
    d = json.loads(rep.to_json())
    assert set(d) == {"cd", "emd", "normal", "f1", "curl", "n_cd", "n_emd", "conventions"}
    assert d["conventions"] == CONVENTIONS
    assert [e["tau"] for e in d["f1"]] == [1e-5, 2e-5]
    assert rep.f1_at(2e-5) == 100.0
    assert isinstance(rep, MetricReport) and d["curl"] is None


def test_identical_meshes():
    m = icosphere(0.4, 2)
    rep = evaluate_meshes(m, m, n_cd=20000, n_emd=512)
    assert rep.cd == 0.0 and rep.emd == 0.0 and rep.normal == 0.0
    assert all(e["value"] == 100.0 for e in rep.f1)
