"""Point-set and field metrics in the reporting units used by the evaluation tables.

Conventions (stated in every report):

* Chamfer: ``0.5 * (mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2)``, reported / 1e-5.
* F-score thresholds compare against *squared* nearest distances, reported in percent.
* Normal error: symmetric mean of ``1 - |n_a . n_b|`` over nearest-neighbor pairs.
* EMD: mean Euclidean cost of the optimal perfect matching, reported / 1e-2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .fields import DEFAULT_H, curl
from .geometry import PointCloud, TriangleMesh, sample_surface_points

CD_UNIT = 1e-5
EMD_UNIT = 1e-2
F_TAUS = (1e-5, 2e-5)
EMD_MAX_POINTS = 4096
EMD_SOLVER = "exact linear assignment (Jonker-Volgenant, scipy)"

CONVENTIONS = {
    "cd": "0.5*(mean min sq dist A->B + mean min sq dist B->A) / 1e-5",
    "f1": "threshold on squared distance, percent",
    "normal": "symmetric mean of 1-|cos| over nearest pairs",
    "emd": "mean Euclidean matching cost / 1e-2",
    "emd_solver": EMD_SOLVER,
}


def _points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty point cloud")
    return pts


def _sq(d):
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nearest(src: np.ndarray, dst: np.ndarray, workers: int = 1):
    """Index of and squared distance to the nearest ``dst`` point for each ``src`` point.

    The squared distance is recomputed from coordinates so it matches a direct
    double loop bit for bit.
    """
    _, idx = cKDTree(dst).query(src, k=1, workers=workers)
    return idx, _sq(src - dst[idx])


def chamfer_raw(a, b, workers: int = 1) -> float:
    A, B = _points(a), _points(b)
    return 0.5 * (float(np.mean(nearest(A, B, workers)[1])) + float(np.mean(nearest(B, A, workers)[1])))


def chamfer(a, b, workers: int = 1) -> float:
    """Chamfer distance in 1e-5 units."""
    return chamfer_raw(a, b, workers) / CD_UNIT


def fscore(a, b, tau: float, workers: int = 1) -> float:
    """F1 (percent) with precision/recall counted as squared NN distance below ``tau``."""
    A, B = _points(a), _points(b)
    precision = float(np.mean(nearest(A, B, workers)[1] < tau))
    recall = float(np.mean(nearest(B, A, workers)[1] < tau))
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def normal_error(a: PointCloud, b: PointCloud, workers: int = 1) -> float:
    if a.normals is None or b.normals is None:
        raise ValueError("normal error needs clouds with normals")
    ia, _ = nearest(_points(a), _points(b), workers)
    ib, _ = nearest(b.points, a.points, workers)
    return 0.5 * (float(np.mean(_abs_cos_gap(a.normals, b.normals[ia])))
                  + float(np.mean(_abs_cos_gap(b.normals, a.normals[ib]))))


def _abs_cos_gap(x, y):
    # 1 - |x.y| for unit vectors, written as 0.5|x - s y|^2 so equal normals give exactly 0
    dot = x[:, 0] * y[:, 0] + x[:, 1] * y[:, 1] + x[:, 2] * y[:, 2]
    s = np.where(dot < 0, -1.0, 1.0)
    return 0.5 * _sq(x - s[:, None] * y)


def emd_raw(a, b) -> float:
    A, B = _points(a), _points(b)
    if len(A) != len(B):
        raise ValueError(f"EMD needs equal sizes, got {len(A)} and {len(B)}")
    if len(A) > EMD_MAX_POINTS:
        raise ValueError(f"EMD limited to {EMD_MAX_POINTS} points")
    cost = np.sqrt(_sq(A[:, None, :] - B[None, :, :]))
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].mean())


def emd(a, b) -> float:
    """Earth mover distance in 1e-2 units."""
    return emd_raw(a, b) / EMD_UNIT


def curl_magnitude(field_fn, q, h: float = DEFAULT_H, dist=None) -> float:
    """Mean curl norm over samples at least ``3h`` from the surface.

    ``dist`` gives the true surface distance of each sample; without it the
    field's own displacement length stands in.
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    if dist is None:
        d = np.linalg.norm(np.asarray(field_fn(q), dtype=np.float64).reshape(-1, 3), axis=1)
    else:
        d = np.asarray(dist, dtype=np.float64).reshape(-1)
    keep = q[d > 3 * h]
    if len(keep) == 0:
        raise ValueError("no samples farther than 3h from the surface")
    return float(np.mean(np.linalg.norm(curl(field_fn, keep, h), axis=1)))


@dataclass
class MetricReport:
    cd: float
    emd: float
    normal: float
    f1: list = field(default_factory=list)
    curl: float | None = None
    n_cd: int = 100_000
    n_emd: int = 2048

    def to_dict(self) -> dict:
        return {"cd": self.cd, "emd": self.emd, "normal": self.normal, "f1": self.f1,
                "curl": self.curl, "n_cd": self.n_cd, "n_emd": self.n_emd,
                "conventions": CONVENTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def f1_at(self, tau: float) -> float:
        for e in self.f1:
            if e["tau"] == tau:
                return e["value"]
        raise KeyError(tau)


def compare_clouds(a: PointCloud, b: PointCloud, ea=None, eb=None, taus=F_TAUS, workers: int = 1) -> MetricReport:
    """Metrics between two sampled clouds; ``ea``/``eb`` are the (smaller) EMD subsets."""
    ea = a if ea is None else ea
    eb = b if eb is None else eb
    return MetricReport(
        cd=chamfer(a, b, workers),
        emd=emd(ea, eb),
        normal=normal_error(a, b, workers),
        f1=[{"tau": t, "value": fscore(a, b, t, workers)} for t in taus],
        n_cd=len(a),
        n_emd=len(ea),
    )


def evaluate_meshes(mesh_a: TriangleMesh, mesh_b: TriangleMesh, n_cd: int = 100_000, n_emd: int = 2048,
                    seed: int = 0, workers: int = 1) -> MetricReport:
    """Sample both meshes with the same seed and compare the samples.

    Identical meshes therefore give identical samples and zero distances.
    """
    if len(mesh_a.faces) == 0 or len(mesh_b.faces) == 0:
        raise ValueError("cannot evaluate an empty mesh")
    a = sample_surface_points(mesh_a, n_cd, seed)
    b = sample_surface_points(mesh_b, n_cd, seed)
    ea = sample_surface_points(mesh_a, n_emd, seed + 1)
    eb = sample_surface_points(mesh_b, n_emd, seed + 1)
    return compare_clouds(a, b, ea, eb, workers=workers)
