"""Query embedding from K nearest cloud points.

Each neighbor contributes a signature ``MLP(q, p_i, p_i - q, f_i)``; the query
embedding concatenates the K signatures in ascending distance order (ties by
point index).  Per-point features ``f_i`` come from a small MLP over the point
position and a local-covariance shape descriptor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .geometry import PointCloud
from .nn import init_mlp, mlp


@dataclass
class EncoderConfig:
    k: int = 16
    sig_width: int = 16  # k * sig_width matches the default codebook width
    embed_dim: int | None = None
    feat_dim: int = 8
    hidden: int = 32
    relative_only: bool = False
    offset_scale: float = 10.0  # input normalization for p_i - q

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.embed_dim is None:
            self.embed_dim = self.k * self.sig_width
        if self.embed_dim != self.k * self.sig_width:
            raise ValueError(f"embed_dim {self.embed_dim} != k * sig_width = {self.k * self.sig_width}")

    def to_dict(self):
        return asdict(self)


def _sq_dist(a, b):
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def knn_brute(points: np.ndarray, q: np.ndarray, k: int):
    """Linear-scan k-NN with ties broken by lower index."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    d2 = _sq_dist(q[:, None, :], points[None, :, :])
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d2, order, axis=1)


class KdIndex:
    """Balanced KD-tree whose k-NN answers equal a tie-broken linear scan."""

    def __init__(self, points):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("empty point set")
        self.tree = cKDTree(self.points, balanced_tree=True)

    def __len__(self):
        return len(self.points)

    def query(self, q, k: int):
        n = len(self.points)
        if k > n:
            raise ValueError(f"k={k} exceeds cloud size {n}")
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        m = min(n, k + 4)
        _, cand = self.tree.query(q, m)
        cand = np.asarray(cand).reshape(len(q), m)
        d2 = _sq_dist(q[:, None, :], self.points[cand])
        # row-wise lexicographic sort on (d2, index)
        by_idx = np.argsort(cand, axis=1, kind="stable")
        cand = np.take_along_axis(cand, by_idx, axis=1)
        d2 = np.take_along_axis(d2, by_idx, axis=1)
        by_d2 = np.argsort(d2, axis=1, kind="stable")
        cand = np.take_along_axis(cand, by_d2, axis=1)
        d2 = np.take_along_axis(d2, by_d2, axis=1)
        idx, dk = cand[:, :k], d2[:, :k]
        if m < n:
            # candidates beyond the tree's m-th may tie with the k-th; rescan those rows
            unsafe = ~(d2[:, k - 1] < d2[:, m - 1] * (1 - 1e-12))
            if unsafe.any():
                rows = np.nonzero(unsafe)[0]
                bi, bd = knn_brute(self.points, q[rows], k)
                idx[rows], dk[rows] = bi, bd
        return idx, dk


def shape_descriptor(points: np.ndarray, index: KdIndex, k: int) -> np.ndarray:
    """Normalized local-covariance eigenvalues (descending) over each point's k neighbors."""
    k = min(k, len(points))
    idx, _ = index.query(points, k)
    nb = points[idx]
    c = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", c, c) / k
    ev = np.linalg.eigvalsh(cov)[:, ::-1]
    tot = ev.sum(axis=1, keepdims=True)
    return np.where(tot > 0, ev / np.where(tot > 0, tot, 1.0), 1.0 / 3.0)


@dataclass
class PreparedCloud:
    points: np.ndarray
    index: KdIndex
    descriptor: np.ndarray


def prepare_cloud(cloud: PointCloud | np.ndarray, k: int) -> PreparedCloud:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty point cloud")
    if len(pts) < k:
        raise ValueError(f"cloud has {len(pts)} points, fewer than k={k}")
    index = KdIndex(pts)
    return PreparedCloud(index.points, index, shape_descriptor(index.points, index, k))


class Encoder:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        feat_in = 3 if cfg.relative_only else 6
        sig_in = (3 if cfg.relative_only else 9) + cfg.feat_dim
        self.params = {
            **init_mlp(rng, "enc.feat", [feat_in, cfg.hidden, cfg.feat_dim]),
            **init_mlp(rng, "enc.sig", [sig_in, cfg.hidden, cfg.sig_width]),
        }

    def point_features(self, P: dict, cloud: PreparedCloud) -> ad.Var:
        """Per-point features ``f_i``, shape ``(N, feat_dim)``."""
        tape = P["enc.feat.w0"].tape
        x = cloud.descriptor if self.cfg.relative_only else np.concatenate([cloud.points, cloud.descriptor], 1)
        return mlp(P, "enc.feat", tape.const(x), 2)

    def neighbors(self, cloud: PreparedCloud, q: np.ndarray):
        return cloud.index.query(q, self.cfg.k)[0]

    def embed(self, P: dict, cloud: PreparedCloud, feats: ad.Var, q: np.ndarray) -> ad.Var:
        """Query embedding ``z``, shape ``(B, k * sig_width)``."""
        cfg = self.cfg
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        idx = self.neighbors(cloud, q)
        p = cloud.points[idx]  # (B, K, 3)
        rel = (p - q[:, None, :]) * cfg.offset_scale
        if cfg.relative_only:
            geo = rel.reshape(-1, 3)
        else:
            qq = np.broadcast_to(q[:, None, :], p.shape)
            geo = np.concatenate([qq, p, rel], axis=-1).reshape(-1, 9)
        f = ad.take_rows(feats, idx.reshape(-1))
        x = ad.concat([geo, f], axis=-1)
        s = mlp(P, "enc.sig", x, 2)
        return ad.reshape(s, (len(q), cfg.k * cfg.sig_width))
