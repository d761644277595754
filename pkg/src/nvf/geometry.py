"""Triangle meshes, point clouds, exact nearest-surface queries and query sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_AREA = 1e-12
TIERS = ("far", "mid", "near")
TIER_SIGMA = {"far": 0.08, "mid": 0.02, "near": 0.003}
# percent of samples per tier; the near tier takes the remainder
TIER_PERCENT = {"far": 1, "mid": 49}


def _cross(a, b):
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def _dot(a, b):
    # explicit sum keeps per-element arithmetic independent of batch layout
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def face_areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(_cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    @property
    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = _cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def validate(self) -> "TriangleMesh":
        if len(self.faces) == 0:
            raise ValueError("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")
        if np.any(self.face_areas <= DEGENERATE_AREA):
            raise ValueError("degenerate face")
        return self

    def normalized(self) -> "TriangleMesh":
        """Copy centered and uniformly scaled into [-0.5, 0.5]^3."""
        lo, hi = self.vertices.min(0), self.vertices.max(0)
        extent = (hi - lo).max()
        v = (self.vertices - 0.5 * (lo + hi)) / extent
        return TriangleMesh(np.clip(v, -0.5, 0.5), self.faces.copy())

    def edge_face_counts(self) -> dict:
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        keys, counts = np.unique(e, axis=0, return_counts=True)
        return dict(zip(map(tuple, keys), counts))

    def is_watertight(self) -> bool:
        return all(c == 2 for c in self.edge_face_counts().values())

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return len(used) - len(self.edge_face_counts()) + len(self.faces)


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals must match points")
            if np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) > 1e-6):
                raise ValueError("normals must have unit length")

    def __len__(self):
        return len(self.points)


@dataclass
class QueryBatch:
    queries: np.ndarray  # q
    targets: np.ndarray  # nearest surface point
    displacements: np.ndarray  # targets - queries
    tiers: np.ndarray  # uint8 index into TIERS

    def __len__(self):
        return len(self.queries)

    def tier_counts(self) -> dict:
        return {name: int(np.sum(self.tiers == i)) for i, name in enumerate(TIERS)}

    def subset(self, idx) -> "QueryBatch":
        return QueryBatch(self.queries[idx], self.targets[idx], self.displacements[idx], self.tiers[idx])


# ------------------------------------------------------------------ closest point


def closest_points_on_triangles(p, a, b, c):
    """Vectorized closest point from ``p`` to triangles ``(a, b, c)``.

    All arguments broadcast to ``(..., 3)``.  Returns ``(points, squared distances)``.
    Region classification follows the Voronoi-region walk over vertices, edges and
    the face interior.
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (p, a, b, c)))
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    bp = p - b
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    cp = p - c
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
    v_in = vb * denom
    w_in = vc * denom

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_c = (d6 >= 0) & (d5 <= d6)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    # barycentric weights on b and c; a gets the rest
    wb = np.select([in_a, in_b, in_c, on_ab, on_ac, on_bc], [0.0, 1.0, 0.0, t_ab, 0.0, 1.0 - t_bc], v_in)
    wc = np.select([in_a, in_b, in_c, on_ab, on_ac, on_bc], [0.0, 0.0, 1.0, 0.0, t_ac, t_bc], w_in)
    q = a + ab * wb[..., None] + ac * wc[..., None]
    # snap exact vertex regions so vertex answers carry no rounding
    q = np.where(in_a[..., None], a, q)
    q = np.where((in_b & ~in_a)[..., None], b, q)
    q = np.where((in_c & ~in_a & ~in_b)[..., None], c, q)
    diff = p - q
    return q, _dot(diff, diff)


def closest_point_on_triangle(p, tri):
    """Closest point on one triangle and the squared distance to it."""
    tri = np.asarray(tri, dtype=np.float64).reshape(3, 3)
    area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    if area <= DEGENERATE_AREA:
        raise ValueError("degenerate face")
    q, d2 = closest_points_on_triangles(np.asarray(p, dtype=np.float64), tri[0], tri[1], tri[2])
    return q, float(d2)


# ------------------------------------------------------------------ BVH


@dataclass
class Bvh:
    mesh: TriangleMesh
    lo: np.ndarray  # (M, 3) node boxes
    hi: np.ndarray
    left: np.ndarray  # child node ids, -1 for leaves
    right: np.ndarray
    start: np.ndarray  # leaf range into ``order``
    count: np.ndarray
    order: np.ndarray  # face ids grouped by leaf
    leaf_size: int

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def leaves(self) -> list[np.ndarray]:
        return [self.order[s : s + c] for s, c, l in zip(self.start, self.count, self.left) if l < 0]


def build_bvh(mesh: TriangleMesh, leaf_size: int = 4) -> Bvh:
    """Median-split AABB tree over faces."""
    mesh.validate()
    tris = mesh.triangles
    tlo, thi = tris.min(axis=1), tris.max(axis=1)
    cent = tris.mean(axis=1)
    order = np.arange(len(tris))
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        ids = order[s:e]
        lo.append(tlo[ids].min(0))
        hi.append(thi[ids].max(0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return len(lo) - 1

    stack = [(new_node(0, len(order)), 0, len(order))]
    while stack:
        node, s, e = stack.pop()
        if e - s <= leaf_size:
            continue
        ids = order[s:e]
        c = cent[ids]
        axis = int(np.argmax(c.max(0) - c.min(0)))
        srt = np.argsort(c[:, axis], kind="stable")
        order[s:e] = ids[srt]
        mid = s + (e - s) // 2
        l_id = new_node(s, mid)
        r_id = new_node(mid, e)
        left[node], right[node] = l_id, r_id
        count[node] = 0
        stack.append((r_id, mid, e))
        stack.append((l_id, s, mid))

    return Bvh(mesh, np.array(lo), np.array(hi), np.array(left), np.array(right),
               np.array(start), np.array(count), order, leaf_size)


def _box_d2(p, lo, hi):
    d = np.maximum(np.maximum(lo - p, p - hi), 0.0)
    return _dot(d, d)


def _leaf_pairs(bvh: Bvh, qi: np.ndarray, nodes: np.ndarray):
    counts = bvh.count[nodes]
    rep_q = np.repeat(qi, counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    faces = bvh.order[np.repeat(bvh.start[nodes], counts) + offs]
    return rep_q, faces


def _reduce_best(qi, d2, pts, fid, best_d2, best_pt, best_f):
    # lexicographic (d2, face id) minimum per query
    o = np.lexsort((fid, d2, qi))
    qi, d2, pts, fid = qi[o], d2[o], pts[o], fid[o]
    first = np.ones(len(qi), bool)
    first[1:] = qi[1:] != qi[:-1]
    qi, d2, pts, fid = qi[first], d2[first], pts[first], fid[first]
    better = (d2 < best_d2[qi]) | ((d2 == best_d2[qi]) & (fid < best_f[qi]))
    qi, d2, pts, fid = qi[better], d2[better], pts[better], fid[better]
    best_d2[qi] = d2
    best_pt[qi] = pts
    best_f[qi] = fid


def nearest_on_surface(bvh: Bvh, q):
    """Exact nearest surface point for each query.

    Returns ``(targets, displacements, distances, face ids)``; a single 3-vector
    query returns un-batched values.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, 3)
    n = len(q)
    tris = bvh.mesh.triangles
    best_d2 = np.full(n, np.inf)
    best_pt = np.zeros((n, 3))
    best_f = np.full(n, np.iinfo(np.int64).max)

    def eval_leaves(qi, nodes):
        rq, fid = _leaf_pairs(bvh, qi, nodes)
        t = tris[fid]
        pts, d2 = closest_points_on_triangles(q[rq], t[:, 0], t[:, 1], t[:, 2])
        _reduce_best(rq, d2, pts, fid, best_d2, best_pt, best_f)

    # greedy descent gives every query a tight initial bound
    node = np.zeros(n, dtype=np.int64)
    inner = bvh.left[node] >= 0
    while inner.any():
        i = np.nonzero(inner)[0]
        l, r = bvh.left[node[i]], bvh.right[node[i]]
        dl = _box_d2(q[i], bvh.lo[l], bvh.hi[l])
        dr = _box_d2(q[i], bvh.lo[r], bvh.hi[r])
        node[i] = np.where(dl <= dr, l, r)
        inner = bvh.left[node] >= 0
    eval_leaves(np.arange(n), node)

    fq = np.arange(n)
    fn = np.zeros(n, dtype=np.int64)
    while len(fq):
        keep = _box_d2(q[fq], bvh.lo[fn], bvh.hi[fn]) <= best_d2[fq]
        fq, fn = fq[keep], fn[keep]
        leaf = bvh.left[fn] < 0
        if leaf.any():
            eval_leaves(fq[leaf], fn[leaf])
        fq, fn = fq[~leaf], fn[~leaf]
        fq = np.concatenate([fq, fq])
        fn = np.concatenate([bvh.left[fn], bvh.right[fn]])

    v = best_pt - q
    d = np.sqrt(_dot(v, v))
    if single:
        return best_pt[0], v[0], float(d[0]), int(best_f[0])
    return best_pt, v, d, best_f


def nearest_brute_force(mesh: TriangleMesh, q):
    """Linear scan over every face; the reference for :func:`nearest_on_surface`."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    t = mesh.triangles
    pts, d2 = closest_points_on_triangles(q[:, None, :], t[None, :, 0], t[None, :, 1], t[None, :, 2])
    f = np.argmin(d2, axis=1)
    best = pts[np.arange(len(q)), f]
    v = best - q
    return best, v, np.sqrt(_dot(v, v)), f


# ------------------------------------------------------------------ sampling


def _sample_on_faces(mesh: TriangleMesh, count: int, rng: np.random.Generator):
    areas = mesh.face_areas
    fid = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    t = mesh.triangles[fid]
    pts = (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]
    return pts, fid


def sample_surface_points(mesh: TriangleMesh, count: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform surface samples with face normals."""
    mesh.validate()
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    pts, fid = _sample_on_faces(mesh, count, rng)
    return PointCloud(pts, mesh.face_normals[fid])


def tier_sizes(count: int) -> tuple[int, int, int]:
    far = count * TIER_PERCENT["far"] // 100
    mid = count * TIER_PERCENT["mid"] // 100
    return far, mid, count - far - mid


def sample_queries(mesh: TriangleMesh, count: int, seed: int = 0, bvh: Bvh | None = None) -> QueryBatch:
    """Gaussian-perturbed surface samples with exact nearest-point supervision.

    The sigma mix is 1% at 0.08, 49% at 0.02, 50% at 0.003.  Targets are re-solved
    after perturbation because the offset can move the nearest point.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    bvh = bvh or build_bvh(mesh)
    rng = np.random.default_rng(seed)
    base, _ = _sample_on_faces(mesh, count, rng)
    q, tiers = perturb_by_tier(base, rng)
    targets, v, _, _ = nearest_on_surface(bvh, q)
    return QueryBatch(q, targets, v, tiers)


def perturb_by_tier(base: np.ndarray, rng: np.random.Generator):
    """Offset surface samples with the tiered Gaussian noise; returns ``(q, tiers)``."""
    sizes = tier_sizes(len(base))
    sigma = np.repeat([TIER_SIGMA[t] for t in TIERS], sizes)
    q = base + rng.standard_normal(base.shape) * sigma[:, None]
    return q, np.repeat(np.arange(3, dtype=np.uint8), sizes)


# ------------------------------------------------------------------ fixtures


def icosphere(radius: float = 0.4, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + 5**0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return TriangleMesh(np.array(verts) * radius + np.asarray(center), np.array(faces))


def torus_mesh(major: float = 0.3, minor: float = 0.1, n_major: int = 64, n_minor: int = 24) -> TriangleMesh:
    u = np.arange(n_major) * 2 * np.pi / n_major
    w = np.arange(n_minor) * 2 * np.pi / n_minor
    U, W = np.meshgrid(u, w, indexing="ij")
    x = (major + minor * np.cos(W)) * np.cos(U)
    y = (major + minor * np.cos(W)) * np.sin(U)
    z = minor * np.sin(W)
    verts = np.stack([x, y, z], -1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    a = i * n_minor + j
    b = ((i + 1) % n_major) * n_minor + j
    c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    d = i * n_minor + (j + 1) % n_minor
    faces = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    return TriangleMesh(verts, faces)


def box_mesh(lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5)) -> TriangleMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], float)
    verts = lo + corners * (hi - lo)
    faces = np.array([
        [0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6],  # z faces
        [0, 1, 4], [1, 5, 4], [2, 6, 3], [3, 6, 7],  # y faces
        [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5],  # x faces
    ])
    return TriangleMesh(verts, faces)
