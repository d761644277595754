"""Mesh extraction from a displacement field without differentiating it.

The field is sampled on a lattice, each lattice point in a near-surface band
gets a pseudo-sign (neighbors whose directions oppose take the flipped sign),
and marching cubes runs on ``sign * distance``.
"""

from __future__ import annotations

import json
import heapq
from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence, eigsh
from skimage.measure import marching_cubes as _skimage_mc

from . import autodiff
from .fields import FieldGrid, grid_eval
from .geometry import TriangleMesh

UNRESOLVED = 0


@dataclass
class ExtractionConfig:
    resolution: int = 256
    tau_opp: float = -0.2
    far_cutoff: float = 3.0  # in voxel diagonals
    bounds: tuple = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))

    def __post_init__(self):
        if not -1.0 < self.tau_opp <= 0.0:
            raise ValueError("tau_opp must lie in (-1, 0]")
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        self.bounds = tuple(tuple(float(x) for x in b) for b in self.bounds)

    def to_dict(self):
        return asdict(self)


@dataclass
class LatticeGrid:
    resolution: int
    bounds: np.ndarray  # (2, 3)
    v: np.ndarray  # (res, res, res, 3), indexed [z, y, x]
    d: np.ndarray
    g: np.ndarray
    signs: np.ndarray  # int8: +1, -1 or 0 (unresolved)
    components: int = 0

    @classmethod
    def from_field_grid(cls, fg: FieldGrid) -> "LatticeGrid":
        return cls(fg.resolution, fg.bounds, fg.v, fg.d, fg.g, np.zeros(fg.d.shape, np.int8))

    @property
    def spacing(self) -> np.ndarray:
        return (self.bounds[1] - self.bounds[0]) / (self.resolution - 1)

    @property
    def voxel_diagonal(self) -> float:
        return float(np.linalg.norm(self.spacing))


@dataclass
class Diagnostics:
    skipped_cells: int
    components: int
    resolution: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _neighbor_tables(grid: LatticeGrid, band: np.ndarray):
    """Band-local 6-neighbor tables.

    Returns the flat lattice indices of band points, their neighbors as positions
    in that list (-1 where absent or outside the band) and ``g_i . g_j`` per edge.
    """
    n = grid.resolution
    members = np.flatnonzero(band)
    pos = np.full(n**3, -1, dtype=np.int64)
    pos[members] = np.arange(len(members))
    z, y, x = np.unravel_index(members, (n, n, n))
    coords = (x, y, z)
    g = grid.g.reshape(-1, 3)
    gm = g[members]
    nb = np.full((len(members), 6), -1, dtype=np.int64)
    dots = np.zeros((len(members), 6))
    for axis in range(3):
        stride = n**axis
        for k, step in ((2 * axis, 1), (2 * axis + 1, -1)):
            c = coords[axis] + step
            ok = (c >= 0) & (c < n)
            j = np.where(ok, members + step * stride, 0)
            p = np.where(ok, pos[j], -1)
            nb[:, k] = p
            dots[:, k] = np.where(p >= 0, (gm * g[j]).sum(-1), 0.0)
    return members, nb, dots


def assign_pseudo_signs(grid: LatticeGrid, cfg: ExtractionConfig) -> LatticeGrid:
    """Pseudo-signs over the band ``d < far_cutoff * voxel diagonal``.

    A neighbor across an edge with ``g_i . g_j < tau_opp`` should carry the
    flipped sign, otherwise the same sign.  Each edge is weighted by the
    confidence ``r_i r_j |g_i . g_j|`` where ``r = min(1, d / spacing)``, since
    directions of a learned field are noise at lattice points sitting almost on
    the surface.

    Signs come from a best-first flood: the unsigned point with the largest
    accumulated vote of its signed neighbors is signed next.  On large band
    components the flood result then seeds a spectral relaxation that weighs
    every edge at once, so a handful of misjudged edges where a learned field
    turns tangential cannot flip a whole region.  Each component is oriented so
    that its most reliable point is +1.
    """
    n = grid.resolution
    d_max = cfg.far_cutoff * grid.voxel_diagonal
    band = grid.d < d_max
    if not band.any():
        raise ValueError("no surface in bounds")
    members, nb, dots = _neighbor_tables(grid, band)
    d = grid.d.reshape(-1)[members]
    rel = np.minimum(1.0, d / float(np.min(grid.spacing)))
    conf = rel[:, None] * np.where(nb >= 0, rel[np.maximum(nb, 0)], 0.0) * np.abs(dots)
    same = dots >= cfg.tau_opp

    # seeds in order of reliability, ties by lattice index
    seeds = np.lexsort((members, -rel))
    signs, label = _flood(nb, conf, same, seeds)
    weights = conf * np.where(same, 1.0, -1.0)
    for c in range(int(label.max()) + 1):
        idx = np.flatnonzero(label == c)
        if len(idx) >= SPECTRAL_MIN_POINTS:
            signs[idx] = _spectral_signs(idx, nb, weights, signs[idx])
    # orient each component by its first seed
    first = np.full(int(label.max()) + 1, -1)
    for i in seeds[::-1]:
        first[label[i]] = i
    signs *= signs[first][label]

    out = np.zeros(n**3, dtype=np.int8)
    out[members] = signs
    grid.signs = out.reshape(n, n, n)
    grid.components = len(first)
    return grid


SPECTRAL_MIN_POINTS = 64


def _flood(nb, conf, same, seeds):
    """Best-first vote flood; returns ``(signs, component label)`` per band point."""
    nb_l, conf_l, same_l = nb.tolist(), conf.tolist(), same.tolist()
    m = len(nb_l)
    signs = [0] * m
    label = [-1] * m
    vote = [0.0] * m
    hint = [0] * m  # proposal of the first edge to reach a point, used when its vote is zero
    heappush, heappop = heapq.heappush, heapq.heappop

    def settle(i, heap):
        si, nbi, ci, smi = signs[i], nb_l[i], conf_l[i], same_l[i]
        for k in range(6):
            j = nbi[k]
            if j < 0 or signs[j]:
                continue
            proposed = si if smi[k] else -si
            if not hint[j]:
                hint[j] = proposed
            vote[j] += ci[k] * proposed
            heappush(heap, (-abs(vote[j]), j, vote[j]))

    components = 0
    for seed in seeds.tolist():
        if signs[seed]:
            continue
        signs[seed], label[seed] = 1, components
        heap = []
        settle(seed, heap)
        while heap:
            _, j, v = heappop(heap)
            if signs[j] or v != vote[j]:
                continue  # already signed, or a stale entry
            signs[j] = hint[j] if v == 0.0 else (1 if v > 0 else -1)
            label[j] = components
            settle(j, heap)
        components += 1
    return np.array(signs, dtype=np.int64), np.array(label)


def _spectral_signs(idx, nb, weights, init):
    """Signs of the leading eigenvector of the normalized signed adjacency.

    For a consistent edge labelling that eigenvector is exactly the sign
    pattern; otherwise it is the relaxed optimum of agreement over all edges.
    The flood signs serve as the starting vector and fill any exact zeros.
    """
    pos = np.full(len(nb), -1)
    pos[idx] = np.arange(len(idx))
    rows = np.repeat(np.arange(len(idx)), 6)
    cols = pos[np.maximum(nb[idx], 0)].reshape(-1)
    w = weights[idx].reshape(-1)
    ok = (nb[idx].reshape(-1) >= 0) & (cols >= 0) & (w != 0.0)
    W = sparse.csr_matrix((w[ok], (rows[ok], cols[ok])), shape=(len(idx), len(idx)))
    W = (W + W.T) * 0.5
    deg = np.asarray(abs(W).sum(axis=1)).ravel()
    if not deg.any():
        return init
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    M = sparse.diags(inv) @ W @ sparse.diags(inv)
    v0 = init * np.sqrt(deg)
    try:
        _, vec = eigsh(M, k=1, which="LA", v0=v0, tol=1e-8, maxiter=20 * len(idx))
    except ArpackNoConvergence:
        return init
    x = vec[:, 0]
    s = np.where(x > 0, 1, np.where(x < 0, -1, init))
    return s if (s * init).sum() >= 0 else -s


def _cell_masks(grid: LatticeGrid, d_max: float):
    s = grid.signs != UNRESOLVED
    d = grid.d

    def corners(a, reduce):
        out = a[:-1, :-1, :-1]
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    out = reduce(out, a[dz : dz + d.shape[0] - 1, dy : dy + d.shape[1] - 1, dx : dx + d.shape[2] - 1])
        return out

    all_signed = corners(s, np.logical_and)
    min_d = corners(d, np.minimum)
    all_far = min_d >= d_max
    near = min_d <= grid.voxel_diagonal
    return all_signed, all_far, near


def marching_cubes(grid: LatticeGrid, d_max: float | None = None):
    """Triangulate the pseudo-signed distance; returns ``(mesh, skipped cell count)``.

    Edge crossings sit at ``t = d_i / (d_i + d_j)`` from corner i (midpoint when
    the sum vanishes).  Cells with an unresolved corner are skipped; those that
    lie next to the surface are counted.
    """
    n = grid.resolution
    if d_max is None:
        d_max = np.inf
    all_signed, all_far, near = _cell_masks(grid, d_max)
    active = all_signed & ~all_far
    skipped = int(np.sum(~all_signed & near))

    val = np.where(grid.signs != UNRESOLVED, grid.signs * grid.d, grid.d)
    vol = np.ascontiguousarray(np.transpose(val, (2, 1, 0)))  # [x, y, z]
    # skimage gates a cell by the mask at its far corner
    mask = np.zeros((n, n, n), bool)
    mask[1:, 1:, 1:] = np.transpose(active, (2, 1, 0))
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    if not mask.any() or vol.min() > 0 or vol.max() < 0:
        return empty, skipped
    try:
        verts, faces, _, _ = _skimage_mc(vol, 0.0, allow_degenerate=True, mask=mask)
    except (RuntimeError, ValueError):
        return empty, skipped
    verts = _refine_vertices(verts.astype(np.float64), np.transpose(grid.d, (2, 1, 0)))
    mesh = _weld(verts * grid.spacing + grid.bounds[0], faces)
    return mesh, skipped


def _refine_vertices(verts: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Recompute float32 crossing positions in float64 from the lattice distances."""
    r = np.rint(verts)
    frac = np.abs(verts - r) > 1e-4
    out = r.copy()
    rows, axes = np.nonzero(frac)
    lo = np.floor(verts[rows, axes]).astype(np.int64)
    base = r[rows].astype(np.int64)
    i0 = base.copy()
    i0[np.arange(len(rows)), axes] = lo
    i1 = i0.copy()
    i1[np.arange(len(rows)), axes] = lo + 1
    di = d[i0[:, 0], i0[:, 1], i0[:, 2]]
    dj = d[i1[:, 0], i1[:, 1], i1[:, 2]]
    s = di + dj
    t = np.where(s < 1e-12, 0.5, di / np.where(s < 1e-12, 1.0, s))
    out[rows, axes] = lo + t
    return out


def _weld(verts: np.ndarray, faces: np.ndarray) -> TriangleMesh:
    uniq, inv = np.unique(verts, axis=0, return_inverse=True)
    f = inv.reshape(-1)[faces]
    ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    f = f[ok]
    used, remap = np.unique(f, return_inverse=True)
    return TriangleMesh(uniq[used], remap.reshape(-1, 3))


def extract(field, cfg: ExtractionConfig | None = None):
    """Field -> lattice -> pseudo-signs -> marching cubes, with zero backward passes.

    Returns ``(mesh, diagnostics, grid)``.
    """
    cfg = cfg or ExtractionConfig()
    before = autodiff.backward_pass_count()
    grid = LatticeGrid.from_field_grid(grid_eval(field, cfg.resolution, cfg.bounds))
    assign_pseudo_signs(grid, cfg)
    mesh, skipped = marching_cubes(grid, cfg.far_cutoff * grid.voxel_diagonal)
    if autodiff.backward_pass_count() != before:
        raise RuntimeError("extraction ran a backward pass")
    return mesh, Diagnostics(skipped, grid.components, cfg.resolution), grid
