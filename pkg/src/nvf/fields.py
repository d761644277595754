"""Vector fields mapping query points to displacements, plus finite-difference operators.

A field is any callable taking an ``(n, 3)`` array of points and returning the
``(n, 3)`` displacements toward the surface.  Analytic fields are built as
``v = -phi * grad(phi)`` from a closed-form unsigned distance ``phi``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, QueryBatch, perturb_by_tier

EPS_DIR = 1e-8
DEFAULT_H = 1e-3
_X = np.array([1.0, 0.0, 0.0])


def _as_points(q):
    q = np.asarray(q, dtype=np.float64)
    return q.reshape(-1, 3), q.ndim == 1


def directions(v: np.ndarray, eps: float = EPS_DIR):
    """Distances and unit directions; direction is zero where distance <= eps."""
    d = np.linalg.norm(v, axis=-1)
    g = np.where((d > eps)[..., None], v / np.where(d > eps, d, 1.0)[..., None], 0.0)
    return d, g


def _unit(x, fallback=_X):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), fallback), n[..., 0]


class AnalyticField:
    """Closed-form distance vector field; subclasses provide ``phi`` and ``grad_phi``."""

    def phi(self, q: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_phi(self, q: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def medial_distance(self, q: np.ndarray) -> np.ndarray:
        """Distance to the locus where ``phi`` is not differentiable (excluding the surface)."""
        raise NotImplementedError

    def __call__(self, q):
        return eval_conservative(self, q)

    def scaled(self, s: float, t=(0.0, 0.0, 0.0)) -> "Composed":
        return Composed(self, s, t)


def eval_conservative(field: AnalyticField, q):
    """``v = -phi * grad(phi)``; on the singular locus ``grad(phi)`` falls back to +x."""
    pts, single = _as_points(q)
    v = -field.phi(pts)[:, None] * field.grad_phi(pts)
    return v[0] if single else v


@dataclass
class Sphere(AnalyticField):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.4

    def _offset(self, q):
        return _unit(q - np.asarray(self.center, float))

    def phi(self, q):
        _, rho = self._offset(q)
        return np.abs(rho - self.radius)

    def grad_phi(self, q):
        n, rho = self._offset(q)
        return np.where((rho >= self.radius)[:, None], n, -n)

    def __call__(self, q):
        # (r - rho) n is exactly zero on the surface
        pts, single = _as_points(q)
        n, rho = self._offset(pts)
        v = (self.radius - rho)[:, None] * n
        return v[0] if single else v

    def medial_distance(self, q):
        return self._offset(q)[1]

    def sdf(self, q):
        return self._offset(q)[1] - self.radius

    def surface_samples(self, n: int, rng: np.random.Generator):
        """Uniform points on the sphere and their outward normals."""
        g = rng.standard_normal((n, 3))
        u = g / np.linalg.norm(g, axis=1, keepdims=True)
        return np.asarray(self.center, float) + self.radius * u, u


@dataclass
class Plane(AnalyticField):
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)

    def _height(self, q):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        return (q - np.asarray(self.point, float)) @ n, n

    def phi(self, q):
        return np.abs(self._height(q)[0])

    def grad_phi(self, q):
        h, n = self._height(q)
        return np.where((h >= 0)[:, None], n, -n)

    def __call__(self, q):
        pts, single = _as_points(q)
        h, n = self._height(pts)
        v = -h[:, None] * n
        return v[0] if single else v

    def medial_distance(self, q):
        return np.full(len(q), np.inf)

    def sdf(self, q):
        return self._height(q)[0]


@dataclass
class Torus(AnalyticField):
    """Torus around the z axis through ``center``."""

    center: tuple = (0.0, 0.0, 0.0)
    major: float = 0.3
    minor: float = 0.1

    def _tube(self, q):
        p = q - np.asarray(self.center, float)
        radial, rxy = _unit(p * [1.0, 1.0, 0.0])
        w = p - self.major * radial
        return _unit(w) + (rxy,)

    def phi(self, q):
        _, s, _ = self._tube(q)
        return np.abs(s - self.minor)

    def grad_phi(self, q):
        n, s, _ = self._tube(q)
        return np.where((s >= self.minor)[:, None], n, -n)

    def __call__(self, q):
        pts, single = _as_points(q)
        n, s, _ = self._tube(pts)
        v = (self.minor - s)[:, None] * n
        return v[0] if single else v

    def medial_distance(self, q):
        # medial set: the core circle and the symmetry axis
        _, s, rxy = self._tube(q)
        return np.minimum(s, rxy)

    def sdf(self, q):
        return self._tube(q)[1] - self.minor

    def surface_samples(self, n: int, rng: np.random.Generator):
        """Area-uniform torus points (rejection on the tube angle) and normals."""
        R, r = self.major, self.minor
        out_u, out_v = [], []
        need = n
        while need > 0:
            u = rng.uniform(0, 2 * np.pi, 2 * need)
            v = rng.uniform(0, 2 * np.pi, 2 * need)
            ok = rng.uniform(0, R + r, 2 * need) < R + r * np.cos(v)
            out_u.append(u[ok][:need])
            out_v.append(v[ok][:need])
            need -= len(out_u[-1])
        u, v = np.concatenate(out_u), np.concatenate(out_v)
        nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
        ring = np.stack([np.cos(u), np.sin(u), np.zeros_like(u)], axis=1)
        return np.asarray(self.center, float) + R * ring + r * nrm, nrm


@dataclass
class Composed(AnalyticField):
    """``phi'(x) = s * phi((x - t) / s)``, so ``v'(x) = s * v((x - t) / s)``."""

    base: AnalyticField
    s: float = 1.0
    t: tuple = (0.0, 0.0, 0.0)

    def _local(self, q):
        return (q - np.asarray(self.t, float)) / self.s

    def phi(self, q):
        return self.s * self.base.phi(self._local(q))

    def grad_phi(self, q):
        return self.base.grad_phi(self._local(q))

    def __call__(self, q):
        pts, single = _as_points(q)
        v = self.s * self.base(self._local(pts))
        return v[0] if single else v

    def medial_distance(self, q):
        return self.s * self.base.medial_distance(self._local(q))

    def sdf(self, q):
        return self.s * self.base.sdf(self._local(q))


def parse_analytic(spec: str) -> AnalyticField:
    """``sphere:0.4``, ``plane`` or ``torus:0.3,0.1`` to an analytic field."""
    kind, _, args = spec.partition(":")
    vals = [float(x) for x in args.split(",") if x.strip()]
    if kind == "sphere":
        return Sphere(radius=vals[0] if vals else 0.4)
    if kind == "plane":
        return Plane()
    if kind == "torus":
        return Torus(major=vals[0] if vals else 0.3, minor=vals[1] if len(vals) > 1 else 0.1)
    raise ValueError(f"unknown analytic field {spec!r}")


# ------------------------------------------------------------------ operators


@dataclass
class JacobianEstimate:
    matrix: np.ndarray  # (..., 3, 3), matrix[..., i, j] = d v_i / d x_j
    h: float


def stencil_points(q: np.ndarray, h: float) -> np.ndarray:
    """``(2, 3, n, 3)`` array: [sign (+, -), axis j, point] of ``q +/- h e_j``."""
    e = np.eye(3) * h
    return np.stack([q[None, :, :] + e[:, None, :], q[None, :, :] - e[:, None, :]])


def jacobian_fd(field, q, h: float = DEFAULT_H) -> JacobianEstimate:
    """Central-difference Jacobian; column j is ``(v(q+h e_j) - v(q-h e_j)) / 2h``."""
    if h <= 0:
        raise ValueError("stencil step must be positive")
    pts, single = _as_points(q)
    n = len(pts)
    st = stencil_points(pts, h)
    v = np.asarray(field(st.reshape(-1, 3)), dtype=np.float64).reshape(2, 3, n, 3)
    cols = (v[0] - v[1]) / (2.0 * h)  # (j, n, i)
    J = np.transpose(cols, (1, 2, 0))
    return JacobianEstimate(J[0] if single else J, h)


def curl_from_jacobian(J: np.ndarray) -> np.ndarray:
    return np.stack([J[..., 2, 1] - J[..., 1, 2], J[..., 0, 2] - J[..., 2, 0], J[..., 1, 0] - J[..., 0, 1]], axis=-1)


def curl(field, q, h: float = DEFAULT_H) -> np.ndarray:
    return curl_from_jacobian(jacobian_fd(field, q, h).matrix)


def divergence(field, q, h: float = DEFAULT_H):
    J = jacobian_fd(field, q, h).matrix
    return np.trace(J, axis1=-2, axis2=-1)


# ------------------------------------------------------------------ lattice


@dataclass
class FieldGrid:
    resolution: int
    bounds: np.ndarray  # (2, 3): lo, hi
    v: np.ndarray  # (res, res, res, 3) indexed [z, y, x]
    d: np.ndarray
    g: np.ndarray

    @property
    def spacing(self) -> np.ndarray:
        return (self.bounds[1] - self.bounds[0]) / (self.resolution - 1)


def lattice_points(resolution: int, bounds=((-0.5,) * 3, (0.5,) * 3)) -> np.ndarray:
    """Lattice coordinates in x-fastest order, shape ``(res**3, 3)``."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    b = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    if np.any(b[1] <= b[0]):
        raise ValueError("invalid bounds")
    axes = [np.linspace(b[0, k], b[1, k], resolution) for k in range(3)]
    Z, Y, X = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return np.stack([X, Y, Z], axis=-1).reshape(-1, 3)


def grid_eval(field, resolution: int, bounds=((-0.5,) * 3, (0.5,) * 3), chunk: int = 65536) -> FieldGrid:
    pts = lattice_points(resolution, bounds)
    v = np.concatenate([np.asarray(field(pts[i : i + chunk]), dtype=np.float64)
                        for i in range(0, len(pts), chunk)])
    d, g = directions(v)
    shape = (resolution,) * 3
    return FieldGrid(resolution, np.asarray(bounds, float).reshape(2, 3),
                     v.reshape(*shape, 3), d.reshape(shape), g.reshape(*shape, 3))


def sample_field_queries(field, count: int, seed: int = 0) -> QueryBatch:
    """Tiered query samples around an analytic surface with exact targets."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    base, _ = field.surface_samples(count, rng)
    q, tiers = perturb_by_tier(base, rng)
    v = field(q)
    return QueryBatch(q, q + v, v, tiers)


def field_surface_cloud(field, count: int, seed: int = 0) -> PointCloud:
    pts, nrm = field.surface_samples(count, np.random.default_rng(seed))
    return PointCloud(pts, nrm)
