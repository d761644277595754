"""Shape loading, fitting and evaluation glue shared by the CLI and the experiments."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .extraction import Diagnostics, extract
from .fields import AnalyticField, field_surface_cloud, parse_analytic, sample_field_queries
from .geometry import PointCloud, QueryBatch, TriangleMesh, build_bvh, sample_queries, sample_surface_points
from .io import query_batch_bytes, read_mesh
from .metrics import MetricReport, compare_clouds, curl_magnitude
from .model import NvfModel
from .training import train

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("vanilla", "+hard", "+soft", "+soft+curl", "+soft+curl+dir")


class Shape:
    """A training target given either as a triangle mesh or as an analytic field."""

    def __init__(self, name: str, mesh: TriangleMesh | None = None, field: AnalyticField | None = None):
        if (mesh is None) == (field is None):
            raise ValueError("give exactly one of mesh or field")
        self.name = name
        self.mesh = mesh.validate() if mesh is not None else None
        self.field = field
        self._bvh = None

    @classmethod
    def load(cls, ref: str) -> "Shape":
        if ref.endswith((".obj", ".ply")):
            from pathlib import Path

            return cls(Path(ref).stem, mesh=read_mesh(ref))
        return cls(ref.partition(":")[0], field=parse_analytic(ref))

    def surface_cloud(self, count: int, seed: int) -> PointCloud:
        if self.field is not None:
            return field_surface_cloud(self.field, count, seed)
        return sample_surface_points(self.mesh, count, seed)

    def queries(self, count: int, seed: int) -> QueryBatch:
        if self.field is not None:
            return sample_field_queries(self.field, count, seed)
        if self._bvh is None:
            self._bvh = build_bvh(self.mesh)
        return sample_queries(self.mesh, count, seed, self._bvh)


@dataclass
class FitResult:
    model: NvfModel
    cloud: PointCloud
    data: QueryBatch
    history: list

    def checksum(self) -> str:
        return data_checksum(self.cloud, self.data)


def data_checksum(cloud: PointCloud, data: QueryBatch) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(cloud.points).tobytes())
    h.update(query_batch_bytes(data))
    return h.hexdigest()[:16]


def make_data(cfg: RunConfig, shape: Shape):
    """Input cloud and supervision queries; seeds are fixed by the run seed only."""
    cloud = shape.surface_cloud(cfg.data["input_points"], cfg.seed + 1)
    data = shape.queries(cfg.data["queries"], cfg.seed)
    return cloud, data


def fit(cfg: RunConfig, shape: Shape, cloud=None, data=None, checkpoint=None) -> FitResult:
    if cloud is None or data is None:
        cloud, data = make_data(cfg, shape)
    model = NvfModel(cfg.model_config())
    history = train(model, cloud, data, cfg.train_config(), checkpoint=checkpoint)
    return FitResult(model, cloud, data, history)


def evaluate_fit(result: FitResult, cfg: RunConfig, shape: Shape):
    """Extract a mesh from the fitted field and score it against the shape.

    Returns ``(mesh, diagnostics, report, curl)``; the report is None when
    extraction produced no surface.
    """
    ev = cfg.eval
    fld = result.model.field(result.cloud)
    mesh, diag, _ = extract(fld, cfg.extraction_config())
    held_out = shape.queries(ev["curl_samples"], cfg.seed + 7)
    dist = np.linalg.norm(held_out.displacements, axis=1)
    curl = curl_magnitude(fld, held_out.queries, cfg.train_config().stencil_h, dist)
    report = score_mesh(mesh, shape, ev["n_cd"], ev["n_emd"], cfg.seed)
    if report is not None:
        report.curl = curl
    return mesh, diag, report, curl


def score_mesh(mesh: TriangleMesh, shape: Shape, n_cd: int, n_emd: int, seed: int) -> MetricReport | None:
    if len(mesh.faces) == 0:
        return None
    a = sample_surface_points(mesh, n_cd, seed + 11)
    b = shape.surface_cloud(n_cd, seed + 11)
    ea = sample_surface_points(mesh, n_emd, seed + 12)
    eb = shape.surface_cloud(n_emd, seed + 12)
    return compare_clouds(a, b, ea, eb)


def ablation_configs(cfg: RunConfig) -> dict[str, RunConfig]:
    """The five component variants, all sharing the base seed and data settings.

    Weights that a variant does not use are zeroed rather than left implicit.
    """
    cb = dict(cfg.codebook or {})
    off = {"lambda_curl": 0.0, "lambda_dir": 0.0}
    t = cfg.train
    return {
        "vanilla": cfg.with_overrides(mode="vanilla", codebook=None, train=off),
        "+hard": cfg.with_overrides(mode="lite", codebook={**cb, "mode": "hard"}, train=off),
        "+soft": cfg.with_overrides(mode="ultra", codebook={**cb, "mode": "soft"}, train=off),
        "+soft+curl": cfg.with_overrides(mode="ultra", codebook={**cb, "mode": "soft"},
                                         train={"lambda_dir": 0.0, "lambda_curl": t.get("lambda_curl", 1e-6)}),
        "+soft+curl+dir": cfg.with_overrides(mode="ultra", codebook={**cb, "mode": "soft"},
                                             train={"lambda_dir": t.get("lambda_dir", 1e-3),
                                                    "lambda_curl": t.get("lambda_curl", 1e-6)}),
    }


def diagnostics_dict(diag: Diagnostics) -> dict:
    return {"skipped_cells": diag.skipped_cells, "components": diag.components, "resolution": diag.resolution}
