"""Losses, the lite/ultra objectives and the training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .fields import EPS_DIR, stencil_points
from .geometry import QueryBatch
from .nn import bind

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, last_finite: int | None):
        super().__init__(f"non-finite loss at step {step} (last finite step: {last_finite})")
        self.step = step
        self.last_finite = last_finite


@dataclass
class TrainConfig:
    lr: float = 1e-4
    decay: float = 0.3
    milestones: tuple = (30, 70, 120)
    curl_start: int = 150
    lambda_curl: float = 1e-6
    lambda_dir: float = 1e-3
    lambda_code: float = 1e-3
    batch: int = 256
    steps: int = 200
    seed: int = 0
    stencil_h: float = 1e-3
    curl_fraction: float = 0.25
    checkpoint_every: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if min(self.lambda_curl, self.lambda_dir, self.lambda_code) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.stencil_h <= 0:
            raise ValueError("stencil_h must be positive")

    def lr_at(self, step: int) -> float:
        return self.lr * self.decay ** sum(step >= m for m in self.milestones)

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class LossReport:
    l1: float = 0.0
    dir: float = 0.0
    curl: float = 0.0
    code: float = 0.0
    total: float = 0.0
    weights: dict = field(default_factory=dict)

    def weighted_sum(self) -> float:
        w = self.weights
        return self.l1 + w.get("dir", 0) * self.dir + w.get("curl", 0) * self.curl + w.get("code", 0) * self.code


# ------------------------------------------------------------------ losses


def loss_l1(v: ad.Var, v_gt) -> ad.Var:
    """Per-sample sum of absolute component errors, averaged over the batch."""
    return ad.mean(ad.sum(ad.abs(v - np.asarray(v_gt, dtype=np.float64)), axis=-1))


def loss_dir(v: ad.Var, v_gt) -> ad.Var:
    """Batch mean of ``1 - cos(v, v_gt)`` over samples with ``|v_gt| > eps``."""
    v_gt = np.asarray(v_gt, dtype=np.float64).reshape(-1, 3)
    n_gt = np.linalg.norm(v_gt, axis=1)
    keep = np.nonzero(n_gt > EPS_DIR)[0]
    if len(keep) == 0:
        return v.tape.const(0.0)
    vv = ad.take_rows(v, keep) if len(keep) < len(v_gt) else v
    u = v_gt[keep] / n_gt[keep, None]
    cos = ad.sum(vv * u, axis=-1) / (ad.l2norm(vv, axis=-1) + 1e-300)
    return ad.mean(ad.scale(cos, -1.0) + 1.0)


def loss_curl_of(eval_fn, q: np.ndarray, h: float) -> ad.Var:
    """Batch mean of ``||J - J^T||_F`` with J from the six-point stencil.

    ``eval_fn`` maps an ``(n, 3)`` array of points to an ``(n, 3)`` var, so the
    stencil evaluations live on the tape and gradients reach the parameters.
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    m = len(q)
    st = stencil_points(q, h).reshape(-1, 3)
    V = ad.reshape(eval_fn(st), (2, 9 * m))
    cols = ad.scale(ad.take_rows(V, [0]) - ad.take_rows(V, [1]), 0.5 / h)
    A = ad.reshape(cols, (3, m, 3))  # A[j, p, i] = dv_i/dx_j at point p
    skew = A - ad.transpose(A, (2, 1, 0))
    per_point = ad.l2norm(ad.reshape(ad.transpose(skew, (1, 0, 2)), (m, 9)), axis=-1)
    return ad.mean(per_point)


def loss_curl(model, P: dict, cloud, feats, q, h: float) -> ad.Var:
    if not model.differentiable_lookup:
        raise ValueError("curl requires differentiable lookup")
    return loss_curl_of(lambda pts: model.forward(P, cloud, feats, pts)[0], q, h)


# ------------------------------------------------------------------ objectives


def objective_lite(model, P, cloud, feats, batch: QueryBatch, cfg: TrainConfig):
    """L1 plus the weighted z-side codebook pull; returns ``(total var, report, aux)``."""
    if model.codebook is None or model.codebook.cfg.mode != "hard":
        raise ValueError("the lite objective needs a hard codebook")
    v, aux = model.forward(P, cloud, feats, batch.queries)
    l1 = loss_l1(v, batch.displacements)
    code, _ = model.codebook.commitment_terms(aux["z"], aux["z_hat"])
    total = l1 + ad.scale(code, cfg.lambda_code)
    rep = LossReport(float(l1.value), 0.0, 0.0, float(code.value), float(total.value), {"code": cfg.lambda_code})
    return total, rep, aux


def objective_ultra(model, P, cloud, feats, batch: QueryBatch, cfg: TrainConfig, step: int):
    """L1 + weighted direction loss + curl (skipped before ``curl_start``)."""
    v, aux = model.forward(P, cloud, feats, batch.queries)
    l1 = loss_l1(v, batch.displacements)
    total = l1
    weights = {"dir": cfg.lambda_dir, "curl": 0.0}
    rep = LossReport(l1=float(l1.value), weights=weights)
    if cfg.lambda_dir > 0:
        ld = loss_dir(v, batch.displacements)
        total = total + ad.scale(ld, cfg.lambda_dir)
        rep.dir = float(ld.value)
    if cfg.lambda_curl > 0 and step >= cfg.curl_start:
        m = max(1, int(np.ceil(cfg.curl_fraction * len(batch))))
        lc = loss_curl(model, P, cloud, feats, batch.queries[:m], cfg.stencil_h)
        total = total + ad.scale(lc, cfg.lambda_curl)
        rep.curl = float(lc.value)
        weights["curl"] = cfg.lambda_curl
    rep.total = float(total.value)
    return total, rep, aux


def objective(model, P, cloud, feats, batch, cfg, step):
    if model.mode == "lite":
        return objective_lite(model, P, cloud, feats, batch, cfg)
    return objective_ultra(model, P, cloud, feats, batch, cfg, step)


# ------------------------------------------------------------------ loop


def train(model, cloud, data: QueryBatch, cfg: TrainConfig, checkpoint=None) -> list[dict]:
    """Adam on the mode's objective with milestone learning-rate decay.

    ``checkpoint`` is an optional callable ``(step, model)`` invoked every
    ``cfg.checkpoint_every`` steps.  Returns the per-step loss history.
    """
    prepared = model.prepare(cloud)
    rng = np.random.default_rng(cfg.seed)
    state = ad.AdamState()
    history = []
    last_finite = None
    n = len(data)
    bsz = min(cfg.batch, n)
    for step in range(cfg.steps):
        batch = data.subset(rng.choice(n, size=bsz, replace=False))
        tape = ad.Tape()
        P = bind(tape, model.params)
        feats = model.features(P, prepared)
        total, rep, aux = objective(model, P, prepared, feats, batch, cfg, step)
        if not np.isfinite(rep.total):
            raise TrainingDiverged(step, last_finite)
        names = list(P)
        grads = dict(zip(names, tape.grad(total, [P[k] for k in names])))
        lr = cfg.lr_at(step)
        try:
            ad.adam_step(model.params, grads, state, lr)
        except FloatingPointError:
            raise TrainingDiverged(step, last_finite) from None
        if model.mode == "lite":
            model.codebook.ema_update(aux["z"].value, aux["indices"])
        last_finite = step
        history.append({"step": step, "l1": rep.l1, "dir": rep.dir, "curl": rep.curl,
                        "code": rep.code, "total": rep.total, "lr": lr})
        if step % 50 == 0:
            log.debug("step %d total %.6g l1 %.6g", step, rep.total, rep.l1)
        if checkpoint is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            checkpoint(step, model)
    return history


def write_history_csv(path, history) -> None:
    cols = ["step", "l1", "dir", "curl", "code", "total", "lr"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in history:
            fh.write(",".join(repr(row[c]) if c != "step" else str(row[c]) for c in cols) + "\n")
