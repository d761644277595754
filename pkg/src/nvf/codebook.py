"""Multi-head shape codebooks.

Hard mode quantizes each of the H embedding segments to its nearest code and
learns codes by exponential moving average.  Soft mode replaces the argmin with
cross-attention from the segment (query) to every code (keys/values), which is
differentiable end to end.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

LAPLACE_EPS = 1e-5


@dataclass
class CodebookConfig:
    mode: str = "hard"  # hard | soft
    heads: int = 4
    codes: int = 256
    code_dim: int = 64
    gamma: float = 0.99
    beta: float = 0.25

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"codebook mode must be hard or soft, got {self.mode!r}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def embed_dim(self) -> int:
        return self.heads * self.code_dim

    def to_dict(self):
        return asdict(self)


class Codebook:
    def __init__(self, cfg: CodebookConfig, rng: np.random.Generator):
        self.cfg = cfg
        H, R, dc = cfg.heads, cfg.codes, cfg.code_dim
        lim = 1.0 / np.sqrt(dc)
        codes = rng.uniform(-lim, lim, size=(H, R, dc))
        if cfg.mode == "hard":
            # codes are EMA state, not gradient parameters
            self.params = {}
            self.codes = codes
            self.cluster_size = np.ones((H, R))
            self.ema_sum = codes.copy()
        else:
            w = lambda: rng.uniform(-lim, lim, size=(H, dc, dc))  # noqa: E731
            self.params = {
                "cb.codes": codes,
                "cb.wq": w(),
                "cb.bq": np.zeros((H, 1, dc)),
                "cb.wk": w(),
                "cb.wv": w(),
            }

    # -- state for checkpoints -------------------------------------------------

    def state(self) -> dict:
        if self.cfg.mode == "hard":
            return {"cb.codes": self.codes, "cb.cluster_size": self.cluster_size, "cb.ema_sum": self.ema_sum}
        return {}

    def load_state(self, state: dict) -> None:
        if self.cfg.mode == "hard":
            self.codes = state["cb.codes"].copy()
            self.cluster_size = state["cb.cluster_size"].copy()
            self.ema_sum = state["cb.ema_sum"].copy()

    def code_values(self, params: dict | None = None) -> np.ndarray:
        if self.cfg.mode == "hard":
            return self.codes
        return (params or self.params)["cb.codes"]

    # -- hard mode -------------------------------------------------------------

    def _split(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        H, dc = self.cfg.heads, self.cfg.code_dim
        if z.shape[-1] != H * dc:
            raise ValueError(f"embedding width {z.shape[-1]} != heads * code_dim = {H * dc}")
        return z.reshape(-1, H, dc)

    def hard_lookup(self, z):
        """Nearest code per head (ties to the lowest index).

        Returns ``(z_hat, indices)`` with ``z_hat`` shaped like ``z`` and
        ``indices`` of shape ``(B, H)``.  ``z_hat`` is plain data: no gradient
        flows through the lookup.
        """
        if self.cfg.mode != "hard":
            raise ValueError("hard_lookup requires a hard codebook")
        zv = z.value if isinstance(z, ad.Var) else z
        zh = self._split(zv)  # (B, H, dc)
        idx = np.empty(zh.shape[:2], dtype=np.int64)
        step = max(1, 2**22 // self.codes.size)
        for s in range(0, len(zh), step):
            diff = zh[s : s + step, :, None, :] - self.codes[None]
            idx[s : s + step] = np.argmin((diff * diff).sum(axis=-1), axis=2)
        zq = self.codes[np.arange(self.cfg.heads)[None, :], idx]
        return zq.reshape(np.shape(zv)), idx

    def ema_update(self, z, indices) -> None:
        """Move each selected code toward the mean of its assigned segments.

        Codes nobody selected this batch keep their values.
        """
        if self.cfg.mode != "hard":
            raise ValueError("ema_update requires a hard codebook")
        g = self.cfg.gamma
        zh = self._split(z)
        H, R = self.cfg.heads, self.cfg.codes
        onehot = np.zeros((len(zh), H, R))
        onehot[np.arange(len(zh))[:, None], np.arange(H)[None, :], indices] = 1.0
        counts = onehot.sum(axis=0)
        sums = np.einsum("bhr,bhd->hrd", onehot, zh)
        self.cluster_size = g * self.cluster_size + (1 - g) * counts
        self.ema_sum = g * self.ema_sum + (1 - g) * sums
        n = self.cluster_size.sum(axis=1, keepdims=True)
        smoothed = (self.cluster_size + LAPLACE_EPS) / (n + R * LAPLACE_EPS) * n
        hit = counts > 0
        self.codes = np.where(hit[..., None], self.ema_sum / smoothed[..., None], self.codes)

    def commitment_terms(self, z: ad.Var, z_hat):
        """Both terms of the codebook loss, each summed over heads and averaged over the batch.

        Returns ``(||sg(c) - z||^2, beta * ||sg(z) - c||^2)``.  Only the first term
        reaches ``z``; codes are learned by EMA so the second carries no gradient.
        """
        zh = z_hat.value if isinstance(z_hat, ad.Var) else np.asarray(z_hat, dtype=np.float64)
        diff = z - zh
        pull = ad.mean(ad.sum(diff * diff, axis=-1))
        sz = ad.stop_gradient(z)
        d2 = sz - zh
        commit = ad.scale(ad.mean(ad.sum(d2 * d2, axis=-1)), self.cfg.beta)
        return pull, commit

    # -- soft mode -------------------------------------------------------------

    def soft_lookup(self, P: dict, z: ad.Var, logit_scale: float = 1.0, return_weights: bool = False):
        """Per-head cross-attention from the embedding segment to the codes."""
        if self.cfg.mode != "soft":
            raise ValueError("soft_lookup requires a soft codebook")
        H, dc = self.cfg.heads, self.cfg.code_dim
        B = z.shape[0]
        zh = ad.transpose(ad.reshape(z, (B, H, dc)), (1, 0, 2))  # (H, B, dc)
        q = ad.matmul(zh, P["cb.wq"]) + P["cb.bq"]
        k = ad.matmul(P["cb.codes"], P["cb.wk"])  # (H, R, dc)
        v = ad.matmul(P["cb.codes"], P["cb.wv"])
        logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), logit_scale / np.sqrt(dc))
        w = ad.softmax(logits)  # (H, B, R)
        out = ad.matmul(w, v)  # (H, B, dc)
        zhat = ad.reshape(ad.transpose(out, (1, 0, 2)), (B, H * dc))
        if return_weights:
            return zhat, w, v
        return zhat
