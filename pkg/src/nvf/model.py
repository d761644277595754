"""The field predictor: encoder, optional codebook and an MLP head ``(z, z_hat) -> v``."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .codebook import Codebook, CodebookConfig
from .encoder import Encoder, EncoderConfig, PreparedCloud, prepare_cloud
from .io import read_weights, write_weights
from .nn import bind, init_mlp, mlp

MODES = ("vanilla", "lite", "ultra")
MODE_CODEBOOK = {"lite": "hard", "ultra": "soft"}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    mode: str = "ultra"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    codebook: CodebookConfig | None = field(default_factory=lambda: CodebookConfig(mode="soft"))
    head_hidden: int = 64
    head_layers: int = 4
    activation: str = "softplus"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.codebook, dict):
            self.codebook = CodebookConfig(**self.codebook)
        if self.mode == "vanilla":
            return
        if self.codebook is None:
            raise ConfigError(f"mode {self.mode} needs a codebook")
        want = MODE_CODEBOOK[self.mode]
        if self.codebook.mode != want:
            raise ConfigError(f"mode {self.mode} requires a {want} codebook, got {self.codebook.mode}")
        if self.codebook.embed_dim != self.encoder.embed_dim:
            raise ConfigError(
                f"codebook heads * code_dim = {self.codebook.embed_dim} must equal embed_dim {self.encoder.embed_dim}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.mode == "vanilla":
            d["codebook"] = None
        return d


class NvfModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg.encoder, rng)
        self.codebook = Codebook(cfg.codebook, rng) if cfg.mode != "vanilla" else None
        D = cfg.encoder.embed_dim
        head_in = D if self.codebook is None else 2 * D
        sizes = [head_in] + [cfg.head_hidden] * (cfg.head_layers - 1) + [3]
        self.params = {
            **self.encoder.params,
            **(self.codebook.params if self.codebook else {}),
            **init_mlp(rng, "head", sizes, out_scale=0.1),
        }

    @property
    def mode(self) -> str:
        return self.cfg.mode

    @property
    def differentiable_lookup(self) -> bool:
        return self.codebook is None or self.codebook.cfg.mode == "soft"

    def prepare(self, cloud) -> PreparedCloud:
        return prepare_cloud(cloud, self.cfg.encoder.k)

    def features(self, P: dict, cloud: PreparedCloud) -> ad.Var:
        return self.encoder.point_features(P, cloud)

    def forward(self, P: dict, cloud: PreparedCloud, feats: ad.Var, q) -> tuple[ad.Var, dict]:
        """Displacements for queries ``q`` plus the intermediate embeddings."""
        z = self.encoder.embed(P, cloud, feats, q)
        aux = {"z": z}
        if self.codebook is None:
            h = z
        elif self.codebook.cfg.mode == "hard":
            zq, idx = self.codebook.hard_lookup(z)
            aux.update(z_hat=zq, indices=idx)
            h = ad.concat([z, zq], axis=-1)
        else:
            zq = self.codebook.soft_lookup(P, z)
            aux["z_hat"] = zq
            h = ad.concat([z, zq], axis=-1)
        return mlp(P, "head", h, self.cfg.head_layers, self.cfg.activation), aux

    def predict(self, cloud, q, chunk: int = 4096) -> np.ndarray:
        """Gradient-free batched evaluation."""
        if not isinstance(cloud, PreparedCloud):
            cloud = self.prepare(cloud)
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        out = np.empty_like(q)
        feats = None
        for s in range(0, len(q), chunk):
            tape = ad.Tape()
            P = bind(tape, self.params, trainable=False)
            if feats is None:
                feats = self.features(P, cloud).value
            v, _ = self.forward(P, cloud, tape.const(feats), q[s : s + chunk])
            out[s : s + chunk] = v.value
        return out

    def field(self, cloud) -> "ModelField":
        return ModelField(self, self.prepare(cloud) if not isinstance(cloud, PreparedCloud) else cloud)

    # -- persistence -----------------------------------------------------------

    def state_tensors(self) -> list[tuple[str, np.ndarray]]:
        state = dict(self.params)
        if self.codebook is not None:
            state.update(self.codebook.state())
        return sorted(state.items())

    def load_tensors(self, tensors) -> None:
        names = [n for n, _ in self.state_tensors()]
        if len(tensors) != len(names):
            raise ValueError(f"checkpoint has {len(tensors)} tensors, model expects {len(names)}")
        state = {}
        for name, t in zip(names, tensors):
            ref = self.params[name] if name in self.params else self.codebook.state()[name]
            if t.shape != ref.shape:
                raise ValueError(f"{name}: checkpoint shape {t.shape} != model shape {ref.shape}")
            state[name] = t
        for name in self.params:
            self.params[name] = state[name].copy()
        if self.codebook is not None:
            self.codebook.load_state(state)

    def save(self, path) -> None:
        path = Path(path)
        write_weights(path, [t for _, t in self.state_tensors()])
        path.with_suffix(".json").write_text(json.dumps(self.cfg.to_dict(), indent=2))

    @classmethod
    def load(cls, path, cfg: ModelConfig | None = None) -> "NvfModel":
        path = Path(path)
        if cfg is None:
            cfg = ModelConfig(**json.loads(path.with_suffix(".json").read_text()))
        model = cls(cfg)
        model.load_tensors(read_weights(path))
        return model


class ModelField:
    """A trained model bound to an input cloud, usable wherever a field is."""

    def __init__(self, model: NvfModel, cloud: PreparedCloud):
        self.model = model
        self.cloud = cloud

    def __call__(self, q):
        q = np.asarray(q, dtype=np.float64)
        v = self.model.predict(self.cloud, q.reshape(-1, 3))
        return v[0] if q.ndim == 1 else v
