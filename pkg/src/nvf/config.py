"""Single JSON run configuration with one section per module."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .codebook import CodebookConfig
from .encoder import EncoderConfig
from .extraction import ExtractionConfig
from .model import MODE_CODEBOOK, ConfigError, ModelConfig
from .training import TrainConfig

_SECTIONS = ("mode", "seed", "model", "encoder", "codebook", "train", "extraction", "data", "eval", "shapes")

DATA_DEFAULTS = {"input_points": 2048, "queries": 30000}
EVAL_DEFAULTS = {"n_cd": 100_000, "n_emd": 2048, "curl_samples": 2000}


@dataclass
class RunConfig:
    mode: str = "ultra"
    seed: int = 0
    model: dict = field(default_factory=dict)  # head_hidden, head_layers, activation
    encoder: dict = field(default_factory=dict)
    codebook: dict | None = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    extraction: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    shapes: list = field(default_factory=list)  # mesh paths or analytic specs, used by ablate
    base_dir: Path | None = None

    def __post_init__(self):
        self.data = {**DATA_DEFAULTS, **(self.data or {})}
        self.eval = {**EVAL_DEFAULTS, **(self.eval or {})}
        # build every section once so errors surface at load time
        self.model_config()
        self.train_config()
        self.extraction_config()
        if self.data["input_points"] < 1 or self.data["queries"] < 1:
            raise ConfigError("data.input_points and data.queries must be positive")

    # -- typed views --------------------------------------------------------------

    def model_config(self) -> ModelConfig:
        try:
            enc = EncoderConfig(**self.encoder)
            cb = None
            if self.mode != "vanilla":
                cb_raw = dict(self.codebook or {})
                # an omitted codebook mode follows the run mode; an explicit one is checked
                cb_raw.setdefault("mode", MODE_CODEBOOK[self.mode])
                cb = CodebookConfig(**cb_raw)
            return ModelConfig(mode=self.mode, encoder=enc, codebook=cb, seed=self.seed, **self.model)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**{"seed": self.seed, **self.train})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"train: {e}") from None

    def extraction_config(self) -> ExtractionConfig:
        try:
            return ExtractionConfig(**self.extraction)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"extraction: {e}") from None

    def resolve(self, ref: str) -> str:
        """Mesh paths are relative to the config file; analytic specs pass through."""
        if ":" in ref or ref in ("sphere", "torus", "plane"):
            return ref
        p = Path(ref)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        if not p.exists():
            raise ConfigError(f"referenced file does not exist: {p}")
        return str(p)

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in _SECTIONS}

    def with_overrides(self, **sections) -> "RunConfig":
        d = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return RunConfig(**d, base_dir=self.base_dir)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = RunConfig(**raw, base_dir=path.parent)
    for s in cfg.shapes:
        cfg.resolve(s)
    return cfg


def bundled_path(name: str) -> Path:
    return Path(__file__).parent / "data" / name
