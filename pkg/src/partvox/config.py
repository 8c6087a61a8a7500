"""Single JSON pipeline configuration and the hash stamped into every artifact."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .datagen import derive_seed
from .errors import ConfigError
from .planner import PlannerConfig
from .synth import SynthConfig

PATH_KEYS = ("data", "planner_ckpt", "synth_ckpt", "out")


@dataclass
class PipelineConfig:
    resolution: int = 32
    K: int = 64
    d: int = 64
    heads: int = 4
    blocks: int = 4
    L: int = 16
    D: int = 8
    alpha: float = 1.0
    beta: float = 0.5
    lam_cov: float = 1.0
    sample_steps: int = 25
    max_boxes: int = 16
    plan_steps: int = 1500
    plan_lr: float = 1e-3
    plan_batch: int = 16
    coarse_prob: float = 0.5
    synth_steps: int = 1500
    synth_lr: float = 1e-3
    synth_batch: int = 4
    seed: int = 0
    train: int = 512
    val: int = 64
    test: int = 64
    paths: dict = field(default_factory=dict)

    def validate(self) -> "PipelineConfig":
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"beta={self.beta} must lie in (0, 1)")
        if self.alpha <= 0:
            raise ConfigError(f"alpha={self.alpha} must be positive")
        if self.lam_cov < 0:
            raise ConfigError(f"lam_cov={self.lam_cov} must be non-negative")
        if self.resolution not in (16, 32, 64):
            raise ConfigError("resolution must be 16, 32 or 64")
        if self.d % self.heads:
            raise ConfigError("d must be divisible by heads")
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        if self.sample_steps < 1:
            raise ConfigError("sample_steps must be at least 1")
        unknown = set(self.paths) - set(PATH_KEYS)
        if unknown:
            raise ConfigError(f"unknown path keys: {sorted(unknown)}")
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj).validate()

    @classmethod
    def load(cls, path: str | Path | None) -> "PipelineConfig":
        if path is None:
            return cls().validate()
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(obj)

    def hash(self) -> str:
        """Hash over every setting except file locations."""
        doc = {k: v for k, v in self.to_json().items() if k != "paths"}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def seed_for(self, tag: str) -> int:
        return derive_seed(self.seed, tag)

    def planner(self, **overrides) -> PlannerConfig:
        cfg = PlannerConfig(resolution=self.resolution, K=self.K, d=self.d, heads=self.heads, blocks=self.blocks,
                            L=self.L, max_boxes=self.max_boxes, lam_cov=self.lam_cov, lr=self.plan_lr,
                            steps=self.plan_steps, batch=self.plan_batch, coarse_prob=self.coarse_prob,
                            seed=self.seed_for("planner"))
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    def synth(self, **overrides) -> SynthConfig:
        cfg = SynthConfig(resolution=self.resolution, D=self.D, d=self.d, heads=self.heads, blocks=self.blocks,
                          alpha=self.alpha, beta=self.beta, sample_steps=self.sample_steps, lr=self.synth_lr,
                          steps=self.synth_steps, batch=self.synth_batch, seed=self.seed_for("synth"),
                          latent_seed=self.seed_for("latents"))
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg
