"""Training configuration, stored as JSON."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .losses import LossWeights


@dataclass
class TrainConfig:
    seed: int = 0
    workers: int = 1
    # scene representation
    resolution: int = 48
    features: int = 12
    env_lobes: int = 48
    sharpness: float = 30.0
    # sampling
    batch_size: int = 512
    n_samples: int = 100
    lts_points: int = 128
    lts_dirs: int = 32
    lts_secondary: int = 32
    lts_min_weight: float = 0.0
    # schedule
    warmup_steps: int = 500
    basic_steps: int = 300
    progressive_steps: int = 1200
    group_interval: int = 1000
    k_floor: float = 1e-5
    k_cap: float = 1e-3
    k_slope: float | None = None  # None: reach k_cap at the end of the progressive phase
    # optimisation
    lr_grid: float = 1e-2
    lr_head: float = 1e-3
    lr_emission: float | None = 5e-2  # None: same as lr_grid
    lr_radiance: float | None = None   # radiance feature grids; None: same as lr_grid
    weights: LossWeights = field(default_factory=LossWeights)
    # output
    log_every: int = 10
    checkpoint_every: int = 0

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.basic_steps + self.progressive_steps

    def phase(self, step: int) -> int:
        if step < self.warmup_steps:
            return 1
        if step < self.warmup_steps + self.basic_steps:
            return 2
        return 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
