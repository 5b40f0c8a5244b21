"""Run configuration and its JSON form."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .crossvolume import VcvrlConfig
from .segnet import SegNetConfig
from .synthdata import AugmentationConfig, GeneratorConfig


@dataclass
class RunConfig:
    seed: int
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    vcvrl: Optional[VcvrlConfig] = field(default_factory=lambda: VcvrlConfig(anchors=64))
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    split_counts: Tuple[int, int, int] = (35, 3, 4)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 12
    iters_per_epoch: int = 16
    data_dir: Optional[str] = None
    sweep_seeds: Optional[List[int]] = None

    def __post_init__(self):
        self.split_counts = tuple(int(n) for n in self.split_counts)
        if self.batch_size < 1 or self.epochs < 1 or self.iters_per_epoch < 1:
            raise ValueError("batch_size, epochs and iters_per_epoch must be positive")

    @property
    def total_iterations(self) -> int:
        return self.epochs * self.iters_per_epoch

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["vcvrl"] = None if self.vcvrl is None else self.vcvrl.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        if "seed" not in d:
            raise ValueError("run config requires a 'seed'")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        nested = {
            "segnet": SegNetConfig,
            "generator": GeneratorConfig,
            "augmentation": AugmentationConfig,
            "vcvrl": VcvrlConfig,
        }
        for key, typ in nested.items():
            if key in d and d[key] is not None and not isinstance(d[key], typ):
                names = {f.name for f in dataclasses.fields(typ)}
                bad = set(d[key]) - names
                if bad:
                    raise ValueError(f"unknown keys in {key!r}: {sorted(bad)}")
                d[key] = typ(**d[key])
        return cls(**d)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(path, config: RunConfig) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
