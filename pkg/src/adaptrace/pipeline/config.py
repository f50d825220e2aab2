"""Run configuration shared by training, collection and detection."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

from ..forest import ForestParams

MODES = ("full", "top_only")


@dataclass(frozen=True)
class PipelineConfig:
    window_ms: int = 6000
    trivial_api_threshold: float = 0.5
    min_support: float = 5e-4
    min_confidence: float = 0.95
    min_lift: float = 10.0
    bci_threshold: float = 0.9
    mbci_threshold: float = 0.9
    model_importance_percentile: float = 95.0
    mode: str = "full"
    compress_loops: bool = True
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_split: int = 2
    seed: int = 0
    transport: str = "file"  # "file" or "tcp"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.window_ms <= 0:
            raise ValueError("window_ms must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.trivial_api_threshold < 0:
            raise ValueError("trivial_api_threshold must be >= 0")
        if not 0 < self.min_support <= 1:
            raise ValueError("min_support must lie in (0, 1]")
        if not 0 <= self.min_confidence <= 1 and not math.isinf(self.min_confidence):
            raise ValueError("min_confidence must lie in [0, 1]")
        if self.min_lift < 0 or self.bci_threshold < 0 or self.mbci_threshold < 0:
            raise ValueError("lift and correlation thresholds must be >= 0")
        if not 0 <= self.model_importance_percentile <= 100:
            raise ValueError("model_importance_percentile must lie in [0, 100]")
        if self.n_trees < 1 or self.min_samples_split < 2:
            raise ValueError("need n_trees >= 1 and min_samples_split >= 2")
        if self.transport not in ("file", "tcp"):
            raise ValueError("transport must be 'file' or 'tcp'")

    @classmethod
    def pass_through(cls, **overrides) -> "PipelineConfig":
        """Every reduction stage disabled: nothing is selected away or compressed."""
        base = dict(
            trivial_api_threshold=math.inf,
            min_lift=math.inf,
            bci_threshold=math.inf,
            mbci_threshold=math.inf,
            model_importance_percentile=0.0,
            compress_loops=False,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def forest_params(self) -> ForestParams:
        return ForestParams(self.n_trees, self.max_depth, self.min_samples_split)

    def with_(self, **changes) -> "PipelineConfig":
        return replace(self, **changes)

    def to_json(self) -> dict:
        # json has no infinity literal in strict mode
        return {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, doc: dict) -> "PipelineConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: (math.inf if v == "inf" else v) for k, v in doc.items() if k in names}
        return cls(**kw)
