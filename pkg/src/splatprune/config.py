"""JSON pipeline configuration with schema validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .pipeline import SCORERS, OptimizerConfig, PruneConfig, RoundConfig

CONFIG_SCHEMA_VERSION = 1

_ROUND_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["percent"],
    "properties": {
        "percent": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "refine_iters": {"type": "integer", "minimum": 0},
        "scorer": {"type": "string"},
        "divisor": {"enum": [1, 2, 4, 8]},
    },
}

_OPTIMIZER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {f.name: {"type": "number", "minimum": 0} for f in fields(OptimizerConfig)},
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": CONFIG_SCHEMA_VERSION},
        "scene": {"type": ["string", "null"]},
        "ply": {"type": ["string", "null"]},
        "output": {"type": ["string", "null"]},
        "rounds": {"type": "array", "items": _ROUND_SCHEMA},
        "optimizer": _OPTIMIZER_SCHEMA,
        "lambda_ssim": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "divisor": {"enum": [1, 2, 4, 8]},
        "variant": {"type": "string"},
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "evaluate": {"type": "boolean"},
                "fps_frames": {"type": "integer", "minimum": 0},
            },
        },
        "deterministic": {"type": "boolean"},
        "workers": {"type": "integer", "minimum": 1},
    },
}


@dataclass
class MetricToggles:
    evaluate: bool = True
    fps_frames: int = 0


@dataclass
class PipelineConfigFile:
    """Everything a ``pipeline`` run needs; ``divisor`` and ``variant`` fill rounds that omit them."""

    scene: str | None = None
    ply: str | None = None
    output: str | None = None
    rounds: list[dict] = field(default_factory=lambda: [
        {"percent": 0.8, "refine_iters": 5000}, {"percent": 0.5, "refine_iters": 5000}])
    optimizer: dict = field(default_factory=dict)
    lambda_ssim: float = 0.2
    seed: int = 0
    epsilon: float = 1e-12
    divisor: int = 4
    variant: str = "mean_scale"
    metrics: MetricToggles = field(default_factory=MetricToggles)
    deterministic: bool = False
    workers: int = 1
    schema_version: int = CONFIG_SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.metrics, dict):
            self.metrics = MetricToggles(**self.metrics)
        self.variant = self.variant.replace("-", "_")
        if self.variant not in SCORERS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {SCORERS}")
        self.rounds = [self._full_round(r) for r in self.rounds]
        self.prune_config()  # semantic validation

    def _full_round(self, r: dict) -> dict:
        r = dict(r)
        r.setdefault("refine_iters", 0)
        r.setdefault("scorer", self.variant)
        r.setdefault("divisor", self.divisor)
        r["scorer"] = r["scorer"].replace("-", "_")
        return r

    def prune_config(self) -> PruneConfig:
        return PruneConfig(
            rounds=[RoundConfig(**r) for r in self.rounds],
            optimizer=OptimizerConfig(**self.optimizer),
            lambda_ssim=self.lambda_ssim,
            seed=self.seed,
            epsilon=self.epsilon,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfigFile":
        try:
            jsonschema.validate(data, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {exc.message}") from None
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfigFile":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "PipelineConfigFile":
        return cls.from_json(Path(path).read_text())

    def with_overrides(self, **overrides) -> "PipelineConfigFile":
        """Return a copy with every non-None override applied (command-line flags win over the file)."""
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if key in ("evaluate", "fps_frames"):
                data["metrics"][key] = value
            elif key in data:
                data[key] = value
            else:
                raise ConfigError(f"unknown override {key!r}")
        # rounds given explicitly keep their own scorer/divisor unless the flag changed them
        if overrides.get("variant") is not None or overrides.get("divisor") is not None:
            for r in data["rounds"]:
                if overrides.get("variant") is not None:
                    r["scorer"] = data["variant"].replace("-", "_")
                if overrides.get("divisor") is not None:
                    r["divisor"] = data["divisor"]
        return self.from_dict(data)
