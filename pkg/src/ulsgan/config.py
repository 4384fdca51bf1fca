"""Tool configuration: one JSON file holding every tunable of the toolkit.

Precedence, lowest to highest: built-in defaults, the config file (``--config``
or the path in ``$ULSGAN_CONFIG``), then explicit command-line flags.  A file
only needs the keys it changes; absent keys keep their defaults.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .cgan import GanConfig
from .corpus import CorpusParams, MeasurementGrid
from .errors import ParameterError, PersistenceError
from .signal_core import PipelineConfig
from .statistics import DEFAULT_BINS, DEFAULT_CELLS, DEFAULT_SIGNIFICANCE, MIN_FIT_SAMPLES, SPEED_OF_SOUND_MPS
from .validation import DEFAULT_POST_LOWPASS_HZ, DEFAULT_TOLERANCE

CONFIG_ENV_VAR = "ULSGAN_CONFIG"


def _check_keys(d: dict, allowed, section: str) -> None:
    if not isinstance(d, dict):
        raise ParameterError(f"config section {section!r} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ParameterError(f"unknown keys in config section {section!r}: {sorted(unknown)}")


@dataclass(frozen=True)
class StatisticsConfig:
    speed_of_sound_mps: float = SPEED_OF_SOUND_MPS
    bins: tuple = DEFAULT_BINS
    cells: int = DEFAULT_CELLS
    significance: float = DEFAULT_SIGNIFICANCE
    min_samples: int = MIN_FIT_SAMPLES

    def __post_init__(self):
        object.__setattr__(self, "bins", tuple(int(b) for b in self.bins))
        if not self.bins or min(self.bins) < 0:
            raise ParameterError("statistics.bins must be non-empty, non-negative bin indices")
        if self.speed_of_sound_mps <= 0:
            raise ParameterError("statistics.speed_of_sound_mps must be positive")
        if self.cells < 4:
            raise ParameterError("statistics.cells must be >= 4")
        if not 0 < self.significance < 1:
            raise ParameterError("statistics.significance must lie in (0, 1)")


@dataclass(frozen=True)
class ValidationConfig:
    tol_k: float = DEFAULT_TOLERANCE
    tol_theta: float = DEFAULT_TOLERANCE
    post_lowpass_hz: float = DEFAULT_POST_LOWPASS_HZ

    def __post_init__(self):
        if self.tol_k < 0 or self.tol_theta < 0:
            raise ParameterError("tolerances must be >= 0")


@dataclass(frozen=True)
class ToolConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    corpus: CorpusParams = field(default_factory=CorpusParams)
    grid: MeasurementGrid = field(default_factory=MeasurementGrid)
    corpus_seed: int = 0
    gan: GanConfig = field(default_factory=GanConfig)
    statistics: StatisticsConfig = field(default_factory=StatisticsConfig)
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    generate_seed: int = 0

    def to_dict(self) -> dict:
        stats = asdict(self.statistics)
        stats["bins"] = list(self.statistics.bins)
        return {
            "pipeline": asdict(self.pipeline),
            "corpus": {"params": self.corpus.to_dict(), "grid": self.grid.to_dict(), "seed": self.corpus_seed},
            "gan": self.gan.to_dict(),
            "statistics": stats,
            "validation": asdict(self.validation),
            "generate": {"seed": self.generate_seed},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToolConfig":
        _check_keys(d, ("pipeline", "corpus", "gan", "statistics", "validation", "generate"), "<root>")
        corpus = d.get("corpus", {})
        _check_keys(corpus, ("params", "grid", "seed"), "corpus")
        generate = d.get("generate", {})
        _check_keys(generate, ("seed",), "generate")
        stats = d.get("statistics", {})
        _check_keys(stats, StatisticsConfig.__dataclass_fields__, "statistics")
        val = d.get("validation", {})
        _check_keys(val, ValidationConfig.__dataclass_fields__, "validation")
        try:
            return cls(
                pipeline=PipelineConfig.from_dict(d.get("pipeline", {})),
                corpus=CorpusParams.from_dict(corpus.get("params", {})),
                grid=MeasurementGrid.from_dict(corpus.get("grid", {})),
                corpus_seed=int(corpus.get("seed", 0)),
                gan=GanConfig.from_dict(d.get("gan", {})),
                statistics=StatisticsConfig(**stats),
                validation=ValidationConfig(**val),
                generate_seed=int(generate.get("seed", 0)),
            )
        except TypeError as exc:
            raise ParameterError(f"invalid config value: {exc}") from exc


def load_config(path=None) -> ToolConfig:
    """Load ``path``, else ``$ULSGAN_CONFIG``, else the defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return ToolConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise PersistenceError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ParameterError(f"config {path} must hold a JSON object")
    return ToolConfig.from_dict(data)


def dump_config(cfg: ToolConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
