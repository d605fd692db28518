"""Run configuration: one dataclass per pipeline stage, JSON (de)serialization.

Unknown keys are rejected so typos fail fast; value ranges are checked by
the owning dataclass. Any field can be overridden on the command line as
``--section.key=value``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError, ParameterError
from .motion_segmentation import SF2SE3Params
from .semantic_labeling import CrfParams


@dataclass
class GeometryConfig:
    alpha1: float = 0.01  # fb-consistency relative slack
    alpha2: float = 0.5  # fb-consistency absolute slack, px^2
    lr_tol: float = 1.0  # left-right disparity tolerance, px
    min_disp: float = 0.5  # px, disparities below are invalid depth

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ParameterError("alpha1/alpha2 must be nonnegative")
        if self.lr_tol <= 0 or self.min_disp <= 0:
            raise ParameterError("lr_tol and min_disp must be positive")


@dataclass
class SemanticConfig:
    k: int = 27  # pseudo classes
    temperature: float = 0.1
    kmeans_iters: int = 20
    window_scale: float = 0.5  # window = scale * image size
    stride_scale: float = 0.5  # stride = scale * window size
    crf: CrfParams = field(default_factory=CrfParams)

    def __post_init__(self):
        if self.k < 2:
            raise ParameterError("need at least 2 pseudo classes")
        if self.temperature <= 0:
            raise ParameterError("temperature must be positive")
        if not (0 < self.window_scale <= 1 and 0 < self.stride_scale <= 1):
            raise ParameterError("window/stride scales must be in (0, 1]")


@dataclass
class FusionConfig:
    psi_ts: float = 0.08  # thing-stuff coverage-ratio threshold

    def __post_init__(self):
        if not (0.0 < self.psi_ts < 1.0):
            raise ParameterError(f"psi_ts must be in (0,1), got {self.psi_ts}")


@dataclass
class SelfLabelConfig:
    gamma: float = 0.5  # instance confidence cutoff (strict)
    zeta_hat: float = 0.5  # semantic confidence scale
    scales: tuple[float, ...] = (0.75, 1.0, 1.25)
    group_iou: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.zeta_hat <= 1.0):
            raise ParameterError("gamma and zeta_hat must be in [0,1]")
        self.scales = tuple(float(s) for s in self.scales)
        if any(s <= 0 for s in self.scales):
            raise ParameterError("scales must be positive")
        if not (0.0 < self.group_iou <= 1.0):
            raise ParameterError("group_iou must be in (0,1]")


@dataclass
class EvalConfig:
    iou_start: float = 0.5
    iou_stop: float = 0.95
    iou_step: float = 0.05

    def thresholds(self) -> list[float]:
        out = []
        t = self.iou_start
        while t <= self.iou_stop + 1e-9:
            out.append(round(t, 10))
            t += self.iou_step
        return out


@dataclass
class SeedsConfig:
    base_seed: int = 0


@dataclass
class PipelineConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    motion: SF2SE3Params = field(default_factory=SF2SE3Params)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    selflabel: SelfLabelConfig = field(default_factory=SelfLabelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: SeedsConfig = field(default_factory=SeedsConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        cfg = cls()
        for section, values in doc.items():
            if not hasattr(cfg, section):
                raise ConfigurationError(f"unknown config section {section!r}")
            target = getattr(cfg, section)
            if not isinstance(values, dict):
                raise ConfigurationError(f"section {section!r} must be an object")
            for key, value in values.items():
                _set_field(target, section, key, value)
            _revalidate(target)
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def apply_overrides(self, overrides: list[str]) -> None:
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigurationError(f"override {item!r} is not section.key=value")
            dotted, raw = item.split("=", 1)
            section, key = dotted.lstrip("-").split(".", 1)
            if not hasattr(self, section):
                raise ConfigurationError(f"unknown config section {section!r}")
            target = getattr(self, section)
            if "." in key:  # nested, e.g. semantic.crf.iterations
                head, rest = key.split(".", 1)
                _set_field(target, section, head, None)  # validates key exists
                target = getattr(target, head)
                key = rest
            _set_field(target, section, key, json.loads(raw) if _is_json(raw) else raw)
            _revalidate(target)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _is_json(raw: str) -> bool:
    try:
        json.loads(raw)
        return True
    except (ValueError, TypeError):
        return False


def _set_field(target, section: str, key: str, value) -> None:
    names = {f.name: f for f in dataclasses.fields(target)}
    if key not in names:
        raise ConfigurationError(f"unknown key {key!r} in section {section!r}")
    if value is None:
        return
    current = getattr(target, key)
    if dataclasses.is_dataclass(current):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{section}.{key} expects an object")
        for k, v in value.items():
            _set_field(current, f"{section}.{key}", k, v)
        _revalidate(current)
        return
    if isinstance(current, bool):
        value = bool(value)
    elif isinstance(current, int) and not isinstance(value, bool):
        value = int(value)
    elif isinstance(current, float):
        value = float(value)
    elif isinstance(current, tuple):
        value = tuple(value)
    setattr(target, key, value)


def _revalidate(target) -> None:
    post = getattr(target, "__post_init__", None)
    if post is not None:
        post()
