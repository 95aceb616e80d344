"""Edit configuration: a single JSON document, validated with field paths."""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .diffusion.text import tokenize
from .layout import Level


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ScheduleConfig:
    coef: float
    exp: float = 5.0


@dataclass
class BlendConfig:
    enabled: bool = True
    mode: str = "aggregate"
    dilate: int = 0
    # blend at denoising steps [start, stop); None = all
    start: int = 0
    stop: Optional[int] = None


@dataclass
class ClusterConfig:
    k: int = 3
    seed: int = 0
    block: int = 1
    level_index: int = 25


@dataclass
class RegionConfig:
    id: int
    source_prompt: str
    target_prompt: str
    level: str = "instance"
    priority: int = 1
    # mask source: layout-manifest region (default) or a cluster id
    cluster: Optional[int] = None
    # colour name used as the metric descriptor; defaults to the first
    # palette word in the target prompt
    descriptor: Optional[str] = None

    @property
    def preserve(self) -> bool:
        return tokenize(self.source_prompt) == tokenize(self.target_prompt)


@dataclass
class EditConfig:
    global_prompt: str
    regions: list[RegionConfig]
    source_prompt: Optional[str] = None
    sample_steps: int = 50
    modulate_steps: int = 15
    xi_cross: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(1.0))
    xi_self: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(0.3))
    cross_modulation: bool = True
    self_modulation: bool = True
    scope: str = "row"
    blend: BlendConfig = field(default_factory=BlendConfig)
    clustering: ClusterConfig = field(default_factory=ClusterConfig)
    seed: int = 0
    replay_mode: bool = True
    # denoising step whose attention is summarized in the report; None = last modulated step
    probe_step: Optional[int] = None
    checkpoint: Optional[str] = None

    @property
    def target_tokens(self) -> tuple[str, ...]:
        return tokenize(self.global_prompt)

    @property
    def source_tokens(self) -> tuple[str, ...]:
        """Explicit source prompt, else the global prompt with every region's
        target phrase swapped for its source phrase."""
        if self.source_prompt is not None:
            return tokenize(self.source_prompt)
        tokens = list(self.target_tokens)
        for region, (start, stop) in zip(self.regions, self.region_spans()):
            tokens[start:stop] = [None] * (stop - start)
            tokens[start] = tokenize(region.source_prompt)
        out: list[str] = []
        for t in tokens:
            if isinstance(t, tuple):
                out.extend(t)
            elif t is not None:
                out.append(t)
        return tuple(out)

    def region_spans(self) -> list[tuple[int, int]]:
        """Word-index spans of each region's target phrase in the global prompt,
        claimed left to right so repeated phrases map to distinct occurrences."""
        words = self.target_tokens
        taken = [False] * len(words)
        spans = []
        for i, region in enumerate(self.regions):
            phrase = tokenize(region.target_prompt)
            n = len(phrase)
            for s in range(len(words) - n + 1):
                if words[s:s + n] == phrase and not any(taken[s:s + n]):
                    spans.append((s, s + n))
                    taken[s:s + n] = [True] * n
                    break
            else:
                raise ConfigError(f"regions[{i}].target_prompt",
                                  f"{region.target_prompt!r} has no free occurrence in global_prompt")
        return spans

    @property
    def probe(self) -> int:
        if self.probe_step is not None:
            return self.probe_step
        return max(self.modulate_steps, 1) - 1

    def validate(self) -> "EditConfig":
        if not self.target_tokens:
            raise ConfigError("global_prompt", "empty prompt")
        if not self.regions:
            raise ConfigError("regions", "at least one region is required")
        if not 1 <= self.sample_steps <= 1000:
            raise ConfigError("sample_steps", f"must lie in [1, 1000], got {self.sample_steps}")
        if not 0 <= self.modulate_steps <= self.sample_steps:
            raise ConfigError("modulate_steps",
                              f"must lie in [0, sample_steps={self.sample_steps}], got {self.modulate_steps}")
        for name in ("xi_cross", "xi_self"):
            sched = getattr(self, name)
            if not 0 < sched.coef <= 1:
                raise ConfigError(f"{name}.coef", f"must lie in (0, 1], got {sched.coef}")
        if self.scope not in ("row", "global"):
            raise ConfigError("scope", f"must be 'row' or 'global', got {self.scope!r}")
        if self.blend.mode not in ("aggregate", "per_frame"):
            raise ConfigError("blend.mode", f"must be 'aggregate' or 'per_frame', got {self.blend.mode!r}")
        ids = set()
        for i, region in enumerate(self.regions):
            if region.id < 1:
                raise ConfigError(f"regions[{i}].id", f"must be >= 1, got {region.id}")
            if region.id in ids:
                raise ConfigError(f"regions[{i}].id", f"duplicate id {region.id}")
            ids.add(region.id)
            for key in ("source_prompt", "target_prompt"):
                if not tokenize(getattr(region, key)):
                    raise ConfigError(f"regions[{i}].{key}", "empty prompt")
            try:
                Level(region.level)
            except ValueError:
                raise ConfigError(f"regions[{i}].level", f"unknown level {region.level!r}") from None
        self.region_spans()
        if self.probe_step is not None and not 0 <= self.probe_step < self.sample_steps:
            raise ConfigError("probe_step", f"must lie in [0, {self.sample_steps}), got {self.probe_step}")
        return self

    # serialization
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "EditConfig":
        return _build(cls, data, "").validate()

    @classmethod
    def from_json(cls, text: str) -> "EditConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"invalid JSON: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "EditConfig":
        return cls.from_json(Path(path).read_text())


_NESTED = {"xi_cross": ScheduleConfig, "xi_self": ScheduleConfig, "blend": BlendConfig,
           "clustering": ClusterConfig}


def _build(cls, data: Any, path: str):
    where = path or "<document>"
    if not isinstance(data, dict):
        raise ConfigError(where, f"expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}", "unknown field")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path + '.' if path else ''}{name}"
        if cls is EditConfig and name == "regions":
            if not isinstance(value, list):
                raise ConfigError(sub, "expected a list")
            value = [_build(RegionConfig, v, f"{sub}[{i}]") for i, v in enumerate(value)]
        elif name in _NESTED and cls is EditConfig:
            value = _build(_NESTED[name], value, sub)
        else:
            value = _coerce(known[name].type, value, sub)
        kwargs[name] = value
    missing = [f.name for f in fields(cls) if f.name not in kwargs
               and f.default is MISSING and f.default_factory is MISSING]
    if missing:
        raise ConfigError(f"{path + '.' if path else ''}{missing[0]}", "required field missing")
    return cls(**kwargs)


def _coerce(annotation: str, value: Any, path: str):
    kind = str(annotation).replace("Optional[", "").rstrip("]")
    if value is None:
        if "Optional" in str(annotation):
            return None
        raise ConfigError(path, "must not be null")
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value
