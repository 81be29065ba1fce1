"""Run configuration stored as flat ``key=value`` lines with dotted section keys."""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .model import ModelConfig
from .training import DEFAULT_STEPS, StageSchedule, default_schedule


@dataclass
class PipelineSection:
    tau_conf: float = 0.5
    tau_q: float = 7.0
    kernel_radius: int = 1
    tasks: str = "removal,addition,replacement"
    modes: str = "template,simple,advanced"
    scorer: str = "mock"


@dataclass
class StageSection:
    """Unset (None) values fall back to the selected profile."""

    lr: float | None = None
    weight_decay: float | None = None
    warmup_ratio: float | None = None
    steps: int | None = None
    batch_size: int = 16
    lam: float | None = None


@dataclass
class EditSection:
    lam: float = 1.0
    steps: int | None = None  # None samples with every diffusion step


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = "toy"  # toy | paper
    model: ModelConfig = field(default_factory=ModelConfig)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    stage1: StageSection = field(default_factory=StageSection)
    stage2: StageSection = field(default_factory=StageSection)
    stage3: StageSection = field(default_factory=StageSection)
    edit: EditSection = field(default_factory=EditSection)

    def schedule(self, stage: int) -> StageSchedule:
        sec: StageSection = getattr(self, f"stage{stage}")
        base = default_schedule(stage, self.profile, sec.steps or DEFAULT_STEPS[stage], sec.batch_size)
        for name in ("lr", "weight_decay", "warmup_ratio", "lam"):
            value = getattr(sec, name)
            if value is not None:
                setattr(base, name, value)
        return base

    def to_flat(self) -> dict[str, str]:
        return _flatten(self, "")

    @classmethod
    def from_flat(cls, items: dict[str, str]) -> RunConfig:
        cfg = cls()
        for key, raw in items.items():
            _assign(cfg, key, raw)
        if cfg.profile not in ("toy", "paper"):
            raise ValueError(f"profile must be 'toy' or 'paper', got {cfg.profile!r}")
        # re-run validation hooks on nested configs
        cfg.model = ModelConfig(**cfg.model.to_dict())
        return cfg

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_flat().items())

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> RunConfig:
        items = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in items:
                raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
            items[key] = value
        return cls.from_flat(items)

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.loads(Path(path).read_text(encoding="utf-8"), str(path))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


# ``lambda`` is a keyword, so the attribute is ``lam`` but the file key stays readable
_KEY_ALIASES = {"lam": "lambda"}
_ATTR_ALIASES = {v: k for k, v in _KEY_ALIASES.items()}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flatten(obj, prefix: str) -> dict[str, str]:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = prefix + _KEY_ALIASES.get(f.name, f.name)
        if is_dataclass(value):
            out.update(_flatten(value, key + "."))
        else:
            out[key] = _format(value)
    return out


def _parse(raw: str, hint, key: str):
    args = typing.get_args(hint)
    if type(None) in args:
        if raw.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {hint.__name__}") from None


def _assign(cfg, key: str, raw: str) -> None:
    obj = cfg
    parts = key.split(".")
    for i, part in enumerate(parts):
        attr = _ATTR_ALIASES.get(part, part)
        names = {f.name for f in fields(obj)}
        if attr not in names:
            raise ValueError(f"unknown config key {key!r}")
        hint = typing.get_type_hints(type(obj))[attr]
        value = getattr(obj, attr)
        last = i == len(parts) - 1
        if is_dataclass(value):
            if last:
                raise ValueError(f"config key {key!r} names a section, not a value")
            obj = value
            continue
        if not last:
            raise ValueError(f"unknown config key {key!r}")
        setattr(obj, attr, _parse(raw, hint, key))
