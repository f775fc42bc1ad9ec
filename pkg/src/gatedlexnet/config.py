"""Run configuration read from ``section.key = value`` files.

Blank lines and ``#`` comments are ignored. Values are Python literals
(numbers, booleans, lists, tuples, quoted strings); anything that does not
parse as a literal is taken as a bare string. Every key has a default and
unknown keys are rejected with the line number.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .attention import AttentionConfig
from .data import AugmentConfig, RenderConfig
from .encoder import EncoderConfig
from .lexdecode import DEFAULT_BEAM_WIDTH, MODES
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DecoderSection:
    hidden: int = 64


@dataclass
class LexdecodeSection:
    mode: str = "ngrams"
    beam_width: int = DEFAULT_BEAM_WIDTH

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


@dataclass
class DataSection:
    height: int = RenderConfig.height
    width: int = RenderConfig.width
    scale: int = RenderConfig.scale
    lines_min: int = 1
    lines_max: int = 3
    words_min: int = 1
    words_max: int = 3

    def render(self) -> RenderConfig:
        return RenderConfig(height=self.height, width=self.width, scale=self.scale)


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    lexdecode: LexdecodeSection = field(default_factory=LexdecodeSection)
    data: DataSection = field(default_factory=DataSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    precision: str = "float64"

    def model_config(self, n_chars: int) -> ModelConfig:
        return ModelConfig(self.encoder, self.attention, self.decoder.hidden, n_chars)

    @classmethod
    def sections(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls) if dataclasses.is_dataclass(f.default_factory)]

    def dumps(self) -> str:
        out = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for g in dataclasses.fields(value):
                    out.append(f"{f.name}.{g.name} = {getattr(value, g.name)!r}")
            else:
                out.append(f"{f.name} = {value!r}")
        return "\n".join(out) + "\n"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        lines = []
        for key, value in data.items():
            if isinstance(value, dict):
                lines += [f"{key}.{k} = {v!r}" for k, v in value.items()]
            else:
                lines.append(f"{key} = {value!r}")
        return cls.loads("\n".join(lines))

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "RunConfig":
        top = {f.name: f for f in dataclasses.fields(cls)}
        sections: dict[str, dict] = {}
        scalars: dict = {}
        where: dict[str, int] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip() if not _quoted_hash(raw) else raw.strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            section, _, name = key.partition(".")
            if section not in top:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            default = top[section].default_factory() if top[section].default_factory is not dataclasses.MISSING else None
            if dataclasses.is_dataclass(default):
                names = {g.name: g for g in dataclasses.fields(default)}
                if name not in names:
                    raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
                sections.setdefault(section, {})[name] = _coerce(value, getattr(default, name), key, source, lineno)
            else:
                if name:
                    raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
                scalars[section] = _coerce(value, top[section].default, key, source, lineno)
            where[section] = lineno
        kwargs = dict(scalars)
        for section, values in sections.items():
            try:
                kwargs[section] = type(top[section].default_factory())(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}:{where[section]}: invalid {section} section: {exc}") from None
        cfg = cls(**kwargs)
        if cfg.precision not in ("float32", "float64"):
            raise ConfigError(f"{source}:{where.get('precision', 0)}: precision must be float32 or float64")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"), str(path))


def _quoted_hash(raw: str) -> bool:
    # a '#' inside a quoted value is not a comment
    head = raw.split("#", 1)[0]
    return head.count("'") % 2 == 1 or head.count('"') % 2 == 1


def _coerce(text: str, default, key: str, source: str, lineno: int):
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        value = text
    if isinstance(default, bool):
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        if not isinstance(value, bool):
            raise ConfigError(f"{source}:{lineno}: {key} expects a boolean, got {text!r}")
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(default, str) and isinstance(value, str):
        return value
    if isinstance(default, (list, tuple)) and isinstance(value, (list, tuple)):
        return list(value) if isinstance(default, list) else tuple(value)
    raise ConfigError(f"{source}:{lineno}: {key} expects {type(default).__name__}, got {text!r}")
