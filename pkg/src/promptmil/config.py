"""Experiment configuration: INI-style sections of ``key = value`` lines."""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field

from .mil import GATED_ATTENTION, HEAD_KINDS, TaskSpec
from .synth import GenSpec
from .trainer import CONVENTIONAL_MIL, FULL_FINE_TUNE, MODES, PROMPT_MIL, TrainConfig
from .vit import ViTConfig

MODE_ALIASES = {"prompt": PROMPT_MIL, "promptmil": PROMPT_MIL,
                "conventional": CONVENTIONAL_MIL, "conventionalmil": CONVENTIONAL_MIL,
                "full": FULL_FINE_TUNE, "fullfinetune": FULL_FINE_TUNE}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass
class HeadConfig:
    kind: str = GATED_ATTENTION
    attn_dim: int = 16


@dataclass
class ExperimentConfig:
    mode: str = PROMPT_MIL
    seed: int = 0
    out_dir: str = "runs/default"
    backbone: str = "pretrain_lite"  # or "random"
    backbone_seed: int = 0
    pretrain_steps: int = 300
    data_path: str = ""  # empty: generate from [data] in memory
    model: ViTConfig = field(default_factory=ViTConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: GenSpec = field(default_factory=GenSpec)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == PROMPT_MIL and self.model.num_prompts < 1:
            raise ConfigError("prompt mode needs num_prompts >= 1")
        if self.head.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.head.kind!r}")
        if self.backbone not in ("pretrain_lite", "random"):
            raise ConfigError(f"unknown backbone init {self.backbone!r}")
        if self.data.num_classes != self.task.num_classes:
            raise ConfigError("data.num_classes and task.num_classes disagree")
        if self.data.image_size != self.model.image_size or \
                self.data.channels != self.model.channels:
            raise ConfigError("data image size/channels do not match the model")

    def with_mode(self, mode: str) -> ExperimentConfig:
        """Copy with ``mode`` applied; conventional MIL forces k = 0."""
        mode = MODE_ALIASES.get(mode.lower(), mode)
        model = self.model
        if mode == CONVENTIONAL_MIL:
            model = dataclasses.replace(model, num_prompts=0)
        elif mode == PROMPT_MIL and model.num_prompts < 1:
            model = dataclasses.replace(model, num_prompts=1)
        return dataclasses.replace(self, mode=mode, model=model)

    def with_seed(self, seed: int) -> ExperimentConfig:
        return dataclasses.replace(self, seed=seed, train=dataclasses.replace(self.train, seed=seed))


SECTIONS = {"model": ViTConfig, "head": HeadConfig, "task": TaskSpec, "train": TrainConfig,
            "data": GenSpec}
TOP = "experiment"


def default_config() -> ExperimentConfig:
    """Desk-scale defaults used by the acceptance experiments."""
    return ExperimentConfig()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def to_text(cfg: ExperimentConfig) -> str:
    lines = [f"[{TOP}]"]
    for f in dataclasses.fields(cfg):
        if f.name not in SECTIONS:
            lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    for name in SECTIONS:
        lines.append("")
        lines.append(f"[{name}]")
        obj = getattr(cfg, name)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for i, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        m = re.match(r"^\[(.+)\]$", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None and re.match(
                rf"^{re.escape(key)}\s*[=:]", s):
            return i
    return None


def _convert(raw: str, default, name: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or name == "witness_rate":
        if "," in raw:
            return [float(x) for x in raw.split(",")]
        return float(raw)
    return raw


def _build(cls, items: dict[str, tuple[str, int | None]], section: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    proto = cls()
    kwargs = {}
    for key, (raw, line) in items.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{section}]", line)
        try:
            kwargs[key] = _convert(raw, getattr(proto, key), key)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: {e}", line) from None
    try:
        return dataclasses.replace(proto, **kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{section}]: {e}", _line_of_first(items)) from None


def _line_of_first(items):
    lines = [ln for _, ln in items.values() if ln]
    return min(lines) if lines else None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("missing [section] header", e.lineno) from None
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"duplicate key {e.option!r} in [{e.section}]", e.lineno) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]", e.lineno) from None
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigError("malformed line", line) from None
    for sec in parser.sections():
        if sec != TOP and sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]", _line_of(text, sec))

    def items(sec):
        if not parser.has_section(sec):
            return {}
        return {k: (v, _line_of(text, sec, k)) for k, v in parser.items(sec)}

    parts = {name: _build(cls, items(name), name) for name, cls in SECTIONS.items()}
    top = items(TOP)
    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(SECTIONS)
    proto = ExperimentConfig()
    kwargs = {}
    for key, (raw, line) in top.items():
        if key not in top_fields:
            raise ConfigError(f"unknown key {key!r} in [{TOP}]", line)
        try:
            kwargs[key] = _convert(raw, getattr(proto, key), key)
        except ValueError as e:
            raise ConfigError(f"[{TOP}] {key}: {e}", line) from None
    if "mode" in kwargs:
        mode = MODE_ALIASES.get(kwargs["mode"].lower(), kwargs["mode"])
        if mode not in MODES:
            raise ConfigError(f"unknown mode {kwargs['mode']!r}", top["mode"][1])
        kwargs["mode"] = mode
    cfg = ExperimentConfig(**kwargs, **parts)
    try:
        cfg.validate()
    except ConfigError as e:
        if e.line is None:
            raise ConfigError(str(e), _line_of(text, TOP)) from None
        raise
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text)
