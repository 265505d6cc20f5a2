"""Sectioned config text and the stage-keyed module registry.

Grammar (one item per line)::

    # comment
    [section]            section names match [a-z_]+
    key = value          keys match [a-z0-9_.]+

Values are typed: integer, real, ``true``/``false``, comma-separated list
(items typed the same way), otherwise string.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Any, Callable

from .errors import ConfigError, DuplicateRegistrationError

STAGES = ("preprocessing", "encoder", "interaction", "decoder", "decode", "training", "pretraining")
TASKS = ("captioning", "vlp", "vqa", "retrieval", "vcr")

# stage -> (section, key) that may also name the module
_SECTION_ALIASES = {
    "interaction": ("interaction", "name"),
    "decoder": ("decoder", "name"),
    "decode": ("decode", "name"),
    "training": ("training", "strategy"),
}
_DEFAULT_STAGES = {"preprocessing": "regions", "decode": "greedy", "training": "ce", "pretraining": "none"}

_SECTION_RE = re.compile(r"\[([a-z_]+)\]")
_KEY_RE = re.compile(r"[a-z0-9_.]+")
_INT_RE = re.compile(r"[+-]?\d+")
_REAL_RE = re.compile(r"[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?|[+-]?(inf|nan)")


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [parse_value(p) for p in text.split(",") if p.strip()]
    if text == "true":
        return True
    if text == "false":
        return False
    if _INT_RE.fullmatch(text):
        return int(text)
    if _REAL_RE.fullmatch(text):
        return float(text)
    return text


def render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        items = [render_value(v) for v in value]
        return ", ".join(items) + ("," if len(items) == 1 else "")
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    if "," in text or "\n" in text or text != text.strip():
        raise ConfigError(f"string value {text!r} cannot be rendered")
    return text


@dataclass
class PipelineConfig:
    stage_choices: dict[str, str]
    sections: dict[str, dict[str, Any]]
    task: str = "captioning"

    def section(self, name: str) -> dict[str, Any]:
        return self.sections.get(name, {})

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    def with_values(self, updates: dict[str, dict[str, Any]]) -> "PipelineConfig":
        """Copy with ``{section: {key: value}}`` overrides applied and stages re-derived."""
        sections = {s: dict(kv) for s, kv in self.sections.items()}
        for s, kv in updates.items():
            sections.setdefault(s, {}).update(kv)
        return _from_sections(sections)

    def hash(self, sections=("pipeline", "encoder", "interaction", "decoder", "vqa", "vlp")) -> int:
        """Stable 63-bit digest of the model-defining sections."""
        skip = {"pipeline": {"decode", "training"}, "vlp": {"mask_rate", "span_rate", "w_mlm", "w_msg", "w_vsm"},
                "decoder": {"max_len"}}
        parts = []
        for s in sections:
            kv = self.sections.get(s, {})
            parts.append(f"[{s}]")
            parts.extend(f"{k}={render_value(v)}" for k, v in sorted(kv.items()) if k not in skip.get(s, ()))
        digest = hashlib.sha256("\n".join(parts).encode()).digest()
        return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def parse_config(text: str) -> PipelineConfig:
    sections: dict[str, dict[str, Any]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        col = raw.index(line[0]) + 1
        if line.startswith("["):
            m = _SECTION_RE.fullmatch(line)
            if not m:
                raise ConfigError(f"malformed section header {line!r}", lineno, col)
            current = m.group(1)
            if current in sections:
                raise ConfigError(f"duplicate section [{current}]", lineno, col)
            sections[current] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, col)
        key, value = (p.strip() for p in line.split("=", 1))
        if not _KEY_RE.fullmatch(key):
            raise ConfigError(f"invalid key {key!r}", lineno, col)
        if current is None:
            raise ConfigError("key outside of any section", lineno, col)
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r} in [{current}]", lineno, col)
        sections[current][key] = parse_value(value)
    return _from_sections(sections)


def _from_sections(sections) -> PipelineConfig:
    if "pipeline" not in sections:
        raise ConfigError("missing [pipeline] section")
    pipe = sections["pipeline"]
    task = pipe.get("task", "captioning")
    if task not in TASKS:
        raise ConfigError(f"[pipeline] unknown task {task!r}; expected one of {', '.join(TASKS)}")
    choices = {}
    for stage in STAGES:
        value = pipe.get(stage)
        alias = _SECTION_ALIASES.get(stage)
        if alias is not None:
            other = sections.get(alias[0], {}).get(alias[1])
            if value is not None and other is not None and other != value:
                raise ConfigError(f"[pipeline] {stage} = {value} conflicts with [{alias[0]}] {alias[1]} = {other}")
            value = value if value is not None else other
        if value is None:
            value = _DEFAULT_STAGES.get(stage)
        if value is None:
            raise ConfigError(f"[pipeline] missing stage '{stage}'")
        choices[stage] = str(value)
    return PipelineConfig(choices, sections, task)


def render_config(cfg: PipelineConfig) -> str:
    lines = []
    for name, kv in cfg.sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {render_value(v)}" for k, v in kv.items())
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


class ModuleRegistry:
    """``(stage, name) -> factory`` table; write once, then read-only."""

    def __init__(self):
        self._entries: dict[tuple[str, str], Callable] = {}

    def register(self, stage: str, name: str, factory: Callable) -> None:
        key = (stage, name)
        if key in self._entries:
            raise DuplicateRegistrationError(f"{stage}/{name} is already registered")
        self._entries[key] = factory

    def lookup(self, stage: str, name: str) -> Callable:
        try:
            return self._entries[(stage, name)]
        except KeyError:
            raise ConfigError(f"unknown {stage} module {name!r}; registered: "
                              f"{', '.join(self.names(stage)) or '(none)'}") from None

    def names(self, stage: str) -> list[str]:
        return sorted(n for s, n in self._entries if s == stage)

    def __contains__(self, key):
        return key in self._entries


def register(registry: ModuleRegistry, stage: str, name: str, factory: Callable) -> None:
    registry.register(stage, name, factory)
