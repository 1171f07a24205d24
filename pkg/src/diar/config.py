"""Run configuration: typed sections, a flat ``section.key = value`` file
grammar with ``#`` comments, shipped profiles, and an echo writer whose
output re-parses to the identical configuration (the reproducibility
contract: rerunning from the echoed file reproduces every metric).

Dataclass defaults are the full-scale settings; the ``desk`` profile
overrides them with the fast, laptop-scale settings used by the test
suite, and the ``paper`` profile spells the full-scale values explicitly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .diffusion import DiffusionConfig
from .policy import BcConfig, ExecConfig
from .qlearn import QLearnConfig
from .skill_vae import VaeConfig

__all__ = [
    "DataConfig",
    "EvalConfig",
    "RunConfig",
    "parse_config_text",
    "apply_overrides",
    "load_run_config",
    "echo_config",
    "profile_text",
]


@dataclass
class DataConfig:
    variant: str = "five_by_five"
    n_episodes: int = 200
    noise_level: float = 0.3
    detour_prob: float = 0.3
    wander_prob: float = 0.4
    seed: int = 7


@dataclass
class EvalConfig:
    episodes: int = 100
    seed_groups: int = 5
    seed: int = 1000
    workers: int = 0  # 0: serial; capped by DIAR_THREADS


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    qlearn: QLearnConfig = field(default_factory=QLearnConfig)
    exec: ExecConfig = field(default_factory=ExecConfig)
    bc: BcConfig = field(default_factory=BcConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sections(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[tuple[str, str], str]:
    """``section.key = value`` per line; blank lines and # comments ignored."""
    out: dict[tuple[str, str], str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} must be section.key")
        section, name = key.split(".", 1)
        out[(section, name)] = value
    return out


def _coerce(value: str, like) -> object:
    if isinstance(like, bool):
        low = value.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        items = [v for v in value.replace(",", " ").split() if v]
        return tuple(int(v) for v in items)
    return value


def apply_overrides(cfg: RunConfig, entries: dict[tuple[str, str], str]) -> RunConfig:
    sections = cfg.sections()
    for (section, name), value in entries.items():
        if section not in sections:
            raise ConfigError(f"unknown section {section!r} (have {sorted(sections)})")
        target = sections[section]
        if not hasattr(target, name):
            raise ConfigError(f"unknown key {section}.{name}")
        current = getattr(target, name)
        setattr(target, name, _coerce(value, current))
    for target in sections.values():
        post = getattr(target, "__post_init__", None)
        if post is not None:
            post()
    return cfg


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def echo_config(cfg: RunConfig) -> str:
    """Full resolved configuration in the input grammar, round-trippable."""
    lines = ["# fully resolved configuration (defaults + overrides)"]
    for section, obj in cfg.sections().items():
        lines.append("")
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def profile_text(name: str) -> str:
    ref = resources.files("diar").joinpath(f"profiles/{name}.cfg")
    if not ref.is_file():
        raise ConfigError(f"unknown profile {name!r}")
    return ref.read_text()


def load_run_config(
    config_path: str | Path | None = None,
    profile: str | None = None,
    extra: dict[tuple[str, str], str] | None = None,
) -> RunConfig:
    """Defaults, then profile, then config file, then explicit overrides."""
    cfg = RunConfig()
    if profile:
        apply_overrides(cfg, parse_config_text(profile_text(profile)))
    if config_path:
        apply_overrides(cfg, parse_config_text(Path(config_path).read_text()))
    if extra:
        apply_overrides(cfg, extra)
    return cfg
