"""Pipeline configuration: one TOML file, every knob, hashed for provenance."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .reward import TauSchedule
from .simulated import SimulationConfig
from .trajectory import CATEGORIES, DIFFICULTIES

CONFIG_VERSION = "1"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"  # scripted | remote
    base_url: str = ""
    chat_model: str = ""
    embed_model: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    parallelism: int = 8
    max_retries: int = 3
    timeout: float = 60.0
    token_budget: int = 0  # 0 = unlimited
    embedding_dim: int = 64


@dataclass(frozen=True)
class TreeConfig:
    delta: float = 0.85
    max_rounds: int = 4
    max_attempts: int = 3


@dataclass(frozen=True)
class SynthConfig:
    rounds_min: int = 3
    rounds_max: int = 5
    temperature: float = 0.7
    batch_size: int = 32
    server_mode: str = "template"
    max_steps_per_round: int = 6
    max_generation_attempts: int = 3
    categories: tuple[str, ...] = CATEGORIES
    difficulties: tuple[str, ...] = DIFFICULTIES


@dataclass(frozen=True)
class QAConfig:
    validators: int = 3
    max_deliberation_rounds: int = 1
    max_reflection_attempts: int = 3


@dataclass(frozen=True)
class RewardConfig:
    tau: float = 0.5
    tau_steps: tuple[tuple[int, float], ...] = ()
    alpha: float = 0.5
    eps: float = 0.2
    beta: float = 0.01
    require_think: bool = True

    def schedule(self) -> TauSchedule:
        return TauSchedule(self.tau, self.tau_steps)


@dataclass(frozen=True)
class EvolveConfig:
    gamma: float = 0.5
    group_size: int = 4
    temperature: float = 0.7


@dataclass(frozen=True)
class PathsConfig:
    tools: str = ""
    out_dir: str = "runs"


@dataclass(frozen=True)
class PipelineConfig:
    version: str = CONFIG_VERSION
    seed: int = 0
    backend: BackendConfig = field(default_factory=BackendConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    qa: QAConfig = field(default_factory=QAConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    evolve: EvolveConfig = field(default_factory=EvolveConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self) -> None:
        problems = validate(self)
        if problems:
            raise ConfigError("; ".join(problems))

    def snapshot(self) -> dict[str, Any]:
        """Everything that can change an output; paths are excluded."""
        out = _plain(self)
        out.pop("paths")
        return out

    def digest(self) -> str:
        body = json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(body.encode()).hexdigest()

    def api_key(self) -> str | None:
        return os.environ.get(self.backend.api_key_env)


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def validate(cfg: PipelineConfig) -> list[str]:
    p = []
    if cfg.backend.kind not in ("scripted", "remote"):
        p.append(f"backend.kind must be scripted or remote, not {cfg.backend.kind!r}")
    if cfg.backend.kind == "remote" and not cfg.backend.base_url:
        p.append("backend.base_url is required for a remote backend")
    if cfg.backend.parallelism < 1:
        p.append("backend.parallelism must be >= 1")
    if not 0 < cfg.tree.delta < 1:
        p.append("tree.delta must lie in (0, 1)")
    s = cfg.synth
    if not 1 <= s.rounds_min <= s.rounds_max:
        p.append("synth rounds range is empty")
    if s.rounds_min < 3 or s.rounds_max > 5:
        p.append("synth rounds must stay within [3, 5]")
    if s.batch_size < 0:
        p.append("synth.batch_size must be non-negative")
    if s.server_mode not in ("template", "generative"):
        p.append("synth.server_mode must be template or generative")
    bad = set(s.categories) - set(CATEGORIES)
    if bad or not s.categories:
        p.append(f"synth.categories must be a non-empty subset of {CATEGORIES}")
    if set(s.difficulties) - set(DIFFICULTIES) or not s.difficulties:
        p.append(f"synth.difficulties must be a non-empty subset of {DIFFICULTIES}")
    if cfg.qa.validators < 3 or cfg.qa.validators % 2 == 0:
        p.append("qa.validators must be odd and at least 3")
    r = cfg.reward
    taus = [r.tau] + [t for _, t in r.tau_steps]
    if any(not 0 <= t <= 1 for t in taus):
        p.append("reward tau values must lie in [0, 1]")
    if r.alpha < 0 or r.eps < 0 or r.beta < 0:
        p.append("reward alpha, eps and beta must be non-negative")
    if not 0 <= cfg.evolve.gamma <= 1:
        p.append("evolve.gamma must lie in [0, 1]")
    if cfg.evolve.group_size < 2:
        p.append("evolve.group_size must be >= 2")
    return p


_SECTIONS = {
    "backend": BackendConfig,
    "tree": TreeConfig,
    "synth": SynthConfig,
    "qa": QAConfig,
    "reward": RewardConfig,
    "evolve": EvolveConfig,
    "simulation": SimulationConfig,
    "paths": PathsConfig,
}


def _build(cls: type, raw: Mapping[str, Any], where: str) -> Any:
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {unknown}")
    kwargs = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"[{where}].{key} must be a boolean")
        elif isinstance(default, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"[{where}].{key} must be a number")
        elif isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"[{where}].{key} must be an integer")
            value = int(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"[{where}].{key} must be a string")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: Mapping[str, Any]) -> PipelineConfig:
    top = {k: v for k, v in raw.items() if k not in _SECTIONS}
    unknown = sorted(set(top) - {"version", "seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")
    if str(top.get("version", CONFIG_VERSION)) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {top.get('version')!r}")
    kwargs: dict[str, Any] = {"seed": int(top.get("seed", 0))}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, Mapping):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _build(cls, section, name)
    return PipelineConfig(**kwargs)


def load_config(path: str | Path) -> PipelineConfig:
    """Read a TOML config; relative paths resolve against the file's folder."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(raw)
    base = path.resolve().parent
    paths = cfg.paths
    tools = str(base / paths.tools) if paths.tools and not Path(paths.tools).is_absolute() else paths.tools
    out = str(base / paths.out_dir) if not Path(paths.out_dir).is_absolute() else paths.out_dir
    return dataclasses.replace(cfg, paths=PathsConfig(tools, out))


def dump_config(cfg: PipelineConfig) -> str:
    """TOML text for a config (round-trips through ``config_from_dict``)."""
    lines = [f'version = "{cfg.version}"', f"seed = {cfg.seed}"]
    data = _plain(cfg)
    for name in _SECTIONS:
        lines.append("")
        lines.append(f"[{name}]")
        for key, value in data[name].items():
            lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"
