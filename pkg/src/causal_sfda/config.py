"""Run configuration and scenario descriptor files (INI, read with configparser).

Every key has a default, so an empty ``[meta]``-only file is a valid config.
Unknown sections or keys are rejected. Relative paths are resolved against
the directory of the file they appear in. ``CAUSAL_SFDA_SEED`` overrides
``[run] seed``; an explicit override passed by the caller wins over both.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SETTINGS, ScenarioSpec, SyntheticDomainSpec
from .trainer import AdaptationConfig, SourceConfig, seed_from_env

CONFIG_FORMAT = "causal-sfda-config"
SCENARIO_FORMAT = "causal-sfda-scenario"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioSection:
    setting: str = "closed"
    source_manifest: str = "source.manifest"
    target_manifest: str = "target.manifest"
    variants: tuple = ()
    descriptor: str = ""
    source_classes: tuple = ()
    target_classes: tuple = ()
    split_ratio: float = 0.9


@dataclass
class ModelSection:
    hidden: int = 64
    depth: int = 1
    checkpoint: str = ""


@dataclass
class VilSection:
    width: int = 32
    temperature: float = 10.0
    anchor_noise: float = 1.5


@dataclass
class EvalSection:
    method: str = "CausalDA"
    open_threshold: float = 0.5


@dataclass
class RunSection:
    out: str = "run"
    seed: int = 0


# Per-section seeds follow [run] seed, so they are not separately configurable.
_NOT_CONFIGURABLE = {"source": {"seed"}, "adapt": {"seed"}}
_PATH_KEYS = {("scenario", "source_manifest"), ("scenario", "target_manifest"), ("scenario", "variants"),
              ("scenario", "descriptor"), ("model", "checkpoint"), ("run", "out")}


@dataclass
class RunConfig:
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    model: ModelSection = field(default_factory=ModelSection)
    vil: VilSection = field(default_factory=VilSection)
    source: SourceConfig = field(default_factory=SourceConfig)
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    SECTIONS = ("scenario", "model", "vil", "source", "adapt", "eval", "run")

    @property
    def seed(self) -> int:
        return self.run.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, run=replace(self.run, seed=seed), source=replace(self.source, seed=seed),
                       adapt=replace(self.adapt, seed=seed))


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
        if isinstance(default, tuple):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _read_ini(path: Path, expected_format: str) -> configparser.ConfigParser:
    if not path.is_file():
        raise ConfigError(f"{path}: no such file")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(path.read_text(), source=str(path))
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not cp.has_section("meta"):
        raise ConfigError(f"{path}: missing [meta] section")
    meta = dict(cp["meta"])
    if meta.get("format") != expected_format:
        raise ConfigError(f"{path}: [meta] format must be {expected_format!r}, got {meta.get('format')!r}")
    if meta.get("version") != str(FORMAT_VERSION):
        raise ConfigError(f"{path}: unsupported version {meta.get('version')!r}")
    extra = set(meta) - {"format", "version"}
    if extra:
        raise ConfigError(f"{path}: unknown keys in [meta]: {sorted(extra)}")
    return cp


def _fill(obj, cp, section: str, path: Path, base: Path, skip=()):
    if not cp.has_section(section):
        return obj
    names = {f.name: f for f in fields(obj) if f.name not in skip}
    updates = {}
    for key, raw in cp[section].items():
        where = f"{path}: [{section}] {key}"
        if key not in names:
            raise ConfigError(f"{where}: unknown key")
        value = _parse_value(raw, getattr(obj, key), where)
        if (section, key) in _PATH_KEYS and value:
            if isinstance(value, tuple):
                value = tuple(str((base / v).resolve()) for v in value)
            else:
                value = str((base / value).resolve())
        updates[key] = value
    try:
        return replace(obj, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: [{section}] {exc}") from None


def _resolve_defaults(cfg: RunConfig, base: Path) -> RunConfig:
    """Default relative paths are relative to the config file too."""
    sc = cfg.scenario
    sc = replace(sc, **{k: str((base / getattr(sc, k)).resolve())
                        for k in ("source_manifest", "target_manifest") if not Path(getattr(sc, k)).is_absolute()})
    run = cfg.run if Path(cfg.run.out).is_absolute() else replace(cfg.run, out=str((base / cfg.run.out).resolve()))
    return replace(cfg, scenario=sc, run=run)


def load_config(path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    cp = _read_ini(path, CONFIG_FORMAT)
    unknown = set(cp.sections()) - {"meta", *RunConfig.SECTIONS}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    base = path.parent.resolve()
    cfg = _resolve_defaults(RunConfig(), base)
    parts = {name: _fill(getattr(cfg, name), cp, name, path, base, _NOT_CONFIGURABLE.get(name, ()))
             for name in RunConfig.SECTIONS}
    cfg = RunConfig(**parts)
    if cfg.scenario.setting not in SETTINGS:
        raise ConfigError(f"{path}: [scenario] setting must be one of {SETTINGS}")
    for key in ("source_classes", "target_classes"):
        try:
            [int(c) for c in getattr(cfg.scenario, key)]
        except ValueError:
            raise ConfigError(f"{path}: [scenario] {key} must be comma-separated integers") from None
    if not 0 < cfg.scenario.split_ratio < 1:
        raise ConfigError(f"{path}: [scenario] split_ratio must lie in (0, 1)")
    if not 0 <= cfg.eval.open_threshold <= 1:
        raise ConfigError(f"{path}: [eval] open_threshold must lie in [0, 1]")
    run_seed = seed_from_env(cfg.run.seed) if seed is None else seed
    return cfg.with_seed(run_seed)


def write_config(path, cfg: RunConfig) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    cp["meta"] = {"format": CONFIG_FORMAT, "version": str(FORMAT_VERSION)}
    for name in RunConfig.SECTIONS:
        obj = getattr(cfg, name)
        skip = _NOT_CONFIGURABLE.get(name, ())
        cp[name] = {f.name: _format_value(getattr(obj, f.name)) for f in fields(obj) if f.name not in skip}
    with open(path, "w") as fh:
        cp.write(fh)


def scenario_spec(cfg: RunConfig) -> ScenarioSpec:
    sc = cfg.scenario
    return ScenarioSpec(sc.setting, tuple(int(c) for c in sc.source_classes),
                        tuple(int(c) for c in sc.target_classes), sc.split_ratio)


# -- scenario descriptor ----------------------------------------------------------------

@dataclass
class ScenarioDescriptor:
    synthetic: SyntheticDomainSpec
    seed: int
    scenario: ScenarioSpec
    source: str = "source.manifest"
    target: str = "target.manifest"
    variants: tuple = ()


def write_descriptor(path, d: ScenarioDescriptor) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    cp["meta"] = {"format": SCENARIO_FORMAT, "version": str(FORMAT_VERSION)}
    cp["synthetic"] = {f.name: _format_value(getattr(d.synthetic, f.name)) for f in fields(d.synthetic)}
    cp["synthetic"]["seed"] = str(d.seed)
    sc = d.scenario
    cp["scenario"] = {"setting": sc.setting, "source_classes": _format_value(sc.source_classes),
                      "target_classes": _format_value(sc.target_classes), "split_ratio": repr(sc.split_ratio)}
    cp["files"] = {"source": d.source, "target": d.target, "variants": _format_value(d.variants)}
    with open(path, "w") as fh:
        cp.write(fh)


def read_descriptor(path) -> ScenarioDescriptor:
    path = Path(path)
    cp = _read_ini(path, SCENARIO_FORMAT)
    unknown = set(cp.sections()) - {"meta", "synthetic", "scenario", "files"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    seed = 0
    if cp.has_section("synthetic") and "seed" in cp["synthetic"]:
        seed = _parse_value(cp["synthetic"]["seed"], 0, f"{path}: [synthetic] seed")
        cp.remove_option("synthetic", "seed")
    synthetic = _fill(SyntheticDomainSpec(), cp, "synthetic", path, path.parent)
    sc = _fill(ScenarioSection(), cp, "scenario", path, path.parent,
               skip=("source_manifest", "target_manifest", "variants", "descriptor"))
    try:
        spec = ScenarioSpec(sc.setting, tuple(int(c) for c in sc.source_classes),
                            tuple(int(c) for c in sc.target_classes), sc.split_ratio)
    except ValueError as exc:
        raise ConfigError(f"{path}: [scenario] {exc}") from None
    files = dict(cp["files"]) if cp.has_section("files") else {}
    extra = set(files) - {"source", "target", "variants"}
    if extra:
        raise ConfigError(f"{path}: unknown keys in [files]: {sorted(extra)}")
    return ScenarioDescriptor(synthetic, seed, spec, files.get("source", "source.manifest"),
                              files.get("target", "target.manifest"),
                              _parse_value(files.get("variants", ""), (), f"{path}: [files] variants"))
