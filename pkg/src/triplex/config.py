"""Run configuration: an INI file with sections, every key defaulted.

Example::

    [paths]
    spots = data/spots.csv
    counts = data/counts.csv
    features = data/features
    prepared = run/prepared

    [encoder]
    d = 64

    [train]
    max_epochs = 50

Sections ``paths``, ``preprocess``, ``encoder``, ``train``, ``cv`` and ``run``
are recognised; unknown sections or keys are rejected so typos surface early.
Command-line flags override file values.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .encoders import EncoderConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    spots: str = ""  # spots table (slide_id, patient_id, spot_id, grid_x, grid_y, pixel_x, pixel_y)
    counts: str = ""  # raw counts table (spot_id, genes...)
    features: str = ""  # precomputed {slide}.{target,neighbor,global}.feat files
    images: str = ""  # or slide images {slide}.ppm, run through the toy extractor
    prepared: str = ""  # output of `prepare`, input of train/cv/predict/eval/heatmap


@dataclass
class PreprocessConfig:
    m_keep: int = 250
    smoothing: bool = True
    neighborhood: int = 8

    def __post_init__(self):
        if self.m_keep < 1:
            raise ConfigError("preprocess.m_keep must be >= 1")
        if self.neighborhood not in (4, 8):
            raise ConfigError("preprocess.neighborhood must be 4 or 8")


@dataclass
class CVConfig:
    mode: str = "lopcv"  # lopcv | kfold:k
    val_fraction: float = 0.1

    def __post_init__(self):
        self.folds_k()
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("cv.val_fraction must lie in [0, 1)")

    def folds_k(self) -> int | None:
        """None for leave-one-patient-out, else k."""
        if self.mode == "lopcv":
            return None
        if self.mode.startswith("kfold:"):
            try:
                k = int(self.mode[6:])
            except ValueError:
                k = 0
            if k >= 2:
                return k
        raise ConfigError(f"cv.mode must be 'lopcv' or 'kfold:k' with k >= 2, got {self.mode!r}")


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cv: CVConfig = field(default_factory=CVConfig)
    seed: int = 2021
    threads: int = 1

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))


_SECTIONS = ("paths", "preprocess", "encoder", "train", "cv")


def _convert(cls, name: str, raw: str, where: str):
    ftype = {f.name: f.type for f in fields(cls)}[name]
    try:
        if ftype in ("bool", bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {ftype}") from None
    return raw.strip()


def _build(cls, values: dict[str, str], section: str, base=None):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    kwargs = {k: _convert(cls, k, v, f"[{section}] {k}") for k, v in values.items()}
    try:
        return replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = base or RunConfig()
    unknown = sorted(set(parser.sections()) - set(_SECTIONS) - {"run"})
    if unknown:
        raise ConfigError(f"{source}: unknown sections: {', '.join(unknown)}")
    parts = {}
    for name in _SECTIONS:
        current = getattr(cfg, name)
        values = dict(parser[name]) if parser.has_section(name) else {}
        parts[name] = _build(type(current), values, name, current)
    cfg = replace(cfg, **parts)
    if parser.has_section("run"):
        run = dict(parser["run"])
        extra = sorted(set(run) - {"seed", "threads"})
        if extra:
            raise ConfigError(f"[run] unknown keys: {', '.join(extra)}")
        if "threads" in run:
            cfg = replace(cfg, threads=_convert(RunConfig, "threads", run["threads"], "[run] threads"))
        if "seed" in run:
            cfg = cfg.with_seed(_convert(RunConfig, "seed", run["seed"], "[run] seed"))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))


def override(cfg: RunConfig, section: str, key: str, raw: str) -> RunConfig:
    """Apply one ``section.key=value`` override."""
    if section == "run":
        return parse_config(f"[run]\n{key} = {raw}\n", cfg)
    if section not in _SECTIONS:
        raise ConfigError(f"unknown section {section!r}")
    current = getattr(cfg, section)
    return replace(cfg, **{section: _build(type(current), {key: raw}, section, current)})


def dump_config(cfg: RunConfig) -> str:
    """INI text that parses back to ``cfg``."""
    out = []
    for name in _SECTIONS:
        part = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in fields(part):
            value = getattr(part, f.name)
            out.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
        out.append("")
    out += ["[run]", f"seed = {cfg.seed}", f"threads = {cfg.threads}", ""]
    return "\n".join(out)
